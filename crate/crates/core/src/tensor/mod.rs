//! Dense tensors with a tape-based reverse-mode autodiff graph.
//!
//! A [`Graph`] records every operation of one forward pass as a node; the
//! handle [`Var`] indexes into it. Parameters live outside the graph in a
//! [`ParamStore`] and enter a pass through [`Graph::param`]; after
//! [`Graph::backward`] their gradients are accumulated into the store.
//!
//! Shape conventions: "rows" of a tensor are all leading dimensions
//! flattened, the last dimension is the feature dimension. Sequence ops use
//! `[batch, time, features]`.

pub mod check;
pub mod nn;
mod params;

use crate::error::{Error, Result};
use crate::scalar::Real;

pub use params::{Adam, Checkpoint, Init, ParamId, ParamStore};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if shape.len() > 5 {
            return Err(Error::Graph(format!("rank {} exceeds 5", shape.len())));
        }
        if n != data.len() {
            return Err(Error::Dimension {
                expected: n,
                actual: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![T::zero(); n],
        }
    }

    pub fn scalar(x: T) -> Self {
        Self {
            shape: vec![],
            data: vec![x],
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Size of the last dimension (1 for scalars).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn rows(&self) -> usize {
        self.numel() / self.last_dim().max(1)
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Vec<T>),
    Scale(Var, T),
    Sigmoid(Var),
    Tanh(Var),
    ConcatLast(Vec<Var>),
    SliceLast(Var, usize),
    SelectTime(Var, usize),
    StackTime(Vec<Var>),
    Reshape(Var),
    Conv3d { x: Var, w: Var, b: Var, ks: usize },
    BmmNt(Var, Var),
    Bmm(Var, Var),
    SoftmaxLast(Var),
    MeanTime(Var),
    Symmetrize(Var, usize),
    FrobeniusLoss(Var, Vec<T>),
    Sum(Var),
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

#[derive(Debug, Clone, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    backward_done: bool,
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    /// Gradient of the last backward pass with respect to node `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Constant input; gradients are not propagated into it.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Input that records its own gradient (useful for checks).
    pub fn variable(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id), true)
    }

    /// `a [.., k] · b [k, n] -> [.., n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let k = av.last_dim();
        if bv.shape.len() != 2 || bv.shape[0] != k {
            return Err(Error::Graph(format!("matmul shapes {:?} x {:?}", av.shape, bv.shape)));
        }
        let n = bv.shape[1];
        let rows = av.rows();
        let mut out = vec![T::zero(); rows * n];
        matmul_into(&av.data, &bv.data, &mut out, rows, k, n);
        let mut shape = av.shape.clone();
        *shape.last_mut().expect("rank >= 1") = n;
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor { shape, data: out }, Op::MatMul(a, b), ng))
    }

    /// Adds a `[n]` bias to every row of `x [.., n]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        let n = xv.last_dim();
        if bv.numel() != n {
            return Err(Error::Graph(format!("bias {:?} for features {n}", bv.shape)));
        }
        let mut data = xv.data.clone();
        for row in data.chunks_mut(n) {
            for (d, &bb) in row.iter_mut().zip(&bv.data) {
                *d += bb;
            }
        }
        let shape = xv.shape.clone();
        let ng = self.ng(&[x, b]);
        Ok(self.push(Tensor { shape, data }, Op::AddBias(x, b), ng))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Graph(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>, what: &str) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data.iter().zip(&bv.data).map(|(&x, &y)| f(x, y)).collect();
        let shape = av.shape.clone();
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor { shape, data }, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, |x, y| x + y, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, |x, y| x - y, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, |x, y| x * y, Op::Mul(a, b), "mul")
    }

    /// Elementwise product with a constant mask.
    pub fn mul_const(&mut self, x: Var, mask: Vec<T>) -> Result<Var> {
        let xv = self.value(x);
        if mask.len() != xv.numel() {
            return Err(Error::Dimension {
                expected: xv.numel(),
                actual: mask.len(),
            });
        }
        let data = xv.data.iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let shape = xv.shape.clone();
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor { shape, data }, Op::MulConst(x, mask), ng))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let xv = self.value(x);
        let data = xv.data.iter().map(|&a| a * s).collect();
        let shape = xv.shape.clone();
        let ng = self.ng(&[x]);
        self.push(Tensor { shape, data }, Op::Scale(x, s), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data.iter().map(|&a| sigmoid(a)).collect();
        let shape = xv.shape.clone();
        let ng = self.ng(&[x]);
        self.push(Tensor { shape, data }, Op::Sigmoid(x), ng)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data.iter().map(|&a| a.tanh()).collect();
        let shape = xv.shape.clone();
        let ng = self.ng(&[x]);
        self.push(Tensor { shape, data }, Op::Tanh(x), ng)
    }

    /// Concatenates along the last dimension; leading dimensions must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::Graph("concat of nothing".into()))?;
        let lead = self.shape(*first)[..self.shape(*first).len() - 1].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s[..s.len() - 1] != lead[..] {
                return Err(Error::Graph(format!("concat leading dims {:?} vs {:?}", s, lead)));
            }
            widths.push(s[s.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let ng = self.ng(parts);
        Ok(self.push(Tensor { shape, data }, Op::ConcatLast(parts.to_vec()), ng))
    }

    /// Columns `start .. start+len` of the last dimension.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let w = xv.last_dim();
        if start + len > w {
            return Err(Error::Graph(format!("slice {start}+{len} beyond width {w}")));
        }
        let mut data = Vec::with_capacity(xv.rows() * len);
        for row in xv.data.chunks(w) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let mut shape = xv.shape.clone();
        *shape.last_mut().expect("rank >= 1") = len;
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor { shape, data }, Op::SliceLast(x, start), ng))
    }

    /// `x [B, L, d]` at time `t` -> `[B, d]`.
    pub fn select_time(&mut self, x: Var, t: usize) -> Result<Var> {
        let xv = self.value(x);
        let [b, l, d] = dims3(&xv.shape)?;
        if t >= l {
            return Err(Error::Graph(format!("time {t} beyond length {l}")));
        }
        let mut data = Vec::with_capacity(b * d);
        for bi in 0..b {
            let off = (bi * l + t) * d;
            data.extend_from_slice(&xv.data[off..off + d]);
        }
        let ng = self.ng(&[x]);
        Ok(self.push(
            Tensor {
                shape: vec![b, d],
                data,
            },
            Op::SelectTime(x, t),
            ng,
        ))
    }

    /// Stacks `L` tensors `[B, d]` into `[B, L, d]`.
    pub fn stack_time(&mut self, steps: &[Var]) -> Result<Var> {
        let first = steps.first().ok_or_else(|| Error::Graph("stack of nothing".into()))?;
        let s0 = self.shape(*first).to_vec();
        if s0.len() != 2 || steps.iter().any(|&s| self.shape(s) != s0) {
            return Err(Error::Graph("stack_time needs equal [B, d] steps".into()));
        }
        let (b, d, l) = (s0[0], s0[1], steps.len());
        let mut data = vec![T::zero(); b * l * d];
        for (t, &s) in steps.iter().enumerate() {
            let v = &self.value(s).data;
            for bi in 0..b {
                data[(bi * l + t) * d..(bi * l + t + 1) * d].copy_from_slice(&v[bi * d..(bi + 1) * d]);
            }
        }
        let ng = self.ng(steps);
        Ok(self.push(
            Tensor {
                shape: vec![b, l, d],
                data,
            },
            Op::StackTime(steps.to_vec()),
            ng,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let xv = self.value(x);
        if shape.iter().product::<usize>() != xv.numel() {
            return Err(Error::Graph(format!("reshape {:?} -> {:?}", xv.shape, shape)));
        }
        let data = xv.data.clone();
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor { shape, data }, Op::Reshape(x), ng))
    }

    /// Same-padded, stride-1 single-channel 3D cross-correlation of
    /// `x [B, L, N, M]` with kernel `w [ks, ks, ks]` plus scalar bias `b`.
    pub fn conv3d_same(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let ks = self.shape(w).first().copied().unwrap_or(0);
        if ks % 2 == 0 || self.shape(w) != [ks, ks, ks] {
            return Err(Error::Config(format!("conv kernel must be odd cube, got {:?}", self.shape(w))));
        }
        if self.value(b).numel() != 1 {
            return Err(Error::Graph("conv bias must be a scalar".into()));
        }
        let xv = self.value(x);
        if xv.shape.len() != 4 {
            return Err(Error::Graph(format!("conv3d input {:?} is not [B, L, N, M]", xv.shape)));
        }
        let dims = [xv.shape[0], xv.shape[1], xv.shape[2], xv.shape[3]];
        let mut out = vec![self.value(b).data[0]; xv.numel()];
        conv3d_forward(&xv.data, &self.value(w).data, &mut out, dims, ks);
        let shape = xv.shape.clone();
        let ng = self.ng(&[x, w, b]);
        Ok(self.push(Tensor { shape, data: out }, Op::Conv3d { x, w, b, ks }, ng))
    }

    /// `a [B, m, k] · b[B, n, k]ᵀ -> [B, m, n]`.
    pub fn bmm_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let [ba, m, k] = dims3(self.shape(a))?;
        let [bb, n, k2] = dims3(self.shape(b))?;
        if ba != bb || k != k2 {
            return Err(Error::Graph("bmm_nt shape mismatch".into()));
        }
        let (av, bv) = (&self.value(a).data, &self.value(b).data);
        let mut out = vec![T::zero(); ba * m * n];
        for bi in 0..ba {
            for i in 0..m {
                let ar = &av[(bi * m + i) * k..(bi * m + i + 1) * k];
                for j in 0..n {
                    let br = &bv[(bi * n + j) * k..(bi * n + j + 1) * k];
                    out[(bi * m + i) * n + j] = dot(ar, br);
                }
            }
        }
        let ng = self.ng(&[a, b]);
        Ok(self.push(
            Tensor {
                shape: vec![ba, m, n],
                data: out,
            },
            Op::BmmNt(a, b),
            ng,
        ))
    }

    /// `a [B, m, n] · b [B, n, k] -> [B, m, k]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let [ba, m, n] = dims3(self.shape(a))?;
        let [bb, n2, k] = dims3(self.shape(b))?;
        if ba != bb || n != n2 {
            return Err(Error::Graph("bmm shape mismatch".into()));
        }
        let (av, bv) = (&self.value(a).data, &self.value(b).data);
        let mut out = vec![T::zero(); ba * m * k];
        for bi in 0..ba {
            matmul_into(
                &av[bi * m * n..(bi + 1) * m * n],
                &bv[bi * n * k..(bi + 1) * n * k],
                &mut out[bi * m * k..(bi + 1) * m * k],
                m,
                n,
                k,
            );
        }
        let ng = self.ng(&[a, b]);
        Ok(self.push(
            Tensor {
                shape: vec![ba, m, k],
                data: out,
            },
            Op::Bmm(a, b),
            ng,
        ))
    }

    /// Numerically stable softmax over the last dimension.
    pub fn softmax_last(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let w = xv.last_dim();
        let mut data = xv.data.clone();
        for row in data.chunks_mut(w) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let shape = xv.shape.clone();
        let ng = self.ng(&[x]);
        self.push(Tensor { shape, data }, Op::SoftmaxLast(x), ng)
    }

    /// Mean over the time axis: `[B, L, d] -> [B, d]`.
    pub fn mean_time(&mut self, x: Var) -> Result<Var> {
        let [b, l, d] = dims3(self.shape(x))?;
        let xv = &self.value(x).data;
        let inv = T::one() / T::from_len(l);
        let mut data = vec![T::zero(); b * d];
        for bi in 0..b {
            for t in 0..l {
                let row = &xv[(bi * l + t) * d..(bi * l + t + 1) * d];
                for (o, &v) in data[bi * d..(bi + 1) * d].iter_mut().zip(row) {
                    *o += v;
                }
            }
        }
        data.iter_mut().for_each(|v| *v *= inv);
        let ng = self.ng(&[x]);
        Ok(self.push(
            Tensor {
                shape: vec![b, d],
                data,
            },
            Op::MeanTime(x),
            ng,
        ))
    }

    /// Each row of `y [B, n²]` read as an `n × n` matrix `Y` becomes
    /// `(Y + Yᵀ)/2`.
    pub fn symmetrize(&mut self, y: Var, n: usize) -> Result<Var> {
        let yv = self.value(y);
        if yv.last_dim() != n * n {
            return Err(Error::Dimension {
                expected: n * n,
                actual: yv.last_dim(),
            });
        }
        let half = T::lit(0.5);
        let mut data = yv.data.clone();
        for (row, src) in data.chunks_mut(n * n).zip(yv.data.chunks(n * n)) {
            for i in 0..n {
                for j in 0..n {
                    row[i * n + j] = half * (src[i * n + j] + src[j * n + i]);
                }
            }
        }
        let shape = yv.shape.clone();
        let ng = self.ng(&[y]);
        Ok(self.push(Tensor { shape, data }, Op::Symmetrize(y, n), ng))
    }

    /// Mean over rows of `‖y_b − target_b‖_F`, rows being the leading
    /// dimension of `y [B, k]`.
    pub fn frobenius_loss(&mut self, y: Var, target: Vec<T>) -> Result<Var> {
        let yv = self.value(y);
        if target.len() != yv.numel() {
            return Err(Error::Dimension {
                expected: yv.numel(),
                actual: target.len(),
            });
        }
        let b = yv.shape.first().copied().unwrap_or(1).max(1);
        let k = yv.numel() / b;
        let mut total = T::zero();
        for (yr, tr) in yv.data.chunks(k).zip(target.chunks(k)) {
            total += yr.iter().zip(tr).map(|(&a, &c)| (a - c) * (a - c)).sum::<T>().sqrt();
        }
        let ng = self.ng(&[y]);
        Ok(self.push(
            Tensor::scalar(total / T::from_len(b)),
            Op::FrobeniusLoss(y, target),
            ng,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().copied().sum::<T>();
        let ng = self.ng(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    /// Reverse pass from the scalar `loss`; parameter gradients are added to
    /// `store`. A second call on the same graph is an error.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        if self.backward_done {
            return Err(Error::Graph("backward already run on this graph; run a new forward pass".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Graph(format!(
                "loss must be a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.nodes[loss.0].needs_grad {
            return Err(Error::Graph("loss is detached from every parameter".into()));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            self.propagate(idx, &g, &mut grads, store)?;
            grads[idx] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(
        &self,
        idx: usize,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
        store: &mut ParamStore<T>,
    ) -> Result<()> {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => store.accumulate(*id, g),
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (k, n) = (bv.shape[0], bv.shape[1]);
                let rows = av.rows();
                if self.needs(*a) {
                    let ga = acc(grads, *a, av.numel());
                    for r in 0..rows {
                        let gr = &g[r * n..(r + 1) * n];
                        let gar = &mut ga[r * k..(r + 1) * k];
                        for (p, o) in gar.iter_mut().enumerate() {
                            *o += dot(gr, &bv.data[p * n..(p + 1) * n]);
                        }
                    }
                }
                if self.needs(*b) {
                    let gb = acc(grads, *b, bv.numel());
                    for r in 0..rows {
                        let gr = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let a = av.data[r * k + p];
                            if a == T::zero() {
                                continue;
                            }
                            for (o, &gg) in gb[p * n..(p + 1) * n].iter_mut().zip(gr) {
                                *o += a * gg;
                            }
                        }
                    }
                }
            }
            Op::AddBias(x, b) => {
                if self.needs(*x) {
                    add_into(acc(grads, *x, g.len()), g);
                }
                if self.needs(*b) {
                    let n = self.value(*b).numel();
                    let gb = acc(grads, *b, n);
                    for row in g.chunks(n) {
                        add_into(gb, row);
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.needs(*v) {
                        add_into(acc(grads, *v, g.len()), g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    add_into(acc(grads, *a, g.len()), g);
                }
                if self.needs(*b) {
                    for (o, &gg) in acc(grads, *b, g.len()).iter_mut().zip(g) {
                        *o -= gg;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&self.value(*a).data, &self.value(*b).data);
                if self.needs(*a) {
                    for ((o, &gg), &y) in acc(grads, *a, g.len()).iter_mut().zip(g).zip(bv) {
                        *o += gg * y;
                    }
                }
                if self.needs(*b) {
                    for ((o, &gg), &x) in acc(grads, *b, g.len()).iter_mut().zip(g).zip(av) {
                        *o += gg * x;
                    }
                }
            }
            Op::MulConst(x, mask) => {
                for ((o, &gg), &m) in acc(grads, *x, g.len()).iter_mut().zip(g).zip(mask) {
                    *o += gg * m;
                }
            }
            Op::Scale(x, s) => {
                for (o, &gg) in acc(grads, *x, g.len()).iter_mut().zip(g) {
                    *o += gg * *s;
                }
            }
            Op::Sigmoid(x) => {
                for ((o, &gg), &y) in acc(grads, *x, g.len()).iter_mut().zip(g).zip(&out.data) {
                    *o += gg * y * (T::one() - y);
                }
            }
            Op::Tanh(x) => {
                for ((o, &gg), &y) in acc(grads, *x, g.len()).iter_mut().zip(g).zip(&out.data) {
                    *o += gg * (T::one() - y * y);
                }
            }
            Op::ConcatLast(parts) => {
                let total = out.last_dim();
                let rows = out.rows();
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).last_dim();
                    if self.needs(p) {
                        let gp = acc(grads, p, rows * w);
                        for r in 0..rows {
                            add_into(&mut gp[r * w..(r + 1) * w], &g[r * total + off..r * total + off + w]);
                        }
                    }
                    off += w;
                }
            }
            Op::SliceLast(x, start) => {
                let xv = self.value(*x);
                let (w, len) = (xv.last_dim(), out.last_dim());
                let gx = acc(grads, *x, xv.numel());
                for (r, gr) in g.chunks(len).enumerate() {
                    add_into(&mut gx[r * w + start..r * w + start + len], gr);
                }
            }
            Op::SelectTime(x, t) => {
                let xv = self.value(*x);
                let [b, l, d] = dims3(&xv.shape)?;
                let gx = acc(grads, *x, xv.numel());
                for bi in 0..b {
                    let off = (bi * l + t) * d;
                    add_into(&mut gx[off..off + d], &g[bi * d..(bi + 1) * d]);
                }
            }
            Op::StackTime(steps) => {
                let [b, l, d] = dims3(&out.shape)?;
                for (t, &s) in steps.iter().enumerate() {
                    if !self.needs(s) {
                        continue;
                    }
                    let gs = acc(grads, s, b * d);
                    for bi in 0..b {
                        let off = (bi * l + t) * d;
                        add_into(&mut gs[bi * d..(bi + 1) * d], &g[off..off + d]);
                    }
                }
            }
            Op::Reshape(x) => add_into(acc(grads, *x, g.len()), g),
            Op::Conv3d { x, w, b, ks } => {
                let xv = self.value(*x);
                let dims = [xv.shape[0], xv.shape[1], xv.shape[2], xv.shape[3]];
                if self.needs(*b) {
                    acc(grads, *b, 1)[0] += g.iter().copied().sum::<T>();
                }
                if self.needs(*w) {
                    let gw = acc(grads, *w, ks * ks * ks);
                    conv3d_grad_kernel(&xv.data, g, gw, dims, *ks);
                }
                if self.needs(*x) {
                    let wv = &self.value(*w).data;
                    let gx = acc(grads, *x, xv.numel());
                    conv3d_grad_input(wv, g, gx, dims, *ks);
                }
            }
            Op::BmmNt(a, b) => {
                let [bs, m, k] = dims3(self.shape(*a))?;
                let n = self.shape(*b)[1];
                let (av, bv) = (&self.value(*a).data, &self.value(*b).data);
                if self.needs(*a) {
                    let ga = acc(grads, *a, bs * m * k);
                    for bi in 0..bs {
                        for i in 0..m {
                            for j in 0..n {
                                let gg = g[(bi * m + i) * n + j];
                                let br = &bv[(bi * n + j) * k..(bi * n + j + 1) * k];
                                axpy(&mut ga[(bi * m + i) * k..(bi * m + i + 1) * k], gg, br);
                            }
                        }
                    }
                }
                if self.needs(*b) {
                    let gb = acc(grads, *b, bs * n * k);
                    for bi in 0..bs {
                        for i in 0..m {
                            let ar = &av[(bi * m + i) * k..(bi * m + i + 1) * k];
                            for j in 0..n {
                                let gg = g[(bi * m + i) * n + j];
                                axpy(&mut gb[(bi * n + j) * k..(bi * n + j + 1) * k], gg, ar);
                            }
                        }
                    }
                }
            }
            Op::Bmm(a, b) => {
                let [bs, m, n] = dims3(self.shape(*a))?;
                let k = self.shape(*b)[2];
                let (av, bv) = (&self.value(*a).data, &self.value(*b).data);
                if self.needs(*a) {
                    let ga = acc(grads, *a, bs * m * n);
                    for bi in 0..bs {
                        for i in 0..m {
                            let gr = &g[(bi * m + i) * k..(bi * m + i + 1) * k];
                            for p in 0..n {
                                ga[(bi * m + i) * n + p] += dot(gr, &bv[(bi * n + p) * k..(bi * n + p + 1) * k]);
                            }
                        }
                    }
                }
                if self.needs(*b) {
                    let gb = acc(grads, *b, bs * n * k);
                    for bi in 0..bs {
                        for i in 0..m {
                            let gr = &g[(bi * m + i) * k..(bi * m + i + 1) * k];
                            for p in 0..n {
                                let a = av[(bi * m + i) * n + p];
                                axpy(&mut gb[(bi * n + p) * k..(bi * n + p + 1) * k], a, gr);
                            }
                        }
                    }
                }
            }
            Op::SoftmaxLast(x) => {
                let w = out.last_dim();
                let gx = acc(grads, *x, g.len());
                for ((gxr, gr), yr) in gx.chunks_mut(w).zip(g.chunks(w)).zip(out.data.chunks(w)) {
                    let s = dot(gr, yr);
                    for ((o, &gg), &y) in gxr.iter_mut().zip(gr).zip(yr) {
                        *o += y * (gg - s);
                    }
                }
            }
            Op::MeanTime(x) => {
                let [b, l, d] = dims3(self.shape(*x))?;
                let inv = T::one() / T::from_len(l);
                let gx = acc(grads, *x, b * l * d);
                for bi in 0..b {
                    for t in 0..l {
                        axpy(&mut gx[(bi * l + t) * d..(bi * l + t + 1) * d], inv, &g[bi * d..(bi + 1) * d]);
                    }
                }
            }
            Op::Symmetrize(y, n) => {
                let n = *n;
                let half = T::lit(0.5);
                let gy = acc(grads, *y, g.len());
                for (gyr, gr) in gy.chunks_mut(n * n).zip(g.chunks(n * n)) {
                    for i in 0..n {
                        for j in 0..n {
                            gyr[i * n + j] += half * (gr[i * n + j] + gr[j * n + i]);
                        }
                    }
                }
            }
            Op::FrobeniusLoss(y, target) => {
                let yv = self.value(*y);
                let b = yv.shape.first().copied().unwrap_or(1).max(1);
                let k = yv.numel() / b;
                let scale = g[0] / T::from_len(b);
                let gy = acc(grads, *y, yv.numel());
                for ((gyr, yr), tr) in gy.chunks_mut(k).zip(yv.data.chunks(k)).zip(target.chunks(k)) {
                    let norm = yr.iter().zip(tr).map(|(&a, &c)| (a - c) * (a - c)).sum::<T>().sqrt();
                    if norm > T::zero() {
                        for ((o, &a), &c) in gyr.iter_mut().zip(yr).zip(tr) {
                            *o += scale * (a - c) / norm;
                        }
                    }
                }
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                for o in acc(grads, *x, n).iter_mut() {
                    *o += g[0];
                }
            }
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }
}

fn acc<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, n: usize) -> &mut Vec<T> {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); n])
}

#[inline]
fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[inline]
fn axpy<T: Real>(dst: &mut [T], a: T, x: &[T]) {
    for (d, &s) in dst.iter_mut().zip(x) {
        *d += a * s;
    }
}

#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |s, (&x, &y)| s + x * y)
}

#[inline]
pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn dims3(shape: &[usize]) -> Result<[usize; 3]> {
    match shape {
        [a, b, c] => Ok([*a, *b, *c]),
        _ => Err(Error::Graph(format!("expected rank-3 tensor, got {:?}", shape))),
    }
}

/// `out[rows×n] += a[rows×k] · b[k×n]`.
fn matmul_into<T: Real>(a: &[T], b: &[T], out: &mut [T], rows: usize, k: usize, n: usize) {
    for r in 0..rows {
        let or = &mut out[r * n..(r + 1) * n];
        for p in 0..k {
            let x = a[r * k + p];
            if x != T::zero() {
                axpy(or, x, &b[p * n..(p + 1) * n]);
            }
        }
    }
}

/// Visits every in-bounds `(output index, input index, kernel index)`
/// triple of a same-padded 3D cross-correlation.
fn conv3d_visit(dims: [usize; 4], ks: usize, mut f: impl FnMut(usize, usize, usize)) {
    let [b, l, n, m] = dims;
    let p = (ks / 2) as isize;
    for bi in 0..b {
        for t in 0..l {
            for i in 0..n {
                for j in 0..m {
                    let o = ((bi * l + t) * n + i) * m + j;
                    for u in 0..ks {
                        let tt = t as isize + u as isize - p;
                        if tt < 0 || tt >= l as isize {
                            continue;
                        }
                        for v in 0..ks {
                            let ii = i as isize + v as isize - p;
                            if ii < 0 || ii >= n as isize {
                                continue;
                            }
                            for w in 0..ks {
                                let jj = j as isize + w as isize - p;
                                if jj < 0 || jj >= m as isize {
                                    continue;
                                }
                                let src = ((bi * l + tt as usize) * n + ii as usize) * m + jj as usize;
                                f(o, src, (u * ks + v) * ks + w);
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv3d_forward<T: Real>(x: &[T], w: &[T], out: &mut [T], dims: [usize; 4], ks: usize) {
    conv3d_visit(dims, ks, |o, s, k| out[o] += w[k] * x[s]);
}

fn conv3d_grad_kernel<T: Real>(x: &[T], g: &[T], gw: &mut [T], dims: [usize; 4], ks: usize) {
    conv3d_visit(dims, ks, |o, s, k| gw[k] += g[o] * x[s]);
}

fn conv3d_grad_input<T: Real>(w: &[T], g: &[T], gx: &mut [T], dims: [usize; 4], ks: usize) {
    conv3d_visit(dims, ks, |o, s, k| gx[s] += g[o] * w[k]);
}
