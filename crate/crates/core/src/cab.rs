//! CAB forecaster: 3D convolution, stacked bidirectional LSTM, multi-head
//! self-attention and a linear head mapping to an `N × N` covariance, then
//! symmetrisation, unscaling, PSD projection and a linear blend with the
//! trailing realised covariance.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::ReturnPanel;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rolling::{realized_series, CovMatrix, Scaler};
use crate::scalar::Real;
use crate::tensor::nn::{dropout, BiLstm, Conv3d, Linear, MultiHeadAttention};
use crate::tensor::{Adam, Checkpoint, Graph, ParamStore, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdatePolicy {
    /// Static model: no training during the test period.
    None,
    /// After each forecast, one Adam epoch over the most recent
    /// `online_window` sequences with complete targets.
    Daily,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CabConfig {
    pub lookback: usize,
    pub kernel: usize,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub dropout: f64,
    pub phi: f64,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub validation_fraction: f64,
    pub update: UpdatePolicy,
    pub online_window: usize,
}

impl Default for CabConfig {
    fn default() -> Self {
        Self {
            lookback: 100,
            kernel: 5,
            hidden: 128,
            layers: 7,
            heads: 16,
            dropout: 0.2,
            phi: 0.8,
            epochs: 100,
            batch: 128,
            lr: 1e-4,
            seed: 42,
            validation_fraction: 0.2,
            update: UpdatePolicy::Daily,
            online_window: 60,
        }
    }
}

/// Hyperparameter grid the defaults were selected from.
pub mod grid {
    pub const LR: [f64; 3] = [1e-3, 1e-4, 1e-5];
    pub const BATCH: [usize; 4] = [32, 64, 128, 256];
    pub const LOOKBACK: [usize; 7] = [20, 40, 60, 80, 100, 120, 250];
    pub const KERNEL: [usize; 3] = [3, 5, 7];
    pub const HIDDEN: [usize; 4] = [32, 64, 128, 256];
    pub const LAYERS: [usize; 5] = [3, 4, 5, 6, 7];
    pub const HEADS: [usize; 6] = [2, 4, 6, 8, 16, 32];
    pub const PHI: [f64; 6] = [0.0, 0.2, 0.4, 0.6, 0.8, 1.0];
    pub const HORIZON: (usize, usize) = (10, 250);
}

impl CabConfig {
    /// Structural checks every configuration must pass.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.lookback < 1 {
            errs.push("lookback must be >= 1".to_string());
        }
        if self.kernel % 2 == 0 {
            errs.push(format!("kernel size must be odd, got {}", self.kernel));
        }
        if self.hidden < 1 || self.layers < 1 {
            errs.push("hidden size and layer count must be >= 1".into());
        }
        if self.heads == 0 || (2 * self.hidden) % self.heads != 0 {
            errs.push(format!("{} heads do not divide 2*hidden = {}", self.heads, 2 * self.hidden));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            errs.push(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if !(0.0..=1.0).contains(&self.phi) {
            errs.push(format!("phi must be in [0, 1], got {}", self.phi));
        }
        if self.epochs < 1 || self.batch < 1 || self.online_window < 1 {
            errs.push("epochs, batch and online_window must be >= 1".into());
        }
        if !(self.lr > 0.0) {
            errs.push("learning rate must be positive".into());
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            errs.push("validation_fraction must be in [0, 1)".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs.join("; ")))
        }
    }

    /// Settings outside the recommended search grid (allowed, but reported).
    pub fn grid_deviations(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut check = |ok: bool, what: String| {
            if !ok {
                out.push(what);
            }
        };
        check(grid::LR.iter().any(|&v| (v - self.lr).abs() < 1e-15), format!("lr {}", self.lr));
        check(grid::BATCH.contains(&self.batch), format!("batch {}", self.batch));
        check(grid::LOOKBACK.contains(&self.lookback), format!("lookback {}", self.lookback));
        check(grid::KERNEL.contains(&self.kernel), format!("kernel {}", self.kernel));
        check(grid::HIDDEN.contains(&self.hidden), format!("hidden {}", self.hidden));
        check(grid::LAYERS.contains(&self.layers), format!("layers {}", self.layers));
        check(grid::HEADS.contains(&self.heads), format!("heads {}", self.heads));
        check(grid::PHI.iter().any(|&v| (v - self.phi).abs() < 1e-15), format!("phi {}", self.phi));
        out
    }
}

/// `(Y + Yᵀ)/2`.
pub fn symmetrize<T: Real>(y: &Matrix<T>) -> Result<Matrix<T>> {
    if !y.is_square() {
        return Err(Error::Dimension {
            expected: y.rows(),
            actual: y.cols(),
        });
    }
    Ok(y.symmetrize())
}

/// Nearest PSD matrix in Frobenius norm: clamp eigenvalues at zero and
/// reconstruct.
pub fn project_psd<T: Real>(y: &Matrix<T>) -> Result<Matrix<T>> {
    let eig = y.sym_eigen()?;
    let clamped: Vec<T> = eig.values.iter().map(|&l| l.max(T::zero())).collect();
    Ok(eig.reconstruct(&clamped))
}

/// `φ·Y_psd + (1 − φ)·Σ_trailing`.
pub fn blend<T: Real>(y_psd: &Matrix<T>, trailing: &Matrix<T>, phi: T) -> Matrix<T> {
    y_psd.zip_map(trailing, |a, b| phi * a + (T::one() - phi) * b)
}

/// Training pairs in scaled space: inputs of `(L+1)·N²` values (oldest
/// matrix first) and targets of `N²` values.
#[derive(Debug, Clone, Default)]
pub struct Samples<T> {
    pub rows: Vec<usize>,
    pub inputs: Vec<Vec<T>>,
    pub targets: Vec<Vec<T>>,
}

impl<T> Samples<T> {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train: f64,
    pub validation: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub epochs: Vec<EpochLoss>,
}

impl LossCurve {
    /// `epoch,loss` rows of the training loss.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "epoch,loss")?;
        for e in &self.epochs {
            writeln!(out, "{},{:e}", e.epoch, e.train)?;
        }
        Ok(())
    }

    pub fn first(&self) -> Option<f64> {
        self.epochs.first().map(|e| e.train)
    }

    pub fn last(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.train)
    }
}

#[derive(Debug, Clone)]
pub struct CabModel<T> {
    pub cfg: CabConfig,
    pub n_assets: usize,
    pub scaler: Scaler<T>,
    pub store: ParamStore<T>,
    conv: Conv3d,
    bilstm: BiLstm,
    mha: MultiHeadAttention,
    head: Linear,
    adam: Adam<T>,
}

impl<T: Real> CabModel<T> {
    pub fn new(cfg: CabConfig, scaler: Scaler<T>) -> Result<Self> {
        cfg.validate()?;
        let n = scaler.dim();
        let mut store = ParamStore::new(cfg.seed);
        let conv = Conv3d::new(&mut store, "conv", cfg.kernel)?;
        let bilstm = BiLstm::new(&mut store, "bilstm", n * n, cfg.hidden, cfg.layers)?;
        let mha = MultiHeadAttention::new(&mut store, "mha", 2 * cfg.hidden, cfg.heads)?;
        let head = Linear::new(&mut store, "head", 2 * cfg.hidden, n * n, true);
        let adam = Adam::new(T::lit(cfg.lr));
        Ok(Self {
            cfg,
            n_assets: n,
            scaler,
            store,
            conv,
            bilstm,
            mha,
            head,
            adam,
        })
    }

    pub fn head_weights(&self) -> (crate::tensor::ParamId, Option<crate::tensor::ParamId>) {
        (self.head.w, self.head.b)
    }

    /// Builds the network on a batch of scaled inputs; returns the
    /// symmetrised output `[B, N²]`. `dropout_seed` drives the dropout mask
    /// in training mode.
    pub fn network(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        inputs: &[&[T]],
        training: bool,
        dropout_seed: u64,
    ) -> Result<Var> {
        let n = self.n_assets;
        let steps = self.cfg.lookback + 1;
        let b = inputs.len();
        let width = steps * n * n;
        let mut data = Vec::with_capacity(b * width);
        for x in inputs {
            if x.len() != width {
                return Err(Error::Dimension {
                    expected: width,
                    actual: x.len(),
                });
            }
            data.extend_from_slice(x);
        }
        let x = g.input(Tensor::new(vec![b, steps, n, n], data)?);
        let c = self.conv.forward(g, store, x)?;
        let flat = g.reshape(c, vec![b, steps, n * n])?;
        let h = self.bilstm.forward(g, store, flat)?;
        let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
        let h = dropout(g, h, self.cfg.dropout, training, &mut rng)?;
        let a = self.mha.forward(g, store, h)?;
        let pooled = g.mean_time(a)?;
        let y = self.head.forward(g, store, pooled)?;
        g.symmetrize(y, n)
    }

    /// Mean Frobenius loss of a batch in scaled space.
    pub fn batch_loss(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        inputs: &[&[T]],
        targets: &[&[T]],
        training: bool,
        dropout_seed: u64,
    ) -> Result<Var> {
        let y = self.network(g, store, inputs, training, dropout_seed)?;
        let target: Vec<T> = targets.iter().flat_map(|t| t.iter().copied()).collect();
        g.frobenius_loss(y, target)
    }

    fn step_batch(&mut self, inputs: &[&[T]], targets: &[&[T]], dropout_seed: u64) -> Result<f64> {
        let mut g = Graph::new();
        let loss = self.batch_loss(&mut g, &self.store, inputs, targets, true, dropout_seed)?;
        let value = g.value(loss).data[0];
        if !value.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite training loss {value} (batch of {})",
                inputs.len()
            )));
        }
        g.backward(loss, &mut self.store)?;
        self.adam.step(&mut self.store);
        Ok(value.as_f64())
    }

    /// Evaluation-mode mean loss over `samples`.
    pub fn evaluate(&self, samples: &Samples<T>) -> Result<f64> {
        if samples.is_empty() {
            return Err(Error::insufficient(1, 0, "evaluation samples"));
        }
        let mut total = 0.0;
        for chunk in (0..samples.len()).collect::<Vec<_>>().chunks(self.cfg.batch.max(1)) {
            let xs: Vec<&[T]> = chunk.iter().map(|&i| samples.inputs[i].as_slice()).collect();
            let ts: Vec<&[T]> = chunk.iter().map(|&i| samples.targets[i].as_slice()).collect();
            let mut g = Graph::new();
            let l = self.batch_loss(&mut g, &self.store, &xs, &ts, false, 0)?;
            total += g.value(l).data[0].as_f64() * chunk.len() as f64;
        }
        Ok(total / samples.len() as f64)
    }

    /// One pass over `order` in mini-batches; returns the size-weighted
    /// mean batch loss.
    fn run_epoch(&mut self, samples: &Samples<T>, order: &[usize], seed: u64) -> Result<f64> {
        let mut total = 0.0;
        for (k, chunk) in order.chunks(self.cfg.batch.max(1)).enumerate() {
            let xs: Vec<&[T]> = chunk.iter().map(|&i| samples.inputs[i].as_slice()).collect();
            let ts: Vec<&[T]> = chunk.iter().map(|&i| samples.targets[i].as_slice()).collect();
            let l = self.step_batch(&xs, &ts, mix(seed, k as u64))?;
            total += l * chunk.len() as f64;
        }
        Ok(total / order.len() as f64)
    }

    /// Trains for `cfg.epochs` epochs on `train`, shuffling each epoch with a
    /// seeded generator, and records the mean training loss per epoch (and
    /// the evaluation-mode validation loss when `validation` is given).
    pub fn train(&mut self, train: &Samples<T>, validation: Option<&Samples<T>>) -> Result<LossCurve> {
        if train.is_empty() {
            return Err(Error::insufficient(1, 0, "training sequences for CAB"));
        }
        let mut curve = LossCurve::default();
        let mut order: Vec<usize> = (0..train.len()).collect();
        for epoch in 1..=self.cfg.epochs {
            let seed = mix(self.cfg.seed, epoch as u64);
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let loss = self.run_epoch(train, &order, seed)?;
            let val = match validation {
                Some(v) if !v.is_empty() => Some(self.evaluate(v)?),
                _ => None,
            };
            log::debug!("cab epoch {epoch}: train {loss:.6e} validation {val:?}");
            curve.epochs.push(EpochLoss {
                epoch,
                train: loss,
                validation: val,
            });
        }
        Ok(curve)
    }

    /// One online-update epoch over `samples` in chronological order with
    /// dropout seeded by `tag`.
    pub fn online_update(&mut self, samples: &Samples<T>, tag: u64) -> Result<f64> {
        if samples.is_empty() {
            return Ok(0.0);
        }
        let order: Vec<usize> = (0..samples.len()).collect();
        self.run_epoch(samples, &order, mix(self.cfg.seed ^ 0x5eed, tag))
    }

    /// Network output for one scaled sequence, unscaled, before PSD
    /// projection and blending.
    pub fn raw_forecast(&self, input: &[T]) -> Result<Matrix<T>> {
        let mut g = Graph::new();
        let y = self.network(&mut g, &self.store, &[input], false, 0)?;
        let n = self.n_assets;
        let scaled = Matrix::from_vec(n, n, g.value(y).data.clone());
        Ok(self.scaler.invert(&scaled).symmetrize())
    }

    /// Full pipeline: network, unscale, PSD projection, blend with the
    /// trailing realised covariance.
    pub fn forecast(&self, input: &[T], trailing: &Matrix<T>) -> Result<Matrix<T>> {
        let y = self.raw_forecast(input)?;
        if !y.is_finite() {
            return Err(Error::Numerical("non-finite CAB network output".into()));
        }
        let y_psd = project_psd(&y)?;
        Ok(blend(&y_psd, trailing, T::lit(self.cfg.phi)))
    }

    pub fn checkpoint(&self) -> Checkpoint {
        self.store.checkpoint()
    }

    pub fn restore(&mut self, ck: &Checkpoint) -> Result<()> {
        self.store.restore(ck)
    }
}

fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Rolling realised covariances plus the index helpers that turn them into
/// sequences and targets.
#[derive(Debug, Clone)]
pub struct CovHistory<T> {
    pub horizon: usize,
    pub lookback: usize,
    /// `covs[k]` is the realised covariance ending at row `k + horizon − 1`.
    pub covs: Vec<CovMatrix<T>>,
}

impl<T: Real> CovHistory<T> {
    pub fn new(panel: &ReturnPanel<T>, horizon: usize, lookback: usize) -> Result<Self> {
        Ok(Self {
            horizon,
            lookback,
            covs: realized_series(panel, horizon)?,
        })
    }

    pub fn trailing(&self, t: usize) -> Option<&CovMatrix<T>> {
        t.checked_sub(self.horizon - 1).and_then(|k| self.covs.get(k))
    }

    /// First row with a full sequence.
    pub fn first_sequence_row(&self) -> usize {
        self.horizon - 1 + self.lookback
    }

    /// Scaled, flattened sequence ending at row `t`.
    pub fn sequence(&self, t: usize, scaler: &Scaler<T>) -> Option<Vec<T>> {
        if t < self.first_sequence_row() {
            return None;
        }
        let end = t - (self.horizon - 1);
        let start = end - self.lookback;
        if end >= self.covs.len() {
            return None;
        }
        let mut out = Vec::new();
        for c in &self.covs[start..=end] {
            out.extend_from_slice(scaler.apply(&c.values).as_slice());
        }
        Some(out)
    }

    /// Scaled target for row `s`: the realised covariance of rows
    /// `s+1 ..= s+F`, available when `s + F <= last_row`.
    pub fn target(&self, s: usize, last_row: usize, scaler: &Scaler<T>) -> Option<Vec<T>> {
        if s + self.horizon > last_row {
            return None;
        }
        self.covs
            .get(s + 1)
            .map(|c| scaler.apply(&c.values).into_vec())
    }

    /// Samples for rows `rows` whose targets lie within `..= last_row`.
    pub fn samples(&self, rows: impl IntoIterator<Item = usize>, last_row: usize, scaler: &Scaler<T>) -> Samples<T> {
        let mut s = Samples {
            rows: Vec::new(),
            inputs: Vec::new(),
            targets: Vec::new(),
        };
        for r in rows {
            if let (Some(x), Some(y)) = (self.sequence(r, scaler), self.target(r, last_row, scaler)) {
                s.rows.push(r);
                s.inputs.push(x);
                s.targets.push(y);
            }
        }
        s
    }

    /// Scaler fitted on every realised covariance ending at or before
    /// `last_row`.
    pub fn fit_scaler(&self, last_row: usize) -> Result<Scaler<T>> {
        let k = (last_row + 1).saturating_sub(self.horizon - 1).min(self.covs.len());
        Scaler::fit(self.covs[..k].iter().map(|c| &c.values))
    }
}

/// Output of a full CAB run.
#[derive(Debug, Clone)]
pub struct CabRun<T> {
    pub rows: Vec<usize>,
    pub forecasts: Vec<CovMatrix<T>>,
    pub curve: LossCurve,
    pub model: CabModel<T>,
}

/// Trains on rows `..= train_end` (chronological split into fit and
/// validation parts) and forecasts every row after `train_end`, applying
/// the online update after each forecast.
pub fn run_cab<T: Real>(panel: &ReturnPanel<T>, horizon: usize, train_end: usize, cfg: &CabConfig) -> Result<CabRun<T>> {
    cfg.validate()?;
    if train_end >= panel.len() {
        return Err(Error::insufficient(train_end + 1, panel.len(), "rows for the CAB training split"));
    }
    let hist = CovHistory::new(panel, horizon, cfg.lookback)?;
    let scaler = hist.fit_scaler(train_end)?;
    let all = hist.samples(hist.first_sequence_row()..=train_end, train_end, &scaler);
    if all.len() < 2 {
        return Err(Error::insufficient(2, all.len(), "CAB training sequences"));
    }
    let n_val = ((all.len() as f64) * cfg.validation_fraction).floor() as usize;
    let n_fit = all.len() - n_val;
    let split = |r: std::ops::Range<usize>| Samples {
        rows: all.rows[r.clone()].to_vec(),
        inputs: all.inputs[r.clone()].to_vec(),
        targets: all.targets[r].to_vec(),
    };
    let fit = split(0..n_fit);
    let val = split(n_fit..all.len());
    let mut model = CabModel::new(cfg.clone(), scaler)?;
    let curve = model.train(&fit, Some(&val))?;

    let mut rows = Vec::new();
    let mut forecasts = Vec::new();
    for t in train_end + 1..panel.len() {
        let (Some(x), Some(trailing)) = (hist.sequence(t, &model.scaler), hist.trailing(t)) else {
            log::warn!("CAB: no complete sequence at row {t}, skipped");
            continue;
        };
        let values = model.forecast(&x, &trailing.values)?;
        rows.push(t);
        forecasts.push(CovMatrix {
            values,
            asof: panel.dates[t],
            window: (panel.dates[t + 1 - horizon], panel.dates[t]),
        });
        if cfg.update == UpdatePolicy::Daily && t + 1 < panel.len() {
            let hi = t.saturating_sub(horizon);
            let lo = (hi + 1).saturating_sub(cfg.online_window);
            let recent = hist.samples(lo..=hi, t, &model.scaler);
            model.online_update(&recent, t as u64)?;
        }
    }
    Ok(CabRun {
        rows,
        forecasts,
        curve,
        model,
    })
}
