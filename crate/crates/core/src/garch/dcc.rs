//! Dynamic conditional correlation: second-stage fit and multi-step
//! correlation forecasts.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::optim::{logistic, logit, NelderMead};
use crate::scalar::Real;

use super::univariate::STATIONARITY_MARGIN;

const FALLBACK: (f64, f64) = (0.02, 0.95);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DccParams<T> {
    pub alpha: T,
    pub beta: T,
    /// Unconditional correlation target (unit diagonal).
    pub qbar: Matrix<T>,
    /// `Q` after absorbing the last standardised residual, i.e. `Q_{t+1}`.
    pub q_last: Matrix<T>,
    /// Normalisation of `q_last`: the one-step-ahead correlation `R_{t+1}`.
    pub r_last: Matrix<T>,
    pub converged: bool,
    pub fallback: bool,
}

impl<T: Real> DccParams<T> {
    pub fn persistence(&self) -> T {
        self.alpha + self.beta
    }

    /// `R_{t+1}, …, R_{t+steps}`: the one-step correlation, then mean
    /// reversion `(1 − p^{f−1}) Q̄ + p^{f−1} R_{t+1}` with unit diagonals
    /// restored.
    pub fn correlation_path(&self, steps: usize) -> Vec<Matrix<T>> {
        let p = self.persistence();
        let mut w = T::one();
        (0..steps)
            .map(|_| {
                let r = self.qbar.scale(T::one() - w).add(&self.r_last.scale(w));
                w *= p;
                normalize(&r)
            })
            .collect()
    }
}

/// `V^{-1/2} Q V^{-1/2}` with the diagonal forced to exactly one.
pub fn normalize<T: Real>(q: &Matrix<T>) -> Matrix<T> {
    q.to_correlation().symmetrize()
}

/// Sample correlation of the columns of `z` (rows are dates).
pub fn sample_correlation<T: Real>(z: &Matrix<T>) -> Matrix<T> {
    z.column_covariance().to_correlation()
}

fn update_q<T: Real>(q: &mut Matrix<T>, qbar: &Matrix<T>, z: &[T], a: T, b: T) {
    let c = T::one() - a - b;
    let n = q.rows();
    for i in 0..n {
        for j in 0..n {
            q[(i, j)] = c * qbar[(i, j)] + a * z[i] * z[j] + b * q[(i, j)];
        }
    }
}

/// Runs the `Q` recursion from `Q_0 = Q̄` over every row of `z`, returning
/// the mean correlation negative log-likelihood
/// `½(ln|R_t| + z_tᵀR_t⁻¹z_t − z_tᵀz_t)` and the final `Q`.
pub fn dcc_filter<T: Real>(z: &Matrix<T>, qbar: &Matrix<T>, a: T, b: T) -> (T, Matrix<T>) {
    let mut q = qbar.clone();
    let mut nll = T::zero();
    for t in 0..z.rows() {
        let zt = z.row(t);
        let r = normalize(&q);
        match r.spd_logdet_quad(zt) {
            Some((logdet, quad)) => {
                let zz = zt.iter().map(|&x| x * x).sum::<T>();
                nll += T::lit(0.5) * (logdet + quad - zz);
            }
            None => return (T::infinity(), q),
        }
        update_q(&mut q, qbar, zt, a, b);
    }
    (nll / T::from_len(z.rows().max(1)), q)
}

fn unpack<T: Real>(theta: &[T]) -> (T, T) {
    let p = (T::one() - T::lit(STATIONARITY_MARGIN)) * logistic(theta[0]);
    let a = p * logistic(theta[1]);
    (a, p - a)
}

fn pack<T: Real>(a: T, b: T) -> Vec<T> {
    let p = a + b;
    vec![logit(p / (T::one() - T::lit(STATIONARITY_MARGIN))), logit(a / p)]
}

/// Fits `(α, β)` with `Q̄` set to the sample correlation of `z`.
pub fn fit_dcc<T: Real>(z: &Matrix<T>) -> Result<DccParams<T>> {
    fit_dcc_with_target(z, sample_correlation(z))
}

/// Fits `(α, β)` by maximising the correlation likelihood with a given
/// correlation target `Q̄`.
pub fn fit_dcc_with_target<T: Real>(z: &Matrix<T>, qbar: Matrix<T>) -> Result<DccParams<T>> {
    let n = z.cols();
    if z.rows() < 2 || n == 0 {
        return Err(Error::insufficient(2, z.rows(), "standardised residuals for DCC fit"));
    }
    if qbar.rows() != n || !qbar.is_square() {
        return Err(Error::Dimension {
            expected: n,
            actual: qbar.rows(),
        });
    }
    if !z.is_finite() || !qbar.is_finite() {
        return Err(Error::Numerical("non-finite standardised residuals".into()));
    }
    let qbar = normalize(&qbar);
    let nm = NelderMead {
        f_tol: T::lit(1e-10),
        max_iter: 1500,
        step: T::lit(0.7),
    };
    let mut best: Option<(T, Vec<T>)> = None;
    for (a, b) in [(0.02, 0.95), (0.05, 0.90), (0.01, 0.50)] {
        let m = nm.minimize(&pack(T::lit(a), T::lit(b)), |th| {
            let (a, b) = unpack(th);
            dcc_filter(z, &qbar, a, b).0
        });
        if m.converged && m.value.is_finite() && best.as_ref().is_none_or(|(v, _)| m.value < *v) {
            best = Some((m.value, m.x));
        }
    }
    let (alpha, beta, converged) = match best {
        Some((_, th)) => {
            let (a, b) = unpack(&th);
            (a, b, true)
        }
        None => (T::lit(FALLBACK.0), T::lit(FALLBACK.1), false),
    };
    Ok(filtered(z, qbar, alpha, beta, converged))
}

/// Runs the recursion with fixed parameters and returns the resulting state.
pub fn filtered<T: Real>(z: &Matrix<T>, qbar: Matrix<T>, alpha: T, beta: T, converged: bool) -> DccParams<T> {
    let (_, q_last) = dcc_filter(z, &qbar, alpha, beta);
    let r_last = normalize(&q_last);
    DccParams {
        alpha,
        beta,
        qbar,
        q_last,
        r_last,
        converged,
        fallback: !converged,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_unit_diagonal() {
        let q = Matrix::<f64>::from_rows(&[vec![2.0, 0.3], vec![0.3, 0.5]]);
        let r = normalize(&q);
        assert_eq!(r[(0, 0)], 1.0);
        assert_eq!(r[(1, 1)], 1.0);
        assert!((r[(0, 1)] - 0.3 / 1.0f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn zero_dynamics_is_constant_target() {
        let qbar = Matrix::<f64>::from_rows(&[vec![1.0, 0.4], vec![0.4, 1.0]]);
        let z = Matrix::from_rows(&[vec![1.0, -2.0], vec![0.5, 0.3]]);
        let p = filtered(&z, qbar.clone(), 0.0, 0.0, true);
        for r in p.correlation_path(5) {
            assert!(r.sub(&qbar).max_abs() < 1e-15);
        }
    }

    #[test]
    fn mean_reversion_to_target() {
        let qbar = Matrix::<f64>::from_rows(&[vec![1.0, 0.2], vec![0.2, 1.0]]);
        let z = Matrix::from_rows(&[vec![2.0, 2.0], vec![1.5, 1.8]]);
        let p = filtered(&z, qbar.clone(), 0.1, 0.8, true);
        let path = p.correlation_path(400);
        assert!(path[399].sub(&qbar).max_abs() < 1e-8);
        assert!(path.iter().all(|r| r[(0, 0)] == 1.0 && r[(0, 1)].abs() <= 1.0));
    }

    #[test]
    fn two_step_hand_recursion() {
        let qbar = Matrix::<f64>::from_rows(&[vec![1.0, 0.3], vec![0.3, 1.0]]);
        let z = Matrix::from_rows(&[vec![1.0, 2.0]]);
        let (a, b) = (0.1, 0.8);
        let p = filtered(&z, qbar, a, b, true);
        // Q_1 = 0.1·Q̄ + 0.1·zzᵀ + 0.8·Q̄
        let q11: f64 = 0.1 + 0.1 + 0.8;
        let q22 = 0.1 + 0.4 + 0.8;
        let q12 = 0.03 + 0.2 + 0.24;
        let r1 = q12 / (q11 * q22).sqrt();
        let path = p.correlation_path(2);
        assert!((path[0][(0, 1)] - r1).abs() < 1e-14);
        let r2 = 0.1 * 0.3 + 0.9 * r1;
        assert!((path[1][(0, 1)] - r2).abs() < 1e-14);
    }

    #[test]
    fn likelihood_rejects_non_pd() {
        let qbar = Matrix::<f64>::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]);
        let z = Matrix::from_rows(&[vec![1.0, 1.0]]);
        assert!(dcc_filter(&z, &qbar, 0.0, 0.0).0.is_infinite());
    }
}
