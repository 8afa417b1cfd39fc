//! Classical benchmark forecasters: naive (rolling and full sample), EWMA,
//! PCA truncation, random-matrix eigenvalue clipping and Ledoit–Wolf
//! shrinkage toward a scaled identity.
//!
//! Every forecaster takes the panel, the forecast row `t` and the horizon
//! `F`, and reads only rows `..= t`.

use serde::{Deserialize, Serialize};

use crate::data::ReturnPanel;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rolling::{full_sample_cov, range_cov, range_mean, realized_cov, window_mean, CovMatrix};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EwmaConfig {
    /// Decay factor η; weight on the trailing realised covariance.
    pub eta: f64,
}

impl Default for EwmaConfig {
    fn default() -> Self {
        Self { eta: 0.94 }
    }
}

impl EwmaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::Config(format!("EWMA eta must lie in [0,1], got {}", self.eta)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PcaConfig {
    /// Minimum share of total eigenvalue mass retained.
    pub variance_fraction: f64,
}

impl Default for PcaConfig {
    fn default() -> Self {
        Self {
            variance_fraction: 0.95,
        }
    }
}

impl PcaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.variance_fraction > 0.0 && self.variance_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "PCA variance fraction must lie in (0,1], got {}",
                self.variance_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShrinkageResult<T> {
    /// Intensity after clipping to `[0, 1]`.
    pub rho: T,
    /// `(trace/N)·I`.
    pub target: Matrix<T>,
    /// Set when the dispersion denominator vanished and ρ was forced to 0.
    pub degenerate: bool,
}

/// Trailing realised covariance, unchanged.
pub fn forecast_na<T: Real>(panel: &ReturnPanel<T>, t: usize, horizon: usize) -> Result<CovMatrix<T>> {
    realized_cov(panel, horizon, t)
}

/// Sample covariance of all history through `t`.
pub fn forecast_na_full<T: Real>(panel: &ReturnPanel<T>, t: usize) -> Result<CovMatrix<T>> {
    full_sample_cov(panel, t)
}

/// `(1−η)·e eᵀ + η·trailing`.
pub fn ewma_blend<T: Real>(residual: &[T], trailing: &Matrix<T>, eta: T) -> Matrix<T> {
    let n = residual.len();
    let w = T::one() - eta;
    Matrix::from_fn(n, n, |i, j| w * (residual[i] * residual[j]) + eta * trailing[(i, j)])
}

/// One-step EWMA update of the trailing realised covariance with the latest
/// residual `e_t = r_t − μ_t`.
pub fn forecast_ewma<T: Real>(
    panel: &ReturnPanel<T>,
    t: usize,
    horizon: usize,
    cfg: &EwmaConfig,
) -> Result<CovMatrix<T>> {
    cfg.validate()?;
    let base = realized_cov(panel, horizon, t)?;
    let mu = window_mean(panel, horizon, t)?;
    let e: Vec<T> = panel.row(t).iter().zip(&mu).map(|(&r, &m)| r - m).collect();
    Ok(CovMatrix {
        values: ewma_blend(&e, &base.values, T::lit(cfg.eta)),
        ..base
    })
}

/// Keeps the leading eigenpairs that carry at least `fraction` of the total
/// eigenvalue mass. Returns the reconstruction and the number kept.
pub fn pca_truncate<T: Real>(m: &Matrix<T>, fraction: f64) -> Result<(Matrix<T>, usize)> {
    let eig = m.sym_eigen()?;
    let n = eig.values.len();
    let total: T = eig.values.iter().copied().sum();
    if fraction >= 1.0 || total <= T::zero() {
        return Ok((m.clone(), n));
    }
    let goal = T::lit(fraction) * total;
    let mut kept = vec![T::zero(); n];
    let mut cum = T::zero();
    let mut k = 0;
    for idx in (0..n).rev() {
        cum += eig.values[idx];
        kept[idx] = eig.values[idx];
        k += 1;
        if cum >= goal {
            break;
        }
    }
    if k == n {
        return Ok((m.clone(), n));
    }
    Ok((eig.reconstruct(&kept), k))
}

pub fn forecast_pca<T: Real>(
    panel: &ReturnPanel<T>,
    t: usize,
    horizon: usize,
    cfg: &PcaConfig,
) -> Result<CovMatrix<T>> {
    cfg.validate()?;
    let base = realized_cov(panel, horizon, t)?;
    let (values, _) = pca_truncate(&base.values, cfg.variance_fraction)?;
    Ok(CovMatrix { values, ..base })
}

/// Marchenko–Pastur noise band `((1 − 1/√q)², (1 + 1/√q)²)`.
pub fn mp_band(q: f64) -> Result<(f64, f64)> {
    if !(q > 0.0) {
        return Err(Error::Config(format!("q = T/N must be positive, got {q}")));
    }
    let s = 1.0 / q.sqrt();
    Ok(((1.0 - s).powi(2), (1.0 + s).powi(2)))
}

/// Replaces every eigenvalue inside the noise band by the band midpoint.
/// Returns the input untouched when nothing falls inside.
pub fn rmt_clip<T: Real>(m: &Matrix<T>, q: f64) -> Result<Matrix<T>> {
    let (lo, hi) = mp_band(q)?;
    let (lo, hi) = (T::lit(lo), T::lit(hi));
    let mid = (lo + hi) / T::lit(2.0);
    let eig = m.sym_eigen()?;
    let mut changed = false;
    let filtered: Vec<T> = eig
        .values
        .iter()
        .map(|&l| {
            if l > hi || l < lo {
                l
            } else {
                changed = true;
                mid
            }
        })
        .collect();
    if !changed {
        return Ok(m.clone());
    }
    Ok(eig.reconstruct(&filtered))
}

/// RMT cleaning of the trailing realised covariance with `q = F/N`.
pub fn forecast_rmt<T: Real>(panel: &ReturnPanel<T>, t: usize, horizon: usize) -> Result<CovMatrix<T>> {
    let base = realized_cov(panel, horizon, t)?;
    let q = horizon as f64 / panel.n_assets() as f64;
    let values = rmt_clip(&base.values, q)?;
    Ok(CovMatrix { values, ..base })
}

/// `ρ·target + (1−ρ)·sample`.
pub fn shrink_toward_identity<T: Real>(sample: &Matrix<T>, rho: T) -> (Matrix<T>, Matrix<T>) {
    let n = sample.rows();
    let mu = sample.trace() / T::from_len(n);
    let target = Matrix::identity(n).scale(mu);
    let out = target.scale(rho).add(&sample.scale(T::one() - rho));
    (out, target)
}

/// Ledoit–Wolf shrinkage of `sample` (estimated from rows `start ..= end`).
///
/// ρ = Σ_{i≠j} Var(σ_ij) / Σ_{i≠j} (σ_ij − t_ij)², clipped to `[0,1]`, where
/// Var(σ_ij) is the sample variance of the centred cross-products divided by
/// the window length.
pub fn lw_shrink<T: Real>(
    sample: &Matrix<T>,
    panel: &ReturnPanel<T>,
    start: usize,
    end: usize,
) -> Result<(Matrix<T>, ShrinkageResult<T>)> {
    let n = sample.rows();
    if panel.n_assets() != n {
        return Err(Error::Dimension {
            expected: n,
            actual: panel.n_assets(),
        });
    }
    let len = end + 1 - start;
    if len < 2 {
        return Err(Error::insufficient(2, len, "window for Ledoit-Wolf"));
    }
    let mu = range_mean(panel, start, end);
    let tn = T::from_len(len);
    // Welford over the cross-products of each off-diagonal pair
    let mut mean = Matrix::<T>::zeros(n, n);
    let mut m2 = Matrix::<T>::zeros(n, n);
    let mut dev = vec![T::zero(); n];
    for (k, t) in (start..=end).enumerate() {
        for (d, (&r, &m)) in dev.iter_mut().zip(panel.row(t).iter().zip(&mu)) {
            *d = r - m;
        }
        let kk = T::from_len(k + 1);
        for i in 0..n {
            for j in i + 1..n {
                let x = dev[i] * dev[j];
                let delta = x - mean[(i, j)];
                mean[(i, j)] += delta / kk;
                m2[(i, j)] += delta * (x - mean[(i, j)]);
            }
        }
    }
    let mut num = T::zero();
    let mut den = T::zero();
    for i in 0..n {
        for j in i + 1..n {
            let var_sigma = m2[(i, j)] / (tn - T::one()) / tn;
            num += T::lit(2.0) * var_sigma;
            den += T::lit(2.0) * sample[(i, j)] * sample[(i, j)];
        }
    }
    let (rho, degenerate) = if den > T::zero() {
        ((num / den).max(T::zero()).min(T::one()), false)
    } else {
        (T::zero(), true)
    };
    let (shrunk, target) = shrink_toward_identity(sample, rho);
    Ok((
        shrunk,
        ShrinkageResult {
            rho,
            target,
            degenerate,
        },
    ))
}

/// Ledoit–Wolf on the trailing realised covariance.
pub fn forecast_lw<T: Real>(
    panel: &ReturnPanel<T>,
    t: usize,
    horizon: usize,
) -> Result<(CovMatrix<T>, ShrinkageResult<T>)> {
    let base = realized_cov(panel, horizon, t)?;
    let (values, res) = lw_shrink(&base.values, panel, t + 1 - horizon, t)?;
    Ok((CovMatrix { values, ..base }, res))
}

/// Ledoit–Wolf on the full-sample covariance through `t`.
pub fn forecast_lw_full<T: Real>(
    panel: &ReturnPanel<T>,
    t: usize,
) -> Result<(CovMatrix<T>, ShrinkageResult<T>)> {
    let base = full_sample_cov(panel, t)?;
    let (values, res) = lw_shrink(&base.values, panel, 0, t)?;
    Ok((CovMatrix { values, ..base }, res))
}

/// Sample covariance over an explicit row range; exposed for callers that
/// need the raw estimator alongside the shrunk one.
pub fn sample_cov<T: Real>(panel: &ReturnPanel<T>, start: usize, end: usize) -> Matrix<T> {
    range_cov(panel, start, end)
}
