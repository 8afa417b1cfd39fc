//! GARCH-family covariance forecasters: CCC, DCC and DCC with a nonlinearly
//! shrunk correlation target.
//!
//! On each forecast date the residuals `e_s = r_s − μ_s` (with `μ_s` the
//! trailing `F`-day mean) from the first full window up to `t` are used to
//! fit one GARCH(1,1) per asset, standardise, and fit the correlation stage.
//! The `F`-step forecast averages `D_{t+f} R_{t+f} D_{t+f}` over `f = 1..=F`.

pub mod dcc;
pub mod nlshrink;
pub mod univariate;

use chrono::NaiveDate;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::ReturnPanel;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rolling::CovMatrix;
use crate::scalar::Real;

pub use dcc::{fit_dcc, fit_dcc_with_target, sample_correlation, DccParams};
pub use nlshrink::{nl_shrink_correlation, NlShrinkConfig};
pub use univariate::{fit_garch11, fit_garch11_with, garch_variance_path, variance_forecast, GarchFit, GarchParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GarchModel {
    Ccc,
    Dcc,
    DccNl,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GarchConfig {
    /// Minimum residual count for a univariate fit.
    pub min_obs: usize,
    /// Trailing residual window; `None` means expanding from the first
    /// full rolling window.
    pub estimation_window: Option<usize>,
    /// Re-estimate parameters every this many forecast dates; in between the
    /// filters are re-run with the last parameters.
    pub refit_every: usize,
    pub shrink: NlShrinkConfig,
}

impl Default for GarchConfig {
    fn default() -> Self {
        Self {
            min_obs: univariate::MIN_OBS,
            estimation_window: None,
            refit_every: 1,
            shrink: NlShrinkConfig::default(),
        }
    }
}

impl GarchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.refit_every == 0 {
            return Err(Error::Config("refit_every must be >= 1".into()));
        }
        if let Some(w) = self.estimation_window {
            if w < self.min_obs {
                return Err(Error::Config(format!(
                    "estimation_window {w} is below min_obs {}",
                    self.min_obs
                )));
            }
        }
        if !(self.shrink.bandwidth_exponent > 0.0) {
            return Err(Error::Config("bandwidth exponent must be positive".into()));
        }
        Ok(())
    }
}

/// Audit record of the parameters behind one forecast.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub date: NaiveDate,
    pub model: GarchModel,
    pub refit: bool,
    pub garch: Vec<GarchParams<f64>>,
    pub garch_fallback: Vec<bool>,
    pub dcc_alpha: Option<f64>,
    pub dcc_beta: Option<f64>,
    pub dcc_fallback: bool,
    pub shrink_fallback: bool,
}

impl FitReport {
    pub fn any_fallback(&self) -> bool {
        self.dcc_fallback || self.shrink_fallback || self.garch_fallback.iter().any(|&f| f)
    }
}

#[derive(Debug, Clone)]
pub struct GarchForecast<T> {
    pub cov: CovMatrix<T>,
    pub report: FitReport,
}

/// Mean-adjusted residuals used for fitting on date `t`, rows are dates.
/// Returns the matrix and the row index of its first observation.
pub fn residual_history<T: Real>(
    panel: &ReturnPanel<T>,
    t: usize,
    horizon: usize,
    cfg: &GarchConfig,
) -> Result<(Matrix<T>, usize)> {
    if horizon < 1 {
        return Err(Error::Config("horizon must be >= 1".into()));
    }
    if t >= panel.len() {
        return Err(Error::insufficient(t + 1, panel.len(), "rows for GARCH residuals"));
    }
    let first = horizon - 1;
    let mut start = first;
    if let Some(w) = cfg.estimation_window {
        start = start.max((t + 1).saturating_sub(w));
    }
    if t < start || t + 1 - start < cfg.min_obs {
        return Err(Error::insufficient(
            cfg.min_obs + first,
            t + 1,
            "history for GARCH residuals",
        ));
    }
    let n = panel.n_assets();
    let mut sum = vec![T::zero(); n];
    for s in start + 1 - horizon..start {
        for (a, &r) in sum.iter_mut().zip(panel.row(s)) {
            *a += r;
        }
    }
    let f = T::from_len(horizon);
    let mut out = Vec::with_capacity((t + 1 - start) * n);
    for s in start..=t {
        let row = panel.row(s);
        for (a, &r) in sum.iter_mut().zip(row) {
            *a += r;
        }
        out.extend(row.iter().zip(&sum).map(|(&r, &a)| r - a / f));
        if s + 1 >= horizon {
            for (a, &r) in sum.iter_mut().zip(panel.row(s + 1 - horizon)) {
                *a -= r;
            }
        }
    }
    Ok((Matrix::from_vec(t + 1 - start, n, out), start))
}

/// Independent GARCH(1,1) fits, one per column, in parallel.
pub fn fit_univariate_all<T: Real>(resid: &Matrix<T>, min_obs: usize) -> Result<Vec<GarchFit<T>>> {
    (0..resid.cols())
        .into_par_iter()
        .map(|j| fit_garch11_with(&resid.column(j), min_obs))
        .collect()
}

/// Standardised residuals `z_{i,s} = e_{i,s}/√h_{i,s}`, rows are dates.
pub fn standardized<T: Real>(fits: &[GarchFit<T>]) -> Matrix<T> {
    let rows = fits.first().map_or(0, |f| f.std_residuals.len());
    Matrix::from_fn(rows, fits.len(), |s, i| fits[i].std_residuals[s])
}

/// `(1/F) Σ_f D_{t+f} R_{t+f} D_{t+f}` with `D = diag(√h)`. A single
/// correlation matrix is reused for every step.
pub fn average_covariance<T: Real>(paths: &[Vec<T>], corrs: &[Matrix<T>]) -> Result<Matrix<T>> {
    let n = paths.len();
    let steps = paths.first().map_or(0, |p| p.len());
    if steps == 0 || corrs.is_empty() {
        return Err(Error::Config("forecast horizon must be >= 1".into()));
    }
    if corrs.len() != 1 && corrs.len() != steps {
        return Err(Error::Dimension {
            expected: steps,
            actual: corrs.len(),
        });
    }
    let mut acc = Matrix::zeros(n, n);
    for f in 0..steps {
        let d: Vec<T> = paths.iter().map(|p| p[f].sqrt()).collect();
        let r = &corrs[if corrs.len() == 1 { 0 } else { f }];
        acc = acc.add(&r.scale_sym(&d));
    }
    Ok(acc.scale(T::one() / T::from_len(steps)).symmetrize())
}

/// CCC forecast from fitted univariate models: constant `R` = sample
/// correlation of the standardised residuals.
pub fn ccc_forecast<T: Real>(fits: &[GarchFit<T>], horizon: usize) -> Result<Matrix<T>> {
    let r = sample_correlation(&standardized(fits));
    let paths: Vec<Vec<T>> = fits.iter().map(|f| variance_forecast(f, horizon)).collect();
    average_covariance(&paths, &[r])
}

/// DCC forecast from fitted univariate and correlation models.
pub fn dcc_forecast<T: Real>(fits: &[GarchFit<T>], params: &DccParams<T>, horizon: usize) -> Result<Matrix<T>> {
    let paths: Vec<Vec<T>> = fits.iter().map(|f| variance_forecast(f, horizon)).collect();
    average_covariance(&paths, &params.correlation_path(horizon))
}

#[derive(Debug, Clone)]
struct FittedState<T> {
    garch: Vec<GarchFit<T>>,
    dcc: Option<(T, T, bool)>,
    refit_at: usize,
}

/// Rolling forecaster that honours the refit cadence.
#[derive(Debug, Clone)]
pub struct GarchRunner<T> {
    pub model: GarchModel,
    pub cfg: GarchConfig,
    state: Option<FittedState<T>>,
}

impl<T: Real> GarchRunner<T> {
    pub fn new(model: GarchModel, cfg: GarchConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            model,
            cfg,
            state: None,
        })
    }

    pub fn forecast(&mut self, panel: &ReturnPanel<T>, t: usize, horizon: usize) -> Result<GarchForecast<T>> {
        let (resid, start) = residual_history(panel, t, horizon, &self.cfg)?;
        let refit = match &self.state {
            None => true,
            Some(s) => t < s.refit_at || t - s.refit_at >= self.cfg.refit_every,
        };
        let garch = if refit {
            fit_univariate_all(&resid, self.cfg.min_obs)?
        } else {
            let prev = &self.state.as_ref().expect("state present").garch;
            prev.iter()
                .enumerate()
                .map(|(j, f)| f.refilter(&resid.column(j)))
                .collect::<Result<Vec<_>>>()?
        };
        let z = standardized(&garch);
        let paths: Vec<Vec<T>> = garch.iter().map(|f| variance_forecast(f, horizon)).collect();

        let mut shrink_fallback = false;
        let (values, dcc) = match self.model {
            GarchModel::Ccc => (average_covariance(&paths, &[sample_correlation(&z)])?, None),
            GarchModel::Dcc | GarchModel::DccNl => {
                let sample = sample_correlation(&z);
                let target = if self.model == GarchModel::DccNl {
                    match nl_shrink_correlation(&sample, z.rows(), &self.cfg.shrink) {
                        Ok(s) => s,
                        Err(_) => {
                            shrink_fallback = true;
                            sample
                        }
                    }
                } else {
                    sample
                };
                let prev = self.state.as_ref().and_then(|s| s.dcc);
                let params = match (refit, prev) {
                    (false, Some((a, b, conv))) => dcc::filtered(&z, dcc::normalize(&target), a, b, conv),
                    _ => fit_dcc_with_target(&z, target)?,
                };
                let cov = average_covariance(&paths, &params.correlation_path(horizon))?;
                (cov, Some((params.alpha, params.beta, params.converged)))
            }
        };
        if !values.is_finite() {
            return Err(Error::Numerical(format!("non-finite {:?} forecast at row {t}", self.model)));
        }

        let report = FitReport {
            date: panel.dates[t],
            model: self.model,
            refit,
            garch: garch
                .iter()
                .map(|f| GarchParams {
                    omega: f.params.omega.as_f64(),
                    alpha: f.params.alpha.as_f64(),
                    beta: f.params.beta.as_f64(),
                    h_last: f.params.h_last.as_f64(),
                })
                .collect(),
            garch_fallback: garch.iter().map(|f| f.fallback).collect(),
            dcc_alpha: dcc.map(|d| d.0.as_f64()),
            dcc_beta: dcc.map(|d| d.1.as_f64()),
            dcc_fallback: dcc.is_some_and(|d| !d.2),
            shrink_fallback,
        };
        let refit_at = if refit {
            t
        } else {
            self.state.as_ref().map_or(t, |s| s.refit_at)
        };
        self.state = Some(FittedState { garch, dcc, refit_at });
        Ok(GarchForecast {
            cov: CovMatrix {
                values,
                asof: panel.dates[t],
                window: (panel.dates[start], panel.dates[t]),
            },
            report,
        })
    }
}

fn one_shot<T: Real>(
    model: GarchModel,
    panel: &ReturnPanel<T>,
    t: usize,
    horizon: usize,
    cfg: &GarchConfig,
) -> Result<GarchForecast<T>> {
    GarchRunner::new(model, *cfg)?.forecast(panel, t, horizon)
}

pub fn forecast_ccc<T: Real>(
    panel: &ReturnPanel<T>,
    t: usize,
    horizon: usize,
    cfg: &GarchConfig,
) -> Result<GarchForecast<T>> {
    one_shot(GarchModel::Ccc, panel, t, horizon, cfg)
}

pub fn forecast_dcc<T: Real>(
    panel: &ReturnPanel<T>,
    t: usize,
    horizon: usize,
    cfg: &GarchConfig,
) -> Result<GarchForecast<T>> {
    one_shot(GarchModel::Dcc, panel, t, horizon, cfg)
}

pub fn forecast_dcc_nl<T: Real>(
    panel: &ReturnPanel<T>,
    t: usize,
    horizon: usize,
    cfg: &GarchConfig,
) -> Result<GarchForecast<T>> {
    one_shot(GarchModel::DccNl, panel, t, horizon, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fit(omega: f64, alpha: f64, beta: f64, h: f64, e: f64) -> GarchFit<f64> {
        GarchFit {
            params: GarchParams {
                omega,
                alpha,
                beta,
                h_last: h,
            },
            last_residual: e,
            std_residuals: vec![],
            converged: true,
            fallback: false,
        }
    }

    #[test]
    fn residuals_subtract_trailing_mean() {
        let m = Matrix::from_fn(80, 2, |t, j| ((t * 7 + j * 3) % 11) as f64 * 0.01);
        let panel = ReturnPanel::synthetic(m);
        let cfg = GarchConfig {
            min_obs: 10,
            ..Default::default()
        };
        let (e, start) = residual_history(&panel, 60, 5, &cfg).unwrap();
        assert_eq!(start, 4);
        assert_eq!(e.rows(), 57);
        for (k, s) in (start..=60).enumerate() {
            for j in 0..2 {
                let mu = (s - 4..=s).map(|u| panel.returns[(u, j)]).sum::<f64>() / 5.0;
                assert!((e[(k, j)] - (panel.returns[(s, j)] - mu)).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn scalar_ccc_is_mean_variance_path() {
        let f = fit(0.1, 0.1, 0.8, 1.0, 0.5);
        let path = variance_forecast(&f, 4);
        let one = Matrix::identity(1);
        let c = average_covariance(&[path.clone()], &[one]).unwrap();
        assert!((c[(0, 0)] - path.iter().sum::<f64>() / 4.0).abs() < 1e-15);
    }

    #[test]
    fn two_asset_two_step_hand_oracle() {
        let paths = vec![vec![1.0f64, 4.0], vec![9.0, 16.0]];
        let r = Matrix::from_rows(&[vec![1.0, 0.5], vec![0.5, 1.0]]);
        let c = average_covariance(&paths, &[r]).unwrap();
        // f=1: off-diag 0.5·1·3, f=2: 0.5·2·4
        assert!((c[(0, 1)] - (1.5 + 4.0) / 2.0).abs() < 1e-15);
        assert!((c[(0, 0)] - 2.5).abs() < 1e-15);
        assert!((c[(1, 1)] - 12.5).abs() < 1e-15);
    }

    #[test]
    fn one_step_dcc_is_drd() {
        let fits = vec![fit(0.1, 0.1, 0.8, 1.0, 0.5), fit(0.2, 0.05, 0.9, 2.0, -1.0)];
        let qbar = Matrix::from_rows(&[vec![1.0, 0.3], vec![0.3, 1.0]]);
        let z = Matrix::from_rows(&[vec![0.4, -0.2], vec![1.0, 0.7]]);
        let p = dcc::filtered(&z, qbar, 0.05, 0.9, true);
        let c = dcc_forecast(&fits, &p, 1).unwrap();
        let d: Vec<f64> = fits.iter().map(|f| variance_forecast(f, 1)[0].sqrt()).collect();
        assert!(c.sub(&p.r_last.scale_sym(&d)).max_abs() < 1e-15);
    }
}
