//! Rolling moments, realised covariance matrices (the forecast targets),
//! full-sample covariance, per-entry standardisation and lookback sequences.
//!
//! Row `t` of a [`ReturnPanel`] is day `t`. A window of size `F` ending at
//! `t` covers rows `t+1−F ..= t`; every variance and covariance here uses the
//! `F − 1` denominator.

use std::io::Write;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::data::ReturnPanel;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RollingConfig {
    /// Realised-covariance window and forecast horizon `F`.
    pub window: usize,
    /// Number of past matrices before the current one in a sequence (`L`).
    pub lookback: usize,
}

impl RollingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window < 2 {
            return Err(Error::Config(format!("window must be >= 2, got {}", self.window)));
        }
        if self.lookback < 1 {
            return Err(Error::Config("lookback must be >= 1".into()));
        }
        Ok(())
    }
}

/// Dated covariance matrix in daily return-squared units.
#[derive(Debug, Clone, PartialEq)]
pub struct CovMatrix<T> {
    pub values: Matrix<T>,
    pub asof: NaiveDate,
    /// First and last date of the data the matrix was estimated from.
    pub window: (NaiveDate, NaiveDate),
}

impl<T: Real> CovMatrix<T> {
    pub fn dim(&self) -> usize {
        self.values.rows()
    }

    /// Checks `‖Σ − Σᵀ‖_max < 1e-12·scale` and `λ_min ≥ −1e-10·trace`.
    pub fn is_valid_covariance(&self) -> bool {
        is_valid_covariance(&self.values)
    }
}

/// Symmetry to 1e-12 (relative to the largest entry) and PSD to
/// `−1e-10·trace`.
pub fn is_valid_covariance<T: Real>(m: &Matrix<T>) -> bool {
    if !m.is_square() || !m.is_finite() {
        return false;
    }
    let scale = m.max_abs().max(T::min_positive_value());
    if m.max_asymmetry() > T::lit(1e-12) * scale {
        return false;
    }
    match m.min_eigenvalue() {
        Ok(l) => l >= -T::lit(1e-10) * m.trace().abs(),
        Err(_) => false,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Moments<T> {
    pub date: NaiveDate,
    pub mean: Vec<T>,
    pub std: Vec<T>,
}

fn check_window<T: Real>(panel: &ReturnPanel<T>, window: usize, t: usize) -> Result<()> {
    if window < 2 {
        return Err(Error::Config(format!("window must be >= 2, got {window}")));
    }
    if t >= panel.len() {
        return Err(Error::insufficient(t + 1, panel.len(), "rows up to the requested date"));
    }
    if t + 1 < window {
        return Err(Error::insufficient(window, t + 1, "history for rolling window"));
    }
    Ok(())
}

/// Column means over rows `start ..= end`.
pub fn range_mean<T: Real>(panel: &ReturnPanel<T>, start: usize, end: usize) -> Vec<T> {
    let n = panel.n_assets();
    let cnt = T::from_len(end + 1 - start);
    let mut mu = vec![T::zero(); n];
    for t in start..=end {
        for (m, &r) in mu.iter_mut().zip(panel.row(t)) {
            *m += r;
        }
    }
    mu.iter_mut().for_each(|m| *m /= cnt);
    mu
}

/// Sample covariance over rows `start ..= end` with the `n − 1` denominator.
pub fn range_cov<T: Real>(panel: &ReturnPanel<T>, start: usize, end: usize) -> Matrix<T> {
    let n = panel.n_assets();
    let mu = range_mean(panel, start, end);
    let denom = T::from_len(end - start);
    let mut cov = Matrix::zeros(n, n);
    let mut dev = vec![T::zero(); n];
    for t in start..=end {
        for (d, (&r, &m)) in dev.iter_mut().zip(panel.row(t).iter().zip(&mu)) {
            *d = r - m;
        }
        for i in 0..n {
            for j in i..n {
                cov[(i, j)] += dev[i] * dev[j];
            }
        }
    }
    for i in 0..n {
        for j in i..n {
            let v = cov[(i, j)] / denom;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    cov
}

/// Trailing mean `μ_t` over the `window` rows ending at `t`.
pub fn window_mean<T: Real>(panel: &ReturnPanel<T>, window: usize, t: usize) -> Result<Vec<T>> {
    check_window(panel, window, t)?;
    Ok(range_mean(panel, t + 1 - window, t))
}

/// Mean and standard deviation vectors for every date with a full window.
pub fn rolling_moments<T: Real>(panel: &ReturnPanel<T>, window: usize) -> Result<Vec<Moments<T>>> {
    if window > panel.len() {
        return Err(Error::insufficient(window, panel.len(), "history for rolling moments"));
    }
    (window - 1..panel.len())
        .map(|t| {
            check_window(panel, window, t)?;
            let cov = range_cov(panel, t + 1 - window, t);
            Ok(Moments {
                date: panel.dates[t],
                mean: range_mean(panel, t + 1 - window, t),
                std: cov.diag().into_iter().map(|v| v.sqrt()).collect(),
            })
        })
        .collect()
}

/// Realised covariance over the `window` rows ending at row `t`.
pub fn realized_cov<T: Real>(panel: &ReturnPanel<T>, window: usize, t: usize) -> Result<CovMatrix<T>> {
    check_window(panel, window, t)?;
    let start = t + 1 - window;
    Ok(CovMatrix {
        values: range_cov(panel, start, t),
        asof: panel.dates[t],
        window: (panel.dates[start], panel.dates[t]),
    })
}

pub fn realized_cov_at<T: Real>(
    panel: &ReturnPanel<T>,
    window: usize,
    date: NaiveDate,
) -> Result<CovMatrix<T>> {
    let t = panel
        .index_of(date)
        .ok_or_else(|| Error::Alignment(format!("{date} not in panel")))?;
    realized_cov(panel, window, t)
}

/// Realised covariance of the `horizon` rows after `t` (`t+1 ..= t+F`),
/// i.e. the evaluation target of a forecast made at `t`. `None` if the panel
/// ends too early.
pub fn forward_realized_cov<T: Real>(
    panel: &ReturnPanel<T>,
    horizon: usize,
    t: usize,
) -> Option<CovMatrix<T>> {
    let end = t + horizon;
    if horizon < 2 || end >= panel.len() {
        return None;
    }
    Some(CovMatrix {
        values: range_cov(panel, t + 1, end),
        asof: panel.dates[t],
        window: (panel.dates[t + 1], panel.dates[end]),
    })
}

/// Sample covariance of every row up to and including `upto`.
pub fn full_sample_cov<T: Real>(panel: &ReturnPanel<T>, upto: usize) -> Result<CovMatrix<T>> {
    if upto >= panel.len() {
        return Err(Error::insufficient(upto + 1, panel.len(), "rows for full-sample covariance"));
    }
    if upto < 1 {
        return Err(Error::insufficient(2, upto + 1, "observations for full-sample covariance"));
    }
    Ok(CovMatrix {
        values: range_cov(panel, 0, upto),
        asof: panel.dates[upto],
        window: (panel.dates[0], panel.dates[upto]),
    })
}

/// Realised covariance for every row `t ≥ window − 1`.
pub fn realized_series<T: Real>(panel: &ReturnPanel<T>, window: usize) -> Result<Vec<CovMatrix<T>>> {
    if window > panel.len() {
        return Err(Error::insufficient(window, panel.len(), "history for realised series"));
    }
    (window - 1..panel.len())
        .map(|t| realized_cov(panel, window, t))
        .collect()
}

/// One `date,i,j,value` row per matrix entry, for auditing.
pub fn write_cov_csv<T: Real, W: Write>(mut out: W, series: &[CovMatrix<T>]) -> Result<()> {
    writeln!(out, "date,i,j,value")?;
    for c in series {
        let n = c.dim();
        for i in 0..n {
            for j in 0..n {
                writeln!(out, "{},{},{},{:e}", c.asof, i, j, c.values[(i, j)])?;
            }
        }
    }
    Ok(())
}

/// Per-entry standardisation fitted on training matrices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler<T> {
    pub means: Matrix<T>,
    pub stds: Matrix<T>,
}

impl<T: Real> Scaler<T> {
    /// Fits one (mean, population std) pair per matrix entry. Entries whose
    /// std vanishes get std 1.
    pub fn fit<'a, I>(training: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a Matrix<T>>,
    {
        let mut it = training.into_iter();
        let first = it
            .next()
            .ok_or_else(|| Error::insufficient(2, 0, "training matrices for scaler"))?;
        let (r, c) = (first.rows(), first.cols());
        let mut means = first.clone();
        let mut m2 = Matrix::zeros(r, c);
        let mut count = 1usize;
        for m in it {
            if (m.rows(), m.cols()) != (r, c) {
                return Err(Error::Dimension {
                    expected: r,
                    actual: m.rows(),
                });
            }
            count += 1;
            let k = T::from_len(count);
            for ((mean, acc), &x) in means
                .as_mut_slice()
                .iter_mut()
                .zip(m2.as_mut_slice())
                .zip(m.as_slice())
            {
                let delta = x - *mean;
                *mean += delta / k;
                *acc += delta * (x - *mean);
            }
        }
        if count < 2 {
            return Err(Error::insufficient(2, count, "training matrices for scaler"));
        }
        let k = T::from_len(count);
        let stds = m2.zip_map(&means, |acc, mean| {
            let s = (acc / k).max(T::zero()).sqrt();
            if s == T::zero() || s <= T::epsilon() * T::lit(16.0) * mean.abs() {
                T::one()
            } else {
                s
            }
        });
        Ok(Self { means, stds })
    }

    pub fn apply(&self, m: &Matrix<T>) -> Matrix<T> {
        Matrix::from_fn(m.rows(), m.cols(), |i, j| {
            (m[(i, j)] - self.means[(i, j)]) / self.stds[(i, j)]
        })
    }

    pub fn invert(&self, m: &Matrix<T>) -> Matrix<T> {
        Matrix::from_fn(m.rows(), m.cols(), |i, j| {
            m[(i, j)] * self.stds[(i, j)] + self.means[(i, j)]
        })
    }

    pub fn dim(&self) -> usize {
        self.means.rows()
    }
}

pub fn fit_scaler<T: Real>(training: &[CovMatrix<T>]) -> Result<Scaler<T>> {
    Scaler::fit(training.iter().map(|c| &c.values))
}

/// Scaled matrices `D_{t−L}, …, D_t`, oldest first.
#[derive(Debug, Clone, PartialEq)]
pub struct CovSequence<T> {
    pub asof: NaiveDate,
    pub matrices: Vec<Matrix<T>>,
}

impl<T: Real> CovSequence<T> {
    pub fn len(&self) -> usize {
        self.matrices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matrices.is_empty()
    }
}

/// Stride-one sequences of `lookback + 1` scaled matrices; the sequence at
/// position `k` ends with `covs[k + lookback]`.
pub fn build_sequences<T: Real>(
    covs: &[CovMatrix<T>],
    lookback: usize,
    scaler: &Scaler<T>,
) -> Result<Vec<CovSequence<T>>> {
    if covs.len() < lookback + 1 {
        return Err(Error::insufficient(lookback + 1, covs.len(), "matrices for a sequence"));
    }
    let scaled: Vec<Matrix<T>> = covs.iter().map(|c| scaler.apply(&c.values)).collect();
    Ok((lookback..covs.len())
        .map(|end| CovSequence {
            asof: covs[end].asof,
            matrices: scaled[end - lookback..=end].to_vec(),
        })
        .collect())
}
