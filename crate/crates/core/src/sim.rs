//! Synthetic return generators with known covariance dynamics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data::ReturnPanel;
use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normals<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// GARCH(1,1) residuals `e_t = √h_t ε_t` after discarding `burn` draws.
pub fn simulate_garch<R: Rng>(rng: &mut R, omega: f64, alpha: f64, beta: f64, len: usize, burn: usize) -> Vec<f64> {
    let mut h = omega / (1.0 - alpha - beta);
    let mut e = 0.0;
    let mut out = Vec::with_capacity(len);
    for t in 0..len + burn {
        h = omega + alpha * e * e + beta * h;
        let z: f64 = rng.sample(StandardNormal);
        e = h.sqrt() * z;
        if t >= burn {
            out.push(e);
        }
    }
    out
}

/// `rows` independent draws from `N(0, cov)`, one per row.
pub fn mvn_rows<R: Rng>(rng: &mut R, cov: &Matrix<f64>, rows: usize) -> Result<Matrix<f64>> {
    let l = cov
        .cholesky()
        .ok_or_else(|| Error::Numerical("simulation covariance is not positive definite".into()))?;
    let n = cov.rows();
    let mut out = Vec::with_capacity(rows * n);
    for _ in 0..rows {
        let z = normals(rng, n);
        out.extend(l.matvec(&z));
    }
    Ok(Matrix::from_vec(rows, n, out))
}

/// Equicorrelated covariance with the given volatilities.
pub fn equicorrelated(vols: &[f64], rho: f64) -> Matrix<f64> {
    Matrix::from_fn(vols.len(), vols.len(), |i, j| {
        let r = if i == j { 1.0 } else { rho };
        r * vols[i] * vols[j]
    })
}

/// Returns whose covariance switches between a calm and a turbulent regime
/// (Markov chain with expected regime length `mean_stay` days). Also returns
/// the true covariance of every day.
pub fn regime_switching_panel(
    n_assets: usize,
    days: usize,
    mean_stay: f64,
    seed: u64,
) -> Result<(ReturnPanel<f64>, Vec<Matrix<f64>>)> {
    let mut rng = rng(seed);
    let calm_vols: Vec<f64> = (0..n_assets).map(|i| 0.008 + 0.002 * i as f64).collect();
    let calm = equicorrelated(&calm_vols, 0.2);
    let turb_vols: Vec<f64> = calm_vols.iter().map(|v| v * 2.5).collect();
    let turb = equicorrelated(&turb_vols, 0.7);
    let chol = [
        calm.cholesky().expect("calm regime PD"),
        turb.cholesky().expect("turbulent regime PD"),
    ];
    let covs = [calm, turb];
    let p_switch = 1.0 / mean_stay.max(1.0);
    let mut state = 0usize;
    let mut data = Vec::with_capacity(days * n_assets);
    let mut truth = Vec::with_capacity(days);
    for _ in 0..days {
        if rng.random::<f64>() < p_switch {
            state = 1 - state;
        }
        data.extend(chol[state].matvec(&normals(&mut rng, n_assets)));
        truth.push(covs[state].clone());
    }
    Ok((ReturnPanel::synthetic(Matrix::from_vec(days, n_assets, data)), truth))
}

/// Returns whose covariance drifts slowly: log-volatilities follow a
/// persistent AR(1) and the common correlation follows a bounded AR(1).
pub fn persistent_panel(
    n_assets: usize,
    days: usize,
    persistence: f64,
    seed: u64,
) -> Result<(ReturnPanel<f64>, Vec<Matrix<f64>>)> {
    let mut rng = rng(seed);
    let base: Vec<f64> = (0..n_assets).map(|i| (0.01 + 0.002 * i as f64).ln()).collect();
    let mut lv = base.clone();
    let mut rho_state = 0.0f64;
    let vol_shock = 0.6 * (1.0 - persistence * persistence).sqrt();
    let rho_shock = 1.2 * (1.0 - persistence * persistence).sqrt();
    let mut data = Vec::with_capacity(days * n_assets);
    let mut truth = Vec::with_capacity(days);
    for _ in 0..days {
        let common: f64 = rng.sample(StandardNormal);
        for (l, &b) in lv.iter_mut().zip(&base) {
            let own: f64 = rng.sample(StandardNormal);
            *l = b + persistence * (*l - b) + vol_shock * (0.7 * common + 0.3 * own);
        }
        let eps: f64 = rng.sample(StandardNormal);
        rho_state = persistence * rho_state + rho_shock * eps;
        let rho = 0.4 + 0.35 * rho_state.tanh();
        let vols: Vec<f64> = lv.iter().map(|l| l.exp()).collect();
        let cov = equicorrelated(&vols, rho);
        let l = cov.cholesky().expect("equicorrelated with rho in (0,1) is PD");
        data.extend(l.matvec(&normals(&mut rng, n_assets)));
        truth.push(cov);
    }
    Ok((ReturnPanel::synthetic(Matrix::from_vec(days, n_assets, data)), truth))
}
