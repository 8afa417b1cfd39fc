//! Univariate GARCH(1,1) by Gaussian quasi-maximum likelihood.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::{logistic, logit, NelderMead};
use crate::scalar::Real;

/// Persistence `α + β` is kept below `1 − STATIONARITY_MARGIN`.
pub const STATIONARITY_MARGIN: f64 = 1e-6;

/// Default minimum residual count for a fit.
pub const MIN_OBS: usize = 50;

const FALLBACK: (f64, f64) = (0.05, 0.90);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GarchParams<T> {
    pub omega: T,
    pub alpha: T,
    pub beta: T,
    /// Conditional variance at the last fitted observation.
    pub h_last: T,
}

impl<T: Real> GarchParams<T> {
    pub fn persistence(&self) -> T {
        self.alpha + self.beta
    }

    pub fn unconditional_variance(&self) -> T {
        self.omega / (T::one() - self.persistence())
    }

    pub fn is_admissible(&self) -> bool {
        self.omega > T::zero()
            && self.alpha >= T::zero()
            && self.beta >= T::zero()
            && self.persistence() < T::one() - T::lit(STATIONARITY_MARGIN) * T::lit(0.5)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GarchFit<T> {
    pub params: GarchParams<T>,
    /// Residual `e_t` of the last observation; drives the one-step update.
    pub last_residual: T,
    /// `z_s = e_s / √h_s` over the fit sample.
    pub std_residuals: Vec<T>,
    pub converged: bool,
    /// True when the optimiser failed and the fixed (0.05, 0.90) fallback
    /// was used.
    pub fallback: bool,
}

/// `h_{t+f} = Σ_{j<f} ω(α+β)^j + (α+β)^f h_t` for `f = 1..=steps`, anchored
/// at `params.h_last`.
pub fn garch_variance_path<T: Real>(params: &GarchParams<T>, steps: usize) -> Vec<T> {
    let p = params.persistence();
    let mut h = params.h_last;
    (0..steps)
        .map(|_| {
            h = params.omega + p * h;
            h
        })
        .collect()
}

/// Variance forecasts for `t+1 ..= t+steps`: first the one-step update
/// `ω + α e_t² + β h_t`, then the geometric recursion from there.
pub fn variance_forecast<T: Real>(fit: &GarchFit<T>, steps: usize) -> Vec<T> {
    if steps == 0 {
        return Vec::new();
    }
    let p = &fit.params;
    let h1 = p.omega + p.alpha * fit.last_residual * fit.last_residual + p.beta * p.h_last;
    let anchored = GarchParams { h_last: h1, ..*p };
    let mut out = Vec::with_capacity(steps);
    out.push(h1);
    out.extend(garch_variance_path(&anchored, steps - 1));
    out
}

/// Conditional variances `h_0 = h0`, `h_s = ω + α e²_{s−1} + β h_{s−1}`.
pub fn conditional_variances<T: Real>(omega: T, alpha: T, beta: T, resid: &[T], h0: T) -> Vec<T> {
    let mut h = h0;
    let mut out = Vec::with_capacity(resid.len());
    for (s, _) in resid.iter().enumerate() {
        if s > 0 {
            h = omega + alpha * resid[s - 1] * resid[s - 1] + beta * h;
        }
        out.push(h);
    }
    out
}

/// Mean Gaussian negative log-likelihood (without the constant) of unit-
/// variance-scaled residuals `x` with `h_0 = 1`.
fn scaled_nll<T: Real>(x: &[T], omega: T, alpha: T, beta: T) -> T {
    let mut h = T::one();
    let mut s = T::zero();
    for t in 0..x.len() {
        if t > 0 {
            h = omega + alpha * x[t - 1] * x[t - 1] + beta * h;
        }
        if !(h > T::zero()) {
            return T::infinity();
        }
        s += h.ln() + x[t] * x[t] / h;
    }
    s / T::from_len(2 * x.len())
}

fn unpack<T: Real>(theta: &[T]) -> (T, T, T) {
    let p = (T::one() - T::lit(STATIONARITY_MARGIN)) * logistic(theta[1]);
    let alpha = p * logistic(theta[2]);
    (theta[0].exp(), alpha, p - alpha)
}

fn pack<T: Real>(omega: T, alpha: T, beta: T) -> Vec<T> {
    let p = alpha + beta;
    vec![
        omega.ln(),
        logit(p / (T::one() - T::lit(STATIONARITY_MARGIN))),
        logit(alpha / p),
    ]
}

pub fn fit_garch11<T: Real>(resid: &[T]) -> Result<GarchFit<T>> {
    fit_garch11_with(resid, MIN_OBS)
}

/// QMLE over `(ln ω, logit persistence, logit α-share)`, several starting
/// points, Nelder–Mead on each. Residuals are rescaled to unit sample
/// variance during the search.
pub fn fit_garch11_with<T: Real>(resid: &[T], min_obs: usize) -> Result<GarchFit<T>> {
    let n = resid.len();
    if n < min_obs.max(2) {
        return Err(Error::insufficient(min_obs.max(2), n, "residuals for GARCH fit"));
    }
    let mean = resid.iter().copied().sum::<T>() / T::from_len(n);
    let var = resid.iter().map(|&e| (e - mean) * (e - mean)).sum::<T>() / T::from_len(n - 1);
    if !(var > T::zero()) || !var.is_finite() {
        return Err(Error::Numerical(
            "degenerate GARCH likelihood: residuals have zero variance".into(),
        ));
    }
    let sd = var.sqrt();
    let x: Vec<T> = resid.iter().map(|&e| e / sd).collect();

    let nm = NelderMead {
        f_tol: T::lit(1e-10),
        max_iter: 3000,
        step: T::lit(0.5),
    };
    let starts = [(0.05, 0.90), (0.10, 0.80), (0.03, 0.95), (0.15, 0.50)];
    let mut best: Option<(T, Vec<T>)> = None;
    for (a, b) in starts {
        let (a, b) = (T::lit(a), T::lit(b));
        let theta0 = pack(T::one() - a - b, a, b);
        let m = nm.minimize(&theta0, |th| {
            let (o, a, b) = unpack(th);
            scaled_nll(&x, o, a, b)
        });
        if m.converged && m.value.is_finite() && best.as_ref().is_none_or(|(v, _)| m.value < *v) {
            best = Some((m.value, m.x));
        }
    }

    let (omega_s, alpha, beta, converged) = match best {
        Some((_, theta)) => {
            let (o, a, b) = unpack(&theta);
            (o, a, b, true)
        }
        None => {
            let (a, b) = (T::lit(FALLBACK.0), T::lit(FALLBACK.1));
            (T::one() - a - b, a, b, false)
        }
    };
    let omega = omega_s * var;
    let h = conditional_variances(omega, alpha, beta, resid, var);
    let std_residuals = resid.iter().zip(&h).map(|(&e, &h)| e / h.sqrt()).collect();
    Ok(GarchFit {
        params: GarchParams {
            omega,
            alpha,
            beta,
            h_last: *h.last().expect("non-empty"),
        },
        last_residual: resid[n - 1],
        std_residuals,
        converged,
        fallback: !converged,
    })
}

impl<T: Real> GarchFit<T> {
    /// Re-runs the variance filter over `resid` with these parameters fixed,
    /// anchoring `h_0` at the sample variance of `resid`.
    pub fn refilter(&self, resid: &[T]) -> Result<Self> {
        let n = resid.len();
        if n < 2 {
            return Err(Error::insufficient(2, n, "residuals for GARCH filter"));
        }
        let mean = resid.iter().copied().sum::<T>() / T::from_len(n);
        let var = resid.iter().map(|&e| (e - mean) * (e - mean)).sum::<T>() / T::from_len(n - 1);
        let p = &self.params;
        let h = conditional_variances(p.omega, p.alpha, p.beta, resid, var);
        Ok(Self {
            params: GarchParams {
                h_last: h[n - 1],
                ..*p
            },
            last_residual: resid[n - 1],
            std_residuals: resid.iter().zip(&h).map(|(&e, &h)| e / h.sqrt()).collect(),
            converged: self.converged,
            fallback: self.fallback,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variance_path_limits() {
        let p = GarchParams {
            omega: 0.05f64,
            alpha: 0.05,
            beta: 0.90,
            h_last: 3.0,
        };
        let path = garch_variance_path(&p, 2000);
        assert!((path[1999] - 0.05 / 0.05).abs() < 1e-9);

        let memoryless = GarchParams {
            omega: 0.7,
            alpha: 0.0,
            beta: 0.0,
            h_last: 9.0,
        };
        assert!(garch_variance_path(&memoryless, 5).iter().all(|&h| h == 0.7));
    }

    #[test]
    fn variance_path_hand_geometric_sum() {
        let p = GarchParams {
            omega: 0.1f64,
            alpha: 0.1,
            beta: 0.8,
            h_last: 2.0,
        };
        let path = garch_variance_path(&p, 3);
        // f=3: 0.1(1 + 0.9 + 0.81) + 0.729·2
        let expect = 0.1 * (1.0 + 0.9 + 0.81) + 0.729 * 2.0;
        assert!((path[2] - expect).abs() < 1e-14);
        assert!((path[0] - (0.1 + 0.9 * 2.0)).abs() < 1e-15);
        assert!(path.iter().all(|&h| h > 0.0));
    }

    #[test]
    fn one_step_update_then_recursion() {
        let fit = GarchFit {
            params: GarchParams {
                omega: 0.1f64,
                alpha: 0.2,
                beta: 0.7,
                h_last: 1.0,
            },
            last_residual: 2.0,
            std_residuals: vec![],
            converged: true,
            fallback: false,
        };
        let f = variance_forecast(&fit, 3);
        let h1: f64 = 0.1 + 0.2 * 4.0 + 0.7;
        assert_eq!(f[0], h1);
        assert!((f[1] - (0.1 + 0.9 * h1)).abs() < 1e-15);
        assert!((f[2] - (0.1 + 0.9 * (0.1 + 0.9 * h1))).abs() < 1e-15);
    }

    #[test]
    fn zero_residuals_rejected() {
        assert!(matches!(fit_garch11(&[0.0f64; 100]), Err(Error::Numerical(_))));
        assert!(matches!(fit_garch11(&[0.1f64; 10]), Err(Error::InsufficientData { .. })));
    }

    #[test]
    fn transform_round_trip() {
        let th = pack(0.2f64, 0.07, 0.9);
        let (o, a, b) = unpack(&th);
        assert!((o - 0.2).abs() < 1e-14 && (a - 0.07).abs() < 1e-14 && (b - 0.9).abs() < 1e-14);
    }
}
