//! Analytical nonlinear shrinkage of a sample correlation matrix's
//! eigenvalues (Epanechnikov kernel, closed-form Hilbert transform).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NlShrinkConfig {
    /// Global bandwidth is `T^(−bandwidth_exponent)`.
    pub bandwidth_exponent: f64,
}

impl Default for NlShrinkConfig {
    fn default() -> Self {
        Self {
            bandwidth_exponent: 0.35,
        }
    }
}

/// Shrunk eigenvalues `λ*` for sample eigenvalues `λ` at concentration
/// `c = N/T < 1`.
pub fn shrink_eigenvalues(lambda: &[f64], sample_size: usize, cfg: &NlShrinkConfig) -> Result<Vec<f64>> {
    let n = lambda.len();
    if sample_size == 0 || n == 0 {
        return Err(Error::insufficient(1, sample_size, "observations for nonlinear shrinkage"));
    }
    let c = n as f64 / sample_size as f64;
    if c >= 1.0 {
        return Err(Error::Numerical(format!(
            "nonlinear shrinkage needs N/T < 1, got {n}/{sample_size}"
        )));
    }
    if lambda.iter().any(|&l| !(l > 0.0) || !l.is_finite()) {
        return Err(Error::Numerical("nonlinear shrinkage needs positive eigenvalues".into()));
    }
    let h = (sample_size as f64).powf(-cfg.bandwidth_exponent);
    let pi = std::f64::consts::PI;
    let s5 = 5f64.sqrt();
    let out = lambda
        .iter()
        .map(|&li| {
            let (mut f, mut hf) = (0.0, 0.0);
            for &lj in lambda {
                let bw = h * lj;
                let x = (li - lj) / bw;
                let k = 1.0 - x * x / 5.0;
                f += 3.0 / (4.0 * s5) * k.max(0.0) / bw;
                let log_term = if k.abs() < 1e-12 {
                    0.0
                } else {
                    k * ((s5 - x) / (s5 + x)).abs().ln()
                };
                hf += (-3.0 / (10.0 * pi) * x + 3.0 / (4.0 * s5 * pi) * log_term) / bw;
            }
            f /= n as f64;
            hf /= n as f64;
            let a = pi * c * li * f;
            let b = 1.0 - c - pi * c * li * hf;
            li / (a * a + b * b)
        })
        .collect();
    Ok(out)
}

/// Shrinks the spectrum of a correlation matrix estimated from
/// `sample_size` observations and rescales the result to unit diagonal.
pub fn nl_shrink_correlation<T: Real>(
    corr: &Matrix<T>,
    sample_size: usize,
    cfg: &NlShrinkConfig,
) -> Result<Matrix<T>> {
    if !corr.is_square() {
        return Err(Error::Dimension {
            expected: corr.rows(),
            actual: corr.cols(),
        });
    }
    let eig = corr.sym_eigen()?;
    let floor = 1e-12 * corr.trace().as_f64().max(1e-300);
    let lambda: Vec<f64> = eig.values.iter().map(|v| v.as_f64().max(floor)).collect();
    let shrunk = shrink_eigenvalues(&lambda, sample_size, cfg)?;
    let vals: Vec<T> = shrunk.into_iter().map(T::lit).collect();
    Ok(eig.reconstruct(&vals).to_correlation().symmetrize())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_is_fixed_point() {
        let i = Matrix::<f64>::identity(6);
        let s = nl_shrink_correlation(&i, 100, &NlShrinkConfig::default()).unwrap();
        assert!(s.sub(&i).max_abs() < 1e-8);
    }

    #[test]
    fn rejects_high_concentration() {
        let i = Matrix::<f64>::identity(6);
        assert!(nl_shrink_correlation(&i, 6, &NlShrinkConfig::default()).is_err());
    }

    #[test]
    fn shrinkage_pulls_eigenvalues_together() {
        let l = [0.4, 0.7, 1.0, 1.3, 1.6];
        let s = shrink_eigenvalues(&l, 50, &NlShrinkConfig::default()).unwrap();
        let var = |v: &[f64]| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            v.iter().map(|x| (x - m).powi(2)).sum::<f64>()
        };
        assert!(var(&s) < var(&l));
        assert!(s.windows(2).all(|w| w[0] <= w[1]));
    }
}
