//! Derivative-free minimisation (Nelder–Mead) for the small likelihood
//! problems of the GARCH family.

use crate::scalar::Real;

#[derive(Debug, Clone)]
pub struct NelderMead<T> {
    /// Stop when the spread of objective values across the simplex drops
    /// below this.
    pub f_tol: T,
    pub max_iter: usize,
    /// Edge length of the initial simplex along each axis.
    pub step: T,
}

impl<T: Real> Default for NelderMead<T> {
    fn default() -> Self {
        Self {
            f_tol: T::lit(1e-8),
            max_iter: 2000,
            step: T::lit(0.5),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Minimum<T> {
    pub x: Vec<T>,
    pub value: T,
    pub iterations: usize,
    pub converged: bool,
}

impl<T: Real> NelderMead<T> {
    /// Minimises `f` from `x0`. Non-finite objective values are treated as
    /// `+inf`, so infeasible regions simply repel the simplex.
    pub fn minimize(&self, x0: &[T], mut f: impl FnMut(&[T]) -> T) -> Minimum<T> {
        let d = x0.len();
        let mut eval = |x: &[T]| {
            let v = f(x);
            if v.is_finite() {
                v
            } else {
                T::infinity()
            }
        };
        let mut simplex: Vec<Vec<T>> = Vec::with_capacity(d + 1);
        simplex.push(x0.to_vec());
        for i in 0..d {
            let mut p = x0.to_vec();
            p[i] += self.step;
            simplex.push(p);
        }
        let mut values: Vec<T> = simplex.iter().map(|p| eval(p)).collect();

        let (alpha, gamma, rho, sigma) = (T::one(), T::lit(2.0), T::lit(0.5), T::lit(0.5));
        let mut iterations = 0;
        let mut converged = false;
        while iterations < self.max_iter {
            iterations += 1;
            let mut order: Vec<usize> = (0..=d).collect();
            order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap_or(std::cmp::Ordering::Equal));
            simplex = order.iter().map(|&i| simplex[i].clone()).collect();
            values = order.iter().map(|&i| values[i]).collect();

            let best = values[0];
            let worst = values[d];
            if best.is_finite() && (worst - best).abs() <= self.f_tol {
                converged = true;
                break;
            }

            let mut centroid = vec![T::zero(); d];
            for p in &simplex[..d] {
                for (c, &v) in centroid.iter_mut().zip(p) {
                    *c += v;
                }
            }
            centroid.iter_mut().for_each(|c| *c /= T::from_len(d));
            let along = |coef: T| -> Vec<T> {
                centroid
                    .iter()
                    .zip(&simplex[d])
                    .map(|(&c, &w)| c + coef * (c - w))
                    .collect()
            };

            let xr = along(alpha);
            let fr = eval(&xr);
            if fr < values[0] {
                let xe = along(gamma);
                let fe = eval(&xe);
                if fe < fr {
                    simplex[d] = xe;
                    values[d] = fe;
                } else {
                    simplex[d] = xr;
                    values[d] = fr;
                }
                continue;
            }
            if fr < values[d - 1] {
                simplex[d] = xr;
                values[d] = fr;
                continue;
            }
            let (xc, fc) = if fr < values[d] {
                let xc = along(rho);
                let fc = eval(&xc);
                (xc, fc)
            } else {
                let xc = along(-rho);
                let fc = eval(&xc);
                (xc, fc)
            };
            if fc < values[d].min(fr) {
                simplex[d] = xc;
                values[d] = fc;
                continue;
            }
            // shrink toward the best vertex
            let b = simplex[0].clone();
            for i in 1..=d {
                for (v, &bv) in simplex[i].iter_mut().zip(&b) {
                    *v = bv + sigma * (*v - bv);
                }
                values[i] = eval(&simplex[i]);
            }
        }
        let (bi, _) = values
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(std::cmp::Ordering::Equal))
            .expect("non-empty simplex");
        Minimum {
            x: simplex[bi].clone(),
            value: values[bi],
            iterations,
            converged,
        }
    }
}

#[inline]
pub(crate) fn logistic<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

#[inline]
pub(crate) fn logit<T: Real>(p: T) -> T {
    (p / (T::one() - p)).ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rosenbrock() {
        let nm = NelderMead {
            f_tol: 1e-14,
            max_iter: 5000,
            step: 0.5,
        };
        let m = nm.minimize(&[-1.2f64, 1.0], |x: &[f64]| {
            (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2)
        });
        assert!(m.converged);
        assert!((m.x[0] - 1.0).abs() < 1e-4 && (m.x[1] - 1.0).abs() < 1e-4);
    }

    #[test]
    fn infeasible_region_repels() {
        let m = NelderMead::default().minimize(&[2.0f64], |x: &[f64]| {
            if x[0] < 1.0 {
                f64::NAN
            } else {
                (x[0] - 1.5).powi(2)
            }
        });
        assert!((m.x[0] - 1.5).abs() < 1e-3);
    }

    #[test]
    fn logistic_round_trip() {
        for p in [0.01f64, 0.3, 0.9] {
            assert!((logistic(logit(p)) - p).abs() < 1e-14);
        }
    }
}
