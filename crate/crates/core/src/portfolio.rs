//! Long-only minimum-variance weights, rebalancing backtests and the
//! out-of-sample variance / turnover metrics.

use std::io::Write;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, FisherSnedecor};

use crate::data::ReturnPanel;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Real;

pub const TRADING_DAYS: f64 = 252.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmvSolution {
    pub weights: Vec<f64>,
    /// All-zero covariance: uniform weights returned.
    pub degenerate: bool,
    pub iterations: usize,
}

/// Minimises `wᵀΣw` over the simplex with an active-set method: solve the
/// equality-constrained problem on the active set, drop assets with negative
/// weight, re-admit assets whose marginal risk undercuts the active ones.
pub fn solve_gmv<T: Real>(cov: &Matrix<T>) -> Result<GmvSolution> {
    if !cov.is_square() {
        return Err(Error::Dimension {
            expected: cov.rows(),
            actual: cov.cols(),
        });
    }
    if !cov.is_finite() {
        return Err(Error::Numerical("GMV on a covariance with non-finite entries".into()));
    }
    let n = cov.rows();
    if n == 0 {
        return Err(Error::insufficient(1, 0, "assets for GMV"));
    }
    let s = Matrix::from_fn(n, n, |i, j| 0.5 * (cov[(i, j)].as_f64() + cov[(j, i)].as_f64()));
    if s.max_abs() == 0.0 {
        return Ok(GmvSolution {
            weights: vec![1.0 / n as f64; n],
            degenerate: true,
            iterations: 0,
        });
    }
    let ridge = 1e-10 * s.trace().abs().max(f64::MIN_POSITIVE) / n as f64;
    let mut active: Vec<bool> = vec![true; n];
    let max_iter = 10 * n + 10;
    for iter in 1..=max_iter {
        let idx: Vec<usize> = (0..n).filter(|&i| active[i]).collect();
        let sub = Matrix::from_fn(idx.len(), idx.len(), |a, b| s[(idx[a], idx[b])]);
        let Some(x) = solve_bordered(&sub, ridge) else {
            break;
        };
        let mut w = vec![0.0; n];
        for (a, &i) in idx.iter().enumerate() {
            w[i] = x[a];
        }
        if idx.iter().any(|&i| w[i] < 0.0) {
            for &i in &idx {
                if w[i] < 0.0 {
                    active[i] = false;
                }
            }
            continue;
        }
        let g = s.matvec(&w);
        let lambda: f64 = w.iter().zip(&g).map(|(a, b)| a * b).sum();
        let tol = 1e-12 * norm(&g).max(f64::MIN_POSITIVE);
        let worst = (0..n)
            .filter(|&i| !active[i] && g[i] < lambda - tol)
            .min_by(|&a, &b| g[a].total_cmp(&g[b]));
        match worst {
            Some(i) => active[i] = true,
            None => {
                return Ok(GmvSolution {
                    weights: renormalize(w),
                    degenerate: false,
                    iterations: iter,
                })
            }
        }
    }
    projected_gradient(&s)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn renormalize(mut w: Vec<f64>) -> Vec<f64> {
    w.iter_mut().for_each(|x| *x = x.max(0.0));
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= s);
    w
}

/// Weights of the equality-constrained problem on `S`: solves the KKT
/// system `[S 1; 1ᵀ 0][w; μ] = [0; 1]`, which stays regular for singular `S`.
/// Retries with `ridge` on the diagonal when the system is singular.
fn solve_bordered(s: &Matrix<f64>, ridge: f64) -> Option<Vec<f64>> {
    let m = s.rows();
    let mut rhs = vec![0.0; m + 1];
    rhs[m] = 1.0;
    for r in [0.0, ridge] {
        let k = Matrix::from_fn(m + 1, m + 1, |i, j| match (i < m, j < m) {
            (true, true) => s[(i, j)] + if i == j { r } else { 0.0 },
            (false, false) => 0.0,
            _ => 1.0,
        });
        if let Ok(x) = k.solve(&rhs) {
            if x.iter().all(|v| v.is_finite()) {
                return Some(x[..m].to_vec());
            }
        }
    }
    None
}

/// Euclidean projection onto the probability simplex.
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (k, &x) in u.iter().enumerate() {
        cum += x;
        let t = (cum - 1.0) / (k + 1) as f64;
        if x - t > 0.0 {
            theta = t;
        }
    }
    v.iter().map(|x| (x - theta).max(0.0)).collect()
}

fn projected_gradient(s: &Matrix<f64>) -> Result<GmvSolution> {
    let n = s.rows();
    let lmax = s.sym_eigen()?.values.last().copied().unwrap_or(1.0).max(1e-300);
    let mut w = vec![1.0 / n as f64; n];
    let iters = 200_000;
    for k in 0..iters {
        let g = s.matvec(&w);
        let step = 1.0 / (lmax * (1.0 + (k as f64).sqrt() * 1e-3));
        let next: Vec<f64> = w.iter().zip(&g).map(|(a, b)| a - step * 2.0 * b).collect();
        let next = project_simplex(&next);
        let moved: f64 = next.iter().zip(&w).map(|(a, b)| (a - b).abs()).sum();
        w = next;
        if moved < 1e-15 {
            return Ok(GmvSolution {
                weights: renormalize(w),
                degenerate: false,
                iterations: k,
            });
        }
    }
    Ok(GmvSolution {
        weights: renormalize(w),
        degenerate: false,
        iterations: iters,
    })
}

/// Largest KKT violation of `w` for `min wᵀΣw` on the simplex, relative to
/// `‖Σw‖` (floored at `1e-6·max|Σ|` for zero-variance portfolios): spread
/// of marginal risk across held assets and undercutting by assets at zero.
pub fn kkt_residual(cov: &Matrix<f64>, w: &[f64]) -> f64 {
    let g = cov.matvec(w);
    let scale = norm(&g).max(1e-6 * cov.max_abs()).max(f64::MIN_POSITIVE);
    let lambda: f64 = w.iter().zip(&g).map(|(a, b)| a * b).sum();
    let mut worst: f64 = (w.iter().sum::<f64>() - 1.0).abs();
    for (i, &wi) in w.iter().enumerate() {
        worst = worst.max((-wi).max(0.0));
        let r = if wi > 0.0 {
            (g[i] - lambda).abs()
        } else {
            (lambda - g[i]).max(0.0)
        };
        worst = worst.max(r / scale);
    }
    worst
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rebalance {
    Daily,
    Weekly,
    Monthly,
}

impl Rebalance {
    pub const ALL: [Rebalance; 3] = [Rebalance::Daily, Rebalance::Weekly, Rebalance::Monthly];

    /// Trading days between rebalances.
    pub fn step(self) -> usize {
        match self {
            Rebalance::Daily => 1,
            Rebalance::Weekly => 5,
            Rebalance::Monthly => 21,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Rebalance::Daily => "daily",
            Rebalance::Weekly => "weekly",
            Rebalance::Monthly => "monthly",
        }
    }
}

impl std::str::FromStr for Rebalance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "daily" => Ok(Rebalance::Daily),
            "weekly" => Ok(Rebalance::Weekly),
            "monthly" => Ok(Rebalance::Monthly),
            _ => Err(Error::Config(format!("unknown rebalance frequency {s:?}"))),
        }
    }
}

/// One trading day of a backtest: weights chosen at the close of `decided`
/// and held over the next day, whose return is `ret`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub decided: NaiveDate,
    pub date: NaiveDate,
    pub rebalance: bool,
    /// Drifted weights just before the decision.
    pub pre_weights: Vec<f64>,
    /// Weights held over `date`.
    pub weights: Vec<f64>,
    pub ret: f64,
    /// `‖w_target − w_pre‖₁` at rebalances after the initial allocation.
    pub turnover: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BacktestLedger {
    pub strategy: String,
    pub freq: Rebalance,
    pub entries: Vec<LedgerEntry>,
}

impl BacktestLedger {
    pub fn returns(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.ret).collect()
    }

    /// Drifted weights after the last day.
    pub fn final_weights(&self, panel_next: &[f64]) -> Vec<f64> {
        match self.entries.last() {
            Some(e) => drift(&e.weights, panel_next),
            None => Vec::new(),
        }
    }

    /// `date,strategy,ret,turnover` (turnover empty on non-events).
    pub fn write_csv<W: Write>(&self, mut out: W, header: bool) -> Result<()> {
        if header {
            writeln!(out, "date,strategy,ret,turnover")?;
        }
        for e in &self.entries {
            let to = e.turnover.map(|v| format!("{v:e}")).unwrap_or_default();
            writeln!(out, "{},{},{:e},{}", e.date, self.strategy, e.ret, to)?;
        }
        Ok(())
    }
}

fn drift(w: &[f64], r: &[f64]) -> Vec<f64> {
    let grown: Vec<f64> = w.iter().zip(r).map(|(a, b)| a * (1.0 + b)).collect();
    let total: f64 = grown.iter().sum();
    grown.iter().map(|g| g / total).collect()
}

/// Simulates a strategy over decision rows `rows` (each must have a next
/// row): rebalance on every `freq.step()`-th row from the first, otherwise
/// let weights drift with realised returns.
pub fn simulate<T: Real>(
    strategy: impl Into<String>,
    panel: &ReturnPanel<T>,
    rows: &[usize],
    freq: Rebalance,
    target: impl FnMut(usize) -> Result<Vec<f64>>,
) -> Result<BacktestLedger> {
    simulate_schedule(strategy, panel, rows, freq, |i| i % freq.step() == 0, target)
}

/// As [`simulate`] with an explicit schedule: `rebalance(i)` decides
/// whether the `i`-th decision row trades. Row 0 always trades.
pub fn simulate_schedule<T: Real>(
    strategy: impl Into<String>,
    panel: &ReturnPanel<T>,
    rows: &[usize],
    freq: Rebalance,
    rebalance_at: impl Fn(usize) -> bool,
    mut target: impl FnMut(usize) -> Result<Vec<f64>>,
) -> Result<BacktestLedger> {
    let n = panel.n_assets();
    let mut entries = Vec::with_capacity(rows.len());
    let mut held: Vec<f64> = vec![1.0 / n as f64; n];
    for (i, &t) in rows.iter().enumerate() {
        if t + 1 >= panel.len() {
            return Err(Error::Alignment(format!(
                "decision row {t} has no following return in a panel of {} rows",
                panel.len()
            )));
        }
        let pre = held.clone();
        let rebalance = i == 0 || rebalance_at(i);
        let (weights, turnover) = if rebalance {
            let w = target(t)?;
            if w.len() != n {
                return Err(Error::Dimension {
                    expected: n,
                    actual: w.len(),
                });
            }
            let to = (i > 0).then(|| w.iter().zip(&pre).map(|(a, b)| (a - b).abs()).sum());
            (w, to)
        } else {
            (pre.clone(), None)
        };
        let r: Vec<f64> = panel.row(t + 1).iter().map(|v| v.as_f64()).collect();
        let ret: f64 = weights.iter().zip(&r).map(|(a, b)| a * b).sum();
        held = drift(&weights, &r);
        entries.push(LedgerEntry {
            decided: panel.dates[t],
            date: panel.dates[t + 1],
            rebalance,
            pre_weights: pre,
            weights,
            ret,
            turnover,
        });
    }
    Ok(BacktestLedger {
        strategy: strategy.into(),
        freq,
        entries,
    })
}

/// GMV backtest from forecasts: `forecast(row)` must exist on every
/// rebalance row.
pub fn run_backtest<'a, T: Real + 'a>(
    strategy: impl Into<String>,
    panel: &ReturnPanel<T>,
    rows: &[usize],
    freq: Rebalance,
    forecast: impl Fn(usize) -> Option<&'a Matrix<T>>,
) -> Result<BacktestLedger> {
    simulate(strategy, panel, rows, freq, |t| {
        let cov = forecast(t).ok_or_else(|| {
            Error::Alignment(format!("no forecast for rebalance date {}", panel.dates[t]))
        })?;
        Ok(solve_gmv(cov)?.weights)
    })
}

/// 1/N benchmark.
pub fn equal_weight_ledger<T: Real>(panel: &ReturnPanel<T>, rows: &[usize], freq: Rebalance) -> Result<BacktestLedger> {
    let n = panel.n_assets();
    simulate("equal_weight", panel, rows, freq, |_| Ok(vec![1.0 / n as f64; n]))
}

fn sample_variance(x: &[f64]) -> f64 {
    let m = x.iter().sum::<f64>() / x.len() as f64;
    x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() - 1) as f64
}

/// Sample variance of daily portfolio returns times 252.
pub fn annualized_variance(ledger: &BacktestLedger) -> Result<f64> {
    if ledger.entries.len() < 2 {
        return Err(Error::insufficient(2, ledger.entries.len(), "ledger returns"));
    }
    Ok(sample_variance(&ledger.returns()) * TRADING_DAYS)
}

/// Mean `‖w_target − w_pre‖₁` over rebalances after the initial allocation
/// (zero when there are none).
pub fn turnover(ledger: &BacktestLedger) -> Result<f64> {
    if ledger.entries.is_empty() {
        return Err(Error::insufficient(1, 0, "ledger entries"));
    }
    let events: Vec<f64> = ledger.entries.iter().filter_map(|e| e.turnover).collect();
    Ok(if events.is_empty() {
        0.0
    } else {
        events.iter().sum::<f64>() / events.len() as f64
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FTest {
    pub statistic: f64,
    pub df1: usize,
    pub df2: usize,
    /// One-sided p-value for `var_a < var_b`.
    pub p_value: f64,
}

/// `F = s²_a / s²_b` on daily returns.
pub fn variance_f_test(a: &BacktestLedger, b: &BacktestLedger) -> Result<FTest> {
    f_test(&a.returns(), &b.returns())
}

pub fn f_test(a: &[f64], b: &[f64]) -> Result<FTest> {
    for x in [a, b] {
        if x.len() < 30 {
            return Err(Error::insufficient(30, x.len(), "returns for the variance F-test"));
        }
    }
    let (va, vb) = (sample_variance(a), sample_variance(b));
    if vb <= 0.0 {
        return Err(Error::Numerical("zero variance in the F-test denominator".into()));
    }
    let statistic = va / vb;
    let (df1, df2) = (a.len() - 1, b.len() - 1);
    let dist = FisherSnedecor::new(df1 as f64, df2 as f64).map_err(|e| Error::Numerical(e.to_string()))?;
    Ok(FTest {
        statistic,
        df1,
        df2,
        p_value: dist.cdf(statistic),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub strategy: String,
    pub freq: Rebalance,
    pub variance: f64,
    pub turnover: f64,
    /// F-test against the 1/N ledger of the same frequency.
    pub f_test: Option<FTest>,
}

pub fn summarize(ledger: &BacktestLedger, benchmark: Option<&BacktestLedger>) -> Result<SummaryRow> {
    let f_test = match benchmark {
        Some(b) if b.strategy != ledger.strategy => Some(variance_f_test(ledger, b)?),
        _ => None,
    };
    Ok(SummaryRow {
        strategy: ledger.strategy.clone(),
        freq: ledger.freq,
        variance: annualized_variance(ledger)?,
        turnover: turnover(ledger)?,
        f_test,
    })
}

/// `strategy,freq,variance,turnover,f_stat,p_value`.
pub fn write_summary_csv<W: Write>(mut out: W, rows: &[SummaryRow]) -> Result<()> {
    writeln!(out, "strategy,freq,variance,turnover,f_stat,p_value")?;
    for r in rows {
        let (f, p) = match r.f_test {
            Some(t) => (format!("{:.6}", t.statistic), format!("{:.6e}", t.p_value)),
            None => (String::new(), String::new()),
        };
        writeln!(
            out,
            "{},{},{:.6e},{:.6},{},{}",
            r.strategy,
            r.freq.as_str(),
            r.variance,
            r.turnover,
            f,
            p
        )?;
    }
    Ok(())
}
