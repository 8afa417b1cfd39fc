//! Forecast losses, per-regime aggregation, normality screening and the
//! Friedman / Nemenyi rank tests.

use std::collections::BTreeMap;
use std::io::Write;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::data::RegimeCalendar;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Real;

fn check_shapes<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Result<()> {
    if a.rows() != b.rows() || a.cols() != b.cols() || !a.is_square() {
        return Err(Error::Dimension {
            expected: a.rows() * a.cols(),
            actual: b.rows() * b.cols(),
        });
    }
    Ok(())
}

/// Euclidean distance between the upper triangles (diagonal included).
pub fn loss_euclidean<T: Real>(forecast: &Matrix<T>, realized: &Matrix<T>) -> Result<T> {
    check_shapes(forecast, realized)?;
    let n = forecast.rows();
    let mut s = T::zero();
    for i in 0..n {
        for j in i..n {
            let d = forecast[(i, j)] - realized[(i, j)];
            s += d * d;
        }
    }
    Ok(s.sqrt())
}

/// Frobenius norm of the difference.
pub fn loss_frobenius<T: Real>(forecast: &Matrix<T>, realized: &Matrix<T>) -> Result<T> {
    check_shapes(forecast, realized)?;
    Ok(forecast.sub(realized).frobenius_norm())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Euclidean,
    Frobenius,
}

impl Metric {
    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Euclidean => "euclidean",
            Metric::Frobenius => "frobenius",
        }
    }
}

/// Dated losses of one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossSeries {
    pub model: String,
    pub dates: Vec<NaiveDate>,
    pub euclidean: Vec<f64>,
    pub frobenius: Vec<f64>,
}

impl LossSeries {
    /// Losses of `forecasts[i]` against `realized[i]`.
    pub fn compute<T: Real>(
        model: impl Into<String>,
        dates: &[NaiveDate],
        forecasts: &[Matrix<T>],
        realized: &[Matrix<T>],
    ) -> Result<Self> {
        if forecasts.len() != dates.len() || realized.len() != dates.len() {
            return Err(Error::Alignment(format!(
                "{} dates, {} forecasts, {} targets",
                dates.len(),
                forecasts.len(),
                realized.len()
            )));
        }
        let mut euclidean = Vec::with_capacity(dates.len());
        let mut frobenius = Vec::with_capacity(dates.len());
        for (f, r) in forecasts.iter().zip(realized) {
            euclidean.push(loss_euclidean(f, r)?.as_f64());
            frobenius.push(loss_frobenius(f, r)?.as_f64());
        }
        Ok(Self {
            model: model.into(),
            dates: dates.to_vec(),
            euclidean,
            frobenius,
        })
    }

    pub fn len(&self) -> usize {
        self.dates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dates.is_empty()
    }

    pub fn values(&self, metric: Metric) -> &[f64] {
        match metric {
            Metric::Euclidean => &self.euclidean,
            Metric::Frobenius => &self.frobenius,
        }
    }

    pub fn mean(&self, metric: Metric) -> f64 {
        mean(self.values(metric))
    }
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Ranks of `row` (1 = smallest), ties receive their average rank.
pub fn average_ranks(row: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[a].total_cmp(&row[b]));
    let mut ranks = vec![0.0; row.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && row[idx[j + 1]] == row[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FriedmanResult {
    pub statistic: f64,
    pub p_value: f64,
    pub k: usize,
    pub n: usize,
    pub mean_ranks: Vec<f64>,
}

/// Friedman test on `losses[model][date]` (lower loss = better rank), with
/// the tie-corrected chi-square statistic on `k − 1` degrees of freedom.
pub fn friedman_test(losses: &[&[f64]]) -> Result<FriedmanResult> {
    let k = losses.len();
    if k < 3 {
        return Err(Error::insufficient(3, k, "models for the Friedman test"));
    }
    let n = losses[0].len();
    if let Some(bad) = losses.iter().find(|l| l.len() != n) {
        return Err(Error::Alignment(format!(
            "loss series of length {} and {n} are not aligned",
            bad.len()
        )));
    }
    if n < 2 {
        return Err(Error::insufficient(2, n, "dates for the Friedman test"));
    }
    let mut rank_sums = vec![0.0; k];
    let mut sum_sq = 0.0;
    let mut row = vec![0.0; k];
    for t in 0..n {
        for (m, l) in losses.iter().enumerate() {
            row[m] = l[t];
        }
        for (m, r) in average_ranks(&row).into_iter().enumerate() {
            rank_sums[m] += r;
            sum_sq += r * r;
        }
    }
    let (kf, nf) = (k as f64, n as f64);
    let centre = nf * (kf + 1.0) / 2.0;
    let num: f64 = rank_sums.iter().map(|r| (r - centre).powi(2)).sum::<f64>() * (kf - 1.0);
    let den = sum_sq - nf * kf * (kf + 1.0).powi(2) / 4.0;
    let statistic = if den <= 1e-12 * sum_sq { 0.0 } else { num / den };
    let chi = ChiSquared::new(kf - 1.0).map_err(|e| Error::Numerical(e.to_string()))?;
    let p_value = if statistic == 0.0 { 1.0 } else { chi.sf(statistic) };
    Ok(FriedmanResult {
        statistic,
        p_value,
        k,
        n,
        mean_ranks: rank_sums.iter().map(|r| r / nf).collect(),
    })
}

/// Mean per-date ranks of `losses[model][date]`; works for any `k ≥ 1`.
pub fn mean_ranks(losses: &[&[f64]]) -> Result<Vec<f64>> {
    let k = losses.len();
    let n = losses.first().map_or(0, |l| l.len());
    if n == 0 {
        return Err(Error::insufficient(1, 0, "dates for ranking"));
    }
    if let Some(bad) = losses.iter().find(|l| l.len() != n) {
        return Err(Error::Alignment(format!(
            "loss series of length {} and {n} are not aligned",
            bad.len()
        )));
    }
    let mut sums = vec![0.0; k];
    let mut row = vec![0.0; k];
    for t in 0..n {
        for (m, l) in losses.iter().enumerate() {
            row[m] = l[t];
        }
        for (s, r) in sums.iter_mut().zip(average_ranks(&row)) {
            *s += r;
        }
    }
    Ok(sums.iter().map(|s| s / n as f64).collect())
}

/// Friedman test on aligned loss series.
pub fn friedman_series(series: &[LossSeries], metric: Metric) -> Result<FriedmanResult> {
    check_aligned(series)?;
    let v: Vec<&[f64]> = series.iter().map(|s| s.values(metric)).collect();
    friedman_test(&v)
}

pub fn check_aligned(series: &[LossSeries]) -> Result<()> {
    if let Some(first) = series.first() {
        for s in &series[1..] {
            if s.dates != first.dates {
                return Err(Error::Alignment(format!(
                    "dates of {} and {} differ",
                    first.model, s.model
                )));
            }
        }
    }
    Ok(())
}

/// Studentized range quantiles divided by √2 for `k = 2..=20`, infinite
/// degrees of freedom.
const Q_05: [f64; 19] = [
    1.960, 2.343, 2.569, 2.728, 2.850, 2.949, 3.031, 3.102, 3.164, 3.219, 3.268, 3.313, 3.354, 3.391, 3.426, 3.458,
    3.489, 3.517, 3.544,
];
const Q_10: [f64; 19] = [
    1.645, 2.052, 2.291, 2.459, 2.589, 2.693, 2.780, 2.855, 2.920, 2.978, 3.030, 3.077, 3.120, 3.159, 3.196, 3.230,
    3.261, 3.291, 3.319,
];

/// Tabulated `q_α` for `k` models at `alpha ∈ {0.05, 0.10}`.
pub fn nemenyi_q(k: usize, alpha: f64) -> Result<f64> {
    let table = if (alpha - 0.05).abs() < 1e-12 {
        &Q_05
    } else if (alpha - 0.10).abs() < 1e-12 {
        &Q_10
    } else {
        return Err(Error::Config(format!("Nemenyi alpha must be 0.05 or 0.10, got {alpha}")));
    };
    if !(2..=20).contains(&k) {
        return Err(Error::Config(format!("Nemenyi table covers 2..=20 models, got {k}")));
    }
    Ok(table[k - 2])
}

/// `CD = q_α · √(k(k+1)/(6n))`.
pub fn nemenyi_cd(k: usize, n: usize, alpha: f64) -> Result<f64> {
    if n == 0 {
        return Err(Error::insufficient(1, 0, "samples for the Nemenyi test"));
    }
    let q = nemenyi_q(k, alpha)?;
    let (kf, nf) = (k as f64, n as f64);
    Ok(q * (kf * (kf + 1.0) / (6.0 * nf)).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NemenyiResult {
    pub cd: f64,
    pub alpha: f64,
    pub models: Vec<String>,
    pub mean_ranks: Vec<f64>,
    /// `diffs[i][j] = |rank_i − rank_j|`.
    pub diffs: Vec<Vec<f64>>,
    pub significant: Vec<Vec<bool>>,
}

/// Pairwise Nemenyi comparison of mean ranks over `n` samples.
pub fn nemenyi(models: &[String], mean_ranks: &[f64], n: usize, alpha: f64) -> Result<NemenyiResult> {
    if models.len() != mean_ranks.len() {
        return Err(Error::Dimension {
            expected: models.len(),
            actual: mean_ranks.len(),
        });
    }
    let cd = nemenyi_cd(models.len(), n, alpha)?;
    let diffs: Vec<Vec<f64>> = mean_ranks
        .iter()
        .map(|a| mean_ranks.iter().map(|b| (a - b).abs()).collect())
        .collect();
    let significant = diffs.iter().map(|r| r.iter().map(|&d| d > cd).collect()).collect();
    Ok(NemenyiResult {
        cd,
        alpha,
        models: models.to_vec(),
        mean_ranks: mean_ranks.to_vec(),
        diffs,
        significant,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalityResult {
    pub statistic: f64,
    pub p_value: f64,
    pub skewness: f64,
    pub kurtosis: f64,
}

/// Jarque–Bera test: `n/6 · (S² + (K − 3)²/4)` against `χ²(2)`.
pub fn normality_screen(x: &[f64]) -> Result<NormalityResult> {
    let n = x.len();
    if n < 20 {
        return Err(Error::insufficient(20, n, "observations for the normality screen"));
    }
    let m = mean(x);
    let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
    for &v in x {
        let d = v - m;
        let d2 = d * d;
        m2 += d2;
        m3 += d2 * d;
        m4 += d2 * d2;
    }
    let nf = n as f64;
    let (m2, m3, m4) = (m2 / nf, m3 / nf, m4 / nf);
    if m2 <= f64::EPSILON * m * m || m2 == 0.0 {
        return Err(Error::Numerical("normality screen on a constant series".into()));
    }
    let skewness = m3 / m2.powf(1.5);
    let kurtosis = m4 / (m2 * m2);
    let statistic = nf / 6.0 * (skewness * skewness + (kurtosis - 3.0).powi(2) / 4.0);
    Ok(NormalityResult {
        statistic,
        p_value: (-statistic / 2.0).exp(),
        skewness,
        kurtosis,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeRow {
    pub model: String,
    pub regime: String,
    pub metric: Metric,
    pub value: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RegimeTable {
    pub rows: Vec<RegimeRow>,
    /// Dates not covered by any segment.
    pub unassigned: Vec<NaiveDate>,
}

impl RegimeTable {
    pub fn get(&self, model: &str, regime: &str, metric: Metric) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.model == model && r.regime == regime && r.metric == metric)
            .map(|r| r.value)
    }

    /// `model,regime,metric,value` with values multiplied by `scale`.
    pub fn write_csv<W: Write>(&self, mut out: W, scale: f64) -> Result<()> {
        writeln!(out, "model,regime,metric,value")?;
        for r in &self.rows {
            writeln!(out, "{},{},{},{:.6}", r.model, r.regime, r.metric.as_str(), r.value * scale)?;
        }
        Ok(())
    }
}

/// Mean losses per (model, segment, metric), models and segments in input
/// order. Segments with no dates are omitted.
pub fn aggregate_by_regime(series: &[LossSeries], calendar: &RegimeCalendar) -> RegimeTable {
    let mut table = RegimeTable::default();
    let mut unassigned = BTreeMap::new();
    for s in series {
        for seg in &calendar.segments {
            let idx: Vec<usize> = (0..s.len()).filter(|&i| seg.contains(s.dates[i])).collect();
            if idx.is_empty() {
                continue;
            }
            for metric in [Metric::Euclidean, Metric::Frobenius] {
                let v = s.values(metric);
                let value = idx.iter().map(|&i| v[i]).sum::<f64>() / idx.len() as f64;
                table.rows.push(RegimeRow {
                    model: s.model.clone(),
                    regime: seg.label.clone(),
                    metric,
                    value,
                    count: idx.len(),
                });
            }
        }
        for &d in &s.dates {
            if !calendar.segments.iter().any(|seg| seg.contains(d)) {
                unassigned.insert(d, ());
            }
        }
    }
    table.unassigned = unassigned.into_keys().collect();
    table
}

/// Rank data for a critical-distance diagram.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CdDiagram {
    pub cd: f64,
    pub alpha: f64,
    pub n: usize,
    pub models: Vec<String>,
    pub mean_ranks: Vec<f64>,
}

impl CdDiagram {
    pub fn from_nemenyi(r: &NemenyiResult, n: usize) -> Self {
        Self {
            cd: r.cd,
            alpha: r.alpha,
            n,
            models: r.models.clone(),
            mean_ranks: r.mean_ranks.clone(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Standalone SVG: rank axis, CD bar, one labelled marker per model and
    /// bars joining models whose ranks differ by at most CD.
    pub fn to_svg(&self) -> String {
        let k = self.models.len().max(2) as f64;
        let (width, left, right) = (720.0, 60.0, 660.0);
        let x = |r: f64| left + (r - 1.0) / (k - 1.0) * (right - left);
        let axis_y = 80.0;
        let height = 140.0 + 22.0 * self.models.len() as f64;
        let mut s = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" font-family=\"sans-serif\" font-size=\"12\">\n"
        );
        s += &format!("<line x1=\"{left}\" y1=\"{axis_y}\" x2=\"{right}\" y2=\"{axis_y}\" stroke=\"black\"/>\n");
        for r in 1..=k as usize {
            let xr = x(r as f64);
            s += &format!(
                "<line x1=\"{xr:.1}\" y1=\"{}\" x2=\"{xr:.1}\" y2=\"{axis_y}\" stroke=\"black\"/><text x=\"{xr:.1}\" y=\"{}\" text-anchor=\"middle\">{r}</text>\n",
                axis_y - 6.0,
                axis_y - 10.0
            );
        }
        s += &format!(
            "<line x1=\"{left}\" y1=\"30\" x2=\"{:.1}\" y2=\"30\" stroke=\"red\" stroke-width=\"3\"/><text x=\"{left}\" y=\"22\">CD = {:.3}</text>\n",
            left + self.cd / (k - 1.0) * (right - left),
            self.cd
        );
        let mut order: Vec<usize> = (0..self.models.len()).collect();
        order.sort_by(|&a, &b| self.mean_ranks[a].total_cmp(&self.mean_ranks[b]));
        for (row, &m) in order.iter().enumerate() {
            let xr = x(self.mean_ranks[m]);
            let y = axis_y + 30.0 + 22.0 * row as f64;
            s += &format!(
                "<line x1=\"{xr:.1}\" y1=\"{axis_y}\" x2=\"{xr:.1}\" y2=\"{y:.1}\" stroke=\"gray\"/><circle cx=\"{xr:.1}\" cy=\"{y:.1}\" r=\"3\"/><text x=\"{:.1}\" y=\"{:.1}\">{} ({:.3})</text>\n",
                xr + 6.0,
                y + 4.0,
                xml_escape(&self.models[m]),
                self.mean_ranks[m]
            );
        }
        for (i, &a) in order.iter().enumerate() {
            let reach = order[i..]
                .iter()
                .take_while(|&&b| self.mean_ranks[b] - self.mean_ranks[a] <= self.cd)
                .last()
                .copied()
                .unwrap_or(a);
            if reach != a {
                s += &format!(
                    "<line x1=\"{:.1}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"black\" stroke-width=\"2\"/>\n",
                    x(self.mean_ranks[a]),
                    axis_y + 12.0 + 3.0 * i as f64,
                    x(self.mean_ranks[reach]),
                    axis_y + 12.0 + 3.0 * i as f64
                );
            }
        }
        s += "</svg>\n";
        s
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn losses_single_entry() {
        let a = Matrix::<f64>::identity(2);
        let mut b = a.clone();
        b[(0, 1)] = 0.5;
        b[(1, 0)] = 0.5;
        assert_eq!(loss_euclidean(&a, &a).unwrap(), 0.0);
        assert!((loss_euclidean(&a, &b).unwrap() - 0.5).abs() < 1e-15);
        assert!((loss_frobenius(&a, &b).unwrap() - 0.5 * 2f64.sqrt()).abs() < 1e-15);
        assert!(loss_frobenius(&a, &Matrix::identity(3)).is_err());
    }

    #[test]
    fn ranks_with_ties() {
        assert_eq!(average_ranks(&[3.0, 1.0, 2.0]), vec![3.0, 1.0, 2.0]);
        assert_eq!(average_ranks(&[1.0, 1.0, 2.0, 0.0]), vec![2.5, 2.5, 4.0, 1.0]);
    }

    #[test]
    fn cd_scaling_and_table_bounds() {
        let a = nemenyi_cd(5, 100, 0.05).unwrap();
        let b = nemenyi_cd(5, 400, 0.05).unwrap();
        assert!((a / b - 2.0).abs() < 1e-12);
        assert!(nemenyi_cd(2, 10, 0.10).unwrap() > 0.0);
        assert!(nemenyi_cd(21, 10, 0.05).is_err());
        assert!(nemenyi_cd(5, 10, 0.01).is_err());
    }

    #[test]
    fn jarque_bera_constant_is_error() {
        assert!(normality_screen(&[1.0; 30]).is_err());
        assert!(normality_screen(&[1.0; 5]).is_err());
    }
}
