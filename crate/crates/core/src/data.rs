//! Price and risk-free loading, calendar alignment, return construction and
//! market-regime calendars.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::Read;
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Real;

/// Trading days per year used to de-annualise the risk-free rate.
pub const TRADING_DAYS_PER_YEAR: f64 = 252.0;

/// Risk-free quotes older than this many calendar days are not carried
/// forward.
pub const MAX_RISKFREE_STALENESS_DAYS: i64 = 10;

/// Column names of the long-format price file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnMap {
    pub date: String,
    pub ticker: String,
    pub price: String,
}

impl Default for ColumnMap {
    fn default() -> Self {
        Self {
            date: "date".into(),
            ticker: "ticker".into(),
            price: "adj_close".into(),
        }
    }
}

/// Aligned adjusted closes, one row per trading day.
#[derive(Debug, Clone, PartialEq)]
pub struct PricePanel<T> {
    pub dates: Vec<NaiveDate>,
    pub tickers: Vec<String>,
    pub prices: Matrix<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ReturnMode {
    Raw,
    #[default]
    Excess,
}

impl fmt::Display for ReturnMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ReturnMode::Raw => f.write_str("raw"),
            ReturnMode::Excess => f.write_str("excess"),
        }
    }
}

/// Simple daily returns; row `t` is the return realised on `dates[t]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReturnPanel<T> {
    pub dates: Vec<NaiveDate>,
    pub tickers: Vec<String>,
    pub returns: Matrix<T>,
    pub mode: ReturnMode,
}

impl<T: Real> ReturnPanel<T> {
    /// Wraps an in-memory return matrix. Dates must be strictly increasing.
    pub fn new(
        dates: Vec<NaiveDate>,
        tickers: Vec<String>,
        returns: Matrix<T>,
        mode: ReturnMode,
    ) -> Result<Self> {
        if returns.rows() != dates.len() {
            return Err(Error::Dimension {
                expected: dates.len(),
                actual: returns.rows(),
            });
        }
        if returns.cols() != tickers.len() {
            return Err(Error::Dimension {
                expected: tickers.len(),
                actual: returns.cols(),
            });
        }
        if dates.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Alignment("dates must be strictly increasing".into()));
        }
        Ok(Self {
            dates,
            tickers,
            returns,
            mode,
        })
    }

    /// Panel over consecutive business days starting 2000-01-03 with
    /// generated tickers; handy for simulations.
    pub fn synthetic(returns: Matrix<T>) -> Self {
        let dates = business_days(NaiveDate::from_ymd_opt(2000, 1, 3).unwrap(), returns.rows());
        let tickers = (0..returns.cols()).map(|i| format!("A{i}")).collect();
        Self::new(dates, tickers, returns, ReturnMode::Raw).expect("consistent synthetic panel")
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.dates.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.dates.is_empty()
    }

    #[inline]
    pub fn n_assets(&self) -> usize {
        self.tickers.len()
    }

    pub fn row(&self, t: usize) -> &[T] {
        self.returns.row(t)
    }

    pub fn index_of(&self, date: NaiveDate) -> Option<usize> {
        self.dates.binary_search(&date).ok()
    }

    /// Rows `0..=t` only.
    pub fn truncated(&self, t: usize) -> Self {
        let rows = (t + 1).min(self.len());
        let n = self.n_assets();
        Self {
            dates: self.dates[..rows].to_vec(),
            tickers: self.tickers.clone(),
            returns: Matrix::from_vec(rows, n, self.returns.as_slice()[..rows * n].to_vec()),
            mode: self.mode,
        }
    }

    /// Price paths starting at `start` that reproduce these returns.
    pub fn cumulate(&self, start: T) -> PricePanel<T> {
        let n = self.n_assets();
        let rows = self.len() + 1;
        let mut prices = Matrix::zeros(rows, n);
        for j in 0..n {
            prices[(0, j)] = start;
        }
        for t in 0..self.len() {
            for j in 0..n {
                prices[(t + 1, j)] = prices[(t, j)] * (T::one() + self.returns[(t, j)]);
            }
        }
        let first = self
            .dates
            .first()
            .map(|d| d.pred_opt().unwrap())
            .unwrap_or(NaiveDate::MIN);
        let mut dates = vec![first];
        dates.extend_from_slice(&self.dates);
        PricePanel {
            dates,
            tickers: self.tickers.clone(),
            prices,
        }
    }
}

/// `count` consecutive Monday–Friday dates starting at (or after) `start`.
pub fn business_days(start: NaiveDate, count: usize) -> Vec<NaiveDate> {
    use chrono::{Datelike, Weekday};
    let mut out = Vec::with_capacity(count);
    let mut d = start;
    while out.len() < count {
        if !matches!(d.weekday(), Weekday::Sat | Weekday::Sun) {
            out.push(d);
        }
        d = d.succ_opt().expect("date overflow");
    }
    out
}

fn parse_date(s: &str, row: usize) -> Result<NaiveDate> {
    NaiveDate::parse_from_str(s.trim(), "%Y-%m-%d").map_err(|e| Error::Parse {
        row,
        msg: format!("bad date {s:?}: {e}"),
    })
}

fn parse_number(s: &str, row: usize, what: &str) -> Result<f64> {
    let v: f64 = s.trim().parse().map_err(|_| Error::Parse {
        row,
        msg: format!("non-numeric {what} {s:?}"),
    })?;
    if !v.is_finite() {
        return Err(Error::Parse {
            row,
            msg: format!("non-finite {what} {s:?}"),
        });
    }
    Ok(v)
}

fn column_index(headers: &csv::StringRecord, name: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| Error::Parse {
            row: 1,
            msg: format!("missing column {name:?}"),
        })
}

fn csv_error(e: csv::Error) -> Error {
    let row = e.position().map_or(0, |p| p.line() as usize);
    Error::Parse {
        row,
        msg: e.to_string(),
    }
}

pub fn load_prices<T: Real>(path: impl AsRef<Path>, schema: &ColumnMap) -> Result<PricePanel<T>> {
    let file = std::fs::File::open(path)?;
    read_prices(file, schema)
}

/// Reads a long-format price file and aligns it on the intersection of the
/// trading days of all tickers. Tickers come out sorted so the result does
/// not depend on row order.
pub fn read_prices<T: Real, R: Read>(reader: R, schema: &ColumnMap) -> Result<PricePanel<T>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers().map_err(csv_error)?.clone();
    let (di, ti, pi) = (
        column_index(&headers, &schema.date)?,
        column_index(&headers, &schema.ticker)?,
        column_index(&headers, &schema.price)?,
    );

    let mut by_date: BTreeMap<NaiveDate, HashMap<String, f64>> = BTreeMap::new();
    let mut tickers = BTreeSet::new();
    for (k, rec) in rdr.records().enumerate() {
        let row = k + 2;
        let rec = rec.map_err(csv_error)?;
        let field = |i: usize| {
            rec.get(i).ok_or_else(|| Error::Parse {
                row,
                msg: "missing field".into(),
            })
        };
        let date = parse_date(field(di)?, row)?;
        let ticker = field(ti)?.to_string();
        let price = parse_number(field(pi)?, row, "price")?;
        if price <= 0.0 {
            return Err(Error::Parse {
                row,
                msg: format!("non-positive price {price}"),
            });
        }
        if by_date
            .entry(date)
            .or_default()
            .insert(ticker.clone(), price)
            .is_some()
        {
            return Err(Error::Parse {
                row,
                msg: format!("duplicate entry for {ticker} on {date}"),
            });
        }
        tickers.insert(ticker);
    }

    let tickers: Vec<String> = tickers.into_iter().collect();
    if tickers.len() < 2 {
        return Err(Error::insufficient(2, tickers.len(), "assets in price file"));
    }
    let mut dates = Vec::new();
    let mut data = Vec::new();
    for (date, row) in &by_date {
        if row.len() != tickers.len() {
            continue;
        }
        dates.push(*date);
        data.extend(tickers.iter().map(|t| T::lit(row[t])));
    }
    if dates.len() < 2 {
        return Err(Error::insufficient(2, dates.len(), "aligned dates in price file"));
    }
    let prices = Matrix::from_vec(dates.len(), tickers.len(), data);
    Ok(PricePanel {
        dates,
        tickers,
        prices,
    })
}

/// Published risk-free quotes in annualised percent.
#[derive(Debug, Clone, PartialEq)]
pub struct RiskFreeSeries {
    quotes: BTreeMap<NaiveDate, f64>,
}

impl RiskFreeSeries {
    pub fn from_quotes(quotes: impl IntoIterator<Item = (NaiveDate, f64)>) -> Self {
        Self {
            quotes: quotes.into_iter().collect(),
        }
    }

    /// Daily simple rate in force on `date`: the latest quote on or before it,
    /// divided by 100 and by 252.
    pub fn daily_rate(&self, date: NaiveDate) -> Option<f64> {
        let (d, pct) = self.quotes.range(..=date).next_back()?;
        if (date - *d).num_days() > MAX_RISKFREE_STALENESS_DAYS {
            return None;
        }
        Some(pct / 100.0 / TRADING_DAYS_PER_YEAR)
    }
}

pub fn load_riskfree(path: impl AsRef<Path>) -> Result<RiskFreeSeries> {
    read_riskfree(std::fs::File::open(path)?)
}

/// Reads `date,rate_pct_annual`. Blank or `.` rates (FRED's missing marker)
/// are skipped so they get forward-filled.
pub fn read_riskfree<R: Read>(reader: R) -> Result<RiskFreeSeries> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers().map_err(csv_error)?.clone();
    let di = column_index(&headers, "date")?;
    let ri = column_index(&headers, "rate_pct_annual")?;
    let mut quotes = BTreeMap::new();
    for (k, rec) in rdr.records().enumerate() {
        let row = k + 2;
        let rec = rec.map_err(csv_error)?;
        let date = parse_date(rec.get(di).unwrap_or(""), row)?;
        let raw = rec.get(ri).unwrap_or("").trim();
        if raw.is_empty() || raw == "." {
            continue;
        }
        quotes.insert(date, parse_number(raw, row, "rate")?);
    }
    Ok(RiskFreeSeries { quotes })
}

/// Simple returns `p[t+1]/p[t] − 1`, less the daily risk-free rate in excess
/// mode.
pub fn to_returns<T: Real>(
    panel: &PricePanel<T>,
    riskfree: Option<&RiskFreeSeries>,
    mode: ReturnMode,
) -> Result<ReturnPanel<T>> {
    let rows = panel.dates.len();
    if rows < 2 {
        return Err(Error::insufficient(2, rows, "price dates"));
    }
    let n = panel.tickers.len();
    let rf: Vec<T> = match mode {
        ReturnMode::Raw => vec![T::zero(); rows - 1],
        ReturnMode::Excess => {
            let series = riskfree.ok_or_else(|| {
                Error::Alignment("excess returns need a risk-free series".into())
            })?;
            panel.dates[1..]
                .iter()
                .map(|&d| {
                    series.daily_rate(d).map(T::lit).ok_or_else(|| {
                        Error::Alignment(format!("no risk-free quote covering {d}"))
                    })
                })
                .collect::<Result<_>>()?
        }
    };
    let returns = Matrix::from_fn(rows - 1, n, |t, j| {
        panel.prices[(t + 1, j)] / panel.prices[(t, j)] - T::one() - rf[t]
    });
    Ok(ReturnPanel {
        dates: panel.dates[1..].to_vec(),
        tickers: panel.tickers.clone(),
        returns,
        mode,
    })
}

/// Label of the segment spanning the whole evaluation window.
pub const OVERALL: &str = "Overall";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegimeSegment {
    pub label: String,
    pub start: NaiveDate,
    pub end: NaiveDate,
}

impl RegimeSegment {
    pub fn contains(&self, d: NaiveDate) -> bool {
        self.start <= d && d <= self.end
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegimeCalendar {
    pub segments: Vec<RegimeSegment>,
}

impl RegimeCalendar {
    /// Checks ordering and that non-Overall segments do not overlap.
    pub fn validate(&self) -> Result<()> {
        for s in &self.segments {
            if s.start > s.end {
                return Err(Error::Config(format!("regime {} ends before it starts", s.label)));
            }
        }
        let parts: Vec<_> = self.segments.iter().filter(|s| s.label != OVERALL).collect();
        for (i, a) in parts.iter().enumerate() {
            for b in &parts[i + 1..] {
                if a.start <= b.end && b.start <= a.end {
                    return Err(Error::Config(format!(
                        "regimes {} and {} overlap",
                        a.label, b.label
                    )));
                }
            }
        }
        Ok(())
    }

    /// Labels of every segment containing `d`, in calendar order.
    pub fn labels_for(&self, d: NaiveDate) -> Vec<&str> {
        self.segments
            .iter()
            .filter(|s| s.contains(d))
            .map(|s| s.label.as_str())
            .collect()
    }
}

fn ymd(y: i32, m: u32, d: u32) -> NaiveDate {
    NaiveDate::from_ymd_opt(y, m, d).expect("valid date")
}

/// Bull-1, Bear and Bull-2 over 2021–2023 plus the Overall window.
pub fn default_regimes() -> RegimeCalendar {
    let seg = |label: &str, start, end| RegimeSegment {
        label: label.into(),
        start,
        end,
    };
    RegimeCalendar {
        segments: vec![
            seg("Bull-1", ymd(2021, 1, 1), ymd(2022, 1, 2)),
            seg("Bear", ymd(2022, 1, 3), ymd(2022, 6, 12)),
            seg("Bull-2", ymd(2022, 6, 13), ymd(2023, 12, 31)),
            seg(OVERALL, ymd(2021, 1, 1), ymd(2023, 12, 31)),
        ],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn prices(csv: &str) -> Result<PricePanel<f64>> {
        read_prices(csv.as_bytes(), &ColumnMap::default())
    }

    #[test]
    fn intersection_drops_incomplete_dates() {
        let p = prices(
            "date,ticker,adj_close\n\
             2020-01-02,A,1\n2020-01-02,B,2\n2020-01-02,C,3\n\
             2020-01-03,A,1\n2020-01-03,C,3\n\
             2020-01-06,A,1\n2020-01-06,B,2\n2020-01-06,C,3\n",
        )
        .unwrap();
        assert_eq!(p.dates, vec![ymd(2020, 1, 2), ymd(2020, 1, 6)]);
        assert_eq!(p.tickers, vec!["A", "B", "C"]);
    }

    #[test]
    fn non_numeric_price_cites_row() {
        let err = prices("date,ticker,adj_close\n2020-01-02,A,1\n2020-01-02,B,abc\n").unwrap_err();
        match err {
            Error::Parse { row, .. } => assert_eq!(row, 3),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn too_few_assets_or_dates() {
        let one = prices("date,ticker,adj_close\n2020-01-02,A,1\n2020-01-03,A,1\n").unwrap_err();
        assert!(matches!(one, Error::InsufficientData { .. }));
        let short = prices("date,ticker,adj_close\n2020-01-02,A,1\n2020-01-02,B,1\n").unwrap_err();
        assert!(matches!(short, Error::InsufficientData { .. }));
    }

    #[test]
    fn missing_column_is_parse_error() {
        assert!(matches!(
            prices("day,ticker,adj_close\n2020-01-02,A,1\n").unwrap_err(),
            Error::Parse { row: 1, .. }
        ));
    }

    #[test]
    fn return_arithmetic() {
        let p = prices(
            "date,ticker,adj_close\n2020-01-02,A,100\n2020-01-02,B,50\n\
             2020-01-03,A,110\n2020-01-03,B,50\n",
        )
        .unwrap();
        let raw = to_returns(&p, None, ReturnMode::Raw).unwrap();
        assert!((raw.returns[(0, 0)] - 0.10).abs() < 1e-15);
        assert_eq!(raw.returns[(0, 1)], 0.0);

        // 2.52% annual -> 0.0001 daily
        let rf = RiskFreeSeries::from_quotes([(ymd(2020, 1, 3), 2.52)]);
        let ex = to_returns(&p, Some(&rf), ReturnMode::Excess).unwrap();
        assert!((ex.returns[(0, 0)] - 0.0999).abs() < 1e-15);
        assert_eq!(ex.returns[(0, 0)], raw.returns[(0, 0)] - 2.52 / 100.0 / 252.0);
    }

    #[test]
    fn riskfree_forward_fill_and_gaps() {
        let rf = read_riskfree(
            "date,rate_pct_annual\n2020-01-02,1.5\n2020-01-03,.\n2020-01-06,\n".as_bytes(),
        )
        .unwrap();
        assert_eq!(rf.daily_rate(ymd(2020, 1, 6)), Some(1.5 / 100.0 / 252.0));
        assert_eq!(rf.daily_rate(ymd(2020, 1, 1)), None);
        assert_eq!(rf.daily_rate(ymd(2020, 3, 1)), None);

        let p = prices(
            "date,ticker,adj_close\n2019-12-31,A,1\n2019-12-31,B,1\n2020-01-01,A,1\n2020-01-01,B,1\n",
        )
        .unwrap();
        assert!(matches!(
            to_returns(&p, Some(&rf), ReturnMode::Excess).unwrap_err(),
            Error::Alignment(_)
        ));
    }

    #[test]
    fn default_calendar_dates() {
        let cal = default_regimes();
        cal.validate().unwrap();
        let bear = &cal.segments[1];
        assert_eq!(bear.label, "Bear");
        assert_eq!(bear.start, ymd(2022, 1, 3));
        assert_eq!(cal.segments[2].end, ymd(2023, 12, 31));
        assert_eq!(cal.labels_for(ymd(2022, 1, 3)), vec!["Bear", OVERALL]);
        assert_eq!(cal.labels_for(ymd(2022, 1, 2)), vec!["Bull-1", OVERALL]);
    }

    #[test]
    fn overlapping_calendar_rejected() {
        let mut cal = default_regimes();
        cal.segments[1].start = ymd(2021, 12, 1);
        assert!(cal.validate().is_err());
    }
}
