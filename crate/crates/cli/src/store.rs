//! Forecast files: compact binary (`CVFC`) or the `date,i,j,value` audit
//! CSV, listed in a JSON index.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};

use covcast::rolling::write_cov_csv;
use covcast::{CovMatrix, Matrix};

use crate::error::{CliError, CliResult};

const MAGIC: &[u8; 4] = b"CVFC";
const VERSION: u32 = 1;
pub const INDEX_FILE: &str = "index.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Binary,
    Csv,
}

impl Format {
    pub fn extension(self) -> &'static str {
        match self {
            Format::Binary => "cvfc",
            Format::Csv => "csv",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub model: String,
    pub file: String,
    pub count: usize,
    pub first: Option<NaiveDate>,
    pub last: Option<NaiveDate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastIndex {
    pub config_hash: String,
    pub seed: u64,
    pub horizon: usize,
    pub train_end: NaiveDate,
    pub format: Format,
    pub models: Vec<IndexEntry>,
}

impl ForecastIndex {
    pub fn read(dir: &Path) -> CliResult<Self> {
        let path = dir.join(INDEX_FILE);
        let text = std::fs::read_to_string(&path)
            .map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
    }

    pub fn write(&self, dir: &Path) -> CliResult<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| CliError::Data(e.to_string()))?;
        std::fs::write(dir.join(INDEX_FILE), text + "\n")?;
        Ok(())
    }

    pub fn entry(&self, model: &str) -> Option<&IndexEntry> {
        self.models.iter().find(|e| e.model == model)
    }
}

fn day(d: NaiveDate) -> i32 {
    d.num_days_from_ce()
}

fn from_day(v: i32) -> CliResult<NaiveDate> {
    NaiveDate::from_num_days_from_ce_opt(v).ok_or_else(|| CliError::Data(format!("bad day number {v}")))
}

/// Binary layout (little endian): magic, version u32, provenance length u32
/// and UTF-8 bytes, dimension u32, count u64, then per matrix the as-of,
/// window start and window end as days from CE (i32) followed by `n²` f64.
pub fn write_binary<W: Write>(mut out: W, provenance: &str, series: &[CovMatrix]) -> CliResult<()> {
    let n = series.first().map_or(0, |c| c.dim());
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(provenance.len() as u32).to_le_bytes())?;
    out.write_all(provenance.as_bytes())?;
    out.write_all(&(n as u32).to_le_bytes())?;
    out.write_all(&(series.len() as u64).to_le_bytes())?;
    for c in series {
        if c.dim() != n {
            return Err(CliError::Data(format!("matrix of dimension {} in a {n}-asset file", c.dim())));
        }
        for d in [c.asof, c.window.0, c.window.1] {
            out.write_all(&day(d).to_le_bytes())?;
        }
        for v in c.values.as_slice() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn take<const K: usize, R: Read>(r: &mut R) -> CliResult<[u8; K]> {
    let mut b = [0u8; K];
    r.read_exact(&mut b)
        .map_err(|e| CliError::Data(format!("truncated forecast file: {e}")))?;
    Ok(b)
}

/// Returns the provenance string and the matrices.
pub fn read_binary<R: Read>(mut r: R) -> CliResult<(String, Vec<CovMatrix>)> {
    if &take::<4, _>(&mut r)? != MAGIC {
        return Err(CliError::Data("not a forecast file".into()));
    }
    let version = u32::from_le_bytes(take(&mut r)?);
    if version != VERSION {
        return Err(CliError::Data(format!("unsupported forecast file version {version}")));
    }
    let len = u32::from_le_bytes(take(&mut r)?) as usize;
    let mut prov = vec![0u8; len];
    r.read_exact(&mut prov)
        .map_err(|e| CliError::Data(format!("truncated forecast file: {e}")))?;
    let prov = String::from_utf8(prov).map_err(|e| CliError::Data(e.to_string()))?;
    let n = u32::from_le_bytes(take(&mut r)?) as usize;
    let count = u64::from_le_bytes(take(&mut r)?) as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let asof = from_day(i32::from_le_bytes(take(&mut r)?))?;
        let w0 = from_day(i32::from_le_bytes(take(&mut r)?))?;
        let w1 = from_day(i32::from_le_bytes(take(&mut r)?))?;
        let mut data = Vec::with_capacity(n * n);
        for _ in 0..n * n {
            data.push(f64::from_le_bytes(take(&mut r)?));
        }
        out.push(CovMatrix {
            values: Matrix::from_vec(n, n, data),
            asof,
            window: (w0, w1),
        });
    }
    Ok((prov, out))
}

/// Audit CSV preceded by a `# provenance` comment.
pub fn write_csv<W: Write>(mut out: W, provenance: &str, series: &[CovMatrix]) -> CliResult<()> {
    writeln!(out, "# {provenance}")?;
    write_cov_csv(out, series)?;
    Ok(())
}

/// Reads the audit CSV back; the estimation window is not stored, so it is
/// reported as the as-of date.
pub fn read_csv<R: Read>(r: R) -> CliResult<(String, Vec<CovMatrix>)> {
    let mut text = String::new();
    std::io::BufReader::new(r).read_to_string(&mut text)?;
    let mut prov = String::new();
    let mut cells: BTreeMap<NaiveDate, Vec<(usize, usize, f64)>> = BTreeMap::new();
    for (k, line) in text.lines().enumerate() {
        if let Some(c) = line.strip_prefix("# ") {
            prov = c.to_string();
            continue;
        }
        if line.is_empty() || line.starts_with("date,") {
            continue;
        }
        let bad = || CliError::Data(format!("forecast CSV line {}: {line:?}", k + 1));
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(bad());
        }
        let d = NaiveDate::parse_from_str(f[0], "%Y-%m-%d").map_err(|_| bad())?;
        let i = f[1].parse().map_err(|_| bad())?;
        let j = f[2].parse().map_err(|_| bad())?;
        let v = f[3].parse().map_err(|_| bad())?;
        cells.entry(d).or_default().push((i, j, v));
    }
    let mut out = Vec::with_capacity(cells.len());
    for (d, c) in cells {
        let n = (c.len() as f64).sqrt() as usize;
        if n * n != c.len() {
            return Err(CliError::Data(format!("{d}: {} cells do not form a square matrix", c.len())));
        }
        let mut m = Matrix::zeros(n, n);
        for (i, j, v) in c {
            if i >= n || j >= n {
                return Err(CliError::Data(format!("{d}: index ({i}, {j}) out of range")));
            }
            m[(i, j)] = v;
        }
        out.push(CovMatrix {
            values: m,
            asof: d,
            window: (d, d),
        });
    }
    Ok((prov, out))
}

pub fn write_series(path: &Path, format: Format, provenance: &str, series: &[CovMatrix]) -> CliResult<()> {
    let mut buf = Vec::new();
    match format {
        Format::Binary => write_binary(&mut buf, provenance, series)?,
        Format::Csv => write_csv(&mut buf, provenance, series)?,
    }
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn read_series(path: &Path, format: Format) -> CliResult<(String, Vec<CovMatrix>)> {
    let f = std::fs::File::open(path).map_err(|e| CliError::Data(format!("cannot open {}: {e}", path.display())))?;
    let r = std::io::BufReader::new(f);
    match format {
        Format::Binary => read_binary(r),
        Format::Csv => read_csv(r),
    }
}
