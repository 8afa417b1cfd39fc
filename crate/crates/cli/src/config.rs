//! Experiment configuration: TOML file, environment and flag overrides.

use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use covcast::cab::grid;
use covcast::data::{default_regimes, ColumnMap, RegimeCalendar, ReturnMode};
use covcast::models::{ModelId, ModelSettings};
use covcast::portfolio::Rebalance;

use crate::error::{CliError, CliResult};

pub const EQUAL_WEIGHT: &str = "equal_weight";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKind {
    Regime,
    Persistent,
}

/// Simulated panel used instead of files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub kind: SyntheticKind,
    pub assets: usize,
    pub days: usize,
    /// Mean regime length (regime) or AR(1) persistence (persistent).
    pub param: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Long-format `date,ticker,adj_close` file.
    pub prices: Option<PathBuf>,
    /// `date,rate_pct_annual` file; required in excess mode.
    pub riskfree: Option<PathBuf>,
    pub mode: ReturnMode,
    pub columns: ColumnMap,
    pub synthetic: Option<SyntheticConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub horizon: usize,
    /// Model ids in report order; may include `equal_weight`.
    pub models: Vec<String>,
    /// First forecast date; defaults to the start of the last
    /// `test_fraction` of usable rows.
    pub test_start: Option<NaiveDate>,
    pub test_fraction: f64,
    pub rebalance: Vec<Rebalance>,
    pub regimes: RegimeCalendar,
    pub alpha: f64,
    pub seed: u64,
    pub jobs: usize,
    pub settings: ModelSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            horizon: 20,
            models: ModelId::ALL.iter().map(|m| m.as_str().to_string()).collect(),
            test_start: None,
            test_fraction: 0.3,
            rebalance: Rebalance::ALL.to_vec(),
            regimes: default_regimes(),
            alpha: 0.05,
            seed: 42,
            jobs: 1,
            settings: ModelSettings::default(),
        }
    }
}

/// Command-line overrides, applied after the environment.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub horizon: Option<usize>,
    pub models: Option<Vec<String>>,
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| CliError::Config(format!("config: {e}")))
    }

    pub fn to_toml(&self) -> CliResult<String> {
        toml::to_string(self).map_err(|e| CliError::Config(format!("config serialisation: {e}")))
    }

    /// Reads `path` (relative data paths resolve against its directory),
    /// then applies `COVCAST_SEED` / `COVCAST_JOBS` and `flags`.
    pub fn load(path: Option<&Path>, flags: &Overrides) -> CliResult<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", p.display())))?;
                let mut c = Self::from_toml(&text)?;
                let base = p.parent().unwrap_or(Path::new("."));
                for f in [&mut c.data.prices, &mut c.data.riskfree].into_iter().flatten() {
                    if f.is_relative() {
                        *f = base.join(&*f);
                    }
                }
                c
            }
            None => Self::default(),
        };
        if let Ok(v) = std::env::var("COVCAST_SEED") {
            cfg.seed = v
                .parse()
                .map_err(|_| CliError::Config(format!("COVCAST_SEED is not an integer: {v:?}")))?;
        }
        if let Ok(v) = std::env::var("COVCAST_JOBS") {
            cfg.jobs = v
                .parse()
                .map_err(|_| CliError::Config(format!("COVCAST_JOBS is not an integer: {v:?}")))?;
        }
        if let Some(h) = flags.horizon {
            cfg.horizon = h;
        }
        if let Some(m) = &flags.models {
            cfg.models = m.clone();
        }
        if let Some(s) = flags.seed {
            cfg.seed = s;
        }
        if let Some(j) = flags.jobs {
            cfg.jobs = j;
        }
        cfg.settings.cab.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Collects every violation into one error.
    pub fn validate(&self) -> CliResult<()> {
        let mut errs = Vec::new();
        let (lo, hi) = grid::HORIZON;
        if !(lo..=hi).contains(&self.horizon) {
            errs.push(format!("horizon {} outside {lo}..={hi}", self.horizon));
        }
        if self.models.is_empty() {
            errs.push("model list is empty".into());
        }
        for m in &self.models {
            if m != EQUAL_WEIGHT && m.parse::<ModelId>().is_err() {
                errs.push(format!("unknown model id {m:?}"));
            }
        }
        let mut seen = std::collections::HashSet::new();
        for m in &self.models {
            if !seen.insert(m) {
                errs.push(format!("model {m:?} listed twice"));
            }
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            errs.push(format!("test_fraction must be in (0, 1), got {}", self.test_fraction));
        }
        if self.jobs == 0 {
            errs.push("jobs must be >= 1".into());
        }
        if self.alpha != 0.05 && self.alpha != 0.10 {
            errs.push(format!("alpha must be 0.05 or 0.10, got {}", self.alpha));
        }
        if self.data.prices.is_none() && self.data.synthetic.is_none() {
            errs.push("data.prices or data.synthetic is required".into());
        }
        if let Err(e) = self.settings.validate() {
            errs.push(e.to_string());
        }
        if let Err(e) = self.regimes.validate() {
            errs.push(e.to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(CliError::Config(errs.join("; ")))
        }
    }

    /// Forecasting models in config order.
    pub fn forecast_models(&self) -> Vec<ModelId> {
        self.models.iter().filter_map(|m| m.parse().ok()).collect()
    }

    pub fn wants_equal_weight(&self) -> bool {
        self.models.iter().any(|m| m == EQUAL_WEIGHT)
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serialises");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn provenance(&self) -> String {
        format!("config_hash={} seed={}", self.hash(), self.seed)
    }
}
