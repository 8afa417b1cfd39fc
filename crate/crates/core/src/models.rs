//! Registry of the eleven forecasters and a uniform rolling-forecast driver.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cab::{run_cab, CabConfig, LossCurve};
use crate::classical::{
    forecast_ewma, forecast_lw, forecast_lw_full, forecast_na, forecast_na_full, forecast_pca, forecast_rmt, EwmaConfig,
    PcaConfig,
};
use crate::data::ReturnPanel;
use crate::error::{Error, Result};
use crate::garch::{FitReport, GarchConfig, GarchModel, GarchRunner};
use crate::linalg::Matrix;
use crate::rolling::CovMatrix;
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelId {
    Na,
    NaFull,
    Ewma,
    Pca,
    Rmt,
    Lw,
    LwFull,
    Ccc,
    Dcc,
    DccNl,
    Cab,
}

impl ModelId {
    pub const ALL: [ModelId; 11] = [
        ModelId::Na,
        ModelId::NaFull,
        ModelId::Ewma,
        ModelId::Pca,
        ModelId::Rmt,
        ModelId::Lw,
        ModelId::LwFull,
        ModelId::Ccc,
        ModelId::Dcc,
        ModelId::DccNl,
        ModelId::Cab,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelId::Na => "na",
            ModelId::NaFull => "na_full",
            ModelId::Ewma => "ewma",
            ModelId::Pca => "pca",
            ModelId::Rmt => "rmt",
            ModelId::Lw => "lw",
            ModelId::LwFull => "lw_full",
            ModelId::Ccc => "ccc",
            ModelId::Dcc => "dcc",
            ModelId::DccNl => "dcc_nl",
            ModelId::Cab => "cab",
        }
    }

    pub fn is_classical(self) -> bool {
        !matches!(self, ModelId::Ccc | ModelId::Dcc | ModelId::DccNl | ModelId::Cab)
    }
}

impl fmt::Display for ModelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelId::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown model id {s:?}")))
    }
}

/// Per-model settings shared by every forecaster.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSettings {
    pub ewma: EwmaConfig,
    pub pca: PcaConfig,
    pub garch: GarchConfig,
    pub cab: CabConfig,
}

impl ModelSettings {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        for r in [self.ewma.validate(), self.pca.validate(), self.garch.validate(), self.cab.validate()] {
            if let Err(e) = r {
                errs.push(e.to_string());
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs.join("; ")))
        }
    }
}

/// One model's forecasts on a list of dates.
#[derive(Debug, Clone)]
pub struct ForecastRun<T> {
    pub model: ModelId,
    pub horizon: usize,
    pub rows: Vec<usize>,
    pub forecasts: Vec<CovMatrix<T>>,
    pub reports: Vec<FitReport>,
    pub loss_curve: Option<LossCurve>,
}

impl<T: Real> ForecastRun<T> {
    pub fn index(&self) -> HashMap<usize, usize> {
        self.rows.iter().enumerate().map(|(i, &r)| (r, i)).collect()
    }

    pub fn at_row(&self, row: usize) -> Option<&Matrix<T>> {
        self.rows.iter().position(|&r| r == row).map(|i| &self.forecasts[i].values)
    }
}

/// Forecast of a stateless model at row `t`.
pub fn forecast_classical<T: Real>(
    model: ModelId,
    panel: &ReturnPanel<T>,
    t: usize,
    horizon: usize,
    settings: &ModelSettings,
) -> Result<CovMatrix<T>> {
    match model {
        ModelId::Na => forecast_na(panel, t, horizon),
        ModelId::NaFull => forecast_na_full(panel, t),
        ModelId::Ewma => forecast_ewma(panel, t, horizon, &settings.ewma),
        ModelId::Pca => forecast_pca(panel, t, horizon, &settings.pca),
        ModelId::Rmt => forecast_rmt(panel, t, horizon),
        ModelId::Lw => forecast_lw(panel, t, horizon).map(|r| r.0),
        ModelId::LwFull => forecast_lw_full(panel, t).map(|r| r.0),
        other => Err(Error::Config(format!("{other} is not a stateless model"))),
    }
}

/// Rolling forecasts of `model` on ascending `rows`. CAB trains on rows
/// `..= train_end` and requires every row to lie after it.
pub fn run_model<T: Real>(
    model: ModelId,
    panel: &ReturnPanel<T>,
    rows: &[usize],
    horizon: usize,
    train_end: usize,
    settings: &ModelSettings,
) -> Result<ForecastRun<T>> {
    if rows.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("forecast rows must be strictly increasing".into()));
    }
    let mut run = ForecastRun {
        model,
        horizon,
        rows: rows.to_vec(),
        forecasts: Vec::with_capacity(rows.len()),
        reports: Vec::new(),
        loss_curve: None,
    };
    match model {
        m if m.is_classical() => {
            run.forecasts = rows
                .par_iter()
                .map(|&t| forecast_classical(m, panel, t, horizon, settings))
                .collect::<Result<Vec<_>>>()?;
        }
        ModelId::Ccc | ModelId::Dcc | ModelId::DccNl => {
            let kind = match model {
                ModelId::Ccc => GarchModel::Ccc,
                ModelId::Dcc => GarchModel::Dcc,
                _ => GarchModel::DccNl,
            };
            let mut runner = GarchRunner::new(kind, settings.garch)?;
            for &t in rows {
                let f = runner.forecast(panel, t, horizon)?;
                run.forecasts.push(f.cov);
                run.reports.push(f.report);
            }
        }
        _ => {
            if let Some(&first) = rows.first() {
                if first <= train_end {
                    return Err(Error::Config(format!(
                        "CAB forecast row {first} is inside the training split ending at {train_end}"
                    )));
                }
            }
            let cab = run_cab(panel, horizon, train_end, &settings.cab)?;
            let index: HashMap<usize, usize> = cab.rows.iter().enumerate().map(|(i, &r)| (r, i)).collect();
            for &t in rows {
                let i = *index.get(&t).ok_or_else(|| {
                    Error::insufficient(settings.cab.lookback + horizon, t, "rows before a CAB forecast date")
                })?;
                run.forecasts.push(cab.forecasts[i].clone());
            }
            run.loss_curve = Some(cab.curve);
        }
    }
    Ok(run)
}
