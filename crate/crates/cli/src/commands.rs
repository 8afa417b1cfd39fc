//! forecast → evaluate → backtest pipeline.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;
use serde::Serialize;

use covcast::data::{load_prices, load_riskfree, to_returns, RegimeSegment, ReturnMode};
use covcast::evaluation::{
    aggregate_by_regime, check_aligned, friedman_test, mean_ranks, nemenyi, normality_screen, CdDiagram,
    FriedmanResult, LossSeries, Metric, NemenyiResult,
};
use covcast::models::{run_model, ModelId};
use covcast::portfolio::{equal_weight_ledger, run_backtest, summarize, write_summary_csv, BacktestLedger, SummaryRow};
use covcast::rolling::forward_realized_cov;
use covcast::sim::{persistent_panel, regime_switching_panel};
use covcast::{CovMatrix, ForecastRun, ReturnPanel};

use crate::config::{ExperimentConfig, SyntheticKind, EQUAL_WEIGHT};
use crate::error::{CliError, CliResult};
use crate::store::{read_series, write_series, ForecastIndex, Format, IndexEntry};

/// Loss tables are reported in units of 1e-5.
pub const LOSS_SCALE: f64 = 1e5;

/// Segment appended to the calendar that spans the whole evaluation window.
pub const ALL_DATES: &str = "All";

pub const FORECAST_DIR: &str = "forecasts";
pub const EVALUATION_DIR: &str = "evaluation";
pub const BACKTEST_DIR: &str = "backtest";

pub fn load_panel(cfg: &ExperimentConfig) -> CliResult<ReturnPanel> {
    if let Some(s) = &cfg.data.synthetic {
        let (panel, _) = match s.kind {
            SyntheticKind::Regime => regime_switching_panel(s.assets, s.days, s.param, s.seed)?,
            SyntheticKind::Persistent => persistent_panel(s.assets, s.days, s.param, s.seed)?,
        };
        return Ok(panel);
    }
    let path = cfg
        .data
        .prices
        .as_ref()
        .ok_or_else(|| CliError::Config("data.prices is required".into()))?;
    let prices = load_prices::<f64>(path, &cfg.data.columns)?;
    let rf = match (cfg.data.mode, &cfg.data.riskfree) {
        (ReturnMode::Excess, Some(p)) => Some(load_riskfree(p)?),
        (ReturnMode::Excess, None) => {
            return Err(CliError::Config("excess mode needs data.riskfree".into()));
        }
        (ReturnMode::Raw, _) => None,
    };
    Ok(to_returns(&prices, rf.as_ref(), cfg.data.mode)?)
}

/// Test rows `start..=last`, where `last` is the final row with a complete
/// `F`-day realised target, and the training split ends at `start − 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train_end: usize,
    pub rows: Vec<usize>,
}

pub fn split(cfg: &ExperimentConfig, panel: &ReturnPanel) -> CliResult<Split> {
    let need = cfg.horizon + 2;
    if panel.len() < need {
        return Err(covcast::Error::InsufficientData {
            required: need,
            actual: panel.len(),
            context: "return rows for one forecast and its target",
        }
        .into());
    }
    let last = panel.len() - 1 - cfg.horizon;
    let start = match cfg.test_start {
        Some(d) => panel
            .dates
            .iter()
            .position(|&x| x >= d)
            .ok_or_else(|| CliError::Data(format!("test_start {d} is after the last date")))?,
        None => ((last + 1) as f64 * (1.0 - cfg.test_fraction)).round() as usize,
    };
    if start == 0 || start > last {
        return Err(CliError::Data(format!(
            "test window starts at row {start} but must lie in 1..={last}"
        )));
    }
    Ok(Split {
        train_end: start - 1,
        rows: (start..=last).collect(),
    })
}

fn create_dir(out: &Path, sub: &str) -> CliResult<PathBuf> {
    let dir = out.join(sub);
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn with_comment(provenance: &str, body: impl FnOnce(&mut Vec<u8>) -> CliResult<()>) -> CliResult<Vec<u8>> {
    let mut buf = Vec::new();
    writeln!(buf, "# {provenance}")?;
    body(&mut buf)?;
    Ok(buf)
}

fn pool(jobs: usize) -> CliResult<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| CliError::Config(format!("worker pool: {e}")))
}

/// Runs every configured model; CAB runs on its own worker alongside the
/// others.
pub fn run_models(cfg: &ExperimentConfig, panel: &ReturnPanel, split: &Split) -> CliResult<Vec<ForecastRun>> {
    for w in cfg.settings.cab.grid_deviations() {
        warn!("cab: {w}");
    }
    let models = cfg.forecast_models();
    let run = |m: ModelId| -> CliResult<ForecastRun> {
        info!("forecasting {m} on {} dates", split.rows.len());
        Ok(run_model(m, panel, &split.rows, cfg.horizon, split.train_end, &cfg.settings)?)
    };
    let (cab, rest): (Vec<ModelId>, Vec<ModelId>) = models.iter().partition(|&&m| m == ModelId::Cab);
    let (cab_run, rest_runs) = pool(cfg.jobs)?.install(|| {
        rayon::join(
            || cab.first().map(|&m| run(m)).transpose(),
            || rest.par_iter().map(|&m| run(m)).collect::<CliResult<Vec<_>>>(),
        )
    });
    let mut by_model: HashMap<ModelId, ForecastRun> = rest_runs?.into_iter().map(|r| (r.model, r)).collect();
    if let Some(r) = cab_run? {
        by_model.insert(ModelId::Cab, r);
    }
    Ok(models.iter().map(|m| by_model.remove(m).expect("every model ran")).collect())
}

pub fn cmd_forecast(cfg: &ExperimentConfig, out: &Path, format: Format) -> CliResult<ForecastIndex> {
    let panel = load_panel(cfg)?;
    let split = split(cfg, &panel)?;
    let dir = create_dir(out, FORECAST_DIR)?;
    let prov = cfg.provenance();
    let runs = run_models(cfg, &panel, &split)?;
    let mut index = ForecastIndex {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        horizon: cfg.horizon,
        train_end: panel.dates[split.train_end],
        format,
        models: Vec::new(),
    };
    for r in &runs {
        let file = format!("{}.{}", r.model, format.extension());
        write_series(&dir.join(&file), format, &prov, &r.forecasts)?;
        if let Some(curve) = &r.loss_curve {
            let buf = with_comment(&prov, |b| Ok(curve.write_csv(b)?))?;
            std::fs::write(dir.join(format!("{}_loss.csv", r.model)), buf)?;
        }
        if !r.reports.is_empty() {
            let text = serde_json::to_string_pretty(&r.reports).map_err(|e| CliError::Data(e.to_string()))?;
            std::fs::write(dir.join(format!("{}_fits.json", r.model)), text + "\n")?;
        }
        index.models.push(IndexEntry {
            model: r.model.to_string(),
            file,
            count: r.forecasts.len(),
            first: r.forecasts.first().map(|c| c.asof),
            last: r.forecasts.last().map(|c| c.asof),
        });
    }
    index.write(&dir)?;
    Ok(index)
}

/// Forecasts of every configured model, in config order, keyed by row.
pub struct LoadedForecasts {
    pub models: Vec<String>,
    pub rows: Vec<Vec<usize>>,
    pub series: Vec<Vec<CovMatrix>>,
}

pub fn load_forecasts(cfg: &ExperimentConfig, panel: &ReturnPanel, out: &Path) -> CliResult<LoadedForecasts> {
    let dir = out.join(FORECAST_DIR);
    let index = ForecastIndex::read(&dir)?;
    if index.config_hash != cfg.hash() {
        warn!("forecasts were produced by a different configuration ({})", index.config_hash);
    }
    if index.horizon != cfg.horizon {
        return Err(CliError::Config(format!(
            "forecasts use horizon {} but the configuration says {}",
            index.horizon, cfg.horizon
        )));
    }
    let mut loaded = LoadedForecasts {
        models: Vec::new(),
        rows: Vec::new(),
        series: Vec::new(),
    };
    for m in cfg.forecast_models() {
        let name = m.to_string();
        let entry = index
            .entry(&name)
            .ok_or_else(|| CliError::Data(format!("no forecast file for {name}")))?;
        let (_, series) = read_series(&dir.join(&entry.file), index.format)?;
        let rows = series
            .iter()
            .map(|c| {
                panel
                    .index_of(c.asof)
                    .ok_or_else(|| CliError::Data(format!("{name}: forecast date {} not in the panel", c.asof)))
            })
            .collect::<CliResult<Vec<_>>>()?;
        loaded.models.push(name);
        loaded.rows.push(rows);
        loaded.series.push(series);
    }
    Ok(loaded)
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricReport {
    pub metric: &'static str,
    pub mean_ranks: Vec<f64>,
    pub friedman: Option<FriedmanResult>,
    pub nemenyi: Option<NemenyiResult>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvaluationReport {
    pub config_hash: String,
    pub seed: u64,
    pub models: Vec<String>,
    pub n: usize,
    pub metrics: Vec<MetricReport>,
}

pub fn loss_series(cfg: &ExperimentConfig, panel: &ReturnPanel, f: &LoadedForecasts) -> CliResult<Vec<LossSeries>> {
    let series = f
        .models
        .iter()
        .zip(&f.rows)
        .zip(&f.series)
        .map(|((m, rows), s)| {
            let realized = rows
                .iter()
                .map(|&t| {
                    forward_realized_cov(panel, cfg.horizon, t)
                        .map(|c| c.values)
                        .ok_or_else(|| CliError::Data(format!("{m}: no realised target for {}", panel.dates[t])))
                })
                .collect::<CliResult<Vec<_>>>()?;
            let dates: Vec<_> = s.iter().map(|c| c.asof).collect();
            let fc: Vec<_> = s.iter().map(|c| c.values.clone()).collect();
            Ok(LossSeries::compute(m.clone(), &dates, &fc, &realized)?)
        })
        .collect::<CliResult<Vec<_>>>()?;
    check_aligned(&series)?;
    Ok(series)
}

pub fn cmd_evaluate(cfg: &ExperimentConfig, out: &Path) -> CliResult<EvaluationReport> {
    let panel = load_panel(cfg)?;
    let forecasts = load_forecasts(cfg, &panel, out)?;
    if forecasts.models.is_empty() {
        return Err(CliError::Config("no forecasting model to evaluate".into()));
    }
    let series = loss_series(cfg, &panel, &forecasts)?;
    if series[0].is_empty() {
        return Err(CliError::Data("forecast files contain no dates".into()));
    }
    let dir = create_dir(out, EVALUATION_DIR)?;
    let prov = cfg.provenance();

    let mut calendar = cfg.regimes.clone();
    calendar.segments.push(RegimeSegment {
        label: ALL_DATES.into(),
        start: series[0].dates[0],
        end: *series[0].dates.last().expect("non-empty evaluation window"),
    });
    let table = aggregate_by_regime(&series, &calendar);
    if !table.unassigned.is_empty() {
        warn!("{} evaluation dates fall outside every regime", table.unassigned.len());
    }
    std::fs::write(dir.join("results.csv"), with_comment(&prov, |b| Ok(table.write_csv(b, LOSS_SCALE)?))?)?;

    let n = series[0].len();
    let k = series.len();
    let mut report = EvaluationReport {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        models: forecasts.models.clone(),
        n,
        metrics: Vec::new(),
    };
    for metric in [Metric::Euclidean, Metric::Frobenius] {
        let losses: Vec<&[f64]> = series.iter().map(|s| s.values(metric)).collect();
        let ranks = mean_ranks(&losses)?;
        let friedman = if k >= 3 {
            Some(friedman_test(&losses)?)
        } else {
            warn!("the Friedman test needs at least 3 models, got {k}");
            None
        };
        let nem = if k >= 2 {
            Some(nemenyi(&forecasts.models, &ranks, n, cfg.alpha)?)
        } else {
            None
        };
        if let Some(r) = &nem {
            let cd = CdDiagram::from_nemenyi(r, n);
            let svg = format!("<!-- {prov} -->\n{}", cd.to_svg());
            std::fs::write(dir.join(format!("cd_{}.svg", metric.as_str())), svg)?;
            let json = serde_json::json!({ "provenance": prov, "diagram": cd });
            std::fs::write(
                dir.join(format!("cd_{}.json", metric.as_str())),
                serde_json::to_string_pretty(&json).map_err(|e| CliError::Data(e.to_string()))? + "\n",
            )?;
        }
        report.metrics.push(MetricReport {
            metric: metric.as_str(),
            mean_ranks: ranks,
            friedman,
            nemenyi: nem,
        });
    }
    let text = serde_json::to_string_pretty(&report).map_err(|e| CliError::Data(e.to_string()))?;
    std::fs::write(dir.join("tests.json"), text + "\n")?;

    let normality = with_comment(&prov, |b| {
        writeln!(b, "model,metric,statistic,p_value,skewness,kurtosis")?;
        for s in &series {
            for metric in [Metric::Euclidean, Metric::Frobenius] {
                match normality_screen(s.values(metric)) {
                    Ok(r) => writeln!(
                        b,
                        "{},{},{:.6},{:.6e},{:.6},{:.6}",
                        s.model,
                        metric.as_str(),
                        r.statistic,
                        r.p_value,
                        r.skewness,
                        r.kurtosis
                    )?,
                    Err(e) => warn!("normality screen for {} ({}): {e}", s.model, metric.as_str()),
                }
            }
        }
        Ok(())
    })?;
    std::fs::write(dir.join("normality.csv"), normality)?;
    Ok(report)
}

pub fn cmd_backtest(cfg: &ExperimentConfig, out: &Path) -> CliResult<Vec<SummaryRow>> {
    let panel = load_panel(cfg)?;
    let split = split(cfg, &panel)?;
    let forecasts = if cfg.forecast_models().is_empty() {
        None
    } else {
        Some(load_forecasts(cfg, &panel, out)?)
    };
    let dir = create_dir(out, BACKTEST_DIR)?;
    let prov = cfg.provenance();
    let rows = &split.rows;
    let mut summary = Vec::new();
    for &freq in &cfg.rebalance {
        let bench = equal_weight_ledger(&panel, rows, freq)?;
        let bench_ref = if bench.entries.len() >= 31 {
            Some(&bench)
        } else {
            warn!("{}: too few returns for the variance F-test", freq.as_str());
            None
        };
        let mut ledgers: Vec<BacktestLedger> = Vec::new();
        for name in &cfg.models {
            if name == EQUAL_WEIGHT {
                ledgers.push(bench.clone());
                continue;
            }
            let f = forecasts.as_ref().expect("forecasts loaded");
            let i = f.models.iter().position(|m| m == name).expect("model loaded");
            let by_row: HashMap<usize, &CovMatrix> = f.rows[i].iter().copied().zip(&f.series[i]).collect();
            let ledger = run_backtest(name.clone(), &panel, rows, freq, |t| by_row.get(&t).map(|c| &c.values))?;
            ledgers.push(ledger);
        }
        for l in &ledgers {
            summary.push(summarize(l, bench_ref)?);
        }
        let buf = with_comment(&prov, |b| {
            writeln!(b, "date,strategy,ret,turnover")?;
            for l in &ledgers {
                l.write_csv(&mut *b, false)?;
            }
            Ok(())
        })?;
        std::fs::write(dir.join(format!("ledgers_{}.csv", freq.as_str())), buf)?;
    }
    std::fs::write(dir.join("summary.csv"), with_comment(&prov, |b| Ok(write_summary_csv(b, &summary)?))?)?;
    Ok(summary)
}

/// Runs forecast, evaluate and backtest in turn.
pub fn cmd_report(cfg: &ExperimentConfig, out: &Path, format: Format) -> CliResult<()> {
    if !cfg.forecast_models().is_empty() {
        cmd_forecast(cfg, out, format)?;
        cmd_evaluate(cfg, out)?;
    }
    cmd_backtest(cfg, out)?;
    Ok(())
}

