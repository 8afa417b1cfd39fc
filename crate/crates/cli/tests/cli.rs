use std::path::Path;
use std::process::Command as Proc;

use covcast::cab::CabConfig;
use covcast::data::{RegimeCalendar, RegimeSegment, OVERALL};
use covcast::models::{run_model, ModelId};
use covcast_cli::commands::{cmd_backtest, cmd_evaluate, cmd_forecast, load_panel, split};
use covcast_cli::config::{SyntheticConfig, SyntheticKind};
use covcast_cli::store::{read_series, ForecastIndex};
use covcast_cli::{ExperimentConfig, Format, Overrides};

fn base_cfg(models: &[&str]) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.data.synthetic = Some(SyntheticConfig {
        kind: SyntheticKind::Regime,
        assets: 3,
        days: 260,
        param: 40.0,
        seed: 5,
    });
    cfg.horizon = 10;
    cfg.test_fraction = 0.4;
    cfg.models = models.iter().map(|s| s.to_string()).collect();
    cfg
}

fn tiny_cab() -> CabConfig {
    CabConfig {
        lookback: 5,
        kernel: 3,
        hidden: 4,
        layers: 1,
        heads: 2,
        dropout: 0.2,
        epochs: 2,
        batch: 16,
        lr: 1e-3,
        online_window: 10,
        ..Default::default()
    }
}

fn read(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap()
}

#[test]
fn config_round_trip() {
    let mut cfg = base_cfg(&["na", "cab", "equal_weight"]);
    cfg.test_start = chrono::NaiveDate::from_ymd_opt(2000, 6, 1);
    cfg.settings.cab = tiny_cab();
    cfg.settings.ewma.eta = 0.9;
    let text = cfg.to_toml().unwrap();
    let back = ExperimentConfig::from_toml(&text).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(back.to_toml().unwrap(), text);
    assert_eq!(back.hash(), cfg.hash());
}

#[test]
fn validation_lists_every_violation() {
    let mut cfg = base_cfg(&["na", "bogus", "na"]);
    cfg.horizon = 5;
    cfg.jobs = 0;
    let err = cfg.validate().unwrap_err();
    let msg = err.to_string();
    for part in ["horizon 5", "bogus", "listed twice", "jobs"] {
        assert!(msg.contains(part), "{msg}");
    }
    assert_eq!(err.exit_code(), 2);
    assert!(base_cfg(&ExperimentConfig::default().models.iter().map(|s| s.as_str()).collect::<Vec<_>>())
        .validate()
        .is_ok());
    assert_eq!(ExperimentConfig::default().forecast_models(), ModelId::ALL.to_vec());
}

#[test]
fn forecast_smoke_one_matrix_per_test_date() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = base_cfg(&["na"]);
    let index = cmd_forecast(&cfg, dir.path(), Format::Binary).unwrap();
    let panel = load_panel(&cfg).unwrap();
    let s = split(&cfg, &panel).unwrap();
    assert_eq!(*s.rows.last().unwrap(), panel.len() - 1 - cfg.horizon);
    assert_eq!(index.models.len(), 1);
    assert_eq!(index.models[0].count, s.rows.len());
    let (prov, series) = read_series(&dir.path().join("forecasts/na.cvfc"), Format::Binary).unwrap();
    assert_eq!(prov, cfg.provenance());
    let direct = run_model(ModelId::Na, &panel, &s.rows, cfg.horizon, s.train_end, &cfg.settings).unwrap();
    assert_eq!(series, direct.forecasts);

    // Audit CSV carries the same values and the provenance comment.
    let csv_dir = tempfile::tempdir().unwrap();
    cmd_forecast(&cfg, csv_dir.path(), Format::Csv).unwrap();
    let text = read(&csv_dir.path().join("forecasts/na.csv"));
    assert!(text.starts_with(&format!("# {}\ndate,i,j,value\n", cfg.provenance())));
    let (_, from_csv) = read_series(&csv_dir.path().join("forecasts/na.csv"), Format::Csv).unwrap();
    for (a, b) in from_csv.iter().zip(&series) {
        assert_eq!(a.asof, b.asof);
        assert_eq!(a.values, b.values);
    }
    assert_eq!(ForecastIndex::read(&csv_dir.path().join("forecasts")).unwrap().format, Format::Csv);
}

#[test]
fn same_seed_gives_identical_cab_files() {
    let mut cfg = base_cfg(&["cab"]);
    cfg.settings.cab = tiny_cab();
    let bytes = |cfg: &ExperimentConfig| {
        let dir = tempfile::tempdir().unwrap();
        cmd_forecast(cfg, dir.path(), Format::Binary).unwrap();
        (
            std::fs::read(dir.path().join("forecasts/cab.cvfc")).unwrap(),
            std::fs::read(dir.path().join("forecasts/cab_loss.csv")).unwrap(),
        )
    };
    let a = bytes(&cfg);
    assert_eq!(a, bytes(&cfg));
    cfg.seed += 1;
    cfg.settings.cab.seed = cfg.seed;
    assert_ne!(a.0, bytes(&cfg).0);
}

#[test]
fn identical_forecasts_have_no_rank_difference() {
    // EWMA with eta = 1 reproduces NA exactly.
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = base_cfg(&["na", "ewma"]);
    cfg.settings.ewma.eta = 1.0;
    cmd_forecast(&cfg, dir.path(), Format::Binary).unwrap();
    let report = cmd_evaluate(&cfg, dir.path()).unwrap();
    for m in &report.metrics {
        assert_eq!(m.mean_ranks, vec![1.5, 1.5]);
        assert!(m.friedman.is_none());
        let nem = m.nemenyi.as_ref().unwrap();
        assert_eq!(nem.diffs[0][1], 0.0);
        assert!(nem.significant.iter().flatten().all(|&s| !s));
    }
}

#[test]
fn evaluation_tables_follow_config_order() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = base_cfg(&["lw", "na", "ewma"]);
    let d = |y, m, day| chrono::NaiveDate::from_ymd_opt(y, m, day).unwrap();
    let seg = |label: &str, start, end| RegimeSegment {
        label: label.into(),
        start,
        end,
    };
    cfg.regimes = RegimeCalendar {
        segments: vec![
            seg("Early", d(2000, 1, 1), d(2000, 9, 30)),
            seg("Late", d(2000, 10, 1), d(2001, 12, 31)),
            seg(OVERALL, d(2000, 1, 1), d(2001, 12, 31)),
        ],
    };
    cmd_forecast(&cfg, dir.path(), Format::Binary).unwrap();
    let report = cmd_evaluate(&cfg, dir.path()).unwrap();
    assert_eq!(report.models, vec!["lw", "na", "ewma"]);
    assert!(report.metrics.iter().all(|m| m.friedman.is_some()));
    let results = read(&dir.path().join("evaluation/results.csv"));
    let mut lines = results.lines();
    assert_eq!(lines.next().unwrap(), format!("# {}", cfg.provenance()));
    assert_eq!(lines.next().unwrap(), "model,regime,metric,value");
    let order: Vec<&str> = lines.map(|l| l.split(',').next().unwrap()).collect();
    let mut dedup = order.clone();
    dedup.dedup();
    assert_eq!(dedup, vec!["lw", "na", "ewma"]);
    // Three calendar segments plus the full window, per model and metric.
    assert_eq!(order.len(), 3 * 4 * 2);
    assert!(results.contains("\nna,All,frobenius,"));
    for f in ["tests.json", "cd_frobenius.svg", "cd_euclidean.json", "normality.csv"] {
        assert!(dir.path().join("evaluation").join(f).exists(), "{f}");
    }
    assert!(read(&dir.path().join("evaluation/cd_frobenius.svg")).starts_with(&format!("<!-- {}", cfg.provenance())));
}

#[test]
fn misaligned_forecasts_are_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = base_cfg(&["na", "lw", "ewma"]);
    cmd_forecast(&cfg, dir.path(), Format::Binary).unwrap();
    // Replace the LW file with one that misses the last date.
    let path = dir.path().join("forecasts/lw.cvfc");
    let (prov, mut series) = read_series(&path, Format::Binary).unwrap();
    series.pop();
    covcast_cli::store::write_series(&path, Format::Binary, &prov, &series).unwrap();
    let err = cmd_evaluate(&cfg, dir.path()).unwrap_err();
    assert_eq!(err.exit_code(), 3, "{err}");
}

#[test]
fn equal_weight_only_backtest_has_one_row_per_frequency() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = base_cfg(&["equal_weight"]);
    let rows = cmd_backtest(&cfg, dir.path()).unwrap();
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r.strategy == "equal_weight" && r.f_test.is_none()));
    let summary = read(&dir.path().join("backtest/summary.csv"));
    assert_eq!(summary.lines().count(), 5);
}

#[test]
fn backtest_reports_p_values_and_is_deterministic() {
    let cfg = base_cfg(&["na", "lw", "equal_weight"]);
    let run = || {
        let dir = tempfile::tempdir().unwrap();
        cmd_forecast(&cfg, dir.path(), Format::Binary).unwrap();
        let rows = cmd_backtest(&cfg, dir.path()).unwrap();
        let files: Vec<String> = ["summary.csv", "ledgers_daily.csv", "ledgers_weekly.csv", "ledgers_monthly.csv"]
            .iter()
            .map(|f| read(&dir.path().join("backtest").join(f)))
            .collect();
        (rows, files)
    };
    let (rows, files) = run();
    assert_eq!(files, run().1);
    assert_eq!(rows.len(), 9);
    let ew: Vec<f64> = rows.iter().filter(|r| r.strategy == "equal_weight").map(|r| r.variance).collect();
    for r in rows.iter().filter(|r| r.strategy != "equal_weight") {
        let t = r.f_test.expect("F-test against 1/N");
        let bench = ew[covcast::portfolio::Rebalance::ALL.iter().position(|&f| f == r.freq).unwrap()];
        assert_eq!(r.variance < bench, t.statistic < 1.0);
        assert!((0.0..=1.0).contains(&t.p_value));
    }
    assert!(files[0].starts_with(&format!("# {}\nstrategy,freq,variance,turnover,f_stat,p_value\n", cfg.provenance())));
}

fn write_config(dir: &Path, cfg: &ExperimentConfig) -> std::path::PathBuf {
    let p = dir.join("exp.toml");
    std::fs::write(&p, cfg.to_toml().unwrap()).unwrap();
    p
}

fn covcast(args: &[&str], env: &[(&str, &str)]) -> std::process::Output {
    let mut c = Proc::new(env!("CARGO_BIN_EXE_covcast"));
    c.args(args).env_remove("COVCAST_SEED").env_remove("COVCAST_JOBS").env("RUST_LOG", "error");
    for (k, v) in env {
        c.env(k, v);
    }
    c.output().unwrap()
}

#[test]
fn binary_exit_codes_and_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let out_s = out.to_str().unwrap();
    let cfg_path = write_config(dir.path(), &base_cfg(&["na"]));
    let cfg_s = cfg_path.to_str().unwrap();

    let ok = covcast(&["forecast", "--config", cfg_s, "--out", out_s], &[("COVCAST_SEED", "9")]);
    assert_eq!(ok.status.code(), Some(0), "{}", String::from_utf8_lossy(&ok.stderr));
    assert_eq!(ForecastIndex::read(&out.join("forecasts")).unwrap().seed, 9);
    let ok = covcast(&["forecast", "--config", cfg_s, "--out", out_s, "--seed", "11"], &[("COVCAST_SEED", "9")]);
    assert_eq!(ok.status.code(), Some(0));
    assert_eq!(ForecastIndex::read(&out.join("forecasts")).unwrap().seed, 11);

    let bad = covcast(&["forecast", "--config", cfg_s, "--out", out_s, "--horizon", "300"], &[]);
    assert_eq!(bad.status.code(), Some(2));
    let bad = covcast(&["forecast", "--config", cfg_s, "--out", out_s], &[("COVCAST_JOBS", "many")]);
    assert_eq!(bad.status.code(), Some(2));

    let mut missing = ExperimentConfig::default();
    missing.data.prices = Some("no_such_prices.csv".into());
    missing.data.mode = covcast::data::ReturnMode::Raw;
    let p = write_config(dir.path(), &missing);
    let bad = covcast(&["forecast", "--config", p.to_str().unwrap(), "--out", out_s], &[]);
    assert_eq!(bad.status.code(), Some(3));
}

#[test]
fn overrides_apply_after_file() {
    let dir = tempfile::tempdir().unwrap();
    let p = write_config(dir.path(), &base_cfg(&["na"]));
    let flags = Overrides {
        horizon: Some(15),
        models: Some(vec!["lw".into(), "equal_weight".into()]),
        seed: Some(3),
        jobs: Some(2),
    };
    let cfg = ExperimentConfig::load(Some(&p), &flags).unwrap();
    assert_eq!((cfg.horizon, cfg.seed, cfg.jobs, cfg.settings.cab.seed), (15, 3, 2, 3));
    assert_eq!(cfg.forecast_models(), vec![ModelId::Lw]);
    assert!(cfg.wants_equal_weight());
}
