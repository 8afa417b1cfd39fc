use covcast::garch::{
    self, dcc, fit_dcc, fit_dcc_with_target, fit_garch11, nl_shrink_correlation, GarchConfig, NlShrinkConfig,
};
use covcast::linalg::Matrix;
use covcast::rolling::is_valid_covariance;
use covcast::sim;
use covcast::data::ReturnPanel;

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[test]
fn garch_parameter_recovery() {
    let vbar = 1e-4;
    let (mut ea, mut eb) = (Vec::new(), Vec::new());
    for seed in 0..20 {
        let mut rng = sim::rng(1000 + seed);
        let e = sim::simulate_garch(&mut rng, 0.05 * vbar, 0.08, 0.90, 4000, 500);
        let fit = fit_garch11(&e).unwrap();
        assert!(fit.params.is_admissible());
        ea.push((fit.params.alpha - 0.08).abs());
        eb.push((fit.params.beta - 0.90).abs());
    }
    let (ma, mb) = (median(ea), median(eb));
    assert!(ma <= 0.04 && mb <= 0.04, "median abs errors alpha {ma}, beta {mb}");
}

#[test]
fn iid_noise_has_weak_arch_effect() {
    for seed in 0..5 {
        let mut rng = sim::rng(77 + seed);
        let e: Vec<f64> = sim::normals(&mut rng, 2000).iter().map(|z| 0.01 * z).collect();
        let fit = fit_garch11(&e).unwrap();
        let n = e.len() as f64;
        let m = e.iter().sum::<f64>() / n;
        let var = e.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
        let uv = fit.params.unconditional_variance();
        assert!(fit.params.alpha < 0.05, "alpha {}", fit.params.alpha);
        assert!((uv / var - 1.0).abs() < 0.15, "unconditional {uv} vs sample {var}");
    }
}

#[test]
fn dcc_on_constant_correlation_has_small_alpha() {
    let cov = sim::equicorrelated(&[1.0, 1.0, 1.0], 0.5);
    let mut alphas = Vec::new();
    for seed in 0..20 {
        let z = sim::mvn_rows(&mut sim::rng(500 + seed), &cov, 1000).unwrap();
        let p = fit_dcc(&z).unwrap();
        assert!(p.alpha >= 0.0 && p.beta >= 0.0 && p.alpha + p.beta < 1.0);
        assert!(p.r_last.diag().iter().all(|&d| d == 1.0));
        alphas.push(p.alpha);
    }
    let m = median(alphas);
    assert!(m <= 0.03, "median alpha {m}");
}

#[test]
fn nl_shrinkage_beats_sample_on_identity() {
    let mut wins = 0;
    for trial in 0..100 {
        let x = sim::mvn_rows(&mut sim::rng(9000 + trial), &Matrix::identity(20), 200).unwrap();
        let corr = dcc::sample_correlation(&x);
        let shrunk = nl_shrink_correlation(&corr, 200, &NlShrinkConfig::default()).unwrap();
        let i = Matrix::identity(20);
        if shrunk.sub(&i).frobenius_norm() < corr.sub(&i).frobenius_norm() {
            wins += 1;
        }
    }
    assert!(wins >= 90, "{wins}/100");
}

#[test]
fn nl_shrinkage_reduces_spectral_dispersion() {
    let spread = |m: &Matrix<f64>| {
        let v = m.sym_eigen().unwrap().values;
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        v.iter().map(|x| (x - mean).powi(2)).sum::<f64>()
    };
    let cov = sim::equicorrelated(&vec![1.0; 10], 0.3);
    for trial in 0..20 {
        let x = sim::mvn_rows(&mut sim::rng(300 + trial), &cov, 100).unwrap();
        let corr = dcc::sample_correlation(&x);
        let shrunk = nl_shrink_correlation(&corr, 100, &NlShrinkConfig::default()).unwrap();
        assert!(spread(&shrunk) <= spread(&corr));
    }
}

fn random_panel(n: usize, days: usize, seed: u64) -> ReturnPanel<f64> {
    let vols: Vec<f64> = (0..n).map(|i| 0.01 + 0.003 * i as f64).collect();
    let mut rng = sim::rng(seed);
    let mut cols = Vec::new();
    for (i, v) in vols.iter().enumerate() {
        let e = sim::simulate_garch(&mut rng, 0.05 * v * v, 0.07, 0.88, days, 200);
        cols.push(e.into_iter().map(|x| x + 0.001 * i as f64).collect::<Vec<_>>());
    }
    let common = sim::normals(&mut rng, days);
    let m = Matrix::from_fn(days, n, |t, j| cols[j][t] + 0.006 * common[t]);
    ReturnPanel::synthetic(m)
}

#[test]
fn dcc_nl_nearly_inert_for_two_assets() {
    let panel = random_panel(2, 1000, 4);
    let cfg = GarchConfig::default();
    for t in [800, 900, 999] {
        let a = garch::forecast_dcc(&panel, t, 20, &cfg).unwrap().cov.values;
        let b = garch::forecast_dcc_nl(&panel, t, 20, &cfg).unwrap().cov.values;
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            assert!((x - y).abs() <= 0.05 * x.abs().max(1e-12), "{x} vs {y}");
        }
    }
}

#[test]
fn forecasts_are_valid_covariances() {
    let panel = random_panel(4, 320, 11);
    let cfg = GarchConfig::default();
    for model in [garch::GarchModel::Ccc, garch::GarchModel::Dcc, garch::GarchModel::DccNl] {
        let mut runner = garch::GarchRunner::new(model, cfg).unwrap();
        for t in (200..320).step_by(15) {
            let f = runner.forecast(&panel, t, 20).unwrap();
            assert!(is_valid_covariance(&f.cov.values), "{model:?} at {t}");
            assert_eq!(f.cov.asof, panel.dates[t]);
        }
    }
}

#[test]
fn identity_target_shrinkage_is_plain_dcc() {
    let panel = random_panel(3, 300, 5);
    let (resid, _) = garch::residual_history(&panel, 299, 20, &GarchConfig::default()).unwrap();
    let fits = garch::fit_univariate_all(&resid, 50).unwrap();
    let z = garch::standardized(&fits);
    let i = Matrix::identity(3);
    let shrunk = nl_shrink_correlation(&i, z.rows(), &NlShrinkConfig::default()).unwrap();
    let a = fit_dcc_with_target(&z, i).unwrap();
    let b = fit_dcc_with_target(&z, shrunk).unwrap();
    let fa = garch::dcc_forecast(&fits, &a, 20).unwrap();
    let fb = garch::dcc_forecast(&fits, &b, 20).unwrap();
    assert!(fa.sub(&fb).max_abs() < 1e-8 * fa.max_abs());
}

#[test]
fn ccc_with_identical_assets_is_rank_one() {
    let base = random_panel(1, 300, 8);
    let m = Matrix::from_fn(300, 2, |t, _| base.returns[(t, 0)]);
    let panel = ReturnPanel::synthetic(m);
    let f = garch::forecast_ccc(&panel, 299, 10, &GarchConfig::default()).unwrap();
    let c = f.cov.values;
    let det = c[(0, 0)] * c[(1, 1)] - c[(0, 1)] * c[(0, 1)];
    assert!(det.abs() < 1e-12 * c[(0, 0)] * c[(1, 1)]);
}

#[test]
fn refit_cadence_reuses_parameters() {
    let panel = random_panel(2, 300, 12);
    let cfg = GarchConfig {
        refit_every: 5,
        ..Default::default()
    };
    let mut runner = garch::GarchRunner::new(garch::GarchModel::Dcc, cfg).unwrap();
    let first = runner.forecast(&panel, 250, 10).unwrap().report;
    let second = runner.forecast(&panel, 251, 10).unwrap().report;
    assert!(first.refit && !second.refit);
    assert_eq!(first.dcc_alpha, second.dcc_alpha);
    assert_eq!(first.garch[0].omega, second.garch[0].omega);
    assert!(runner.forecast(&panel, 255, 10).unwrap().report.refit);
    let json = serde_json::to_string(&first).unwrap();
    assert!(json.contains("dcc_alpha"));
}

#[test]
fn insufficient_history_is_reported() {
    let panel = random_panel(2, 60, 1);
    assert!(garch::forecast_ccc(&panel, 40, 20, &GarchConfig::default()).is_err());
}
