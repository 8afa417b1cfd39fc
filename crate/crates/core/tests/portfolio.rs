use covcast::portfolio::*;
use covcast::sim::{normals, rng};
use covcast::{Matrix, ReturnPanel};
use rand::Rng;

fn random_psd<R: Rng>(r: &mut R, n: usize, rank: usize) -> Matrix {
    let a = Matrix::from_vec(n, rank, normals(r, n * rank));
    a.matmul(&a.transpose())
}

fn grid_search(s: &Matrix) -> (Vec<f64>, f64) {
    let steps = 1000;
    let mut best = (vec![0.0; 3], f64::INFINITY);
    for i in 0..=steps {
        for j in 0..=steps - i {
            let w = [i as f64 / steps as f64, j as f64 / steps as f64, (steps - i - j) as f64 / steps as f64];
            let v: f64 = (0..3).map(|a| (0..3).map(|b| w[a] * s[(a, b)] * w[b]).sum::<f64>()).sum();
            if v < best.1 {
                best = (w.to_vec(), v);
            }
        }
    }
    best
}

fn variance(s: &Matrix, w: &[f64]) -> f64 {
    w.iter().zip(s.matvec(w)).map(|(a, b)| a * b).sum()
}

#[test]
fn gmv_diagonal_is_inverse_variance() {
    let mut r = rng(2);
    for n in 1..8 {
        let vars: Vec<f64> = (0..n).map(|_| r.random_range(0.1..5.0)).collect();
        let w = solve_gmv(&Matrix::from_diag(&vars)).unwrap().weights;
        let z: f64 = vars.iter().map(|v| 1.0 / v).sum();
        for (wi, v) in w.iter().zip(&vars) {
            assert!((wi - 1.0 / v / z).abs() < 1e-12);
        }
    }
}

#[test]
fn gmv_matches_grid_search_three_assets() {
    let mut r = rng(3);
    for k in 0..25 {
        let s = random_psd(&mut r, 3, if k % 5 == 0 { 2 } else { 5 });
        let w = solve_gmv(&s).unwrap().weights;
        let (g, gv) = grid_search(&s);
        assert!(variance(&s, &w) <= gv + 1e-12);
        let spread = w.iter().zip(&g).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(spread < 2e-3, "instance {k}: {w:?} vs {g:?}");
        assert!(kkt_residual(&s, &w) < 1e-8, "instance {k}");
    }
}

#[test]
fn gmv_invariances() {
    let mut r = rng(4);
    for _ in 0..50 {
        let n = r.random_range(2..7);
        let s = random_psd(&mut r, n, n + 2);
        let w = solve_gmv(&s).unwrap().weights;
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(w.iter().all(|&x| x >= 0.0));
        let c = r.random_range(0.01..100.0);
        let wc = solve_gmv(&s.scale(c)).unwrap().weights;
        for (a, b) in w.iter().zip(&wc) {
            assert!((a - b).abs() < 1e-9);
        }
        // A dominated extra asset cannot raise the minimum variance.
        let base = variance(&s, &w);
        let mut big = Matrix::zeros(n + 1, n + 1);
        for i in 0..n {
            for j in 0..n {
                big[(i, j)] = s[(i, j)];
            }
        }
        big[(n, n)] = 10.0 * s.trace();
        let wb = solve_gmv(&big).unwrap().weights;
        assert!(variance(&big, &wb) <= base * (1.0 + 1e-12));
    }
}

fn panel(rows: Vec<Vec<f64>>) -> ReturnPanel {
    ReturnPanel::synthetic(Matrix::from_rows(&rows))
}

#[test]
fn hand_ledger_two_assets_four_days() {
    let p = panel(vec![
        vec![0.0, 0.0],
        vec![0.01, -0.02],
        vec![0.03, 0.01],
        vec![-0.01, 0.02],
        vec![0.02, 0.0],
    ]);
    let targets = [vec![0.6, 0.4], vec![0.3, 0.7]];
    let mut k = 0;
    let ledger = simulate_schedule("hand", &p, &[0, 1, 2, 3], Rebalance::Daily, |i| i == 2, |_| {
        k += 1;
        Ok(targets[k - 1].clone())
    })
    .unwrap();

    // Day 1: hold (0.6, 0.4).
    let r1: f64 = 0.6 * 0.01 + 0.4 * -0.02;
    let d1 = [0.6 * 1.01 / (1.0 + r1), 0.4 * 0.98 / (1.0 + r1)];
    // Day 2: drifted weights held.
    let r2: f64 = d1[0] * 0.03 + d1[1] * 0.01;
    let d2 = [d1[0] * 1.03 / (1.0 + r2), d1[1] * 1.01 / (1.0 + r2)];
    // Day 3: rebalance to (0.3, 0.7).
    let to = (0.3 - d2[0]).abs() + (0.7 - d2[1]).abs();
    let r3: f64 = 0.3 * -0.01 + 0.7 * 0.02;
    let d3 = [0.3 * 0.99 / (1.0 + r3), 0.7 * 1.02 / (1.0 + r3)];
    // Day 4: drift.
    let r4 = d3[0] * 0.02 + d3[1] * 0.0;

    let e = &ledger.entries;
    let close = |a: f64, b: f64| (a - b).abs() < 1e-12;
    assert!(close(e[0].ret, r1) && close(e[1].ret, r2) && close(e[2].ret, r3) && close(e[3].ret, r4));
    assert!(close(e[1].weights[0], d1[0]) && close(e[1].weights[1], d1[1]));
    assert!(close(e[2].pre_weights[0], d2[0]) && close(e[2].pre_weights[1], d2[1]));
    assert!(close(e[3].weights[0], d3[0]));
    assert_eq!(e[0].turnover, None);
    assert!(close(e[2].turnover.unwrap(), to));
    assert!(close(turnover(&ledger).unwrap(), to));
    assert_eq!(e.iter().filter(|x| x.rebalance).count(), 2);
}

#[test]
fn zero_returns_and_single_asset() {
    let p = panel(vec![vec![0.0, 0.0]; 8]);
    let ew = equal_weight_ledger(&p, &[0, 1, 2, 3, 4, 5], Rebalance::Daily).unwrap();
    assert!(ew.entries.iter().all(|e| e.pre_weights == vec![0.5, 0.5]));
    assert_eq!(turnover(&ew).unwrap(), 0.0);
    assert_eq!(annualized_variance(&ew).unwrap(), 0.0);

    let one = panel(vec![vec![0.01], vec![-0.02], vec![0.03], vec![0.0]]);
    let cov = Matrix::from_diag(&[2.0]);
    let l = run_backtest("one", &one, &[0, 1, 2], Rebalance::Daily, |_| Some(&cov)).unwrap();
    assert!(l.entries.iter().all(|e| e.weights == vec![1.0]));
    assert_eq!(turnover(&l).unwrap(), 0.0);
}

#[test]
fn equal_weight_turnover_is_drift_distance() {
    let mut r = rng(8);
    let rows: Vec<Vec<f64>> = (0..30).map(|_| normals(&mut r, 3).iter().map(|z| 0.01 * z).collect()).collect();
    let p = panel(rows);
    let dec: Vec<usize> = (0..29).collect();
    let l = equal_weight_ledger(&p, &dec, Rebalance::Weekly).unwrap();
    for e in l.entries.iter().filter(|e| e.turnover.is_some()) {
        let hand: f64 = e.pre_weights.iter().map(|w| (1.0 / 3.0 - w).abs()).sum();
        assert!((e.turnover.unwrap() - hand).abs() < 1e-15);
        assert!(hand > 0.0);
    }
    assert_eq!(l.entries.iter().filter(|e| e.turnover.is_some()).count(), 5);
    // Buy and hold: one allocation, no turnover events.
    let bh = simulate_schedule("bh", &p, &dec, Rebalance::Monthly, |_| false, |_| Ok(vec![0.2, 0.3, 0.5])).unwrap();
    assert_eq!(turnover(&bh).unwrap(), 0.0);
}

#[test]
fn ledger_conserves_wealth() {
    let mut r = rng(9);
    let rows: Vec<Vec<f64>> = (0..40).map(|_| normals(&mut r, 4).iter().map(|z| 0.02 * z).collect()).collect();
    let p = panel(rows.clone());
    let dec: Vec<usize> = (0..39).collect();
    let l = simulate_schedule("w", &p, &dec, Rebalance::Monthly, |_| false, |_| Ok(vec![0.1, 0.2, 0.3, 0.4])).unwrap();
    let mut holdings = [0.1, 0.2, 0.3, 0.4];
    let mut wealth: f64 = 1.0;
    for (i, e) in l.entries.iter().enumerate() {
        for (h, ret) in holdings.iter_mut().zip(&rows[i + 1]) {
            *h *= 1.0 + ret;
        }
        let next: f64 = holdings.iter().sum();
        assert!((next / wealth - 1.0 - e.ret).abs() < 1e-13);
        wealth = next;
    }
}

#[test]
fn annualized_variance_hand_ledger() {
    let p = panel(vec![vec![0.0], vec![0.01], vec![-0.01], vec![0.02]]);
    let l = equal_weight_ledger(&p, &[0, 1, 2], Rebalance::Daily).unwrap();
    let m = (0.01 - 0.01 + 0.02) / 3.0;
    let hand = ((0.01f64 - m).powi(2) + (-0.01f64 - m).powi(2) + (0.02f64 - m).powi(2)) / 2.0 * 252.0;
    assert!((annualized_variance(&l).unwrap() - hand).abs() < 1e-15);
    let empty = BacktestLedger {
        strategy: "x".into(),
        freq: Rebalance::Daily,
        entries: vec![],
    };
    assert!(turnover(&empty).is_err() && annualized_variance(&empty).is_err());
}

#[test]
fn f_test_detects_halved_variance() {
    let mut hits = 0;
    for seed in 0..20 {
        let mut r = rng(100 + seed);
        let a: Vec<f64> = normals(&mut r, 500).iter().map(|z| z * 0.5f64.sqrt()).collect();
        let b = normals(&mut r, 500);
        if f_test(&a, &b).unwrap().p_value < 0.01 {
            hits += 1;
        }
    }
    assert!(hits >= 19, "{hits}");
}

#[test]
fn csv_layouts() {
    let p = panel(vec![vec![0.01, 0.0]; 40]);
    let dec: Vec<usize> = (0..39).collect();
    let ew = equal_weight_ledger(&p, &dec, Rebalance::Daily).unwrap();
    let mut buf = Vec::new();
    ew.write_csv(&mut buf, true).unwrap();
    assert!(String::from_utf8(buf).unwrap().starts_with("date,strategy,ret,turnover\n"));
    let row = summarize(&ew, None).unwrap();
    let mut buf = Vec::new();
    write_summary_csv(&mut buf, &[row]).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(text.starts_with("strategy,freq,variance,turnover,f_stat,p_value\nequal_weight,daily,"));
}
