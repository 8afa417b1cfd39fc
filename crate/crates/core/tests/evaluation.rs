use chrono::NaiveDate;
use covcast::data::{RegimeCalendar, RegimeSegment};
use covcast::evaluation::*;
use covcast::sim::{normals, rng};
use covcast::Matrix;
use rand::Rng;
use rand_distr::{Distribution, Exp};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

fn random_sym<R: Rng>(r: &mut R, n: usize) -> Matrix {
    let a = Matrix::from_vec(n, n, normals(r, n * n));
    a.add(&a.transpose())
}

fn euclid_loop(a: &Matrix, b: &Matrix) -> f64 {
    let mut s = 0.0;
    for i in 0..a.rows() {
        for j in 0..a.cols() {
            if j >= i {
                s += (a[(i, j)] - b[(i, j)]).powi(2);
            }
        }
    }
    s.sqrt()
}

fn frob_loop(a: &Matrix, b: &Matrix) -> f64 {
    let mut s = 0.0;
    for i in 0..a.rows() {
        for j in 0..a.cols() {
            s += (a[(i, j)] - b[(i, j)]).powi(2);
        }
    }
    s.sqrt()
}

#[test]
fn losses_match_loops_and_are_metrics() {
    let mut r = rng(11);
    for _ in 0..300 {
        let n = r.random_range(2..9);
        let (a, b, c) = (random_sym(&mut r, n), random_sym(&mut r, n), random_sym(&mut r, n));
        let e = loss_euclidean(&a, &b).unwrap();
        let f = loss_frobenius(&a, &b).unwrap();
        assert!((e - euclid_loop(&a, &b)).abs() < 1e-13);
        assert!((f - frob_loop(&a, &b)).abs() < 1e-13);
        assert!(f >= e);
        assert_eq!(e, loss_euclidean(&b, &a).unwrap());
        assert!(loss_euclidean(&a, &c).unwrap() <= e + loss_euclidean(&b, &c).unwrap() + 1e-12);
        assert!(loss_frobenius(&a, &c).unwrap() <= f + loss_frobenius(&b, &c).unwrap() + 1e-12);
        assert_eq!(loss_frobenius(&a, &a).unwrap(), 0.0);
    }
}

#[test]
fn friedman_hand_example() {
    // Ranks per date: (1,2,3), (1,3,2), (2,1,3), (1,2,3); rank sums 5, 8, 11.
    let a = [1.0, 1.0, 2.0, 1.0];
    let b = [2.0, 3.0, 1.0, 2.0];
    let c = [3.0, 2.0, 3.0, 3.0];
    let r = friedman_test(&[&a, &b, &c]).unwrap();
    let (k, n) = (3.0, 4.0);
    let sums: [f64; 3] = [5.0, 8.0, 11.0];
    let hand = 12.0 / (n * k * (k + 1.0)) * sums.iter().map(|s| s * s).sum::<f64>() - 3.0 * n * (k + 1.0);
    assert!((hand - 4.5).abs() < 1e-12);
    assert!((r.statistic - hand).abs() < 1e-12);
    assert!((r.p_value - (-hand / 2.0f64).exp()).abs() < 1e-10);
    assert_eq!(r.mean_ranks, vec![1.25, 2.0, 2.75]);
}

#[test]
fn friedman_boundaries() {
    let best: Vec<f64> = (0..20).map(|i| i as f64).collect();
    let mid: Vec<f64> = best.iter().map(|x| x + 1.0).collect();
    let worst: Vec<f64> = best.iter().map(|x| x + 2.0).collect();
    let r = friedman_test(&[&mid, &best, &worst]).unwrap();
    assert_eq!(r.mean_ranks, vec![2.0, 1.0, 3.0]);
    assert!(r.p_value < 1e-4);

    let same = vec![1.0; 15];
    let r = friedman_test(&[&same, &same, &same, &same]).unwrap();
    assert_eq!(r.statistic, 0.0);
    assert_eq!(r.p_value, 1.0);
    assert!(r.mean_ranks.iter().all(|&m| m == 2.5));

    assert!(friedman_test(&[&same[..10], &same, &same]).is_err());
}

#[test]
fn ranks_sum_and_rank_invariance() {
    let mut r = rng(5);
    let k = 6;
    let n = 50;
    let losses: Vec<Vec<f64>> = (0..k)
        .map(|m| (0..n).map(|_| r.random::<f64>() + 0.05 * m as f64).collect())
        .collect();
    let refs: Vec<&[f64]> = losses.iter().map(|v| v.as_slice()).collect();
    let a = friedman_test(&refs).unwrap();
    assert!((a.mean_ranks.iter().sum::<f64>() / k as f64 - (k as f64 + 1.0) / 2.0).abs() < 1e-12);
    let transformed: Vec<Vec<f64>> = losses.iter().map(|v| v.iter().map(|x| (3.0 * x).exp() + 1.0).collect()).collect();
    let refs2: Vec<&[f64]> = transformed.iter().map(|v| v.as_slice()).collect();
    let b = friedman_test(&refs2).unwrap();
    assert_eq!(a.mean_ranks, b.mean_ranks);
    assert_eq!(a.statistic, b.statistic);
    let names: Vec<String> = (0..k).map(|i| format!("m{i}")).collect();
    let na = nemenyi(&names, &a.mean_ranks, n, 0.05).unwrap();
    let nb = nemenyi(&names, &b.mean_ranks, n, 0.05).unwrap();
    assert_eq!(na.significant, nb.significant);
}

#[test]
fn nemenyi_flags_follow_cd() {
    let names: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
    let r = nemenyi(&names, &[1.0, 2.0, 3.0], 30, 0.05).unwrap();
    for i in 0..3 {
        for j in 0..3 {
            assert_eq!(r.significant[i][j], r.diffs[i][j] > r.cd);
        }
    }
    let same = nemenyi(&names, &[2.0, 2.0, 2.0], 30, 0.05).unwrap();
    assert!(same.significant.iter().flatten().all(|&s| !s));
}

/// `P(range of k iid N(0,1) <= q)` by quadrature.
fn range_cdf(k: usize, q: f64) -> f64 {
    let nrm = Normal::new(0.0, 1.0).unwrap();
    let (lo, hi, steps) = (-9.0, 9.0, 6000);
    let h = (hi - lo) / steps as f64;
    let f = |z: f64| nrm.pdf(z) * (nrm.cdf(z + q) - nrm.cdf(z)).powi(k as i32 - 1);
    let mut s = f(lo) + f(hi);
    for i in 1..steps {
        let z = lo + i as f64 * h;
        s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(z);
    }
    k as f64 * s * h / 3.0
}

#[test]
fn q_table_matches_studentized_range_quadrature() {
    for alpha in [0.05, 0.10] {
        for k in 2..=20 {
            let q = nemenyi_q(k, alpha).unwrap() * 2f64.sqrt();
            let p = range_cdf(k, q);
            assert!((p - (1.0 - alpha)).abs() < 1.5e-3, "k={k} alpha={alpha}: {p}");
        }
    }
}

#[test]
fn jarque_bera_calibration_and_power() {
    let mut rejections = 0;
    for seed in 0..100 {
        let x = normals(&mut rng(seed), 10_000);
        if normality_screen(&x).unwrap().p_value <= 0.01 {
            rejections += 1;
        }
    }
    assert!(rejections <= 5, "{rejections} rejections");
    let exp = Exp::new(1.0).unwrap();
    let mut r = rng(1);
    let x: Vec<f64> = (0..10_000).map(|_| exp.sample(&mut r)).collect();
    let res = normality_screen(&x).unwrap();
    assert!(res.p_value < 0.01);
    assert!((res.skewness - 2.0).abs() < 0.3);
}

fn d(day: u32) -> NaiveDate {
    NaiveDate::from_ymd_opt(2022, 3, day).unwrap()
}

fn seg(label: &str, a: u32, b: u32) -> RegimeSegment {
    RegimeSegment {
        label: label.into(),
        start: d(a),
        end: d(b),
    }
}

#[test]
fn regime_aggregation_hand_table() {
    let dates: Vec<NaiveDate> = (1..=6).map(d).collect();
    let s = LossSeries {
        model: "m".into(),
        dates: dates.clone(),
        euclidean: vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
        frobenius: vec![2.0, 2.0, 2.0, 8.0, 8.0, 5.0],
    };
    let cal = RegimeCalendar {
        segments: vec![seg("A", 1, 2), seg("B", 3, 6), seg("Overall", 1, 6)],
    };
    let t = aggregate_by_regime(std::slice::from_ref(&s), &cal);
    assert_eq!(t.get("m", "A", Metric::Euclidean), Some(1.5));
    assert_eq!(t.get("m", "B", Metric::Euclidean), Some(4.5));
    assert_eq!(t.get("m", "B", Metric::Frobenius), Some(5.75));
    let overall = t.get("m", "Overall", Metric::Frobenius).unwrap();
    assert!((overall - s.mean(Metric::Frobenius)).abs() < 1e-15);
    let weighted = (2.0 * t.get("m", "A", Metric::Frobenius).unwrap() + 4.0 * 5.75) / 6.0;
    assert!((overall - weighted).abs() < 1e-15);
    assert!(t.unassigned.is_empty());

    let partial = RegimeCalendar {
        segments: vec![seg("A", 1, 2)],
    };
    let t = aggregate_by_regime(&[s], &partial);
    assert_eq!(t.unassigned, dates[2..].to_vec());
    let mut csv = Vec::new();
    t.write_csv(&mut csv, 1e5).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert!(text.starts_with("model,regime,metric,value\nm,A,euclidean,150000.000000"));
}

#[test]
fn cd_diagram_outputs() {
    let names: Vec<String> = ["cab", "na", "ewma"].iter().map(|s| s.to_string()).collect();
    let r = nemenyi(&names, &[1.2, 2.9, 1.9], 100, 0.05).unwrap();
    let diag = CdDiagram::from_nemenyi(&r, 100);
    let svg = diag.to_svg();
    assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    for n in &names {
        assert!(svg.contains(n.as_str()));
    }
    let back: CdDiagram = serde_json::from_str(&diag.to_json().unwrap()).unwrap();
    assert_eq!(back, diag);
}
