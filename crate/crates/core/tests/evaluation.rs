mod common;

use std::collections::BTreeMap;

use common::*;

use medi_core::evaluation::{
    aggregate, aggregate_runs, balanced_accuracy, fid, fit_logistic, per_class_fid_features, select_support,
    tss_averaged_accuracy, ProbeResult, PROBE_L2,
};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn random_lower(d: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(d, d, |i, j| match i.cmp(&j) {
        std::cmp::Ordering::Greater => rng.random_range(-0.5..0.5),
        std::cmp::Ordering::Equal => rng.random_range(0.5..1.5),
        std::cmp::Ordering::Less => 0.0,
    })
}

#[test]
fn fid_matches_closed_form_on_gaussian_clouds() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for case in 0..5 {
        let d = 4;
        let m1 = DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0));
        let m2 = DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0));
        let (l1, l2) = (random_lower(d, &mut rng), random_lower(d, &mut rng));
        let x = exact_cloud(&m1, &l1, 10_000, 2 * case);
        let y = exact_cloud(&m2, &l2, 10_000, 2 * case + 1);
        let oracle = frechet_oracle(&m1, &(&l1 * l1.transpose()), &m2, &(&l2 * l2.transpose()));
        let got = fid(&x, &y).unwrap();
        let rel = (got - oracle).abs() / oracle;
        assert!(rel < 1e-3, "case {case}: fid {got} vs oracle {oracle} (rel {rel:e})");
    }
}

#[test]
fn fid_of_diagonal_gaussians() {
    let a = [0.5, 1.0, 2.0, 4.0];
    let b = [1.0, 1.0, 0.25, 9.0];
    let m1 = DVector::from_vec(vec![0.0, 1.0, 0.0, -1.0]);
    let m2 = DVector::from_vec(vec![1.0, 1.0, 2.0, 0.0]);
    let x = exact_cloud(&m1, &DMatrix::from_diagonal(&DVector::from_iterator(4, a.map(f64::sqrt))), 10_000, 1);
    let y = exact_cloud(&m2, &DMatrix::from_diagonal(&DVector::from_iterator(4, b.map(f64::sqrt))), 10_000, 2);
    let expected = (&m1 - &m2).norm_squared() + a.iter().zip(&b).map(|(p, q)| (p.sqrt() - q.sqrt()).powi(2)).sum::<f64>();
    let got = fid(&x, &y).unwrap();
    assert!((got - expected).abs() / expected < 1e-3, "{got} vs {expected}");
}

#[test]
fn fid_of_a_cloud_with_itself_is_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let l = random_lower(4, &mut rng);
    let x = exact_cloud(&DVector::from_element(4, 0.3), &l, 10_000, 9);
    assert!(fid(&x, &x).unwrap() <= 1e-6);
}

#[test]
fn fid_grows_with_mean_shift() {
    let eye = DMatrix::identity(4, 4);
    let x = exact_cloud(&DVector::zeros(4), &eye, 2_000, 1);
    let mut last = 0.0;
    for k in 1..6 {
        let y = exact_cloud(&DVector::from_element(4, 0.2 * k as f64), &eye, 2_000, 2);
        let v = fid(&x, &y).unwrap();
        assert!(v > last);
        last = v;
    }
}

#[test]
fn per_class_fid_averages_classes() {
    let eye = DMatrix::identity(2, 2);
    let lab = |c: &str, v: Vec<Vec<f64>>| v.into_iter().map(|f| (c.to_string(), f)).collect::<Vec<_>>();
    let mut real = lab("a", exact_cloud(&DVector::zeros(2), &eye, 200, 1));
    real.extend(lab("b", exact_cloud(&DVector::from_element(2, 3.0), &eye, 200, 2)));
    let mut syn = lab("a", exact_cloud(&DVector::from_element(2, 1.0), &eye, 200, 3));
    syn.extend(lab("b", exact_cloud(&DVector::from_element(2, 3.0), &eye, 200, 4)));
    let r = per_class_fid_features(&real, &syn, 10).unwrap();
    assert!((r.per_class["a"] - 2.0).abs() < 1e-6);
    assert!(r.per_class["b"] < 1e-6);
    assert!((r.macro_average - (r.per_class["a"] + r.per_class["b"]) / 2.0).abs() < 1e-12);
}

#[test]
fn balanced_accuracy_on_random_confusion_matrices() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..30 {
        let k = rng.random_range(2..=6);
        let m: Vec<Vec<usize>> = (0..k).map(|_| (0..k).map(|_| rng.random_range(0..20)).collect()).collect();
        if m.iter().all(|r| r.iter().sum::<usize>() == 0) {
            continue;
        }
        let (mut p, mut l) = expand(&m);
        let mut order: Vec<usize> = (0..p.len()).collect();
        order.shuffle(&mut rng);
        p = order.iter().map(|&i| p[i].clone()).collect();
        l = order.iter().map(|&i| l[i].clone()).collect();
        assert_eq!(balanced_accuracy(&p, &l).unwrap().value, brute_force_balanced(&m));
    }
}

#[test]
fn balanced_equals_plain_accuracy_when_classes_are_balanced() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..20 {
        let k = rng.random_range(2..=5);
        let per = rng.random_range(1..=30);
        let l: Vec<String> = (0..k * per).map(|i| format!("c{}", i % k)).collect();
        let p: Vec<String> = (0..k * per).map(|_| format!("c{}", rng.random_range(0..k))).collect();
        let plain = 100.0 * p.iter().zip(&l).filter(|(a, b)| a == b).count() as f64 / l.len() as f64;
        assert!((balanced_accuracy(&p, &l).unwrap().value - plain).abs() < 1e-9);
    }
}

#[test]
fn tss_average_by_hand() {
    let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
    let labels = s(&["a", "a", "b", "b", "a", "b", "b", "b"]);
    let preds = s(&["a", "b", "b", "b", "a", "a", "a", "b"]);
    let sites = s(&["x", "x", "x", "x", "y", "y", "y", "y"]);
    // x: recall a 1/2, b 2/2 -> 75. y: recall a 1/1, b 1/3 -> 66.67.
    let t = tss_averaged_accuracy(&preds, &labels, &sites).unwrap();
    assert!((t.per_site["x"] - 75.0).abs() < 1e-12);
    assert!((t.per_site["y"] - 200.0 / 3.0).abs() < 1e-12);
    assert!((t.value - (75.0 + 200.0 / 3.0) / 2.0).abs() < 1e-12);
}

#[test]
fn aggregate_by_hand() {
    let a = aggregate(&[70.0, 80.0]).unwrap();
    assert_eq!(a.mean, 75.0);
    assert!((a.se.unwrap() - 3.54).abs() < 5e-3);
    assert_eq!(a.to_string(), "75.00 ± 3.54");

    let b = aggregate(&[1.0, 2.0, 3.0, 4.0]).unwrap();
    // Population variance 1.25, SE sqrt(1.25 / 4).
    assert!((b.se.unwrap() - (1.25f64 / 4.0).sqrt()).abs() < 1e-12);
    assert!(aggregate(&[5.0]).unwrap().se.is_none());
    assert!(aggregate(&[]).is_err());

    let runs: Vec<ProbeResult> = [(70.0, 60.0), (80.0, 90.0)]
        .iter()
        .enumerate()
        .map(|(i, &(o, t))| ProbeResult { run_id: format!("r{i}"), overall: o, per_site: BTreeMap::new(), tss_avg: t })
        .collect();
    let r = aggregate_runs(&runs).unwrap();
    assert_eq!(r.overall.mean, 75.0);
    assert_eq!(r.tss_avg.mean, 75.0);
    assert!((r.tss_avg.se.unwrap() - 15.0 / 2f64.sqrt()).abs() < 1e-12);
}

fn blobs(n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<String>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Vec::new();
    let mut y = Vec::new();
    for i in 0..n {
        let c = i % 3;
        x.push((0..5).map(|j| if j == c { 2.0 } else { 0.0 } + rng.sample::<f64, _>(StandardNormal)).collect());
        y.push(format!("k{c}"));
    }
    (x, y)
}

#[test]
fn probe_is_deterministic() {
    let (x, y) = blobs(90, 1);
    let a = fit_logistic(&x, &y, PROBE_L2).unwrap();
    let b = fit_logistic(&x, &y, PROBE_L2).unwrap();
    assert_eq!(a, b);
    assert_eq!(select_support(&y, 20, 4).unwrap(), select_support(&y, 20, 4).unwrap());
    assert_ne!(select_support(&y, 20, 4).unwrap(), select_support(&y, 20, 5).unwrap());
}

#[test]
fn probe_learns_separable_blobs() {
    let (x, y) = blobs(300, 2);
    let probe = fit_logistic(&x[..150], &y[..150], PROBE_L2).unwrap();
    let pred = probe.predict_all(&x[150..]);
    assert!(balanced_accuracy(&pred, &y[150..]).unwrap().value > 80.0);
}

#[test]
fn support_has_n_per_class() {
    let (_, y) = blobs(90, 3);
    let s = select_support(&y, 20, 0).unwrap();
    assert_eq!(s.len(), 60);
    for c in ["k0", "k1", "k2"] {
        assert_eq!(s.iter().filter(|&&i| y[i] == c).count(), 20);
    }
    assert!(select_support(&y, 31, 0).is_err());
}

proptest! {
    #[test]
    fn aggregate_ignores_run_order(mut v in prop::collection::vec(0.0f64..100.0, 1..20), seed in any::<u64>()) {
        let a = aggregate(&v).unwrap();
        v.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(a, aggregate(&v).unwrap());
    }

    #[test]
    fn balanced_accuracy_is_a_percentage(labels in prop::collection::vec(0usize..4, 1..60), preds in prop::collection::vec(0usize..4, 60)) {
        let l: Vec<String> = labels.iter().map(|c| format!("c{c}")).collect();
        let p: Vec<String> = preds[..labels.len()].iter().map(|c| format!("c{c}")).collect();
        let v = balanced_accuracy(&p, &l).unwrap().value;
        prop_assert!((0.0..=100.0).contains(&v));
        prop_assert_eq!(balanced_accuracy(&l, &l).unwrap().value, 100.0);
    }
}
