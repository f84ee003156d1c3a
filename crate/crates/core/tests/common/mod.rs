#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use medi_core::registry::{Attribute, DatasetManifest, PatchRecord, UNKNOWN};
use medi_core::sampling::{cartesian_fill_plan, frequency_matched_plan, CondTuple};
use medi_core::split::{enumerate_runs, holdout_split, TaskSpec};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const TCGA_ROWS: usize = 271_710;
pub const TCGA_CLASSES: usize = 32;
pub const TCGA_SITES: usize = 626;
pub const TCGA_CENTERS: usize = 184;
pub const TCGA_PATIENTS: usize = 8_726;

/// Named class pools of the subtyping tasks.
pub const TCGA_POOLS: [(&str, usize); 7] = [
    ("LUAD", 16_460),
    ("LUSC", 16_560),
    ("KIRC", 11_650),
    ("KIRP", 6_790),
    ("KICH", 2_460),
    ("UCS", 2_120),
    ("UCEC", 12_480),
];

pub fn record(id: usize, class: &str, site: &str, race: &str, patient: &str) -> PatchRecord {
    PatchRecord {
        patch_id: format!("p{id}"),
        image_ref: format!("p{id}.png").into(),
        patient_id: patient.into(),
        class_label: class.into(),
        site: site.into(),
        race: race.into(),
        gender: UNKNOWN.into(),
        age: None,
        synthetic: false,
    }
}

/// Per-class patch counts: the named pools plus 25 filler classes sharing the rest.
pub fn tcga_class_sizes() -> Vec<(String, usize)> {
    let named: usize = TCGA_POOLS.iter().map(|(_, n)| n).sum();
    let fillers = TCGA_CLASSES - TCGA_POOLS.len();
    let rest = TCGA_ROWS - named;
    let mut out: Vec<(String, usize)> = TCGA_POOLS.iter().map(|(c, n)| (c.to_string(), *n)).collect();
    for i in 0..fillers {
        out.push((format!("K{i:02}"), rest / fillers + usize::from(i < rest % fillers)));
    }
    out
}

/// Site code `i` belongs to center `i mod 184`.
pub fn tcga_center_of(site: usize) -> String {
    format!("CTR{:03}", site % TCGA_CENTERS)
}

/// A manifest with the dataset's row, class, site and patient counts. Each
/// patient belongs to one class and one site code; patches are spread over
/// patients round robin within their class.
pub fn tcga_shaped_manifest() -> DatasetManifest {
    let sizes = tcga_class_sizes();
    let mut patients_per_class = vec![TCGA_PATIENTS / TCGA_CLASSES; TCGA_CLASSES];
    for p in patients_per_class.iter_mut().take(TCGA_PATIENTS % TCGA_CLASSES) {
        *p += 1;
    }
    let mut records = Vec::with_capacity(TCGA_ROWS);
    let mut patient_base = 0usize;
    for ((class, n), np) in sizes.iter().zip(&patients_per_class) {
        for j in 0..*n {
            let patient = patient_base + j % np;
            let site = patient % TCGA_SITES;
            records.push(record(records.len(), class, &format!("TSS{site:03}"), ["A", "B", "W"][patient % 3], &format!("pt{patient}")));
        }
        patient_base += np;
    }
    DatasetManifest::from_records(records, "").unwrap()
}

pub fn tcga_site_to_center() -> BTreeMap<String, String> {
    (0..TCGA_SITES).map(|s| (format!("TSS{s:03}"), tcga_center_of(s))).collect()
}

/// Random manifest with 2..=5 classes, 1..=6 sites and 1..=3 races. Every
/// (class, site, race) cell is either empty or holds 1..=4 records.
pub fn random_manifest(seed: u64) -> DatasetManifest {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = rng.random_range(2..=5);
    let sites = rng.random_range(1..=6);
    let races = rng.random_range(1..=3);
    let mut records = Vec::new();
    for c in 0..classes {
        let mut any = false;
        for s in 0..sites {
            for r in 0..races {
                if rng.random_bool(0.6) {
                    any = true;
                    for _ in 0..rng.random_range(1..=4) {
                        let id = records.len();
                        records.push(record(id, &format!("C{c}"), &format!("S{s}"), &format!("R{r}"), &format!("pt{id}")));
                    }
                }
            }
        }
        if !any {
            let id = records.len();
            records.push(record(id, &format!("C{c}"), "S0", "R0", &format!("pt{id}")));
        }
    }
    DatasetManifest::from_records(records, "").unwrap()
}

/// floor(0.3 n) in integer arithmetic, at least one when n >= 2.
pub fn expected_held(n: usize) -> usize {
    let m = 3 * n / 10;
    if m == 0 && n >= 2 { 1 } else { m }
}

pub type Combo = (String, String, String);

pub fn combos(m: &DatasetManifest) -> BTreeSet<Combo> {
    m.records().iter().map(|r| (r.class_label.clone(), r.site.clone(), r.race.clone())).collect()
}

pub fn check_holdout(m: &DatasetManifest, seed: u64) {
    let split = holdout_split(m, 0.3, &["site", "race"], seed).unwrap();
    let (train, held) = (combos(&split.train), combos(&split.holdout));
    assert!(train.is_disjoint(&held));
    assert_eq!(split.train.len() + split.holdout.len(), m.len());

    let mut per_class: BTreeMap<String, usize> = BTreeMap::new();
    for (c, _, _) in combos(m) {
        *per_class.entry(c).or_default() += 1;
    }
    for (class, n) in &per_class {
        let held_here = held.iter().filter(|(c, _, _)| c == class).count();
        assert_eq!(held_here, expected_held(*n), "class {class} with {n} combinations");
        assert_eq!(split.record.excluded[class].len(), expected_held(*n));
    }
}

/// Every map from task classes to sites, kept when injective and every
/// (class, site) cell has at least `min` patches.
pub fn brute_force_assignments(m: &DatasetManifest, classes: &[String], min: usize) -> BTreeSet<Vec<String>> {
    let sites: Vec<String> = m.schema().vocab(Attribute::Site).values().to_vec();
    let mut counts: BTreeMap<(String, String), usize> = BTreeMap::new();
    for r in m.records() {
        *counts.entry((r.class_label.clone(), r.site.clone())).or_default() += 1;
    }
    let k = classes.len();
    let mut out = BTreeSet::new();
    let total = sites.len().pow(k as u32);
    for code in 0..total {
        let mut x = code;
        let pick: Vec<String> = (0..k)
            .map(|_| {
                let s = sites[x % sites.len()].clone();
                x /= sites.len();
                s
            })
            .collect();
        let distinct: BTreeSet<&String> = pick.iter().collect();
        let eligible =
            classes.iter().zip(&pick).all(|(c, s)| counts.get(&(c.clone(), s.clone())).copied().unwrap_or(0) >= min);
        if distinct.len() == k && eligible {
            out.insert(pick);
        }
    }
    out
}

pub fn check_runs(m: &DatasetManifest, n_classes: usize, min: usize) {
    let classes: Vec<String> = m.schema().class.values().iter().take(n_classes).cloned().collect();
    let refs: Vec<&str> = classes.iter().map(String::as_str).collect();
    let mut spec = TaskSpec::new("t", &refs);
    spec.min_site_patches = min;
    let truth = brute_force_assignments(m, &classes, min);
    match enumerate_runs(m, &spec, 10_000) {
        Ok(runs) => {
            let got: BTreeSet<Vec<String>> =
                runs.iter().map(|r| classes.iter().map(|c| r.assignment[c].clone()).collect()).collect();
            assert_eq!(runs.len(), got.len(), "runs are distinct");
            assert_eq!(got, truth);
            for run in &runs {
                check_one_site_per_class(run.assignment.clone(), &run.train, &run.test, &classes);
            }
        }
        Err(_) => assert!(truth.is_empty(), "enumeration failed but {} assignments exist", truth.len()),
    }
}

pub fn check_one_site_per_class(
    assignment: BTreeMap<String, String>,
    train: &DatasetManifest,
    test: &DatasetManifest,
    classes: &[String],
) {
    let sites: BTreeSet<&String> = assignment.values().collect();
    assert_eq!(sites.len(), classes.len());
    for r in train.records() {
        assert_eq!(assignment[&r.class_label], r.site);
    }
    let train_classes: BTreeSet<&String> = train.records().iter().map(|r| &r.class_label).collect();
    assert_eq!(train_classes.len(), classes.len());
    for r in test.records() {
        assert!(classes.contains(&r.class_label));
        assert!(!sites.contains(&r.site));
    }
}

/// `n` points whose sample mean is exactly `mean` and whose unbiased sample
/// covariance is exactly `l l^T`.
pub fn exact_cloud(mean: &DVector<f64>, l: &DMatrix<f64>, n: usize, seed: u64) -> Vec<Vec<f64>> {
    let d = mean.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut z = DMatrix::from_fn(n, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let mu = z.row_mean();
    for mut row in z.row_iter_mut() {
        row -= &mu;
    }
    let cov = z.transpose() * &z / (n as f64 - 1.0);
    let w = cov.cholesky().unwrap().l().try_inverse().unwrap();
    let x = &z * w.transpose() * l.transpose();
    x.row_iter().map(|r| (0..d).map(|j| r[j] + mean[j]).collect()).collect()
}

/// Denman-Beavers iteration for the principal square root.
pub fn sqrtm_db(a: &DMatrix<f64>) -> DMatrix<f64> {
    let d = a.nrows();
    let (mut y, mut z) = (a.clone(), DMatrix::identity(d, d));
    for _ in 0..100 {
        let yi = y.clone().try_inverse().unwrap();
        let zi = z.clone().try_inverse().unwrap();
        let ny = (&y + zi) * 0.5;
        let nz = (&z + yi) * 0.5;
        let done = (&ny - &y).norm() < 1e-14 * ny.norm();
        y = ny;
        z = nz;
        if done {
            break;
        }
    }
    y
}

/// |m1 - m2|^2 + Tr(S1 + S2 - 2 (S1 S2)^(1/2)), square root of the
/// non-symmetric product taken directly.
pub fn frechet_oracle(m1: &DVector<f64>, s1: &DMatrix<f64>, m2: &DVector<f64>, s2: &DMatrix<f64>) -> f64 {
    let diff = m1 - m2;
    diff.dot(&diff) + s1.trace() + s2.trace() - 2.0 * sqrtm_db(&(s1 * s2)).trace()
}

/// Confusion matrix rows are true classes, columns predictions.
pub fn expand(m: &[Vec<usize>]) -> (Vec<String>, Vec<String>) {
    let name = |i: usize| format!("c{i:02}");
    let (mut p, mut l) = (Vec::new(), Vec::new());
    for (i, row) in m.iter().enumerate() {
        for (j, &n) in row.iter().enumerate() {
            for _ in 0..n {
                l.push(name(i));
                p.push(name(j));
            }
        }
    }
    (p, l)
}

pub fn brute_force_balanced(m: &[Vec<usize>]) -> f64 {
    let recalls: Vec<f64> = m
        .iter()
        .enumerate()
        .filter(|(_, row)| row.iter().sum::<usize>() > 0)
        .map(|(i, row)| 100.0 * row[i] as f64 / row.iter().sum::<usize>() as f64)
        .collect();
    recalls.iter().sum::<f64>() / recalls.len() as f64
}

pub fn names(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i}")).collect()
}

pub fn check_cartesian(nc: usize, ns: usize, total: usize) {
    let (classes, sites) = (names("C", nc), names("S", ns));
    let plan = cartesian_fill_plan(&classes, &sites, total, 1_000_000, 0).unwrap();
    let n = nc * ns;
    assert_eq!(plan.entries.len(), n);
    assert_eq!(plan.total, total);
    assert_eq!(plan.entries.iter().map(|e| e.count).sum::<usize>(), total);
    let pairs: BTreeSet<(String, String)> =
        plan.entries.iter().map(|e| (e.tuple.class.clone(), e.tuple.meta[0].clone())).collect();
    assert_eq!(pairs.len(), n);
    let floor = total / n;
    for e in &plan.entries {
        assert!(e.count == floor || e.count == floor + 1);
    }
    assert_eq!(plan.attributes, vec![Attribute::Site]);
}

pub fn check_frequency(seed: u64, attributes: &[Attribute]) {
    let m = random_manifest(seed);
    let plan = frequency_matched_plan(&m, attributes, seed).unwrap();
    let mut truth: BTreeMap<CondTuple, usize> = BTreeMap::new();
    for r in m.records() {
        let meta = attributes.iter().map(|a| r.value(*a).into_owned()).collect();
        *truth.entry(CondTuple::new(r.class_label.clone(), meta)).or_default() += 1;
    }
    let got: BTreeMap<CondTuple, usize> = plan.entries.iter().map(|e| (e.tuple.clone(), e.count)).collect();
    assert_eq!(got, truth);
    assert_eq!(plan.total, m.len());
}

