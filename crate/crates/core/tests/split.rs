mod common;

use std::collections::BTreeSet;

use common::*;
use medi_core::registry::DatasetManifest;
use medi_core::split::{correlated_task_split, enumerate_runs, holdout_split, TaskSpec};
use proptest::prelude::*;

#[test]
fn fifty_random_manifests() {
    for seed in 0..50 {
        let m = random_manifest(seed);
        check_holdout(&m, seed);
        check_runs(&m, 2, 1);
        check_runs(&m, 3, 2);
        let classes: Vec<String> = m.schema().class.values().iter().take(2).cloned().collect();
        let refs: Vec<&str> = classes.iter().map(String::as_str).collect();
        if let Ok(split) = correlated_task_split(&m, &TaskSpec::new("t", &refs), seed) {
            check_one_site_per_class(split.assignment.clone(), &split.train, &split.test, &classes);
        }
    }
}

#[test]
fn two_classes_over_three_sites_give_six_runs() {
    let mut recs = Vec::new();
    for s in ["S0", "S1", "S2"] {
        for c in ["A", "B"] {
            let id = recs.len();
            recs.push(record(id, c, s, "R", "pt"));
        }
    }
    let m = DatasetManifest::from_records(recs, "").unwrap();
    let runs = enumerate_runs(&m, &TaskSpec::new("t", &["A", "B"]), 100).unwrap();
    assert_eq!(runs.len(), 6);
    let ids: BTreeSet<&str> = runs.iter().map(|r| r.run_id.as_str()).collect();
    assert_eq!(ids.len(), 6);
    for run in &runs {
        assert_eq!(run.test_sites().len(), 1);
    }
}

#[test]
fn diffusion_sites_restrict_assignment_and_test() {
    let mut recs = Vec::new();
    for s in ["S0", "S1", "S2", "T0"] {
        for c in ["A", "B"] {
            let id = recs.len();
            recs.push(record(id, c, s, "R", "pt"));
        }
    }
    let m = DatasetManifest::from_records(recs, "").unwrap();
    let mut spec = TaskSpec::new("t", &["A", "B"]);
    spec.diffusion_sites = vec!["S0".into(), "S1".into(), "S2".into()];
    let runs = enumerate_runs(&m, &spec, 100).unwrap();
    assert_eq!(runs.len(), 6);
    for run in &runs {
        assert!(!run.assignment.values().any(|s| s == "T0"));
        assert_eq!(run.test_sites(), BTreeSet::from(["T0".to_string()]));
    }
}

#[test]
fn holdout_is_seeded() {
    let m = random_manifest(7);
    let a = holdout_split(&m, 0.3, &["site", "race"], 3).unwrap();
    let b = holdout_split(&m, 0.3, &["site", "race"], 3).unwrap();
    assert_eq!(a.record, b.record);
    assert_eq!(a.train, b.train);
}

#[test]
fn holdout_files_round_trip() {
    let m = random_manifest(11);
    let split = holdout_split(&m, 0.3, &["site"], 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    split.write(dir.path()).unwrap();
    let strip = |m: &DatasetManifest| -> Vec<(String, String, String, String)> {
        m.records().iter().map(|r| (r.patch_id.clone(), r.class_label.clone(), r.site.clone(), r.race.clone())).collect()
    };
    let train = DatasetManifest::load(dir.path().join("train.tsv")).unwrap();
    assert_eq!(strip(&train), strip(&split.train));
    let held = DatasetManifest::load(dir.path().join("holdout.tsv")).unwrap();
    assert_eq!(strip(&held), strip(&split.holdout));
    assert!(dir.path().join("holdout.json").exists());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn holdout_partitions_are_disjoint(seed in any::<u64>(), split_seed in any::<u64>()) {
        check_holdout(&random_manifest(seed), split_seed);
    }

    #[test]
    fn run_enumeration_matches_brute_force(seed in any::<u64>(), k in 2usize..=3, min in 1usize..=3) {
        check_runs(&random_manifest(seed), k, min);
    }
}
