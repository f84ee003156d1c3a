use std::collections::BTreeMap;

use medi_core::imaging::load_png;
use medi_core::registry::DatasetManifest;
use medi_core::toy::{class_site_counts, expected_site_mean, generate_toy_dataset, site_tints, ToySpec};
use proptest::prelude::*;

fn small(correlation: f64) -> ToySpec {
    ToySpec {
        classes: 3,
        sites: 3,
        test_sites: 1,
        correlation,
        patches_per_class: 30,
        test_patches_per_site: 10,
        image_size: 8,
        ..ToySpec::default()
    }
}

fn class_site_table(m: &DatasetManifest) -> BTreeMap<(String, String), usize> {
    let mut t = BTreeMap::new();
    for r in m.records() {
        *t.entry((r.class_label.clone(), r.site.clone())).or_default() += 1;
    }
    t
}

#[test]
fn full_correlation_is_diagonal() {
    let dir = tempfile::tempdir().unwrap();
    let toy = generate_toy_dataset(&small(1.0), dir.path()).unwrap();
    let t = class_site_table(&toy.manifest);
    for c in 0..3 {
        for s in 0..3 {
            let n = t.get(&(format!("C{c}"), format!("S{s}"))).copied().unwrap_or(0);
            assert_eq!(n, if c == s { 30 } else { 0 });
        }
        assert_eq!(t[&(format!("C{c}"), "T0".to_string())], 10);
    }
}

#[test]
fn zero_correlation_is_uniform() {
    let dir = tempfile::tempdir().unwrap();
    let toy = generate_toy_dataset(&small(0.0), dir.path()).unwrap();
    let t = class_site_table(&toy.manifest);
    for c in 0..3 {
        for s in 0..3 {
            assert_eq!(t[&(format!("C{c}"), format!("S{s}"))], 10);
        }
    }
}

#[test]
fn measured_tints_keep_their_gap() {
    let spec = ToySpec { patches_per_class: 60, ..small(0.5) };
    let dir = tempfile::tempdir().unwrap();
    let toy = generate_toy_dataset(&spec, dir.path()).unwrap();
    let reloaded = DatasetManifest::load(dir.path().join("manifest.tsv")).unwrap();
    assert_eq!(reloaded.len(), toy.manifest.len());

    let mut sums: BTreeMap<String, ([f64; 3], usize)> = BTreeMap::new();
    for r in reloaded.records() {
        let (img, size) = load_png(reloaded.resolve_image(r), 3).unwrap();
        assert_eq!(size, 8);
        let e = sums.entry(r.site.clone()).or_insert(([0.0; 3], 0));
        for c in 0..3 {
            e.0[c] += img[c * 64..(c + 1) * 64].iter().map(|v| *v as f64).sum::<f64>() / 64.0;
        }
        e.1 += 1;
    }
    let means: BTreeMap<String, [f64; 3]> = sums.into_iter().map(|(s, (v, n))| (s, v.map(|x| x / n as f64))).collect();
    let tints = site_tints(&spec);
    for (site, m) in &means {
        let expected = expected_site_mean(&tints[site]);
        for c in 0..3 {
            assert!((m[c] - expected[c]).abs() < 0.05, "{site} channel {c}: {} vs {}", m[c], expected[c]);
        }
    }
    let sites: Vec<&String> = means.keys().collect();
    for i in 0..sites.len() {
        for j in i + 1..sites.len() {
            let (a, b) = (means[sites[i]], means[sites[j]]);
            let gap = (0..3).map(|c| (a[c] - b[c]).abs()).fold(0.0, f64::max);
            assert!(gap >= spec.min_tint_gap, "{} vs {}: {gap}", sites[i], sites[j]);
        }
    }
}

#[test]
fn generation_is_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let spec = small(0.5);
    let ma = generate_toy_dataset(&spec, a.path()).unwrap().manifest;
    let mb = generate_toy_dataset(&spec, b.path()).unwrap().manifest;
    assert_eq!(ma.len(), mb.len());
    for (ra, rb) in ma.records().iter().zip(mb.records()) {
        assert_eq!(ra.patch_id, rb.patch_id);
        assert_eq!(ra.race, rb.race);
        let fa = std::fs::read(ma.resolve_image(ra)).unwrap();
        let fb = std::fs::read(mb.resolve_image(rb)).unwrap();
        assert_eq!(fa, fb);
    }
}

proptest! {
    #[test]
    fn site_counts_sum_to_class_size(sites in 1usize..8, n in 1usize..500, rho in 0.0f64..=1.0, class in 0usize..10) {
        let spec = ToySpec { sites, patches_per_class: n, correlation: rho, ..ToySpec::default() };
        let counts = class_site_counts(&spec, class);
        prop_assert_eq!(counts.iter().sum::<usize>(), n);
        let home = counts[class % sites];
        prop_assert!(counts.iter().all(|&c| c <= home + 1));
    }
}
