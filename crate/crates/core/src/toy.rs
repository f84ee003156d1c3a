//! Synthetic stand-in dataset: geometry encodes the class, colour tint the site.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::io_err;
use crate::registry::{DatasetManifest, PatchRecord};
use crate::seeds::derive_seed;
use crate::{imaging, Error, Result};

const BASE_FLOOR: f64 = 0.15;
const CONTRAST_RANGE: (f64, f64) = (0.8, 1.0);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToySpec {
    pub classes: usize,
    /// Sites whose class mix follows `correlation`.
    pub sites: usize,
    /// Extra sites with a uniform class mix and tints of their own.
    pub test_sites: usize,
    /// 0 spreads each class evenly over the sites, 1 puts it all on one site.
    pub correlation: f64,
    pub patches_per_class: usize,
    /// Patches per (class, test site).
    pub test_patches_per_site: usize,
    pub patches_per_patient: usize,
    pub races: usize,
    pub image_size: usize,
    pub noise_std: f64,
    /// Required gap between the mean tints of any two sites within a class.
    pub min_tint_gap: f64,
    pub seed: u64,
}

impl Default for ToySpec {
    fn default() -> Self {
        Self {
            classes: 4,
            sites: 4,
            test_sites: 2,
            correlation: 0.5,
            patches_per_class: 400,
            test_patches_per_site: 50,
            patches_per_patient: 4,
            races: 3,
            image_size: 32,
            noise_std: 0.05,
            min_tint_gap: 0.1,
            seed: 0,
        }
    }
}

pub fn class_name(i: usize) -> String {
    format!("C{i}")
}

pub fn site_name(i: usize) -> String {
    format!("S{i}")
}

pub fn test_site_name(i: usize) -> String {
    format!("T{i}")
}

/// Per-channel gains of every site, spread around a hue wheel.
pub fn site_tints(spec: &ToySpec) -> BTreeMap<String, [f64; 3]> {
    let total = spec.sites + spec.test_sites;
    let names = (0..spec.sites).map(site_name).chain((0..spec.test_sites).map(test_site_name));
    names
        .enumerate()
        .map(|(i, name)| {
            let theta = 2.0 * PI * i as f64 / total as f64;
            let gain = |c: usize| 0.6 + 0.4 * (theta - 2.0 * PI * c as f64 / 3.0).cos();
            (name, [gain(0), gain(1), gain(2)])
        })
        .collect()
}

/// Expected channel mean in [-1, 1] units of an image with gain `g`.
fn expected_channel_mean(g: f64) -> f64 {
    let mean_base = BASE_FLOOR + (1.0 - BASE_FLOOR) * 0.5;
    let mean_contrast = 0.5 * (CONTRAST_RANGE.0 + CONTRAST_RANGE.1);
    2.0 * g * mean_base * mean_contrast - 1.0
}

/// Expected per-channel mean of images from a site.
pub fn expected_site_mean(tint: &[f64; 3]) -> [f64; 3] {
    tint.map(expected_channel_mean)
}

/// Patches of one class per site: the home site `class % sites` gets a
/// `correlation + (1 - correlation) / sites` share and the rest is split
/// evenly, earlier sites taking the remainder.
pub fn class_site_counts(spec: &ToySpec, class: usize) -> Vec<usize> {
    let s = spec.sites;
    let n = spec.patches_per_class;
    let home = class % s;
    let share = spec.correlation + (1.0 - spec.correlation) / s as f64;
    let home_count = ((n as f64 * share + 1e-9).floor() as usize).min(n);
    let mut counts = vec![0; s];
    counts[home] = home_count;
    let others: Vec<usize> = (0..s).filter(|&j| j != home).collect();
    if !others.is_empty() {
        let rest = n - home_count;
        let (q, r) = (rest / others.len(), rest % others.len());
        for (k, &j) in others.iter().enumerate() {
            counts[j] = q + usize::from(k < r);
        }
    } else {
        counts[home] = n;
    }
    counts
}

fn validate(spec: &ToySpec) -> Result<()> {
    if spec.classes == 0 || spec.sites == 0 || spec.patches_per_class == 0 || spec.patches_per_patient == 0 {
        return Err(Error::Toy("classes, sites and counts must be positive".into()));
    }
    if spec.races == 0 || spec.image_size < 4 {
        return Err(Error::Toy("need at least one race and images of at least 4x4".into()));
    }
    if !(0.0..=1.0).contains(&spec.correlation) {
        return Err(Error::Toy(format!("correlation {} outside [0, 1]", spec.correlation)));
    }
    if spec.correlation == 1.0 && spec.classes > spec.sites {
        return Err(Error::Toy(format!(
            "a full confound needs a site per class: {} classes but {} sites",
            spec.classes, spec.sites
        )));
    }
    let tints: Vec<[f64; 3]> = site_tints(spec).into_values().collect();
    for (i, a) in tints.iter().enumerate() {
        for b in &tints[i + 1..] {
            let (ma, mb) = (expected_site_mean(a), expected_site_mean(b));
            let gap = (0..3).map(|c| (ma[c] - mb[c]).abs()).fold(0.0, f64::max);
            if gap < spec.min_tint_gap {
                return Err(Error::Toy(format!(
                    "{} sites cannot keep a mean tint gap of {} (closest pair differs by {gap:.4})",
                    tints.len(),
                    spec.min_tint_gap
                )));
            }
        }
    }
    Ok(())
}

/// Intensity pattern in [0, 1] for a class, before tinting.
fn pattern(class: usize, size: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let period = 4.0 + 2.0 * (class / 6) as f64;
    let w = 2.0 * PI / period;
    let phase = rng.random_range(0.0..2.0 * PI);
    let phase2 = rng.random_range(0.0..2.0 * PI);
    let c = (size as f64 - 1.0) / 2.0 + rng.random_range(-1.0..1.0);
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (xf, yf) = (x as f64, y as f64);
            let s = match class % 6 {
                0 => (w * yf + phase).sin(),
                1 => (w * xf + phase).sin(),
                2 => (w * (xf + yf) / 2f64.sqrt() + phase).sin(),
                3 => (w * xf + phase).sin() * (w * yf + phase2).sin(),
                4 => (w * (xf - yf) / 2f64.sqrt() + phase).sin(),
                _ => (w * ((xf - c).powi(2) + (yf - c).powi(2)).sqrt() + phase).sin(),
            };
            out.push(0.5 + 0.5 * s);
        }
    }
    out
}

/// Render one `[3, H, W]` image in [-1, 1].
pub fn render_image(class: usize, tint: &[f64; 3], size: usize, noise_std: f64, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = pattern(class, size, &mut rng);
    let contrast = rng.random_range(CONTRAST_RANGE.0..CONTRAST_RANGE.1);
    let mut img = Vec::with_capacity(3 * size * size);
    for gain in tint {
        for v in &p {
            let base = BASE_FLOOR + (1.0 - BASE_FLOOR) * v;
            let noise: f64 = rng.sample::<f64, _>(StandardNormal) * noise_std;
            img.push(((2.0 * gain * base * contrast - 1.0) + noise).clamp(-1.0, 1.0) as f32);
        }
    }
    img
}

#[derive(Debug, Clone)]
pub struct ToyDataset {
    pub manifest: DatasetManifest,
    pub tints: BTreeMap<String, [f64; 3]>,
}

/// Generate records and images under `out_dir` (`images/` plus `manifest.tsv`).
pub fn generate_toy_dataset(spec: &ToySpec, out_dir: impl AsRef<Path>) -> Result<ToyDataset> {
    validate(spec)?;
    let out_dir = out_dir.as_ref();
    let image_dir = out_dir.join("images");
    std::fs::create_dir_all(&image_dir).map_err(io_err(&image_dir))?;
    let tints = site_tints(spec);

    let mut cells: Vec<(usize, String, usize)> = Vec::new();
    for c in 0..spec.classes {
        for (s, n) in class_site_counts(spec, c).into_iter().enumerate() {
            cells.push((c, site_name(s), n));
        }
        for t in 0..spec.test_sites {
            cells.push((c, test_site_name(t), spec.test_patches_per_site));
        }
    }

    let mut records = Vec::new();
    for (class, site, n) in cells {
        let cname = class_name(class);
        for i in 0..n {
            let patient_id = format!("P-{cname}-{site}-{:04}", i / spec.patches_per_patient);
            let mut prng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &patient_id));
            let race = format!("R{}", prng.random_range(0..spec.races));
            let gender = if prng.random::<bool>() { "F" } else { "M" };
            let age = prng.random_range(30..90u32);

            let patch_id = format!("{cname}-{site}-{i:05}");
            let img = render_image(class, &tints[&site], spec.image_size, spec.noise_std, derive_seed(spec.seed, &patch_id));
            let rel = Path::new("images").join(format!("{patch_id}.png"));
            imaging::save_png(out_dir.join(&rel), &img, 3, spec.image_size)?;
            records.push(PatchRecord {
                patch_id,
                image_ref: rel,
                patient_id,
                class_label: cname.clone(),
                site: site.clone(),
                race,
                gender: gender.into(),
                age: Some(age),
                synthetic: false,
            });
        }
    }
    let manifest = DatasetManifest::from_records(records, out_dir)?;
    manifest.write(out_dir.join("manifest.tsv"))?;
    let spec_path = out_dir.join("toy_spec.json");
    std::fs::write(&spec_path, serde_json::to_vec_pretty(spec)?).map_err(io_err(&spec_path))?;
    Ok(ToyDataset { manifest, tints })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_follow_correlation() {
        let spec = ToySpec { classes: 2, sites: 3, patches_per_class: 10, correlation: 0.0, ..ToySpec::default() };
        assert_eq!(class_site_counts(&spec, 0), vec![3, 4, 3]);
        let full = ToySpec { correlation: 1.0, ..spec.clone() };
        assert_eq!(class_site_counts(&full, 1), vec![0, 10, 0]);
        let half = ToySpec { correlation: 0.5, ..spec };
        // 10 * (0.5 + 0.5 / 3) = 6.67 -> 6 at home, 4 split over two sites.
        assert_eq!(class_site_counts(&half, 2), vec![2, 2, 6]);
    }

    #[test]
    fn infeasible_specs_rejected() {
        let too_many = ToySpec { classes: 3, sites: 2, correlation: 1.0, ..ToySpec::default() };
        assert!(matches!(validate(&too_many), Err(Error::Toy(_))));
        let crowded = ToySpec { sites: 40, min_tint_gap: 0.2, ..ToySpec::default() };
        assert!(matches!(validate(&crowded), Err(Error::Toy(_))));
        assert!(validate(&ToySpec::default()).is_ok());
    }

    #[test]
    fn rendering_is_seeded_and_bounded() {
        let t = [0.9, 0.5, 0.3];
        let a = render_image(3, &t, 8, 0.05, 11);
        assert_eq!(a, render_image(3, &t, 8, 0.05, 11));
        assert_ne!(a, render_image(3, &t, 8, 0.05, 12));
        assert!(a.iter().all(|v| (-1.0..=1.0).contains(v)));
    }
}
