use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::extractor::{extract_manifest, FeatureExtractor};
use crate::registry::DatasetManifest;
use crate::{Error, Result};

/// Diagonal jitter added to both covariances before any square root.
pub const COV_REGULARIZATION: f64 = 1e-6;

/// Mean and unbiased covariance of a feature cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianStats {
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if n < 2 {
            return Err(Error::InvalidArgument(format!("need at least 2 feature vectors, got {n}")));
        }
        let d = rows[0].len();
        if d == 0 || rows.iter().any(|r| r.len() != d) {
            return Err(Error::InvalidArgument("feature vectors must share a positive width".into()));
        }
        if rows.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite feature value".into()));
        }
        let x = DMatrix::from_fn(n, d, |i, j| rows[i][j]);
        let mean = x.row_mean().transpose();
        let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
        let cov = centered.transpose() * &centered / (n as f64 - 1.0);
        Ok(Self { mean, cov })
    }
}

/// Square root of a symmetric positive semi-definite matrix; small negative
/// eigenvalues from round-off are clamped to zero.
fn sqrtm_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::try_new(sym, 1e-14, 10_000)
        .ok_or_else(|| Error::Numerical("eigendecomposition did not converge".into()))?;
    let scale = eig.eigenvalues.amax().max(1.0);
    if eig.eigenvalues.iter().any(|l| !l.is_finite() || *l < -1e-8 * scale) {
        return Err(Error::Numerical("covariance is not positive semi-definite".into()));
    }
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose())
}

/// Fréchet distance between two Gaussians.
///
/// The cross term uses `Tr((A B)^(1/2)) = Tr((A^(1/2) B A^(1/2))^(1/2))`,
/// whose inner matrix is symmetric.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    let d = a.mean.len();
    if b.mean.len() != d {
        return Err(Error::InvalidArgument(format!("feature widths differ: {d} vs {}", b.mean.len())));
    }
    let reg = DMatrix::<f64>::identity(d, d) * COV_REGULARIZATION;
    let ca = &a.cov + &reg;
    let cb = &b.cov + &reg;
    let sa = sqrtm_psd(&ca)?;
    let inner = &sa * &cb * &sa;
    let cross = sqrtm_psd(&inner)?.trace();
    let diff = &a.mean - &b.mean;
    let value = diff.dot(&diff) + ca.trace() + cb.trace() - 2.0 * cross;
    if !value.is_finite() {
        return Err(Error::Numerical("FID evaluated to a non-finite value".into()));
    }
    Ok(value.max(0.0))
}

/// FID between two feature clouds (rows are samples).
pub fn fid(real: &[Vec<f64>], syn: &[Vec<f64>]) -> Result<f64> {
    frechet_distance(&GaussianStats::from_rows(real)?, &GaussianStats::from_rows(syn)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedClass {
    pub class: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidResult {
    pub overall: f64,
    pub per_class: BTreeMap<String, f64>,
    pub macro_average: f64,
    pub skipped: Vec<SkippedClass>,
}

/// Overall and per-class FID from labelled feature clouds. Classes with
/// fewer than `min_samples` on either side, or present on one side only,
/// are listed as skipped.
pub fn per_class_fid_features(
    real: &[(String, Vec<f64>)],
    syn: &[(String, Vec<f64>)],
    min_samples: usize,
) -> Result<FidResult> {
    let group = |v: &[(String, Vec<f64>)]| {
        let mut m: BTreeMap<String, Vec<Vec<f64>>> = BTreeMap::new();
        for (c, f) in v {
            m.entry(c.clone()).or_default().push(f.clone());
        }
        m
    };
    let (gr, gs) = (group(real), group(syn));
    let all_real: Vec<Vec<f64>> = real.iter().map(|(_, f)| f.clone()).collect();
    let all_syn: Vec<Vec<f64>> = syn.iter().map(|(_, f)| f.clone()).collect();
    let overall = fid(&all_real, &all_syn)?;

    let mut per_class = BTreeMap::new();
    let mut skipped = Vec::new();
    let classes: std::collections::BTreeSet<&String> = gr.keys().chain(gs.keys()).collect();
    for c in classes {
        let (r, s) = (gr.get(c), gs.get(c));
        let reason = match (r, s) {
            (None, _) => Some("absent from the real set".to_string()),
            (_, None) => Some("absent from the synthetic set".to_string()),
            (Some(r), Some(s)) if r.len() < min_samples || s.len() < min_samples => {
                Some(format!("{} real / {} synthetic samples, below the minimum of {min_samples}", r.len(), s.len()))
            }
            _ => None,
        };
        match reason {
            Some(reason) => {
                log::warn!("skipping FID for class {c}: {reason}");
                skipped.push(SkippedClass { class: c.clone(), reason });
            }
            None => {
                per_class.insert(c.clone(), fid(r.expect("real"), s.expect("syn"))?);
            }
        }
    }
    let macro_average =
        if per_class.is_empty() { f64::NAN } else { per_class.values().sum::<f64>() / per_class.len() as f64 };
    Ok(FidResult { overall, per_class, macro_average, skipped })
}

/// [`per_class_fid_features`] over two manifests' images.
pub fn per_class_fid(
    real: &DatasetManifest,
    syn: &DatasetManifest,
    extractor: &dyn FeatureExtractor,
    channels: usize,
    min_samples: usize,
) -> Result<FidResult> {
    let label = |m: &DatasetManifest, f: Vec<Vec<f64>>| -> Vec<(String, Vec<f64>)> {
        m.records().iter().map(|r| r.class_label.clone()).zip(f).collect()
    };
    let fr = label(real, extract_manifest(real, extractor, channels)?);
    let fs = label(syn, extract_manifest(syn, extractor, channels)?);
    per_class_fid_features(&fr, &fs, min_samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_sets_are_zero() {
        let rows: Vec<Vec<f64>> = (0..50).map(|i| vec![(i as f64).sin(), (i as f64 * 0.3).cos(), i as f64 / 50.0]).collect();
        assert!(fid(&rows, &rows).unwrap() <= 1e-6);
    }

    #[test]
    fn errors() {
        assert!(fid(&[vec![1.0]], &[vec![1.0], vec![2.0]]).is_err());
        assert!(fid(&[vec![1.0], vec![f64::NAN]], &[vec![1.0], vec![2.0]]).is_err());
        assert!(fid(&[vec![1.0], vec![2.0]], &[vec![1.0, 0.0], vec![2.0, 1.0]]).is_err());
    }

    #[test]
    fn skipped_classes_are_listed() {
        let a: Vec<(String, Vec<f64>)> =
            (0..6).map(|i| (if i < 3 { "A" } else { "B" }.to_string(), vec![i as f64, (i * i) as f64])).collect();
        let b: Vec<(String, Vec<f64>)> = a.iter().filter(|(c, _)| c == "A").cloned().collect();
        let r = per_class_fid_features(&a, &b, 2).unwrap();
        assert_eq!(r.per_class.len(), 1);
        assert_eq!(r.skipped.len(), 1);
        assert_eq!(r.skipped[0].class, "B");
    }
}
