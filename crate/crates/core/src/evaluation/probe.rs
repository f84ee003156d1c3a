use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::seeds::derive_seed;
use crate::{Error, Result};

/// Ridge penalty on all probe coefficients (features are standardised first).
pub const PROBE_L2: f64 = 1e-3;
/// Newton iterations stop once the gradient's largest entry is below this.
pub const PROBE_TOLERANCE: f64 = 1e-6;
const MAX_NEWTON_STEPS: usize = 200;

/// Multinomial logistic regression on standardised features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearProbe {
    pub classes: Vec<String>,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    /// Row-major `[classes, features + 1]`; the last column is the bias.
    pub weights: Vec<f64>,
    pub newton_steps: usize,
}

impl LinearProbe {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn augment(&self, x: &[f64]) -> DVector<f64> {
        let d = self.dim();
        DVector::from_fn(d + 1, |j, _| if j == d { 1.0 } else { (x[j] - self.mean[j]) / self.scale[j] })
    }

    pub fn scores(&self, x: &[f64]) -> Vec<f64> {
        let z = self.augment(x);
        let d1 = self.dim() + 1;
        (0..self.classes.len()).map(|c| (0..d1).map(|j| self.weights[c * d1 + j] * z[j]).sum()).collect()
    }

    pub fn predict(&self, x: &[f64]) -> &str {
        let s = self.scores(x);
        let best = (0..s.len()).fold(0, |b, i| if s[i] > s[b] { i } else { b });
        &self.classes[best]
    }

    pub fn predict_all(&self, xs: &[Vec<f64>]) -> Vec<String> {
        xs.iter().map(|x| self.predict(x).to_string()).collect()
    }
}

fn softmax(s: &[f64]) -> Vec<f64> {
    let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Fit a probe on all given examples by damped Newton iterations.
pub fn fit_logistic(x: &[Vec<f64>], labels: &[String], l2: f64) -> Result<LinearProbe> {
    if x.is_empty() || x.len() != labels.len() {
        return Err(Error::InvalidArgument(format!("{} embeddings but {} labels", x.len(), labels.len())));
    }
    let d = x[0].len();
    if x.iter().any(|r| r.len() != d || r.iter().any(|v| !v.is_finite())) {
        return Err(Error::InvalidArgument("embeddings must be finite and share one width".into()));
    }
    let classes: Vec<String> = labels.iter().cloned().collect::<std::collections::BTreeSet<_>>().into_iter().collect();
    let y: Vec<usize> = labels.iter().map(|l| classes.binary_search(l).expect("label")).collect();
    let n = x.len() as f64;
    let mean: Vec<f64> = (0..d).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let scale: Vec<f64> = (0..d)
        .map(|j| {
            let v = x.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n;
            if v > 1e-24 { v.sqrt() } else { 1.0 }
        })
        .collect();

    let k = classes.len();
    let d1 = d + 1;
    let p = k * d1;
    let mut probe = LinearProbe { classes, mean, scale, weights: vec![0.0; p], newton_steps: 0 };
    let z: Vec<DVector<f64>> = x.iter().map(|r| probe.augment(r)).collect();

    let objective = |w: &[f64]| -> f64 {
        let mut loss = 0.0;
        for (zi, &yi) in z.iter().zip(&y) {
            let s: Vec<f64> = (0..k).map(|c| (0..d1).map(|j| w[c * d1 + j] * zi[j]).sum()).collect();
            let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + s.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            loss += lse - s[yi];
        }
        loss / n + 0.5 * l2 * w.iter().map(|v| v * v).sum::<f64>()
    };

    for step in 0..MAX_NEWTON_STEPS {
        let w = &probe.weights;
        let mut grad = DVector::<f64>::zeros(p);
        let mut hess = DMatrix::<f64>::zeros(p, p);
        for (zi, &yi) in z.iter().zip(&y) {
            let s: Vec<f64> = (0..k).map(|c| (0..d1).map(|j| w[c * d1 + j] * zi[j]).sum()).collect();
            let pr = softmax(&s);
            let outer = zi * zi.transpose();
            for a in 0..k {
                let r = pr[a] - f64::from(u8::from(a == yi));
                for j in 0..d1 {
                    grad[a * d1 + j] += r * zi[j] / n;
                }
                for b in 0..k {
                    let coef = (if a == b { pr[a] } else { 0.0 } - pr[a] * pr[b]) / n;
                    if coef != 0.0 {
                        let mut block = hess.view_mut((a * d1, b * d1), (d1, d1));
                        block += &outer * coef;
                    }
                }
            }
        }
        for i in 0..p {
            grad[i] += l2 * w[i];
            hess[(i, i)] += l2;
        }
        if grad.amax() < PROBE_TOLERANCE {
            probe.newton_steps = step;
            return Ok(probe);
        }
        let dir = hess
            .cholesky()
            .ok_or_else(|| Error::Numerical("probe Hessian is not positive definite".into()))?
            .solve(&grad);
        let f0 = objective(w);
        let slope = -grad.dot(&dir);
        let mut t = 1.0;
        loop {
            let cand: Vec<f64> = w.iter().zip(dir.iter()).map(|(a, b)| a - t * b).collect();
            if objective(&cand) <= f0 + 1e-4 * t * slope || t < 1e-10 {
                probe.weights = cand;
                break;
            }
            t *= 0.5;
        }
    }
    Err(Error::Numerical(format!("probe did not converge in {MAX_NEWTON_STEPS} Newton steps")))
}

/// Draw `n_per_class` indices per class without replacement, classes in
/// sorted order. Each class uses its own stream derived from `seed`.
pub fn select_support(labels: &[String], n_per_class: usize, seed: u64) -> Result<Vec<usize>> {
    let mut by_class: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let mut support = Vec::with_capacity(by_class.len() * n_per_class);
    for (class, idx) in by_class {
        if idx.len() < n_per_class {
            return Err(Error::InvalidArgument(format!(
                "class {class} has {} embeddings, fewer than the {n_per_class} requested",
                idx.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("probe/{class}")));
        let mut picked = rand::seq::index::sample(&mut rng, idx.len(), n_per_class).into_vec();
        picked.sort_unstable();
        support.extend(picked.into_iter().map(|i| idx[i]));
    }
    Ok(support)
}

#[derive(Debug, Clone)]
pub struct TrainedProbe {
    pub probe: LinearProbe,
    pub support: Vec<usize>,
}

/// Few-shot probe: fit on exactly `n_per_class` randomly chosen examples per class.
pub fn train_linear_probe(embeddings: &[Vec<f64>], labels: &[String], n_per_class: usize, seed: u64) -> Result<TrainedProbe> {
    if embeddings.len() != labels.len() {
        return Err(Error::InvalidArgument(format!("{} embeddings but {} labels", embeddings.len(), labels.len())));
    }
    let support = select_support(labels, n_per_class, seed)?;
    let x: Vec<Vec<f64>> = support.iter().map(|&i| embeddings[i].clone()).collect();
    let y: Vec<String> = support.iter().map(|&i| labels[i].clone()).collect();
    Ok(TrainedProbe { probe: fit_logistic(&x, &y, PROBE_L2)?, support })
}
