//! Deterministic DDIM sampling (eta = 0).

use medi_nn::{Real, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::conditioning::Conditioning;
use super::schedule::NoiseSchedule;
use super::train::NoisePredictor;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DdimConfig {
    pub num_inference_steps: usize,
    /// Clamp the predicted clean image to [-1, 1] at every step.
    pub clip_sample: bool,
    /// Images denoised together per network call.
    pub batch_size: usize,
}

impl Default for DdimConfig {
    fn default() -> Self {
        Self { num_inference_steps: 100, clip_sample: true, batch_size: 32 }
    }
}

/// Descending timesteps `T, T - T/S, ...`, each followed by the next one and
/// finally by 0.
pub fn ddim_timesteps(total: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > total {
        return Err(Error::InvalidArgument(format!("inference steps must lie in 1..={total}, got {steps}")));
    }
    Ok((0..steps).map(|i| total - i * total / steps).collect())
}

/// One deterministic update from `t` to `t_prev` given the predicted noise.
pub fn ddim_step<T: Real>(
    x_t: &[T],
    eps: &[T],
    t: usize,
    t_prev: usize,
    schedule: &NoiseSchedule,
    clip: bool,
) -> Vec<T> {
    let ab = schedule.alpha_bar(t);
    let ab_prev = schedule.alpha_bar(t_prev);
    let (sa, s1a) = (ab.sqrt(), (1.0 - ab).sqrt());
    let (sp, s1p) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
    x_t.iter()
        .zip(eps)
        .map(|(x, e)| {
            let (x, e) = (x.as_f64(), e.as_f64());
            let mut x0 = (x - s1a * e) / sa;
            if clip {
                x0 = x0.clamp(-1.0, 1.0);
            }
            // Re-derive the noise from the (possibly clipped) estimate.
            let e = if clip { (x - sa * x0) / s1a } else { e };
            T::of_f64(sp * x0 + s1p * e)
        })
        .collect()
}

/// Starting noise `x_T` for one image, a pure function of `seed`.
pub fn initial_noise<T: Real>(len: usize, seed: u64) -> Vec<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| T::of_f64(rng.sample::<f64, _>(StandardNormal))).collect()
}

/// Sample one image per (conditioning, seed) pair. Output values lie in [-1, 1].
pub fn ddim_sample_batch<T: Real, M: NoisePredictor<T>>(
    model: &M,
    schedule: &NoiseSchedule,
    conds: &[Conditioning],
    seeds: &[u64],
    config: &DdimConfig,
) -> Result<Vec<Vec<T>>> {
    if conds.len() != seeds.len() {
        return Err(Error::InvalidArgument(format!("{} conditionings but {} seeds", conds.len(), seeds.len())));
    }
    let timesteps = ddim_timesteps(schedule.len(), config.num_inference_steps)?;
    let shape = model.image_shape();
    let per: usize = shape.iter().product();
    let mut out = Vec::with_capacity(conds.len());
    for (cs, ss) in conds.chunks(config.batch_size.max(1)).zip(seeds.chunks(config.batch_size.max(1))) {
        let b = cs.len();
        let mut x: Vec<T> = ss.iter().flat_map(|s| initial_noise::<T>(per, *s)).collect();
        for (i, &t) in timesteps.iter().enumerate() {
            let t_prev = timesteps.get(i + 1).copied().unwrap_or(0);
            let eps = {
                let mut tape = Tape::inference(model.params());
                let xv = tape.input(Tensor::new(vec![b, shape[0], shape[1], shape[2]], x.clone()));
                let ts = vec![t; b];
                let y = model.predict_noise(&mut tape, xv, &ts, cs, None)?;
                tape.value(y).data().to_vec()
            };
            x = ddim_step(&x, &eps, t, t_prev, schedule, config.clip_sample);
        }
        for img in x.chunks(per) {
            out.push(img.iter().map(|v| v.clamp(-T::one(), T::one())).collect());
        }
    }
    Ok(out)
}

/// Single-image convenience over [`ddim_sample_batch`].
pub fn ddim_sample<T: Real, M: NoisePredictor<T>>(
    model: &M,
    schedule: &NoiseSchedule,
    cond: &Conditioning,
    num_inference_steps: usize,
    seed: u64,
) -> Result<Vec<T>> {
    let config = DdimConfig { num_inference_steps, ..DdimConfig::default() };
    let mut v = ddim_sample_batch(model, schedule, std::slice::from_ref(cond), &[seed], &config)?;
    Ok(v.pop().expect("one image"))
}
