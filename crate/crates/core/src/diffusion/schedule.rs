use medi_nn::Real;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { timesteps: 1000, beta_start: 1e-4, beta_end: 0.02 }
    }
}

/// Linear-beta noise schedule over timesteps `1..=T`.
///
/// `alpha_bar(0)` is 1 by convention, so `t = 0` denotes clean data.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(config: &ScheduleConfig) -> Result<Self> {
        let ScheduleConfig { timesteps, beta_start, beta_end } = *config;
        if timesteps == 0 {
            return Err(Error::InvalidArgument("noise schedule needs at least one timestep".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "betas must satisfy 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"
            )));
        }
        let betas: Vec<f64> = if timesteps == 1 {
            vec![beta_start]
        } else {
            (0..timesteps)
                .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (timesteps - 1) as f64)
                .collect()
        };
        Ok(Self::from_betas(betas))
    }

    fn from_betas(betas: Vec<f64>) -> Self {
        let mut alpha_bars = Vec::with_capacity(betas.len() + 1);
        alpha_bars.push(1.0);
        for b in &betas {
            let prev = *alpha_bars.last().expect("seeded with 1");
            alpha_bars.push(prev * (1.0 - b));
        }
        Self { betas, alpha_bars }
    }

    /// Number of diffusion steps `T`.
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    /// `beta_t` for `t` in `1..=T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.beta(t)
    }

    /// Cumulative product `alpha_bar_t` for `t` in `0..=T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    pub fn check_timestep(&self, t: usize) -> Result<()> {
        if t > self.len() {
            return Err(Error::InvalidArgument(format!("timestep {t} outside 0..={}", self.len())));
        }
        Ok(())
    }
}

/// `x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps`.
pub fn forward_diffuse<T: Real>(x0: &[T], t: usize, eps: &[T], schedule: &NoiseSchedule) -> Result<Vec<T>> {
    schedule.check_timestep(t)?;
    if x0.len() != eps.len() {
        return Err(Error::InvalidArgument(format!("noise has {} elements, image has {}", eps.len(), x0.len())));
    }
    let ab = schedule.alpha_bar(t);
    let (a, b) = (T::of_f64(ab.sqrt()), T::of_f64((1.0 - ab).sqrt()));
    Ok(x0.iter().zip(eps).map(|(x, e)| a * *x + b * *e).collect())
}
