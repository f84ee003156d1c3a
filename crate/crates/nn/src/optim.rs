use serde::{Deserialize, Serialize};

use crate::{Gradients, ParamStore, Real};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam without weight decay.
///
/// Row-sparse parameters are updated lazily: rows absent from the current
/// batch keep both their value and their moment estimates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new<T: Real>(config: AdamConfig, params: &ParamStore<T>) -> Self {
        let first = params.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect::<Vec<_>>();
        let second = first.clone();
        Self { config, step: 0, first, second }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step<T: Real>(&mut self, params: &mut ParamStore<T>, grads: &Gradients<T>) {
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step.min(i32::MAX as u64) as i32);
        let c2 = 1.0 - beta2.powi(self.step.min(i32::MAX as u64) as i32);
        let ids: Vec<_> = grads.iter().map(|(id, _)| id).collect();
        for id in ids {
            let grad = grads.get(id).expect("listed gradient");
            let row_sparse = params.get(id).row_sparse;
            let value = params.value_mut(id);
            let m = &mut self.first[id.0];
            let v = &mut self.second[id.0];
            let mut update = |i: usize| {
                let g = grad.data()[i].as_f64();
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                let p = &mut value.data_mut()[i];
                *p = T::of_f64(p.as_f64() - lr * mhat / (vhat.sqrt() + eps));
            };
            match (row_sparse, grads.touched_rows(id)) {
                (true, Some(rows)) => {
                    let width = value_width(grad.shape());
                    for &r in rows {
                        for i in r * width..(r + 1) * width {
                            update(i);
                        }
                    }
                }
                _ => (0..grad.len()).for_each(&mut update),
            }
        }
    }
}

fn value_width(shape: &[usize]) -> usize {
    shape[1..].iter().product::<usize>().max(1)
}

/// Exponential moving average of parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Ema<T> {
    pub decay: f64,
    pub shadow: ParamStore<T>,
}

impl<T: Real> Ema<T> {
    pub fn new(decay: f64, params: &ParamStore<T>) -> Self {
        Self { decay, shadow: params.clone() }
    }

    pub fn update(&mut self, params: &ParamStore<T>) {
        let d = T::of_f64(self.decay);
        let one_minus = T::of_f64(1.0 - self.decay);
        for (id, p) in params.iter() {
            let s = self.shadow.value_mut(id);
            for (a, b) in s.data_mut().iter_mut().zip(p.value.data()) {
                *a = *a * d + *b * one_minus;
            }
        }
    }
}
