//! Denoising objective and the optimisation loop.

use medi_nn::{Adam, AdamConfig, Ema, ParamStore, Real, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::conditioning::Conditioning;
use super::schedule::NoiseSchedule;
use super::unet::DenoiserModel;
use crate::{Error, Result};

/// Anything that predicts the noise component of a noised image batch.
pub trait NoisePredictor<T: Real> {
    fn params(&self) -> &ParamStore<T>;

    fn params_mut(&mut self) -> &mut ParamStore<T>;

    /// `[C, H, W]` of one image.
    fn image_shape(&self) -> [usize; 3];

    fn predict_noise(
        &self,
        tape: &mut Tape<'_, T>,
        x_t: Var,
        timesteps: &[usize],
        conds: &[Conditioning],
        cond_keep: Option<&[T]>,
    ) -> Result<Var>;
}

impl<T: Real> NoisePredictor<T> for DenoiserModel<T> {
    fn params(&self) -> &ParamStore<T> {
        DenoiserModel::params(self)
    }

    fn params_mut(&mut self) -> &mut ParamStore<T> {
        DenoiserModel::params_mut(self)
    }

    fn image_shape(&self) -> [usize; 3] {
        [self.config.in_channels, self.config.image_size, self.config.image_size]
    }

    fn predict_noise(
        &self,
        tape: &mut Tape<'_, T>,
        x_t: Var,
        timesteps: &[usize],
        conds: &[Conditioning],
        cond_keep: Option<&[T]>,
    ) -> Result<Var> {
        self.forward(tape, x_t, timesteps, conds, cond_keep)
    }
}

/// Images `[B, C, H, W]` with their conditioning and patch ids.
#[derive(Debug, Clone)]
pub struct Batch<T> {
    pub images: Tensor<T>,
    pub conds: Vec<Conditioning>,
    pub ids: Vec<String>,
}

impl<T: Real> Batch<T> {
    pub fn len(&self) -> usize {
        self.conds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.conds.is_empty()
    }
}

/// Records the loss `mean ||eps_hat(x_t, t, c) - eps||^2` on a fresh tape.
pub fn denoising_loss<'m, T: Real, M: NoisePredictor<T>>(
    model: &'m M,
    schedule: &NoiseSchedule,
    x0: &Tensor<T>,
    timesteps: &[usize],
    eps: &Tensor<T>,
    conds: &[Conditioning],
    cond_keep: Option<&[T]>,
) -> Result<(Tape<'m, T>, Var)> {
    let b = timesteps.len();
    if b == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if x0.shape() != eps.shape() || x0.dim(0) != b {
        return Err(Error::InvalidArgument(format!(
            "images {:?}, noise {:?} and {b} timesteps disagree",
            x0.shape(),
            eps.shape()
        )));
    }
    let per = x0.len() / b;
    let mut noisy = Vec::with_capacity(x0.len());
    for (i, &t) in timesteps.iter().enumerate() {
        schedule.check_timestep(t)?;
        if t == 0 {
            return Err(Error::InvalidArgument("training timesteps start at 1".into()));
        }
        let ab = schedule.alpha_bar(t);
        let (a, s) = (T::of_f64(ab.sqrt()), T::of_f64((1.0 - ab).sqrt()));
        let xs = &x0.data()[i * per..(i + 1) * per];
        let es = &eps.data()[i * per..(i + 1) * per];
        noisy.extend(xs.iter().zip(es).map(|(x, e)| a * *x + s * *e));
    }
    let mut tape = Tape::new(model.params());
    let x_t = tape.input(Tensor::new(x0.shape().to_vec(), noisy));
    let pred = model.predict_noise(&mut tape, x_t, timesteps, conds, cond_keep)?;
    let target = tape.input(eps.clone());
    let loss = tape.mse(pred, target);
    Ok((tape, loss))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: u64,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Keep an exponential moving average of the weights (off when absent).
    pub ema_decay: Option<f64>,
    /// Probability of zeroing a sample's conditioning vector.
    pub cond_dropout: f64,
    /// Random horizontal flips of training images.
    pub hflip: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { steps: 800_000, lr: 1e-4, batch_size: 64, seed: 0, ema_decay: None, cond_dropout: 0.0, hflip: false }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) || self.batch_size == 0 {
            return Err(Error::InvalidArgument("training needs a positive learning rate and batch size".into()));
        }
        if !(0.0..1.0).contains(&self.cond_dropout) {
            return Err(Error::InvalidArgument("cond_dropout must lie in [0, 1)".into()));
        }
        if let Some(d) = self.ema_decay {
            if !(0.0..1.0).contains(&d) {
                return Err(Error::InvalidArgument("ema_decay must lie in [0, 1)".into()));
            }
        }
        Ok(())
    }
}

/// In-memory training images, each `[C, H, W]`, with conditioning.
#[derive(Debug, Clone)]
pub struct TrainingSet<T> {
    pub image_shape: [usize; 3],
    pub images: Vec<Vec<T>>,
    pub conds: Vec<Conditioning>,
    pub ids: Vec<String>,
}

impl<T: Real> TrainingSet<T> {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn batch(&self, indices: &[usize]) -> Batch<T> {
        let [c, h, w] = self.image_shape;
        let mut data = Vec::with_capacity(indices.len() * c * h * w);
        for &i in indices {
            data.extend_from_slice(&self.images[i]);
        }
        Batch {
            images: Tensor::new(vec![indices.len(), c, h, w], data),
            conds: indices.iter().map(|&i| self.conds[i].clone()).collect(),
            ids: indices.iter().map(|&i| self.ids[i].clone()).collect(),
        }
    }
}

/// Model, optimiser state and the random stream driving timestep and noise draws.
pub struct Trainer<T: Real, M: NoisePredictor<T>> {
    pub model: M,
    pub schedule: NoiseSchedule,
    pub config: TrainConfig,
    adam: Adam,
    ema: Option<Ema<T>>,
    rng: ChaCha8Rng,
    step: u64,
    order: Vec<usize>,
    cursor: usize,
}

impl<T: Real, M: NoisePredictor<T>> Trainer<T, M> {
    pub fn new(model: M, schedule: NoiseSchedule, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let adam = Adam::new(AdamConfig { lr: config.lr, ..AdamConfig::default() }, model.params());
        let ema = config.ema_decay.map(|d| Ema::new(d, model.params()));
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Self { model, schedule, config, adam, ema, rng, step: 0, order: Vec::new(), cursor: 0 })
    }

    pub fn steps_done(&self) -> u64 {
        self.step
    }

    /// One optimiser update on `batch`; returns the loss before the update.
    pub fn train_step(&mut self, batch: &Batch<T>) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let b = batch.len();
        let total = self.schedule.len();
        let timesteps: Vec<usize> = (0..b).map(|_| self.rng.random_range(1..=total)).collect();
        let eps = Tensor::from_fn(batch.images.shape().to_vec(), |_| {
            T::of_f64(self.rng.sample::<f64, _>(StandardNormal))
        });
        let images = if self.config.hflip { self.flip_some(&batch.images) } else { batch.images.clone() };
        let keep: Option<Vec<T>> = (self.config.cond_dropout > 0.0).then(|| {
            (0..b)
                .map(|_| if self.rng.random::<f64>() < self.config.cond_dropout { T::zero() } else { T::one() })
                .collect()
        });

        let (loss_value, grads) = {
            let (tape, loss) =
                denoising_loss(&self.model, &self.schedule, &images, &timesteps, &eps, &batch.conds, keep.as_deref())?;
            let value = tape.value(loss).data()[0].as_f64();
            if !value.is_finite() {
                return Err(self.non_finite(value, batch));
            }
            (value, tape.backward(loss))
        };
        if !grads.all_finite() {
            return Err(self.non_finite(f64::NAN, batch));
        }
        self.adam.step(self.model.params_mut(), &grads);
        if let Some(ema) = &mut self.ema {
            ema.update(self.model.params());
        }
        self.step += 1;
        Ok(loss_value)
    }

    fn non_finite(&self, loss: f64, batch: &Batch<T>) -> Error {
        Error::NonFiniteLoss { loss, step: self.step, lr: self.config.lr, batch_ids: batch.ids.clone() }
    }

    fn flip_some(&mut self, images: &Tensor<T>) -> Tensor<T> {
        let mut out = images.clone();
        let b = images.dim(0);
        let w = images.dim(3);
        let per = images.len() / b;
        for i in 0..b {
            if self.rng.random::<bool>() {
                for row in out.data_mut()[i * per..(i + 1) * per].chunks_mut(w) {
                    row.reverse();
                }
            }
        }
        out
    }

    fn next_indices(&mut self, n: usize) -> Vec<usize> {
        let bs = self.config.batch_size.min(n);
        let mut idx = Vec::with_capacity(bs);
        while idx.len() < bs {
            if self.cursor >= self.order.len() {
                self.order = (0..n).collect();
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            idx.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        idx
    }

    /// Run `config.steps` updates over shuffled epochs of `data`, reporting
    /// each loss to `on_step`.
    pub fn fit(&mut self, data: &TrainingSet<T>, mut on_step: impl FnMut(u64, f64)) -> Result<Vec<f64>> {
        if data.is_empty() {
            return Err(Error::InvalidArgument("no training images".into()));
        }
        if data.image_shape != self.model.image_shape() {
            return Err(Error::InvalidArgument(format!(
                "training images are {:?} but the model expects {:?}",
                data.image_shape,
                self.model.image_shape()
            )));
        }
        let mut losses = Vec::with_capacity(self.config.steps as usize);
        while self.step < self.config.steps {
            let idx = self.next_indices(data.len());
            let batch = data.batch(&idx);
            let loss = self.train_step(&batch)?;
            on_step(self.step, loss);
            losses.push(loss);
        }
        Ok(losses)
    }

    /// Parameters to sample from: the EMA shadow when enabled.
    pub fn sampling_params(&self) -> &ParamStore<T> {
        match &self.ema {
            Some(e) => &e.shadow,
            None => self.model.params(),
        }
    }

    pub fn into_model(self) -> M {
        let Self { mut model, ema, .. } = self;
        if let Some(e) = ema {
            *model.params_mut() = e.shadow;
        }
        model
    }
}
