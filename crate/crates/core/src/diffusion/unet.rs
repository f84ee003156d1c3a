//! Small conditional UNet predicting the noise added to an image.

use medi_nn::{uniform_fan_in, ParamId, ParamStore, Real, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::conditioning::{Conditioning, ConditioningSpec, EmbeddingTables};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnetConfig {
    pub image_size: usize,
    pub in_channels: usize,
    pub base_channels: usize,
    /// Channel multiplier per resolution level; one downsampling between levels.
    pub channel_mults: Vec<usize>,
    pub norm_groups: usize,
}

impl Default for UnetConfig {
    fn default() -> Self {
        Self { image_size: 32, in_channels: 3, base_channels: 32, channel_mults: vec![1, 2], norm_groups: 8 }
    }
}

impl UnetConfig {
    pub fn validate(&self) -> Result<()> {
        let levels = self.channel_mults.len();
        if levels == 0 || self.base_channels == 0 || self.in_channels == 0 || self.norm_groups == 0 {
            return Err(Error::InvalidArgument("unet needs at least one level and positive widths".into()));
        }
        if self.channel_mults.contains(&0) {
            return Err(Error::InvalidArgument("channel multipliers must be positive".into()));
        }
        let factor = 1usize << (levels - 1);
        if self.image_size == 0 || !self.image_size.is_multiple_of(factor) {
            return Err(Error::InvalidArgument(format!(
                "image size {} is not divisible by the total downsampling factor {factor}",
                self.image_size
            )));
        }
        Ok(())
    }

    fn channels(&self, level: usize) -> usize {
        self.base_channels * self.channel_mults[level]
    }

    /// Elements in one `[C, H, W]` image.
    pub fn image_len(&self) -> usize {
        self.in_channels * self.image_size * self.image_size
    }
}

/// Largest divisor of `channels` not exceeding `wanted`.
fn groups_for(channels: usize, wanted: usize) -> usize {
    (1..=wanted.min(channels)).rev().find(|g| channels.is_multiple_of(*g)).unwrap_or(1)
}

#[derive(Debug, Clone)]
struct Conv {
    w: ParamId,
    b: ParamId,
    stride: usize,
    pad: usize,
}

impl Conv {
    fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = cin * kernel * kernel;
        let w = store.add(format!("{name}.weight"), uniform_fan_in(vec![cout, cin, kernel, kernel], fan_in, rng));
        let b = store.add(format!("{name}.bias"), uniform_fan_in(vec![cout], fan_in, rng));
        Self { w, b, stride, pad: kernel / 2 }
    }

    fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var) -> Var {
        let (w, b) = (tape.param(self.w), tape.param(self.b));
        tape.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

#[derive(Debug, Clone)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, rng: &mut R) -> Self {
        let w = store.add(format!("{name}.weight"), uniform_fan_in(vec![cout, cin], cin, rng));
        let b = store.add(format!("{name}.bias"), uniform_fan_in(vec![cout], cin, rng));
        Self { w, b }
    }

    fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var) -> Var {
        let (w, b) = (tape.param(self.w), tape.param(self.b));
        tape.linear(x, w, Some(b))
    }
}

#[derive(Debug, Clone)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
    groups: usize,
}

impl Norm {
    fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize, groups: usize) -> Self {
        let gamma = store.add(format!("{name}.weight"), Tensor::from_fn(vec![channels], |_| T::one()));
        let beta = store.add(format!("{name}.bias"), Tensor::zeros(vec![channels]));
        Self { gamma, beta, groups: groups_for(channels, groups) }
    }

    fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var) -> Var {
        let (g, b) = (tape.param(self.gamma), tape.param(self.beta));
        tape.group_norm(x, g, b, self.groups)
    }
}

/// Residual block receiving the combined timestep + conditioning embedding.
#[derive(Debug, Clone)]
struct ResBlock {
    norm1: Norm,
    conv1: Conv,
    emb_proj: Linear,
    norm2: Norm,
    conv2: Conv,
    skip: Option<Conv>,
}

impl ResBlock {
    fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        emb_width: usize,
        groups: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            norm1: Norm::new(store, &format!("{name}.norm1"), cin, groups),
            conv1: Conv::new(store, &format!("{name}.conv1"), cin, cout, 3, 1, rng),
            emb_proj: Linear::new(store, &format!("{name}.emb_proj"), emb_width, cout, rng),
            norm2: Norm::new(store, &format!("{name}.norm2"), cout, groups),
            conv2: Conv::new(store, &format!("{name}.conv2"), cout, cout, 3, 1, rng),
            skip: (cin != cout).then(|| Conv::new(store, &format!("{name}.skip"), cin, cout, 1, 1, rng)),
        }
    }

    fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var, emb_act: Var) -> Var {
        let h = self.norm1.forward(tape, x);
        let h = tape.silu(h);
        let h = self.conv1.forward(tape, h);
        let e = self.emb_proj.forward(tape, emb_act);
        let h = tape.add_channel(h, e);
        let h = self.norm2.forward(tape, h);
        let h = tape.silu(h);
        let h = self.conv2.forward(tape, h);
        let skip = match &self.skip {
            Some(conv) => conv.forward(tape, x),
            None => x,
        };
        tape.add(h, skip)
    }
}

#[derive(Debug, Clone)]
struct UpLevel {
    block: ResBlock,
    upsample: Option<Conv>,
}

/// Noise-prediction UNet with learnable class and metadata embeddings.
///
/// The sinusoidal timestep features pass through a two-layer MLP to give
/// `z_t`; the conditioning vector `z_cond` is added to it and the sum feeds
/// a projection inside every residual block of both paths.
#[derive(Debug, Clone)]
pub struct DenoiserModel<T> {
    pub config: UnetConfig,
    pub conditioning: ConditioningSpec,
    pub tables: EmbeddingTables,
    params: ParamStore<T>,
    time_mlp: (Linear, Linear),
    conv_in: Conv,
    down: Vec<(ResBlock, Option<Conv>)>,
    mid: ResBlock,
    up: Vec<UpLevel>,
    norm_out: Norm,
    conv_out: Conv,
}

impl<T: Real> DenoiserModel<T> {
    pub fn new<R: Rng + ?Sized>(config: UnetConfig, conditioning: ConditioningSpec, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d_t = conditioning.d_t;
        let groups = config.norm_groups;
        let levels = config.channel_mults.len();
        let mut store = ParamStore::new();

        let tables = EmbeddingTables::register(&conditioning, &mut store, rng);
        let time_mlp = (
            Linear::new(&mut store, "time.linear1", d_t, d_t, rng),
            Linear::new(&mut store, "time.linear2", d_t, d_t, rng),
        );
        let conv_in = Conv::new(&mut store, "conv_in", config.in_channels, config.channels(0), 3, 1, rng);

        let mut down = Vec::with_capacity(levels);
        let mut ch = config.channels(0);
        for level in 0..levels {
            let out = config.channels(level);
            let block = ResBlock::new(&mut store, &format!("down.{level}.res"), ch, out, d_t, groups, rng);
            let sample = (level + 1 < levels).then(|| Conv::new(&mut store, &format!("down.{level}.downsample"), out, out, 3, 2, rng));
            down.push((block, sample));
            ch = out;
        }
        let mid = ResBlock::new(&mut store, "mid.res", ch, ch, d_t, groups, rng);

        let mut up = Vec::with_capacity(levels);
        for level in (0..levels).rev() {
            let skip = config.channels(level);
            let block = ResBlock::new(&mut store, &format!("up.{level}.res"), ch + skip, skip, d_t, groups, rng);
            let upsample = (level > 0).then(|| Conv::new(&mut store, &format!("up.{level}.upsample"), skip, skip, 3, 1, rng));
            up.push(UpLevel { block, upsample });
            ch = skip;
        }
        let norm_out = Norm::new(&mut store, "norm_out", ch, groups);
        let conv_out = Conv::new(&mut store, "conv_out", ch, config.in_channels, 3, 1, rng);

        Ok(Self { config, conditioning, tables, params: store, time_mlp, conv_in, down, mid, up, norm_out, conv_out })
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Replace every parameter value; names and shapes must match exactly.
    pub fn load_params(&mut self, other: &ParamStore<T>) -> Result<()> {
        if other.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                self.params.len(),
                other.len()
            )));
        }
        for (id, p) in other.iter() {
            let mine = self.params.get(id);
            if mine.name != p.name || mine.value.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} {:?} does not match {} {:?}",
                    p.name,
                    p.value.shape(),
                    mine.name,
                    mine.value.shape()
                )));
            }
        }
        self.params = other.clone();
        Ok(())
    }

    /// Sinusoidal features of integer timesteps, `[B, d_t]`.
    pub fn timestep_features(&self, timesteps: &[usize]) -> Tensor<T> {
        sinusoidal_embedding(timesteps, self.conditioning.d_t)
    }

    /// Predict the noise in `x_t` (`[B, C, H, W]`).
    ///
    /// `cond_keep`, when given, scales each sample's conditioning vector
    /// (0 drops it, 1 keeps it).
    pub fn forward(
        &self,
        tape: &mut Tape<'_, T>,
        x_t: Var,
        timesteps: &[usize],
        conds: &[Conditioning],
        cond_keep: Option<&[T]>,
    ) -> Result<Var> {
        let shape = tape.value(x_t).shape().to_vec();
        let expected = [timesteps.len(), self.config.in_channels, self.config.image_size, self.config.image_size];
        if shape != expected {
            return Err(Error::InvalidArgument(format!("denoiser expects input {expected:?}, got {shape:?}")));
        }
        if conds.len() != timesteps.len() {
            return Err(Error::InvalidArgument(format!(
                "{} conditioning tuples for a batch of {}",
                conds.len(),
                timesteps.len()
            )));
        }
        let feats = tape.input(self.timestep_features(timesteps));
        let z_t = self.time_mlp.0.forward(tape, feats);
        let z_t = tape.silu(z_t);
        let z_t = self.time_mlp.1.forward(tape, z_t);
        let mut z_cond = self.tables.conditioning_var(&self.conditioning, tape, conds)?;
        if let Some(keep) = cond_keep {
            z_cond = tape.scale_rows(z_cond, keep);
        }
        let (wt, wc) = (tape.value(z_t).dim(1), tape.value(z_cond).dim(1));
        if wt != wc {
            return Err(Error::WidthMismatch { cond: wc, timestep: wt });
        }
        let z_final = tape.add(z_t, z_cond);
        let emb = tape.silu(z_final);

        let mut h = self.conv_in.forward(tape, x_t);
        let mut skips = Vec::with_capacity(self.down.len());
        for (block, sample) in &self.down {
            h = block.forward(tape, h, emb);
            skips.push(h);
            if let Some(conv) = sample {
                h = conv.forward(tape, h);
            }
        }
        h = self.mid.forward(tape, h, emb);
        for level in &self.up {
            let skip = skips.pop().expect("one skip per level");
            let cat = tape.concat_channels(h, skip);
            h = level.block.forward(tape, cat, emb);
            if let Some(conv) = &level.upsample {
                let u = tape.upsample2x(h);
                h = conv.forward(tape, u);
            }
        }
        let h = self.norm_out.forward(tape, h);
        let h = tape.silu(h);
        Ok(self.conv_out.forward(tape, h))
    }

    /// Gradient-free noise prediction for a batch stored contiguously.
    pub fn predict(&self, x_t: &[T], timesteps: &[usize], conds: &[Conditioning]) -> Result<Vec<T>> {
        if x_t.len() != timesteps.len() * self.config.image_len() {
            return Err(Error::InvalidArgument(format!(
                "{} values do not form {} images of {} values",
                x_t.len(),
                timesteps.len(),
                self.config.image_len()
            )));
        }
        let mut tape = Tape::inference(&self.params);
        let shape = vec![timesteps.len(), self.config.in_channels, self.config.image_size, self.config.image_size];
        let x = tape.input(Tensor::new(shape, x_t.to_vec()));
        let out = self.forward(&mut tape, x, timesteps, conds, None)?;
        Ok(tape.value(out).data().to_vec())
    }

    pub fn cast<U: Real>(&self) -> DenoiserModel<U> {
        DenoiserModel {
            config: self.config.clone(),
            conditioning: self.conditioning.clone(),
            tables: self.tables.clone(),
            params: self.params.cast(),
            time_mlp: self.time_mlp.clone(),
            conv_in: self.conv_in.clone(),
            down: self.down.clone(),
            mid: self.mid.clone(),
            up: self.up.clone(),
            norm_out: self.norm_out.clone(),
            conv_out: self.conv_out.clone(),
        }
    }
}

pub fn sinusoidal_embedding<T: Real>(timesteps: &[usize], width: usize) -> Tensor<T> {
    let half = width / 2;
    let mut data = vec![T::zero(); timesteps.len() * width];
    for (row, &t) in data.chunks_mut(width).zip(timesteps) {
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            let arg = t as f64 * freq;
            row[i] = T::of_f64(arg.sin());
            row[half + i] = T::of_f64(arg.cos());
        }
    }
    Tensor::new(vec![timesteps.len(), width], data)
}
