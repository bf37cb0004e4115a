//! Scale-specific 3D convolutional encoders and their classification heads.
//!
//! A stage is `conv3d(k=3, pad=1, stride) + bias`, per-channel normalisation
//! over spatial positions with a learned affine, then GELU. The last stage's
//! spatial grid is flattened into tokens; the pooled feature is the token mean.

mod checkpoint;

pub use checkpoint::{checkpoint_bytes, parse_checkpoint, read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::kernels::conv_out_dim;
use crate::numerics::{Bound, ParamId, ParamStore, Real, Tape, Tensor, Var};
use crate::volume_io::CROP_DEPTH;

/// Raw HU are multiplied by this before the first convolution.
pub const INPUT_SCALE: f64 = 1e-3;
pub const KERNEL: usize = 3;
pub const NUM_CLASSES: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub channels: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    /// In-plane crop size this encoder reads.
    pub scale: usize,
    pub stages: Vec<StageConfig>,
}

impl EncoderConfig {
    /// Three stride-2 stages with 16/32/64 channels.
    pub fn standard(scale: usize) -> Self {
        EncoderConfig {
            scale,
            stages: [16, 32, 64]
                .into_iter()
                .map(|channels| StageConfig { channels, stride: 2 })
                .collect(),
        }
    }

    /// Narrow variant for single-core runs: 4/8/16/32 channels, stride 2, with
    /// one stage fewer below 64 voxels.
    pub fn desk(scale: usize) -> Self {
        let widths: &[usize] = if scale >= 64 { &[4, 8, 16, 32] } else { &[8, 16, 32] };
        EncoderConfig {
            scale,
            stages: widths
                .iter()
                .map(|&channels| StageConfig { channels, stride: 2 })
                .collect(),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.stages.last().map_or(0, |s| s.channels)
    }

    pub fn input_dims(&self) -> [usize; 3] {
        [self.scale, self.scale, CROP_DEPTH]
    }

    /// Spatial output grid of every stage.
    pub fn stage_dims(&self) -> Vec<[usize; 3]> {
        let mut dims = self.input_dims();
        self.stages
            .iter()
            .map(|s| {
                dims = dims.map(|n| conv_out_dim(n, s.stride));
                dims
            })
            .collect()
    }

    /// Number of tokens the last stage emits.
    pub fn token_count(&self) -> usize {
        self.stage_dims().last().map_or(0, |d| d.iter().product())
    }

    pub fn validate(&self) -> Result<()> {
        if self.scale == 0 || self.stages.is_empty() {
            return Err(Error::Config(format!("encoder {}: needs a scale and at least one stage", self.scale)));
        }
        if self.stages.iter().any(|s| s.channels == 0 || s.stride == 0) {
            return Err(Error::Config(format!("encoder {}: zero channels or stride", self.scale)));
        }
        let last = *self.stage_dims().last().expect("non-empty");
        if last[0] < 2 || last[1] < 2 {
            return Err(Error::Config(format!(
                "encoder {}: strides reduce the in-plane grid to {:?}, below 2",
                self.scale, last
            )));
        }
        Ok(())
    }
}

/// Pooled feature and token map of one scale, as tape values.
#[derive(Clone, Copy, Debug)]
pub struct ScaleEmbedding {
    pub scale: usize,
    /// `[B, C]`, the mean of `tokens` over positions.
    pub pooled: Var,
    /// `[B, L, C]`.
    pub tokens: Var,
}

#[derive(Clone, Debug)]
struct StageParams {
    w: ParamId,
    b: ParamId,
    gamma: ParamId,
    beta: ParamId,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    cfg: EncoderConfig,
    stages: Vec<StageParams>,
}

/// Uniform in `±√(3/fan_in)`, i.e. variance `1/fan_in`, so a linear map
/// keeps the scale of unit-variance inputs.
pub fn fan_in_uniform<T: Real>(shape: impl Into<Vec<usize>>, fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    Tensor::uniform(shape, (3.0 / fan_in as f64).sqrt(), rng)
}

impl Encoder {
    pub fn prefix(scale: usize) -> String {
        format!("enc{scale}.")
    }

    pub fn new<T: Real>(cfg: EncoderConfig, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let prefix = Self::prefix(cfg.scale);
        let mut cin = 1;
        let mut stages = Vec::with_capacity(cfg.stages.len());
        for (i, s) in cfg.stages.iter().enumerate() {
            let fan_in = cin * KERNEL.pow(3);
            let name = |p: &str| format!("{prefix}stage{i}.{p}");
            stages.push(StageParams {
                w: store.add(name("w"), fan_in_uniform([s.channels, cin, KERNEL, KERNEL, KERNEL], fan_in, rng))?,
                b: store.add(name("b"), Tensor::zeros([s.channels]))?,
                gamma: store.add(name("gamma"), Tensor::ones([s.channels]))?,
                beta: store.add(name("beta"), Tensor::zeros([s.channels]))?,
            });
            cin = s.channels;
        }
        Ok(Encoder { cfg, stages })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn scale(&self) -> usize {
        self.cfg.scale
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    /// Parameter ids of one stage.
    pub fn stage_params(&self, stage: usize) -> [ParamId; 4] {
        let s = &self.stages[stage];
        [s.w, s.b, s.gamma, s.beta]
    }

    /// Stack `[s, s, 56]` crops into a `[B, s, s, 56]` tensor.
    pub fn batch<T: Real>(&self, crops: &[&Tensor<f32>]) -> Result<Tensor<T>> {
        let dims = self.cfg.input_dims();
        let mut data = Vec::with_capacity(crops.len() * dims.iter().product::<usize>());
        for c in crops {
            if c.shape() != dims {
                return Err(Error::shape(format!(
                    "encoder {} expects crops {:?}, got {:?}",
                    self.cfg.scale,
                    dims,
                    c.shape()
                )));
            }
            data.extend(c.data().iter().map(|&v| T::from_f64_lossy(f64::from(v))));
        }
        Tensor::new([crops.len(), dims[0], dims[1], dims[2]], data)
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<ScaleEmbedding> {
        Ok(self.run(tape, p, x, None)?.0)
    }

    /// Forward pass that replaces the output of `stage` by a fresh watched
    /// leaf, so its gradient can be read back after `backward`.
    pub fn forward_watch<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        x: Var,
        stage: usize,
    ) -> Result<(ScaleEmbedding, Var)> {
        if stage >= self.stages.len() {
            return Err(Error::Attribution(format!(
                "encoder {} has {} stages, no stage {stage}",
                self.cfg.scale,
                self.stages.len()
            )));
        }
        let (emb, watched) = self.run(tape, p, x, Some(stage))?;
        Ok((emb, watched.expect("stage was watched")))
    }

    fn run<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        x: Var,
        watch: Option<usize>,
    ) -> Result<(ScaleEmbedding, Option<Var>)> {
        let dims = self.cfg.input_dims();
        let shape = tape.shape(x).to_vec();
        if shape.len() != 4 || shape[1..] != dims {
            return Err(Error::shape(format!(
                "encoder {} expects [B, {}, {}, {}], got {shape:?}",
                self.cfg.scale, dims[0], dims[1], dims[2]
            )));
        }
        let batch = shape[0];
        let x = tape.reshape(x, &[batch, 1, dims[0], dims[1], dims[2]])?;
        let mut h = tape.scale(x, T::from_f64_lossy(INPUT_SCALE))?;
        let mut watched = None;
        for (i, (s, sp)) in self.cfg.stages.iter().zip(&self.stages).enumerate() {
            h = tape.conv3d(h, p[sp.w], s.stride)?;
            h = tape.add_axis(h, p[sp.b], 1)?;
            h = channel_norm(tape, h)?;
            h = tape.mul_axis(h, p[sp.gamma], 1)?;
            h = tape.add_axis(h, p[sp.beta], 1)?;
            h = tape.gelu(h)?;
            if watch == Some(i) {
                let value = tape.value(h).clone();
                h = tape.watch(value);
                watched = Some(h);
            }
        }
        let s = tape.shape(h).to_vec();
        let (c, n) = (s[1], s[2] * s[3] * s[4]);
        let flat = tape.reshape(h, &[batch, c, n])?;
        let tokens = tape.swap_last2(flat)?;
        let pooled = tape.mean_axis(tokens, 1)?;
        Ok((
            ScaleEmbedding {
                scale: self.cfg.scale,
                pooled,
                tokens,
            },
            watched,
        ))
    }
}

/// Zero mean, unit variance per sample and channel over the spatial grid of
/// a `[B, C, X, Y, Z]` value.
pub fn channel_norm<T: Real>(tape: &mut Tape<T>, h: Var) -> Result<Var> {
    let shape = tape.shape(h).to_vec();
    tape.group_norm(h, shape[2..].iter().product())
}

/// Affine map from pooled features to two class logits.
#[derive(Clone, Debug)]
pub struct Head {
    pub scale: usize,
    w: ParamId,
    b: ParamId,
}

impl Head {
    pub fn prefix(scale: usize) -> String {
        format!("head{scale}.")
    }

    pub fn new<T: Real>(scale: usize, features: usize, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Result<Self> {
        let prefix = Self::prefix(scale);
        Ok(Head {
            scale,
            w: store.add(format!("{prefix}w"), fan_in_uniform([features, NUM_CLASSES], features, rng))?,
            b: store.add(format!("{prefix}b"), Tensor::zeros([NUM_CLASSES]))?,
        })
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.w, self.b]
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, pooled: Var) -> Result<Var> {
        tape.linear(pooled, p[self.w], Some(p[self.b]))
    }
}

/// Freeze the first `⌈f · stages⌉` stages of `encoder`; the rest, and every
/// other parameter, keep their flags. Returns the per-stage trainability mask.
pub fn freeze_lower<T: Real>(store: &mut ParamStore<T>, encoder: &Encoder, fraction: f64) -> Result<Vec<bool>> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Config(format!("freeze fraction {fraction} outside [0, 1]")));
    }
    let n = encoder.num_stages();
    let frozen = ((fraction * n as f64) - 1e-9).ceil().max(0.0) as usize;
    let mask: Vec<bool> = (0..n).map(|i| i >= frozen).collect();
    for (i, &trainable) in mask.iter().enumerate() {
        for id in encoder.stage_params(i) {
            store.set_trainable(id, trainable);
        }
    }
    Ok(mask)
}

/// Multiply-add count of one encoder pass over `batch` samples: every
/// convolution contributes `2·27·C_in·C_out` per output voxel plus one bias add
/// per output value. Normalisation and activations are not counted.
pub fn count_flops(cfg: &EncoderConfig, batch: usize) -> u64 {
    let mut cin = 1u64;
    let mut total = 0u64;
    for (s, dims) in cfg.stages.iter().zip(cfg.stage_dims()) {
        let out_voxels: u64 = dims.iter().map(|&d| d as u64).product();
        let cout = s.channels as u64;
        total += 2 * (KERNEL as u64).pow(3) * cin * cout * out_voxels + cout * out_voxels;
        cin = cout;
    }
    total * batch as u64
}

/// `2·in·out + out` for an affine layer applied to `rows` inputs.
pub fn linear_flops(inputs: usize, outputs: usize, rows: usize) -> u64 {
    (2 * inputs * outputs + outputs) as u64 * rows as u64
}

/// Scalar count of a store, optionally trainable entries only.
pub fn count_params<T: Real>(store: &ParamStore<T>, trainable_only: bool) -> usize {
    store.count(trainable_only)
}
