use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::Projection;
use crate::encoders::{Encoder, EncoderConfig, Head, ScaleEmbedding};
use crate::error::{Error, Result};
use crate::fusion::{Fusion, FusionConfig, FusionState};
use crate::numerics::{Bound, ParamStore, Real, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderPreset {
    /// 4/8/16/32 channels (8/16/32 below 64 voxels).
    Desk,
    /// 16/32/64 channels.
    Standard,
}

/// Which scales exist and how their encoders are built.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub scales: Vec<usize>,
    pub preset: EncoderPreset,
    /// Fraction of each encoder's stages frozen after stage-1 training.
    pub freeze_fraction: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            scales: vec![96, 64, 32],
            preset: EncoderPreset::Desk,
            freeze_fraction: 0.5,
        }
    }
}

impl ModelConfig {
    pub fn encoder_config(&self, scale: usize) -> EncoderConfig {
        match self.preset {
            EncoderPreset::Desk => EncoderConfig::desk(scale),
            EncoderPreset::Standard => EncoderConfig::standard(scale),
        }
    }

    /// Scales in ascending order, duplicates rejected.
    pub fn sorted_scales(&self) -> Result<Vec<usize>> {
        let mut s = self.scales.clone();
        s.sort_unstable();
        let n = s.len();
        s.dedup();
        if s.is_empty() || s.len() != n || s.len() > 3 {
            return Err(Error::Config(format!(
                "scales must be one to three distinct sizes, got {:?}",
                self.scales
            )));
        }
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        for s in self.sorted_scales()? {
            self.encoder_config(s).validate()?;
        }
        if !(0.0..=1.0).contains(&self.freeze_fraction) {
            return Err(Error::Config(format!("freeze fraction {}", self.freeze_fraction)));
        }
        Ok(())
    }
}

/// Per-component initialisation stream, so a component's initial weights do
/// not depend on which other components exist.
pub fn init_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const STREAM_ENCODER: u64 = 1 << 16;
const STREAM_PROJECTION: u64 = 2 << 16;
const STREAM_FUSION: u64 = 3 << 16;

/// Architecture of the whole network; parameter values live in a
/// [`ParamStore`] kept alongside.
#[derive(Clone, Debug)]
pub struct M3Net {
    scales: Vec<usize>,
    pub encoders: Vec<Encoder>,
    pub heads: Vec<Head>,
    pub projections: Vec<Projection>,
    pub fusion: Fusion,
}

/// Tape values produced by one forward pass through the fused model.
#[derive(Clone, Debug)]
pub struct ModelOutput {
    /// Per-scale head logits in ascending scale order.
    pub head_logits: Vec<Var>,
    /// Pooled latent embeddings `[B, D]` per scale.
    pub z: Vec<Var>,
    pub fusion: FusionState,
}

impl M3Net {
    pub fn new<T: Real>(model: &ModelConfig, fusion: &FusionConfig, store: &mut ParamStore<T>, seed: u64) -> Result<Self> {
        model.validate()?;
        let scales = model.sorted_scales()?;
        let mut encoders = Vec::new();
        let mut heads = Vec::new();
        let mut projections = Vec::new();
        for &s in &scales {
            let mut rng = init_rng(seed, STREAM_ENCODER + s as u64);
            let enc = Encoder::new(model.encoder_config(s), store, &mut rng)?;
            let c = enc.config().feature_dim();
            heads.push(Head::new(s, c, store, &mut rng)?);
            encoders.push(enc);
            let mut rng = init_rng(seed, STREAM_PROJECTION + s as u64);
            projections.push(Projection::new(s, c, fusion.dim, store, &mut rng)?);
        }
        let mut rng = init_rng(seed, STREAM_FUSION);
        let fusion = Fusion::new(fusion.clone(), scales.len(), store, &mut rng)?;
        Ok(M3Net {
            scales,
            encoders,
            heads,
            projections,
            fusion,
        })
    }

    /// Ascending.
    pub fn scales(&self) -> &[usize] {
        &self.scales
    }

    pub fn index_of(&self, scale: usize) -> Result<usize> {
        self.scales
            .iter()
            .position(|&s| s == scale)
            .ok_or_else(|| Error::Config(format!("model has no {scale}-voxel scale (has {:?})", self.scales)))
    }

    pub fn encoder(&self, scale: usize) -> Result<&Encoder> {
        Ok(&self.encoders[self.index_of(scale)?])
    }

    /// Parameter-name prefixes of the parts trained in stage 2.
    pub fn fusion_prefixes() -> [&'static str; 3] {
        ["proj", crate::fusion::FUSION_PREFIX, crate::fusion::CLASSIFIER_PREFIX]
    }

    /// Head logits, latent embeddings and the fusion pass from per-scale
    /// encoder outputs given in ascending scale order.
    pub fn forward_fused<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, feats: &[ScaleEmbedding]) -> Result<ModelOutput> {
        if feats.len() != self.scales.len() || feats.iter().zip(&self.scales).any(|(f, &s)| f.scale != s) {
            return Err(Error::Config(format!(
                "features for scales {:?}, model expects {:?}",
                feats.iter().map(|f| f.scale).collect::<Vec<_>>(),
                self.scales
            )));
        }
        let mut head_logits = Vec::with_capacity(feats.len());
        let mut z = Vec::with_capacity(feats.len());
        let mut tokens = Vec::with_capacity(feats.len());
        for (i, f) in feats.iter().enumerate() {
            head_logits.push(self.heads[i].forward(tape, p, f.pooled)?);
            z.push(self.projections[i].project(tape, p, f.pooled)?);
            tokens.push(self.projections[i].project(tape, p, f.tokens)?);
        }
        let fusion = self.fusion.forward(tape, p, &tokens)?;
        Ok(ModelOutput {
            head_logits,
            z,
            fusion,
        })
    }
}
