//! The run configuration file: one JSON object with the sections `data`,
//! `encoders`, `alignment`, `fusion`, `training` and `metrics`. Unknown keys
//! are rejected at every level.

use std::path::Path;

use m3net_core::alignment::AlignWeights;
use m3net_core::fusion::FusionConfig;
use m3net_core::metrics::DEFAULT_THRESHOLD;
use m3net_core::training::{ModelConfig, TrainConfig};
use m3net_core::volume_io::synth::SynthConfig;
use m3net_core::volume_io::SplitFractions;
use m3net_core::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Source-domain synthetic set.
    pub synth: SynthConfig,
    pub split: SplitFractions,
    /// Shifted target domain for few-shot adaptation.
    pub fewshot: SynthConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            synth: SynthConfig::default(),
            split: SplitFractions::default(),
            fewshot: SynthConfig {
                count: 80,
                hu_offset: 60.0,
                cue_contrast: 0.7,
                noise_hu: 40.0,
                prefix: "tgt".into(),
                ..SynthConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    /// Decision threshold on the malignant-class probability.
    pub threshold: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            threshold: DEFAULT_THRESHOLD,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub encoders: ModelConfig,
    pub alignment: AlignWeights,
    pub fusion: FusionConfig,
    pub training: TrainConfig,
    pub metrics: MetricsConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Section-level checks plus the contradictions between sections.
    pub fn validate(&self) -> Result<()> {
        self.encoders.validate()?;
        self.fusion.validate()?;
        self.training.validate_with(&self.alignment)?;
        let t = self.metrics.threshold;
        if !(t.is_finite() && (0.0..=1.0).contains(&t)) {
            return Err(Error::Config(format!("threshold {t} outside [0, 1]")));
        }
        for s in [&self.data.synth, &self.data.fewshot] {
            if s.count < 2 {
                return Err(Error::Config(format!("synthetic set `{}` needs at least 2 samples", s.prefix)));
            }
        }
        if self.data.synth.prefix == self.data.fewshot.prefix {
            return Err(Error::Config(
                "source and few-shot sets share an id prefix, so their ids would collide".into(),
            ));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
