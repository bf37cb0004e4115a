//! Synthetic nodule volumes with scale-separated class cues.
//!
//! Every volume holds an ellipsoidal soft-tissue nodule over textured lung
//! parenchyma. Malignant samples additionally carry up to three cues, each
//! placed in an in-plane band around the centroid (Chebyshev distance `r`):
//!
//! * spiculation: thin radial spikes leaving the nodule, `r < 15`, inside the
//!   32-crop;
//! * vessel: a tube running along z with `21 <= r <= 25`, first visible in
//!   the 64-crop;
//! * density ramp: raised attenuation growing outward for `r >= 33`, visible
//!   only in the 96-crop.
//!
//! At difficulty 0 every malignant sample carries all three cues at full
//! strength and nothing is jittered. Above 0, each malignant sample carries a
//! uniformly drawn non-empty subset of cues, so any single scale sees only
//! part of the evidence.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::format::{write_volume, Volume};
use super::manifest::{Manifest, ManifestEntry};
use super::patches::Label;
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const NODULES_FILE: &str = "nodules.json";

const BACKGROUND_HU: f64 = -800.0;
const NODULE_HU: f64 = 40.0;
const RAMP_HU: f64 = 150.0;
const SPIKE_REACH: f64 = 13.0;
const TUBE_OFFSET: f64 = 23.0;
const TUBE_RADIUS: f64 = 2.0;
const RAMP_START: f64 = 33.0;
const RAMP_WIDTH: f64 = 15.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub count: usize,
    /// 0 gives maximal cues and no jitter; 1 is the hardest setting.
    pub difficulty: f64,
    pub dims: [usize; 3],
    pub spacing: [f32; 3],
    /// Added to every voxel, for domain-shifted target sets.
    pub hu_offset: f64,
    /// Multiplies the attenuation contrast of all cues; negative values
    /// render them darker than their surroundings.
    pub cue_contrast: f64,
    /// Standard deviation of the voxel noise in HU.
    pub noise_hu: f64,
    /// Prefix of the generated volume ids.
    pub prefix: String,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            count: 300,
            difficulty: 0.5,
            dims: [100, 100, 60],
            spacing: [0.7, 0.7, 1.25],
            hu_offset: 0.0,
            cue_contrast: 1.0,
            noise_hu: 25.0,
            prefix: "vol".into(),
        }
    }
}

/// Which cues a malignant sample carries.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cues {
    pub spiculation: bool,
    pub vessel: bool,
    pub ramp: bool,
}

impl Cues {
    pub const ALL: Cues = Cues {
        spiculation: true,
        vessel: true,
        ramp: true,
    };

    fn from_bits(bits: u8) -> Self {
        Cues {
            spiculation: bits & 1 != 0,
            vessel: bits & 2 != 0,
            ramp: bits & 4 != 0,
        }
    }
}

/// Ground truth for one generated sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoduleTruth {
    pub source_id: String,
    pub label: Label,
    /// Ellipsoid centre in voxel coordinates.
    pub center: [f64; 3],
    /// Semi-axes in voxels.
    pub radii: [f64; 3],
    pub cues: Cues,
}

impl NoduleTruth {
    /// Whether voxel `(x, y, z)` lies inside the ellipsoid.
    pub fn contains(&self, p: [f64; 3]) -> bool {
        (0..3)
            .map(|a| ((p[a] - self.center[a]) / self.radii[a]).powi(2))
            .sum::<f64>()
            <= 1.0
    }
}

/// One rendered sample before it is written to disk.
#[derive(Clone, Debug)]
pub struct SynthSample {
    pub volume: Volume,
    pub truth: NoduleTruth,
    pub scores: Vec<u8>,
}

/// Render `cfg.count` samples, alternating benign and malignant.
pub fn synth_samples(cfg: &SynthConfig, seed: u64) -> Result<Vec<SynthSample>> {
    if cfg.count < 2 {
        return Err(Error::Config(format!("synthetic set needs at least 2 samples, got {}", cfg.count)));
    }
    if !(0.0..=1.0).contains(&cfg.difficulty) {
        return Err(Error::Config(format!("difficulty {} outside [0, 1]", cfg.difficulty)));
    }
    if cfg.dims.iter().any(|&d| d < 16) {
        return Err(Error::Config(format!("volume dims {:?} too small", cfg.dims)));
    }
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let seeds: Vec<u64> = (0..cfg.count).map(|_| master.random()).collect();
    seeds
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            let label = if i % 2 == 0 { Label::Benign } else { Label::Malignant };
            render(cfg, format!("{}_{i:04}", cfg.prefix), label, s)
        })
        .collect()
}

/// Render the samples into `out_dir` as volumes plus `manifest.csv` (untagged)
/// and the `nodules.json` sidecar.
pub fn synth_generate(cfg: &SynthConfig, seed: u64, out_dir: &Path) -> Result<Manifest> {
    fs::create_dir_all(out_dir)?;
    let samples = synth_samples(cfg, seed)?;
    let mut entries = Vec::with_capacity(samples.len());
    let mut truths = Vec::with_capacity(samples.len());
    for s in samples {
        let file = format!("{}.m3nvol", s.truth.source_id);
        write_volume(&s.volume, out_dir.join(&file))?;
        entries.push(ManifestEntry {
            path: file.into(),
            centroid: s.volume.centroid(),
            scores: s.scores,
            split: None,
        });
        truths.push(s.truth);
    }
    let manifest = Manifest {
        entries,
        root: out_dir.to_path_buf(),
    };
    manifest.write(out_dir.join(MANIFEST_FILE))?;
    fs::write(out_dir.join(NODULES_FILE), serde_json::to_vec_pretty(&truths)?)?;
    Ok(manifest)
}

pub fn read_truths(path: impl AsRef<Path>) -> Result<Vec<NoduleTruth>> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

fn render(cfg: &SynthConfig, source_id: String, label: Label, seed: u64) -> Result<SynthSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = cfg.difficulty;
    let [nx, ny, nz] = cfg.dims;

    let jitter = (3.0 * d).round() as i64;
    let mut centroid = [nx / 2, ny / 2, nz / 2];
    for c in centroid.iter_mut().take(2) {
        let j = if jitter > 0 { rng.random_range(-jitter..=jitter) } else { 0 };
        *c = (*c as i64 + j) as usize;
    }
    let radii = if d > 0.0 {
        [
            rng.random_range(4.5..6.5),
            rng.random_range(4.5..6.5),
            rng.random_range(3.5..5.5),
        ]
    } else {
        [5.5, 5.5, 4.5]
    };
    let center = centroid.map(|c| c as f64);

    let cues = match label {
        Label::Benign => Cues::default(),
        Label::Malignant if d > 0.0 => Cues::from_bits(rng.random_range(1..8)),
        Label::Malignant => Cues::ALL,
    };
    let strength = cfg.cue_contrast * (1.0 - 0.5 * d);

    // low-frequency texture: a few random plane waves
    let waves: Vec<([f64; 3], f64)> = (0..3)
        .map(|_| {
            let k = [
                rng.random_range(-0.4..0.4),
                rng.random_range(-0.4..0.4),
                rng.random_range(-0.4..0.4),
            ];
            (k, rng.random_range(0.0..std::f64::consts::TAU))
        })
        .collect();
    let spike_phase = if d > 0.0 { rng.random_range(0.0..std::f64::consts::TAU) } else { 0.0 };
    let spike_count = 10;
    let tube_center = {
        let along = if d > 0.0 { rng.random_range(-TUBE_OFFSET..=TUBE_OFFSET) } else { 0.0 };
        let side = if d > 0.0 { rng.random_range(0..4) } else { 0 };
        let (ox, oy) = match side {
            0 => (TUBE_OFFSET, along),
            1 => (-TUBE_OFFSET, along),
            2 => (along, TUBE_OFFSET),
            _ => (along, -TUBE_OFFSET),
        };
        [center[0] + ox, center[1] + oy]
    };
    let noise = Normal::new(0.0, cfg.noise_hu.max(0.0))
        .map_err(|e| Error::Config(format!("noise level: {e}")))?;

    // sin(kx·x + B) = sin(kx·x)·cos B + cos(kx·x)·sin B, with B = ky·y + kz·z + φ
    let along_x: Vec<Vec<(f64, f64)>> = waves
        .iter()
        .map(|(k, _)| (0..nx).map(|x| (k[0] * x as f64).sin_cos()).collect())
        .collect();
    let mut voxels = Vec::with_capacity(nx * ny * nz);
    for z in 0..nz {
        for y in 0..ny {
            let rest: Vec<(f64, f64)> = waves
                .iter()
                .map(|(k, ph)| (k[1] * y as f64 + k[2] * z as f64 + ph).sin_cos())
                .collect();
            for x in 0..nx {
                let p = [x as f64, y as f64, z as f64];
                let texture: f64 = along_x
                    .iter()
                    .zip(&rest)
                    .map(|(ax, &(sb, cb))| {
                        let (sa, ca) = ax[x];
                        20.0 * (sa * cb + ca * sb)
                    })
                    .sum();
                let mut v = BACKGROUND_HU + texture;
                let (dx, dy, dz) = (p[0] - center[0], p[1] - center[1], p[2] - center[2]);
                let cheb = dx.abs().max(dy.abs());

                let q = ((dx / radii[0]).powi(2) + (dy / radii[1]).powi(2) + (dz / radii[2]).powi(2)).sqrt();
                let nodule = smooth_inside(q, 1.0, 0.25);
                v += nodule * (NODULE_HU - v);

                if cues.spiculation && dz.abs() <= radii[2] && cheb < 15.0 {
                    let r = (dx * dx + dy * dy).sqrt();
                    if r >= 0.8 * radii[0].min(radii[1]) && r <= SPIKE_REACH {
                        let ang = dy.atan2(dx) - spike_phase;
                        let sector = std::f64::consts::TAU / spike_count as f64;
                        let off = (ang / sector).round() * sector - ang;
                        // perpendicular distance from the nearest spike ray
                        if (r * off.sin()).abs() <= 0.6 {
                            v += strength * (NODULE_HU - BACKGROUND_HU) * 0.8;
                        }
                    }
                }
                if cues.vessel {
                    let t = ((p[0] - tube_center[0]).powi(2) + (p[1] - tube_center[1]).powi(2)).sqrt();
                    let w = smooth_inside(t, TUBE_RADIUS, 0.5);
                    v += w * strength * (NODULE_HU - BACKGROUND_HU);
                }
                if cues.ramp && cheb >= RAMP_START {
                    v += strength * RAMP_HU * ((cheb - RAMP_START) / RAMP_WIDTH).min(1.0);
                }
                v += cfg.hu_offset + noise.sample(&mut rng);
                voxels.push(v.round().clamp(-1024.0, 3071.0) as i16);
            }
        }
    }

    let scores = reader_scores(label, &mut rng);
    let volume = Volume::new(cfg.dims, cfg.spacing, centroid, voxels)?;
    Ok(SynthSample {
        volume,
        truth: NoduleTruth {
            source_id,
            label,
            center,
            radii,
            cues,
        },
        scores,
    })
}

/// 1 well inside radius `r`, 0 beyond `r + soft`, linear in between.
fn smooth_inside(dist: f64, r: f64, soft: f64) -> f64 {
    if dist <= r {
        1.0
    } else if dist >= r + soft {
        0.0
    } else {
        1.0 - (dist - r) / soft
    }
}

/// One to four reader scores whose mean agrees with `label`.
fn reader_scores(label: Label, rng: &mut impl Rng) -> Vec<u8> {
    let readers = rng.random_range(1..=4);
    loop {
        let scores: Vec<u8> = (0..readers)
            .map(|_| match label {
                Label::Benign => rng.random_range(1..=3),
                Label::Malignant => rng.random_range(3..=5),
            })
            .collect();
        let sum: u32 = scores.iter().map(|&s| u32::from(s)).sum();
        let malignant = sum > 3 * readers as u32;
        if malignant == (label == Label::Malignant) {
            return scores;
        }
    }
}
