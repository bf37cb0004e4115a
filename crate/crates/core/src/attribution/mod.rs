//! Grad-CAM saliency over encoder stages, plus the `M3NSAL1` file format and
//! the peak-slice CSV dump.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tape, Tensor, Var};
use crate::training::M3Net;
use crate::volume_io::synth::NoduleTruth;
use crate::volume_io::NestedPatchSet;

pub const SALIENCY_MAGIC: &[u8; 8] = b"M3NSAL1\0";
const HEADER_LEN: usize = 8 + 3 * 4 + 3 * 4;

/// Default encoder scale for attribution.
pub const DEFAULT_SCALE: usize = 64;

/// Which logit the saliency explains.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Readout {
    /// The per-scale head on top of the chosen encoder.
    #[default]
    Head,
    /// The fused classifier, with every encoder run on the sample.
    Fused,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradCamConfig {
    pub scale: usize,
    /// Encoder stage index; `None` picks the last stage.
    pub stage: Option<usize>,
    /// Class index; `None` explains the predicted class.
    pub target: Option<usize>,
    pub readout: Readout,
}

impl Default for GradCamConfig {
    fn default() -> Self {
        GradCamConfig {
            scale: DEFAULT_SCALE,
            stage: None,
            target: None,
            readout: Readout::Head,
        }
    }
}

/// Non-negative saliency on a crop grid `[s, s, depth]`, z fastest like the
/// crops themselves. The maximum is 1 unless the map is identically zero.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyVolume {
    pub dims: [usize; 3],
    pub spacing: [f32; 3],
    pub values: Vec<f32>,
    pub scale: usize,
    pub stage: usize,
    pub target: usize,
    /// Probability the explained readout assigns to `target`.
    pub probability: f64,
}

impl SaliencyVolume {
    fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (x * self.dims[1] + y) * self.dims[2] + z
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.values[self.index(x, y, z)]
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }

    /// The z-slice with the largest saliency sum (lowest index on ties).
    pub fn peak_slice(&self) -> usize {
        let [nx, ny, nz] = self.dims;
        let mut sums = vec![0.0f64; nz];
        for x in 0..nx {
            for y in 0..ny {
                for (z, s) in sums.iter_mut().enumerate() {
                    *s += f64::from(self.get(x, y, z));
                }
            }
        }
        let mut best = 0;
        for (z, &s) in sums.iter().enumerate() {
            if s > sums[best] {
                best = z;
            }
        }
        best
    }

    /// `M3NSAL1`: the volume header without a centroid, then f32 voxels with x fastest.
    pub fn to_bytes(&self) -> Vec<u8> {
        let [nx, ny, nz] = self.dims;
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.values.len());
        out.extend_from_slice(SALIENCY_MAGIC);
        for d in self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for s in self.spacing {
            out.extend_from_slice(&s.to_le_bytes());
        }
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    out.extend_from_slice(&self.get(x, y, z).to_le_bytes());
                }
            }
        }
        out
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    /// Long-format CSV `x,y,z,value` of one z-slice.
    pub fn write_slice_csv(&self, z: usize, path: impl AsRef<Path>) -> Result<()> {
        if z >= self.dims[2] {
            return Err(Error::Attribution(format!("slice {z} outside depth {}", self.dims[2])));
        }
        let mut out = std::io::BufWriter::new(fs::File::create(path)?);
        writeln!(out, "x,y,z,value")?;
        for x in 0..self.dims[0] {
            for y in 0..self.dims[1] {
                writeln!(out, "{x},{y},{z},{}", self.get(x, y, z))?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

/// Header and voxels of an `M3NSAL1` file; voxels come back z fastest.
pub fn parse_saliency(bytes: &[u8]) -> Result<([usize; 3], [f32; 3], Vec<f32>)> {
    if bytes.len() < 8 || &bytes[..8] != SALIENCY_MAGIC {
        return Err(Error::BadMagic { expected: "M3NSAL1" });
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated {
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    let word = |i: usize| {
        let o = 8 + 4 * i;
        [bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]
    };
    let raw = [0, 1, 2].map(|i| u32::from_le_bytes(word(i)));
    let spacing = [3, 4, 5].map(|i| f32::from_le_bytes(word(i)));
    let dims = raw.map(|d| d as usize);
    let n: usize = dims.iter().product();
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != 4 * n {
        return Err(Error::CountMismatch {
            dims: raw,
            declared: n,
            actual: payload.len() / 4,
        });
    }
    let file_order: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let [nx, ny, nz] = dims;
    let mut values = vec![0.0; n];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                values[(x * ny + y) * nz + z] = file_order[(z * ny + y) * nx + x];
            }
        }
    }
    Ok((dims, spacing, values))
}

/// Grad-CAM for one sample: channel weights are the spatial means of the
/// target logit's gradient w.r.t. the stage activations; the map is the
/// rectified weighted channel sum, trilinearly upsampled to the crop grid and
/// scaled to a maximum of 1.
pub fn gradcam(net: &M3Net, store: &ParamStore<f32>, patch: &NestedPatchSet, cfg: &GradCamConfig) -> Result<SaliencyVolume> {
    let idx = net.index_of(cfg.scale)?;
    let encoder = &net.encoders[idx];
    let stage = cfg.stage.unwrap_or(encoder.num_stages() - 1);
    if stage >= encoder.num_stages() {
        return Err(Error::Attribution(format!(
            "encoder {} has {} stages, no stage {stage}",
            cfg.scale,
            encoder.num_stages()
        )));
    }
    let grid = encoder.config().stage_dims()[stage];
    if grid.iter().product::<usize>() < 2 {
        return Err(Error::Attribution(format!(
            "stage {stage} of encoder {} has no spatial extent ({grid:?})",
            cfg.scale
        )));
    }
    let crop = patch
        .crop(cfg.scale)
        .ok_or_else(|| Error::Attribution(format!("sample `{}` has no {}-crop", patch.source_id, cfg.scale)))?;

    let mut tape = Tape::<f32>::new();
    let p = store.bind(&mut tape);
    let x = tape.constant(encoder.batch(&[crop])?);
    let (emb, watched) = encoder.forward_watch(&mut tape, &p, x, stage)?;
    let logits = match cfg.readout {
        Readout::Head => net.heads[idx].forward(&mut tape, &p, emb.pooled)?,
        Readout::Fused => {
            let mut feats = Vec::with_capacity(net.scales().len());
            for (i, other) in net.encoders.iter().enumerate() {
                if i == idx {
                    feats.push(emb);
                    continue;
                }
                let c = patch.crop(other.scale()).ok_or_else(|| {
                    Error::Attribution(format!("sample `{}` has no {}-crop", patch.source_id, other.scale()))
                })?;
                let xi = tape.constant(other.batch(&[c])?);
                feats.push(other.forward(&mut tape, &p, xi)?);
            }
            net.forward_fused(&mut tape, &p, &feats)?.fusion.logits
        }
    };
    let lv = tape.value(logits).data().to_vec();
    let classes = lv.len();
    let target = match cfg.target {
        Some(t) if t < classes => t,
        Some(t) => return Err(Error::Attribution(format!("target class {t} of {classes}"))),
        None => argmax(&lv),
    };
    let probability = softmax_at(&lv, target);
    let readout = select(&mut tape, logits, target, classes)?;
    let grads = tape.backward(readout)?;
    let activ = tape.value(watched);
    let zeros;
    let g = match grads.wrt(watched) {
        Some(g) => g,
        None => {
            zeros = Tensor::zeros(activ.shape());
            &zeros
        }
    };
    let cam = weighted_map(activ, g)?;
    let dims = [crop.shape()[0], crop.shape()[1], crop.shape()[2]];
    let mut values = trilinear(&cam, grid, dims);
    normalize_max(&mut values);
    Ok(SaliencyVolume {
        dims,
        spacing: [1.0; 3],
        values,
        scale: cfg.scale,
        stage,
        target,
        probability,
    })
}

/// `logits[0, target]` as a scalar on the tape.
fn select(tape: &mut Tape<f32>, logits: Var, target: usize, classes: usize) -> Result<Var> {
    let mut mask = vec![0.0f32; classes];
    mask[target] = 1.0;
    let m = tape.constant(Tensor::new(tape.shape(logits).to_vec(), mask)?);
    let picked = tape.mul(logits, m)?;
    tape.sum(picked)
}

fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn softmax_at(v: &[f32], i: usize) -> f64 {
    let max = v.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let total: f64 = v.iter().map(|&x| f64::from(x - max).exp()).sum();
    f64::from(v[i] - max).exp() / total
}

/// `ReLU(Σ_c mean(∂y/∂A_c)·A_c)` for activations `[1, C, X, Y, Z]`, flattened.
pub fn weighted_map(activ: &Tensor<f32>, grad: &Tensor<f32>) -> Result<Vec<f32>> {
    let s = activ.shape();
    if s.len() != 5 || s[0] != 1 || grad.shape() != s {
        return Err(Error::shape(format!(
            "grad-cam expects one [1, C, X, Y, Z] activation, got {s:?} with gradient {:?}",
            grad.shape()
        )));
    }
    let n: usize = s[2..].iter().product();
    let mut cam = vec![0.0f64; n];
    for (a, g) in activ.data().chunks(n).zip(grad.data().chunks(n)) {
        let w = g.iter().map(|&v| f64::from(v)).sum::<f64>() / n as f64;
        for (c, &v) in cam.iter_mut().zip(a) {
            *c += w * f64::from(v);
        }
    }
    Ok(cam.into_iter().map(|v| v.max(0.0) as f32).collect())
}

/// Resample a `grid` map onto `out`, treating voxels as cell centres
/// (half-pixel alignment) and clamping at the borders.
pub fn trilinear(map: &[f32], grid: [usize; 3], out: [usize; 3]) -> Vec<f32> {
    let coords = |a: usize| -> Vec<(usize, usize, f32)> {
        let (n, m) = (grid[a], out[a]);
        (0..m)
            .map(|o| {
                let src = ((o as f64 + 0.5) * n as f64 / m as f64 - 0.5).clamp(0.0, (n - 1) as f64);
                let lo = src.floor() as usize;
                let hi = (lo + 1).min(n - 1);
                (lo, hi, (src - lo as f64) as f32)
            })
            .collect()
    };
    let (cx, cy, cz) = (coords(0), coords(1), coords(2));
    let at = |x: usize, y: usize, z: usize| map[(x * grid[1] + y) * grid[2] + z];
    let mut values = Vec::with_capacity(out.iter().product());
    for &(x0, x1, fx) in &cx {
        for &(y0, y1, fy) in &cy {
            for &(z0, z1, fz) in &cz {
                let lerp = |a: f32, b: f32, t: f32| a + (b - a) * t;
                let plane = |x| lerp(lerp(at(x, y0, z0), at(x, y0, z1), fz), lerp(at(x, y1, z0), at(x, y1, z1), fz), fy);
                values.push(lerp(plane(x0), plane(x1), fx));
            }
        }
    }
    values
}

fn normalize_max(values: &mut [f32]) {
    let max = values.iter().copied().fold(0.0f32, f32::max);
    if max > 0.0 {
        values.iter_mut().for_each(|v| *v /= max);
    }
}

/// Membership of every crop voxel in the nodule ellipsoid, for a crop centred
/// on `centroid` the way `extract_crop` centres it.
pub fn nodule_mask(truth: &NoduleTruth, centroid: [usize; 3], dims: [usize; 3]) -> Vec<bool> {
    let origin: [f64; 3] = [0, 1, 2].map(|a| centroid[a] as f64 - (dims[a] / 2) as f64);
    let mut mask = Vec::with_capacity(dims.iter().product());
    for x in 0..dims[0] {
        for y in 0..dims[1] {
            for z in 0..dims[2] {
                mask.push(truth.contains([origin[0] + x as f64, origin[1] + y as f64, origin[2] + z as f64]));
            }
        }
    }
    mask
}

/// Saliency mass share and volume share of the masked region.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MassInside {
    pub mass_fraction: f64,
    pub volume_fraction: f64,
}

impl MassInside {
    /// Whether the map concentrates on the region more than uniform saliency would.
    pub fn beats_baseline(&self) -> bool {
        self.mass_fraction > self.volume_fraction
    }
}

pub fn mass_inside(sal: &SaliencyVolume, mask: &[bool]) -> Result<MassInside> {
    if mask.len() != sal.values.len() {
        return Err(Error::shape(format!(
            "mask of {} voxels for a saliency grid of {}",
            mask.len(),
            sal.values.len()
        )));
    }
    let total: f64 = sal.values.iter().map(|&v| f64::from(v)).sum();
    let inside: f64 = sal.values.iter().zip(mask).filter(|(_, &m)| m).map(|(&v, _)| f64::from(v)).sum();
    let count = mask.iter().filter(|&&m| m).count();
    Ok(MassInside {
        mass_fraction: if total > 0.0 { inside / total } else { 0.0 },
        volume_fraction: count as f64 / mask.len().max(1) as f64,
    })
}
