use rand::Rng;

use super::patches::{NestedPatchSet, FILL_HU};
use crate::numerics::Tensor;

/// One sampled augmentation, shared by every crop of a patch set.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transform {
    /// Mirror the y axis.
    pub flip: bool,
    /// In-plane rotation about the crop centre, degrees.
    pub rotation_deg: Option<f64>,
}

impl Transform {
    pub const IDENTITY: Transform = Transform {
        flip: false,
        rotation_deg: None,
    };

    /// Flip with probability 0.5, rotate by U[0°, 180°] with probability 0.5.
    ///
    /// Always consumes the same number of draws so later samples in a stream
    /// do not depend on which branches fired.
    pub fn sample(rng: &mut impl Rng) -> Self {
        let flip = rng.random_bool(0.5);
        let rotate = rng.random_bool(0.5);
        let angle = rng.random_range(0.0..=180.0);
        Transform {
            flip,
            rotation_deg: rotate.then_some(angle),
        }
    }

    pub fn is_identity(&self) -> bool {
        !self.flip && self.rotation_deg.is_none()
    }

    pub fn apply(&self, patch: &NestedPatchSet) -> NestedPatchSet {
        let crops = patch
            .crops
            .iter()
            .map(|(s, t)| (*s, self.apply_crop(t)))
            .collect();
        NestedPatchSet {
            crops,
            label: patch.label,
            source_id: patch.source_id.clone(),
        }
    }

    /// Transform one `[s, s, d]` crop. The rotation is resampled trilinearly
    /// (the depth coordinate stays on the grid), with air outside the crop.
    pub fn apply_crop(&self, crop: &Tensor<f32>) -> Tensor<f32> {
        let mut out = crop.clone();
        if self.flip {
            out = flip_y(&out);
        }
        if let Some(deg) = self.rotation_deg {
            out = rotate(&out, deg);
        }
        out
    }
}

pub fn augment(patch: &NestedPatchSet, rng: &mut impl Rng) -> NestedPatchSet {
    Transform::sample(rng).apply(patch)
}

fn dims(t: &Tensor<f32>) -> (usize, usize, usize) {
    let s = t.shape();
    (s[0], s[1], s[2])
}

fn flip_y(t: &Tensor<f32>) -> Tensor<f32> {
    let (sx, sy, d) = dims(t);
    Tensor::from_fn([sx, sy, d], |idx| {
        let k = idx % d;
        let j = (idx / d) % sy;
        let i = idx / (d * sy);
        t.data()[(i * sy + (sy - 1 - j)) * d + k]
    })
}

fn rotate(t: &Tensor<f32>, deg: f64) -> Tensor<f32> {
    let (sx, sy, d) = dims(t);
    let (sin, cos) = deg.to_radians().sin_cos();
    let (cx, cy) = ((sx / 2) as f64, (sy / 2) as f64);
    let src = t.data();
    let sample = |i: isize, j: isize, k: usize| -> f64 {
        if i < 0 || j < 0 || i >= sx as isize || j >= sy as isize {
            f64::from(FILL_HU)
        } else {
            f64::from(src[(i as usize * sy + j as usize) * d + k])
        }
    };
    let mut out = vec![0.0f32; src.len()];
    for i in 0..sx {
        for j in 0..sy {
            // inverse map: output position rotated back into the source
            let (px, py) = (i as f64 - cx, j as f64 - cy);
            let x = cos * px + sin * py + cx;
            let y = -sin * px + cos * py + cy;
            let (x0, y0) = (x.floor(), y.floor());
            let (fx, fy) = (x - x0, y - y0);
            let (x0, y0) = (x0 as isize, y0 as isize);
            for k in 0..d {
                let v = (1.0 - fx) * (1.0 - fy) * sample(x0, y0, k)
                    + fx * (1.0 - fy) * sample(x0 + 1, y0, k)
                    + (1.0 - fx) * fy * sample(x0, y0 + 1, k)
                    + fx * fy * sample(x0 + 1, y0 + 1, k);
                out[(i * sy + j) * d + k] = v as f32;
            }
        }
    }
    Tensor::new([sx, sy, d], out).expect("same shape as the input")
}
