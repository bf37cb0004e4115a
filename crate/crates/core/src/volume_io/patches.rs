use serde::{Deserialize, Serialize};

use super::format::Volume;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// In-plane sizes of the macro, meso and micro crops.
pub const NESTED_SIZES: [usize; 3] = [96, 64, 32];
/// Depth of every crop.
pub const CROP_DEPTH: usize = 56;
/// Value written where a crop leaves the volume (air).
pub const FILL_HU: f32 = -1000.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    Benign = 0,
    Malignant = 1,
}

impl Label {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        match i {
            0 => Some(Label::Benign),
            1 => Some(Label::Malignant),
            _ => None,
        }
    }
}

/// Malignant iff the mean reader score is strictly above 3.
pub fn binarize_label(scores: &[u8]) -> Result<Label> {
    if scores.is_empty() {
        return Err(Error::EmptyScores);
    }
    if let Some(&bad) = scores.iter().find(|&&s| !(1..=5).contains(&s)) {
        return Err(Error::ScoreOutOfRange(bad));
    }
    // mean > 3  <=>  sum > 3n, exact in integers
    let sum: u32 = scores.iter().map(|&s| u32::from(s)).sum();
    Ok(if sum > 3 * scores.len() as u32 {
        Label::Malignant
    } else {
        Label::Benign
    })
}

/// Concentric crops of one nodule, largest first, each `[s, s, 56]` in HU with
/// axes (x, y, z) and z fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct NestedPatchSet {
    pub crops: Vec<(usize, Tensor<f32>)>,
    pub label: Option<Label>,
    pub source_id: String,
}

impl NestedPatchSet {
    pub fn crop(&self, size: usize) -> Option<&Tensor<f32>> {
        self.crops.iter().find(|(s, _)| *s == size).map(|(_, t)| t)
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.crops.iter().map(|(s, _)| *s).collect()
    }

    pub fn x96(&self) -> Option<&Tensor<f32>> {
        self.crop(96)
    }

    pub fn x64(&self) -> Option<&Tensor<f32>> {
        self.crop(64)
    }

    pub fn x32(&self) -> Option<&Tensor<f32>> {
        self.crop(32)
    }
}

/// One `size × size × depth` crop whose voxel `(⌊size/2⌋, ⌊size/2⌋, ⌊depth/2⌋)`
/// sits on the volume centroid.
pub fn extract_crop(v: &Volume, size: usize, depth: usize) -> Tensor<f32> {
    let [cx, cy, cz] = v.centroid().map(|c| c as isize);
    let (hx, hz) = ((size / 2) as isize, (depth / 2) as isize);
    let mut data = Vec::with_capacity(size * size * depth);
    for i in 0..size as isize {
        for j in 0..size as isize {
            for k in 0..depth as isize {
                let value = v
                    .get_signed(cx - hx + i, cy - hx + j, cz - hz + k)
                    .map_or(FILL_HU, f32::from);
                data.push(value);
            }
        }
    }
    Tensor::new([size, size, depth], data).expect("crop buffer matches its shape")
}

/// Crops at the given in-plane sizes (sorted largest first), unlabeled.
pub fn extract_patches(v: &Volume, sizes: &[usize], source_id: &str) -> NestedPatchSet {
    let mut sizes = sizes.to_vec();
    sizes.sort_unstable_by(|a, b| b.cmp(a));
    sizes.dedup();
    NestedPatchSet {
        crops: sizes
            .into_iter()
            .map(|s| (s, extract_crop(v, s, CROP_DEPTH)))
            .collect(),
        label: None,
        source_id: source_id.to_string(),
    }
}

/// The 96/64/32 nested crops around the centroid.
pub fn extract_nested(v: &Volume, source_id: &str) -> NestedPatchSet {
    extract_patches(v, &NESTED_SIZES, source_id)
}

/// Central `inner × inner` in-plane window of a `[s, s, d]` crop.
pub fn central_window(crop: &Tensor<f32>, inner: usize) -> Result<Tensor<f32>> {
    let &[s, s2, d] = crop.shape() else {
        return Err(Error::shape(format!("expected a crop [s, s, d], got {:?}", crop.shape())));
    };
    if s != s2 || inner > s {
        return Err(Error::shape(format!("window {inner} of crop {:?}", crop.shape())));
    }
    let off = s / 2 - inner / 2;
    Ok(Tensor::from_fn([inner, inner, d], |idx| {
        let k = idx % d;
        let j = (idx / d) % inner;
        let i = idx / (d * inner);
        crop.data()[((i + off) * s + j + off) * d + k]
    }))
}
