use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const VOLUME_MAGIC: &[u8; 8] = b"M3NVOL1\0";
const HEADER_LEN: usize = 8 + 3 * 4 + 3 * 4 + 3 * 4;

/// A CT-like scalar field with an annotated nodule centroid.
///
/// Voxels are stored with x fastest and z slowest.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    spacing: [f32; 3],
    centroid: [usize; 3],
    voxels: Vec<i16>,
}

impl Volume {
    pub fn new(dims: [usize; 3], spacing: [f32; 3], centroid: [usize; 3], voxels: Vec<i16>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0 || d > u32::MAX as usize) {
            return Err(Error::InvalidVolume(format!("dimensions {dims:?} must be positive")));
        }
        if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::InvalidVolume(format!("spacing {spacing:?} must be positive")));
        }
        if centroid.iter().zip(&dims).any(|(c, d)| c >= d) {
            return Err(Error::InvalidVolume(format!(
                "centroid {centroid:?} outside dimensions {dims:?}"
            )));
        }
        let declared = dims.iter().product::<usize>();
        if voxels.len() != declared {
            return Err(Error::CountMismatch {
                dims: dims.map(|d| d as u32),
                declared,
                actual: voxels.len(),
            });
        }
        Ok(Self {
            dims,
            spacing,
            centroid,
            voxels,
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn centroid(&self) -> [usize; 3] {
        self.centroid
    }

    pub fn voxels(&self) -> &[i16] {
        &self.voxels
    }

    pub fn with_centroid(mut self, centroid: [usize; 3]) -> Result<Self> {
        if centroid.iter().zip(&self.dims).any(|(c, d)| c >= d) {
            return Err(Error::InvalidVolume(format!(
                "centroid {centroid:?} outside dimensions {:?}",
                self.dims
            )));
        }
        self.centroid = centroid;
        Ok(self)
    }

    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[0] + x
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> i16 {
        self.voxels[self.index(x, y, z)]
    }

    /// Value at signed coordinates, `None` outside the grid.
    pub fn get_signed(&self, x: isize, y: isize, z: isize) -> Option<i16> {
        let [nx, ny, nz] = self.dims.map(|d| d as isize);
        if x < 0 || y < 0 || z < 0 || x >= nx || y >= ny || z >= nz {
            return None;
        }
        Some(self.get(x as usize, y as usize, z as usize))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 2 * self.voxels.len());
        out.extend_from_slice(VOLUME_MAGIC);
        for d in self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for s in self.spacing {
            out.extend_from_slice(&s.to_le_bytes());
        }
        for c in self.centroid {
            out.extend_from_slice(&(c as u32).to_le_bytes());
        }
        for v in &self.voxels {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            if bytes.len() >= 8 && &bytes[..8] != VOLUME_MAGIC {
                return Err(Error::BadMagic { expected: "M3NVOL1" });
            }
            return Err(Error::Truncated {
                expected: HEADER_LEN,
                found: bytes.len(),
            });
        }
        if &bytes[..8] != VOLUME_MAGIC {
            return Err(Error::BadMagic { expected: "M3NVOL1" });
        }
        let word = |i: usize| {
            let o = 8 + 4 * i;
            [bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]
        };
        let raw_dims = [0, 1, 2].map(|i| u32::from_le_bytes(word(i)));
        let spacing = [3, 4, 5].map(|i| f32::from_le_bytes(word(i)));
        let centroid = [6, 7, 8].map(|i| u32::from_le_bytes(word(i)) as usize);
        let declared = raw_dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
            .ok_or_else(|| Error::InvalidVolume(format!("dimensions {raw_dims:?} overflow")))?;
        let payload = &bytes[HEADER_LEN..];
        let expected = declared
            .checked_mul(2)
            .and_then(|p| p.checked_add(HEADER_LEN))
            .ok_or_else(|| Error::InvalidVolume(format!("dimensions {raw_dims:?} overflow")))?;
        if bytes.len() < expected {
            return Err(Error::Truncated {
                expected,
                found: bytes.len(),
            });
        }
        if bytes.len() > expected {
            return Err(Error::CountMismatch {
                dims: raw_dims,
                declared,
                actual: payload.len() / 2,
            });
        }
        let voxels = payload
            .chunks_exact(2)
            .map(|c| i16::from_le_bytes([c[0], c[1]]))
            .collect();
        Volume::new(raw_dims.map(|d| d as usize), spacing, centroid, voxels)
    }
}

pub fn write_volume(volume: &Volume, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, volume.to_bytes())?;
    Ok(())
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    Volume::from_bytes(&fs::read(path)?)
}
