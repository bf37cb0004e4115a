//! Volume files, nested crops, labels, augmentation, manifests and the
//! synthetic nodule generator.

mod augment;
mod format;
mod manifest;
mod patches;
pub mod synth;

pub use augment::{augment, Transform};
pub use format::{read_volume, write_volume, Volume, VOLUME_MAGIC};
pub use manifest::{split_dataset, Manifest, ManifestEntry, Split, SplitFractions};
pub use patches::{
    binarize_label, central_window, extract_crop, extract_nested, extract_patches, Label, NestedPatchSet,
    CROP_DEPTH, FILL_HU, NESTED_SIZES,
};

use crate::error::Result;

/// Read every entry of `split` and cut labeled crops at `sizes`.
pub fn load_split(manifest: &Manifest, split: Split, sizes: &[usize]) -> Result<Vec<NestedPatchSet>> {
    manifest.in_split(split).map(|e| load_entry(manifest, e, sizes)).collect()
}

pub fn load_entry(manifest: &Manifest, entry: &ManifestEntry, sizes: &[usize]) -> Result<NestedPatchSet> {
    let volume = read_volume(manifest.resolve(entry))?.with_centroid(entry.centroid)?;
    let mut patch = extract_patches(&volume, sizes, &entry.source_id());
    patch.label = Some(entry.label()?);
    Ok(patch)
}
