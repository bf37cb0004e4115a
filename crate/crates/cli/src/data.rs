//! Labeled train/val/test patch sets, either rendered in memory or read from
//! a split manifest on disk. Both routes share the same split rule, so a run
//! from files and an in-memory run with the same seed see the same samples.

use std::collections::HashMap;
use std::path::Path;

use m3net_core::volume_io::synth::{read_truths, synth_samples, NoduleTruth, SynthConfig, NODULES_FILE};
use m3net_core::volume_io::{
    binarize_label, extract_patches, load_split, split_dataset, Manifest, ManifestEntry, NestedPatchSet, Split,
    SplitFractions, Volume,
};
use m3net_core::Result;

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub train: Vec<NestedPatchSet>,
    pub val: Vec<NestedPatchSet>,
    pub test: Vec<NestedPatchSet>,
    /// Ground-truth nodule geometry by source id, when known.
    pub truths: HashMap<String, NoduleTruth>,
    /// Crop centres in volume voxels, by source id.
    pub centroids: HashMap<String, [usize; 3]>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[NestedPatchSet] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn test_ids(&self) -> Vec<String> {
        self.test.iter().map(|p| p.source_id.clone()).collect()
    }
}

fn labeled(volume: &Volume, id: &str, scores: &[u8], sizes: &[usize]) -> Result<NestedPatchSet> {
    let mut p = extract_patches(volume, sizes, id);
    p.label = Some(binarize_label(scores)?);
    Ok(p)
}

/// Render `cfg` with `seed`, split it with the same seed and cut crops at `sizes`.
pub fn synth_dataset(cfg: &SynthConfig, fractions: SplitFractions, seed: u64, sizes: &[usize]) -> Result<Dataset> {
    let samples = synth_samples(cfg, seed)?;
    let manifest = Manifest {
        entries: samples
            .iter()
            .map(|s| ManifestEntry {
                path: format!("{}.m3nvol", s.truth.source_id).into(),
                centroid: s.volume.centroid(),
                scores: s.scores.clone(),
                split: None,
            })
            .collect(),
        root: Default::default(),
    };
    let split = split_dataset(&manifest, fractions, seed)?;
    let mut out = Dataset::default();
    for (entry, s) in split.entries.iter().zip(samples) {
        let id = s.truth.source_id.clone();
        let patch = labeled(&s.volume, &id, &s.scores, sizes)?;
        match entry.split.expect("split_dataset tags every entry") {
            Split::Train => out.train.push(patch),
            Split::Val => out.val.push(patch),
            Split::Test => out.test.push(patch),
        }
        out.centroids.insert(id.clone(), s.volume.centroid());
        out.truths.insert(id, s.truth);
    }
    Ok(out)
}

/// Samples of an unsplit set, in generation order.
pub fn synth_patches(cfg: &SynthConfig, seed: u64, sizes: &[usize]) -> Result<Vec<NestedPatchSet>> {
    synth_samples(cfg, seed)?
        .iter()
        .map(|s| labeled(&s.volume, &s.truth.source_id, &s.scores, sizes))
        .collect()
}

/// Read every split of a tagged manifest. Truths come from the
/// `nodules.json` sidecar next to the manifest when it exists.
pub fn load_dataset(manifest_path: &Path, sizes: &[usize]) -> Result<Dataset> {
    let manifest = Manifest::read(manifest_path)?;
    let sidecar = manifest.root.join(NODULES_FILE);
    let truths = if sidecar.exists() {
        read_truths(&sidecar)?
            .into_iter()
            .map(|t| (t.source_id.clone(), t))
            .collect()
    } else {
        HashMap::new()
    };
    Ok(Dataset {
        train: load_split(&manifest, Split::Train, sizes)?,
        val: load_split(&manifest, Split::Val, sizes)?,
        test: load_split(&manifest, Split::Test, sizes)?,
        truths,
        centroids: manifest.entries.iter().map(|e| (e.source_id(), e.centroid)).collect(),
    })
}
