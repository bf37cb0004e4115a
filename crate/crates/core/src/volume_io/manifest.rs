use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::patches::{binarize_label, Label};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Manifest(format!("unknown split tag `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    /// Volume path, relative to the manifest's directory unless absolute.
    pub path: PathBuf,
    pub centroid: [usize; 3],
    pub scores: Vec<u8>,
    pub split: Option<Split>,
}

impl ManifestEntry {
    pub fn label(&self) -> Result<Label> {
        binarize_label(&self.scores)
    }

    /// Identity used for leakage checks: the volume file stem.
    pub fn source_id(&self) -> String {
        self.path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| self.path.display().to_string())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    /// Directory that relative entry paths resolve against.
    pub root: PathBuf,
}

#[derive(Serialize, Deserialize)]
struct Row {
    path: String,
    cx: usize,
    cy: usize,
    cz: usize,
    scores: String,
    split: String,
}

impl Manifest {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut reader = csv::Reader::from_path(path)?;
        let headers = reader.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["path", "cx", "cy", "cz", "scores", "split"] {
            return Err(Error::Manifest(format!(
                "header must be `path,cx,cy,cz,scores,split`, got `{}`",
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let mut entries = Vec::new();
        for (line, row) in reader.deserialize::<Row>().enumerate() {
            let row = row?;
            let scores = row
                .scores
                .split('|')
                .map(|s| {
                    s.trim()
                        .parse::<u8>()
                        .map_err(|_| Error::Manifest(format!("row {}: bad score `{s}`", line + 1)))
                })
                .collect::<Result<Vec<u8>>>()?;
            // validates range and non-emptiness
            binarize_label(&scores)?;
            let split = match row.split.trim() {
                "" => None,
                tag => Some(tag.parse()?),
            };
            entries.push(ManifestEntry {
                path: PathBuf::from(row.path),
                centroid: [row.cx, row.cy, row.cz],
                scores,
                split,
            });
        }
        Ok(Manifest {
            entries,
            root: path.parent().map(Path::to_path_buf).unwrap_or_default(),
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut writer = csv::Writer::from_path(path)?;
        for e in &self.entries {
            writer.serialize(Row {
                path: e.path.to_string_lossy().into_owned(),
                cx: e.centroid[0],
                cy: e.centroid[1],
                cz: e.centroid[2],
                scores: e.scores.iter().map(u8::to_string).collect::<Vec<_>>().join("|"),
                split: e.split.map(|s| s.to_string()).unwrap_or_default(),
            })?;
        }
        writer.flush()?;
        Ok(())
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        if entry.path.is_absolute() {
            entry.path.clone()
        } else {
            self.root.join(&entry.path)
        }
    }

    pub fn in_split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == Some(split))
    }

    pub fn count(&self, split: Split) -> usize {
        self.in_split(split).count()
    }
}

/// Validation and test fractions; training receives the remainder.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFractions {
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions { val: 0.1, test: 0.2 }
    }
}

/// Stratified random split.
///
/// The split totals are `val = ⌊f_val·n⌋` and `test = ⌊f_test·n⌋` over all `n`
/// entries, and training takes the remainder. Each total is shared out between
/// the labels in proportion to their counts (largest remainder, ties to the
/// lower label), so every class keeps its share in every split. Within a label
/// the entries are shuffled by `seed`.
pub fn split_dataset(m: &Manifest, fractions: SplitFractions, seed: u64) -> Result<Manifest> {
    let SplitFractions { val, test } = fractions;
    let ok = |f: f64| f.is_finite() && (0.0..1.0).contains(&f);
    if !ok(val) || !ok(test) || val + test >= 1.0 {
        return Err(Error::Config(format!("invalid split fractions val={val} test={test}")));
    }
    let n = m.entries.len();
    let mut by_label: Vec<Vec<usize>> = vec![Vec::new(); 2];
    for (i, e) in m.entries.iter().enumerate() {
        by_label[e.label()?.index()].push(i);
    }
    for (label, members) in by_label.iter().enumerate() {
        if (1..3).contains(&members.len()) {
            return Err(Error::TooFewToStratify {
                label: label as u8,
                count: members.len(),
            });
        }
    }
    let floor_eps = |x: f64| (x + 1e-9).floor() as usize;
    let counts: Vec<usize> = by_label.iter().map(Vec::len).collect();
    let val_by = apportion(floor_eps(val * n as f64), &counts, val);
    let test_by = apportion(floor_eps(test * n as f64), &counts, test);

    let mut out = m.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (label, members) in by_label.iter().enumerate() {
        let mut order = members.clone();
        order.shuffle(&mut rng);
        for (rank, &idx) in order.iter().enumerate() {
            let split = if rank < val_by[label] {
                Split::Val
            } else if rank < val_by[label] + test_by[label] {
                Split::Test
            } else {
                Split::Train
            };
            out.entries[idx].split = Some(split);
        }
    }
    Ok(out)
}

/// Share `total` between classes of the given sizes, proportional to
/// `fraction · count`, by the largest-remainder rule.
fn apportion(total: usize, counts: &[usize], fraction: f64) -> Vec<usize> {
    let ideal: Vec<f64> = counts.iter().map(|&c| fraction * c as f64).collect();
    let mut share: Vec<usize> = ideal
        .iter()
        .zip(counts)
        .map(|(&x, &c)| ((x + 1e-9).floor() as usize).min(c))
        .collect();
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = ideal[a] - share[a] as f64;
        let rb = ideal[b] - share[b] as f64;
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let mut left = total.saturating_sub(share.iter().sum());
    for &c in order.iter().cycle().take(order.len() * 4) {
        if left == 0 {
            break;
        }
        // keep at least one entry of each class for training
        if share[c] + 1 < counts[c] {
            share[c] += 1;
            left -= 1;
        }
    }
    share
}
