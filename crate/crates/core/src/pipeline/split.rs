//! Seeded train/validation/test assignment and the sample manifest.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
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
            _ => Err(Error::invalid(format!("unknown split `{s}`"))),
        }
    }
}

/// Input files of one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleFiles {
    pub id: String,
    pub msi: PathBuf,
    pub histology: PathBuf,
    pub control_points: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub msi: PathBuf,
    pub histology: PathBuf,
    pub control_points: PathBuf,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

/// Sample counts per split by largest-remainder rounding of `n · fraction`;
/// equal remainders favour the earlier split.
pub fn split_sizes(n: usize, fractions: [f64; 3]) -> [usize; 3] {
    let quotas = fractions.map(|f| f * n as f64);
    // The epsilon keeps quotas such as 0.7 · 10 = 7.000000000000001 or
    // 6.999999999999999 from shifting a unit between floor and remainder.
    let mut sizes = quotas.map(|q| (q + 1e-9).floor().max(0.0) as usize);
    let assigned: usize = sizes.iter().sum();
    let mut order = [0usize, 1, 2];
    let rem = |i: usize| quotas[i] - sizes[i] as f64;
    order.sort_by(|&a, &b| rem(b).total_cmp(&rem(a)).then(a.cmp(&b)));
    for &i in order.iter().cycle().take(n.saturating_sub(assigned)) {
        sizes[i] += 1;
    }
    sizes
}

/// Shuffles the ids with a seeded generator and assigns contiguous runs to
/// train, validation and test.
pub fn split_ids(ids: &[String], fractions: [f64; 3], seed: u64) -> Result<Vec<(String, Split)>> {
    if ids.is_empty() {
        return Err(Error::invalid("cannot split an empty id list"));
    }
    let total: f64 = fractions.iter().sum();
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::config("split", format!("fractions {fractions:?} must lie in [0, 1] and sum to 1")));
    }
    let mut seen = HashSet::new();
    if let Some(dup) = ids.iter().find(|id| !seen.insert(id.as_str())) {
        return Err(Error::invalid(format!("duplicate sample id `{dup}`")));
    }
    if ids.len() < 10 {
        log::warn!("splitting only {} samples; split sizes will be coarse", ids.len());
    }
    let mut shuffled = ids.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let sizes = split_sizes(ids.len(), fractions);
    let labels = Split::ALL
        .iter()
        .zip(sizes)
        .flat_map(|(&s, n)| std::iter::repeat_n(s, n));
    Ok(shuffled.into_iter().zip(labels).collect())
}

pub fn split_dataset(samples: &[SampleFiles], fractions: [f64; 3], seed: u64) -> Result<DatasetManifest> {
    let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
    let assigned = split_ids(&ids, fractions, seed)?;
    let mut entries: Vec<ManifestEntry> = samples
        .iter()
        .map(|s| {
            let split = assigned.iter().find(|(id, _)| *id == s.id).map(|(_, sp)| *sp).expect("every id is assigned");
            ManifestEntry {
                id: s.id.clone(),
                msi: s.msi.clone(),
                histology: s.histology.clone(),
                control_points: s.control_points.clone(),
                split,
            }
        })
        .collect();
    entries.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(DatasetManifest { entries })
}

/// Reads `id,msi,histology,control_points`; relative paths are resolved
/// against the file's directory.
pub fn load_samples(path: &Path) -> Result<Vec<SampleFiles>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut out = Vec::new();
    for row in reader.deserialize() {
        let s: SampleFiles = row.map_err(|e| Error::csv(path, e))?;
        out.push(SampleFiles {
            msi: base.join(&s.msi),
            histology: base.join(&s.histology),
            control_points: base.join(&s.control_points),
            id: s.id,
        });
    }
    if out.is_empty() {
        return Err(Error::invalid(format!("{} lists no samples", path.display())));
    }
    Ok(out)
}

pub fn save_samples(samples: &[SampleFiles], path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    for s in samples {
        writer.serialize(s).map_err(|e| Error::csv(path, e))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

impl DatasetManifest {
    pub fn ids(&self, split: Split) -> impl Iterator<Item = &str> {
        self.entries.iter().filter(move |e| e.split == split).map(|e| e.id.as_str())
    }

    pub fn count(&self, split: Split) -> usize {
        self.ids(split).count()
    }

    pub fn split_of(&self, id: &str) -> Option<Split> {
        self.entries.iter().find(|e| e.id == id).map(|e| e.split)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut writer = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
        for e in &self.entries {
            writer.serialize(e).map_err(|e| Error::csv(path, e))?;
        }
        writer.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
        let entries = reader
            .deserialize()
            .collect::<std::result::Result<Vec<ManifestEntry>, _>>()
            .map_err(|e| Error::csv(path, e))?;
        let mut seen = HashSet::new();
        if let Some(dup) = entries.iter().find(|e| !seen.insert(e.id.clone())) {
            return Err(Error::invalid(format!("duplicate sample id `{}` in manifest", dup.id)));
        }
        Ok(Self { entries })
    }
}
