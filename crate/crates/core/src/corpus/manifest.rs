//! Line-delimited JSON manifests.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::audio::{load_waveform, Waveform};
use super::toy::{synth_toy_waveform, ToyGeneratorSpec};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid(format!("unknown split {other:?}"))),
        }
    }
}

/// One line of a manifest file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub audio_ref: String,
    pub generator_label: usize,
    pub split: Split,
    pub duration_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub toy_spec: Option<ToyGeneratorSpec>,
}

/// Parsed form of [`ManifestRecord::audio_ref`]: either a WAV path (relative paths
/// resolve against the manifest directory) or `seed:<u64>` for lazy toy synthesis.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AudioRef {
    Path(PathBuf),
    Seed(u64),
}

impl fmt::Display for AudioRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AudioRef::Path(p) => write!(f, "{}", p.display()),
            AudioRef::Seed(s) => write!(f, "seed:{s}"),
        }
    }
}

impl FromStr for AudioRef {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.strip_prefix("seed:") {
            Some(seed) => seed
                .parse()
                .map(AudioRef::Seed)
                .map_err(|_| Error::Manifest(format!("bad synthesis seed in {s:?}"))),
            None if s.is_empty() => Err(Error::Manifest("empty audio_ref".into())),
            None => Ok(AudioRef::Path(PathBuf::from(s))),
        }
    }
}

impl ManifestRecord {
    /// Loads (or synthesizes) the audio of this record.
    pub fn load(&self, base_dir: &Path) -> Result<Waveform> {
        match self.audio_ref.parse()? {
            AudioRef::Path(p) => {
                let path = if p.is_absolute() { p } else { base_dir.join(p) };
                load_waveform(path)
            }
            AudioRef::Seed(seed) => {
                let spec = self.toy_spec.as_ref().ok_or_else(|| {
                    Error::Manifest(format!("{} has a seed reference but no toy_spec", self.audio_ref))
                })?;
                synth_toy_waveform(spec, seed, self.duration_s)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    records: Vec<ManifestRecord>,
}

impl Manifest {
    /// Validates that no `audio_ref` appears in two splits.
    pub fn new(records: Vec<ManifestRecord>) -> Result<Self> {
        let mut seen: HashMap<&str, Split> = HashMap::new();
        for r in &records {
            if let Some(prev) = seen.insert(&r.audio_ref, r.split) {
                if prev != r.split {
                    return Err(Error::Manifest(format!(
                        "{} appears in both {prev} and {}",
                        r.audio_ref, r.split
                    )));
                }
            }
            if !(r.duration_s.is_finite() && r.duration_s >= 0.0) {
                return Err(Error::Manifest(format!("bad duration for {}", r.audio_ref)));
            }
        }
        Ok(Self { records })
    }

    pub fn records(&self) -> &[ManifestRecord] {
        &self.records
    }

    pub fn in_split(&self, split: Split) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn generators(&self, split: Split) -> BTreeSet<usize> {
        self.in_split(split).map(|r| r.generator_label).collect()
    }

    /// Number of classes implied by the labels (`max label + 1`).
    pub fn n_classes(&self) -> usize {
        self.records
            .iter()
            .map(|r| r.generator_label + 1)
            .max()
            .unwrap_or(0)
    }

    pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        for (lineno, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let record: ManifestRecord = serde_json::from_str(&line).map_err(|e| {
                Error::Manifest(format!("{}:{}: {e}", path.display(), lineno + 1))
            })?;
            records.push(record);
        }
        Self::new(records)
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// SHA-256 of the serialized manifest.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for r in &self.records {
            hasher.update(serde_json::to_vec(r).expect("manifest records serialize"));
            hasher.update(b"\n");
        }
        hex::encode(hasher.finalize())
    }

    /// Returns a copy whose records are restricted to `splits`.
    pub fn restricted_to(&self, splits: &[Split]) -> Manifest {
        Manifest {
            records: self
                .records
                .iter()
                .filter(|r| splits.contains(&r.split))
                .cloned()
                .collect(),
        }
    }
}

/// Splits records per generator label so that each label keeps
/// `round(train_fraction * n)` records (at least one on each side) in the first part.
pub fn stratified_split(
    records: Vec<ManifestRecord>,
    train_fraction: f64,
    rng: &mut impl Rng,
) -> Result<(Vec<ManifestRecord>, Vec<ManifestRecord>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::invalid(format!(
            "train fraction {train_fraction} must lie in (0, 1)"
        )));
    }
    let mut groups: BTreeMap<usize, Vec<ManifestRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(r.generator_label).or_default().push(r);
    }
    let mut first = Vec::new();
    let mut second = Vec::new();
    for (label, mut group) in groups {
        let n = group.len();
        if n < 2 {
            return Err(Error::SplitTooSmall(format!(
                "generator {label} has {n} utterance(s); a stratified split needs 2"
            )));
        }
        group.shuffle(rng);
        let n_first = ((n as f64 * train_fraction).round() as usize).clamp(1, n - 1);
        second.extend(group.split_off(n_first));
        first.extend(group);
    }
    Ok((first, second))
}
