use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use srcverify::checkpoint::sha256_hex;
use srcverify::corpus::SplitRatios;
use srcverify::splicing::SpliceScanConfig;
use srcverify::training::{Phase1Config, Phase2Config};
use toml::{Table, Value};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Preset {
    /// Full-scale hyperparameters (batch 256, 200 + 100 epoch schedules).
    Full,
    /// Short schedules sized for the toy corpus on a single CPU core.
    Toy,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub manifest: Option<PathBuf>,
    pub generators: usize,
    pub utterances: usize,
    pub ratios: SplitRatios,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            generators: 8,
            utterances: 40,
            ratios: SplitRatios::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateConfig {
    pub test_pairs: usize,
    pub calibration_pairs: usize,
    pub matrix_pairs: usize,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        Self {
            test_pairs: 2000,
            calibration_pairs: 1000,
            matrix_pairs: 100,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub corpus: CorpusConfig,
    pub phase1: Phase1Config,
    pub phase2: Phase2Config,
    pub evaluate: EvaluateConfig,
    pub scan: SpliceScanConfig,
}

impl ExperimentConfig {
    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::Full => Self::default(),
            Preset::Toy => Self {
                phase1: Phase1Config::toy(),
                phase2: Phase2Config::toy(),
                ..Self::default()
            },
        }
    }

    /// Starts from `preset`, then applies the TOML file, then `key.path=value` overrides.
    pub fn resolve(preset: Preset, file: Option<&Path>, overrides: &[String]) -> CliResult<Self> {
        let mut tree = Value::try_from(Self::preset(preset))
            .map_err(|e| CliError::Config(e.to_string()))?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
            let table: Table = text
                .parse()
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            merge(&mut tree, Value::Table(table));
        }
        for item in overrides {
            apply_override(&mut tree, item)?;
        }
        let cfg: Self = tree.try_into().map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        cfg.phase1.validate()?;
        cfg.phase2.validate()?;
        cfg.scan.validate()?;
        cfg.corpus.ratios.validate()?;
        Ok(cfg)
    }

    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Table(b), Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn apply_override(tree: &mut Value, item: &str) -> CliResult<()> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override {item:?} is not key=value")))?;
    // Parse the value as TOML; anything that does not parse is taken as a bare string.
    let value = format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    let mut node = tree;
    let parts: Vec<&str> = key.trim().split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let table = node
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("{key}: {part} is not a section")))?;
        if i + 1 == parts.len() {
            table.insert(part.to_string(), value);
            return Ok(());
        }
        node = table
            .entry(part.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
    }
    Err(CliError::Config(format!("empty override key in {item:?}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_reach_nested_fields() {
        let cfg = ExperimentConfig::resolve(
            Preset::Toy,
            None,
            &["phase1.epochs=3".into(), "phase2.strategy=\"frozen\"".into(), "scan.min_depth=0.2".into()],
        )
        .unwrap();
        assert_eq!(cfg.phase1.epochs, 3);
        assert_eq!(cfg.phase2.strategy, srcverify::training::Strategy::Frozen);
        assert_eq!(cfg.scan.min_depth, 0.2);
        assert_eq!(cfg.phase1.batch_size, Phase1Config::toy().batch_size);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(ExperimentConfig::resolve(Preset::Full, None, &["phse1.epochs=3".into()]).is_err());
        assert!(ExperimentConfig::resolve(Preset::Full, None, &["phase1.lr=-1.0".into()]).is_err());
        assert!(ExperimentConfig::resolve(Preset::Full, None, &["seed".into()]).is_err());
    }

    #[test]
    fn file_values_sit_between_preset_and_flags() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "seed = 5\n[phase2]\nepochs = 9\nlr = 0.01\n").unwrap();
        let cfg = ExperimentConfig::resolve(Preset::Full, Some(&path), &["phase2.lr=0.02".into()]).unwrap();
        assert_eq!((cfg.seed, cfg.phase2.epochs, cfg.phase2.lr), (5, 9, 0.02));
        assert_eq!(cfg.phase2.batch_size, 256);
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }
}
