use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use srcverify::evaluation::write_json;

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};

/// Written next to every command's outputs. Holds no clock or host data, so two runs
/// with the same arguments produce the same file.
#[derive(Debug, Serialize)]
struct RunMetadata<'a> {
    command: &'a str,
    tool_version: &'static str,
    seed: u64,
    config_hash: String,
    args: Vec<String>,
    config: &'a ExperimentConfig,
}

pub struct RunContext {
    pub command: &'static str,
    pub cfg: ExperimentConfig,
    pub out: PathBuf,
}

impl RunContext {
    pub fn start(command: &'static str, cfg: ExperimentConfig) -> CliResult<Self> {
        let out = cfg.out.clone().expect("resolved before start");
        std::fs::create_dir_all(&out).map_err(|e| CliError::io(&out, e))?;
        Ok(Self { command, cfg, out })
    }

    /// Independent stream per purpose, so adding a draw in one place does not shift another.
    pub fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        r.set_stream(stream);
        r
    }

    pub fn path(&self, name: impl AsRef<Path>) -> PathBuf {
        self.out.join(name)
    }

    pub fn subdir(&self, name: &str) -> CliResult<PathBuf> {
        let dir = self.out.join(name);
        std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        Ok(dir)
    }

    pub fn write_metadata(&self) -> CliResult<()> {
        let meta = RunMetadata {
            command: self.command,
            tool_version: env!("CARGO_PKG_VERSION"),
            seed: self.cfg.seed,
            config_hash: self.cfg.hash(),
            args: std::env::args().skip(1).collect(),
            config: &self.cfg,
        };
        write_json(self.path(format!("run_{}.json", self.command.replace('-', "_"))), &meta)?;
        Ok(())
    }
}

pub fn require_file(path: &Path, what: &str) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Missing(format!("{what} {} does not exist", path.display())))
    }
}
