pub mod evaluate;
pub mod scan;
pub mod synth;
pub mod train;

use std::path::{Path, PathBuf};

use srcverify::checkpoint::{load_extractor, load_head, HeadMeta};
use srcverify::corpus::Manifest;
use srcverify::features::Extractor;
use srcverify::similarity::SimilarityHead;

use crate::error::{CliError, CliResult};
use crate::run::{require_file, RunContext};

pub struct Model {
    pub extractor: Extractor,
    pub head: SimilarityHead,
    pub meta: HeadMeta,
}

/// Loads the extractor and a head that was trained on top of exactly that extractor.
pub fn load_model(ctx: &RunContext, extractor: Option<PathBuf>, head: Option<PathBuf>) -> CliResult<Model> {
    let ext_path = extractor.unwrap_or_else(|| ctx.path("extractor_phase2.ckpt"));
    let head_path = head.unwrap_or_else(|| ctx.path("head.ckpt"));
    require_file(&ext_path, "extractor checkpoint")?;
    require_file(&head_path, "head checkpoint")?;
    let (extractor, hash) = load_extractor(&ext_path)?;
    let (head, meta) = load_head(&head_path, Some(&hash))?;
    Ok(Model { extractor, head, meta })
}

/// The manifest and the directory its relative audio paths resolve against.
pub fn load_manifest(ctx: &RunContext, flag: Option<PathBuf>) -> CliResult<(Manifest, PathBuf)> {
    let path = flag
        .or_else(|| ctx.cfg.corpus.manifest.clone())
        .ok_or_else(|| CliError::Missing("no manifest given (--manifest or corpus.manifest)".into()))?;
    require_file(&path, "manifest")?;
    let manifest = Manifest::read_jsonl(&path)?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    log::info!(
        "manifest {} ({} records, hash {})",
        path.display(),
        manifest.records().len(),
        &manifest.content_hash()[..12]
    );
    Ok((manifest, base))
}
