use std::path::PathBuf;

use clap::{Args, ValueEnum};
use srcverify::checkpoint::{load_extractor, save_extractor, save_head};
use srcverify::evaluation::write_json;
use srcverify::training::{load_train_val_pools, train_extractor, train_similarity, Strategy, TrainReport};

use super::load_manifest;
use crate::error::{CliError, CliResult};
use crate::run::{require_file, RunContext};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Phase {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    Both,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum StrategyArg {
    Frozen,
    Unfrozen,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,

    #[arg(long, value_enum, default_value = "both")]
    phase: Phase,

    /// Phase 2 extractor strategy (overrides phase2.strategy).
    #[arg(long, value_enum)]
    strategy: Option<StrategyArg>,

    /// Phase 1 checkpoint to start Phase 2 from (default `<out>/extractor_phase1.ckpt`).
    #[arg(long)]
    extractor: Option<PathBuf>,

    /// Phase 2 segment length in seconds (overrides phase2.segment_s). Set it to the
    /// scan window to train a model for `scan`.
    #[arg(long)]
    segment_s: Option<f64>,
}

fn summarize(report: &TrainReport) {
    let best = &report.epochs[report.best_epoch];
    log::info!(
        "{:?}: {} epochs ({:?}), best epoch {} val loss {:.4} val acc {:.3}",
        report.phase,
        report.epochs.len(),
        report.stop_reason,
        report.best_epoch,
        best.val_loss,
        best.val_accuracy
    );
}

pub fn run(ctx: &RunContext, args: TrainArgs) -> CliResult<()> {
    let mut p2 = ctx.cfg.phase2.clone();
    if let Some(s) = args.strategy {
        p2.strategy = match s {
            StrategyArg::Frozen => Strategy::Frozen,
            StrategyArg::Unfrozen => Strategy::Unfrozen,
        };
    }
    if let Some(s) = args.segment_s {
        p2.segment_s = s;
    }
    p2.validate()?;

    // Fail on a missing Phase 1 checkpoint before spending time on audio.
    let phase1_ckpt = args.extractor.clone().unwrap_or_else(|| ctx.path("extractor_phase1.ckpt"));
    if args.phase == Phase::Two {
        require_file(&phase1_ckpt, "Phase 1 extractor checkpoint").map_err(|_| {
            CliError::Missing(format!(
                "Phase 2 needs a Phase 1 extractor; {} does not exist (run `train --phase 1` or pass --extractor)",
                phase1_ckpt.display()
            ))
        })?;
    }

    let (manifest, base) = load_manifest(ctx, args.manifest)?;
    let mut rng = ctx.rng(0);
    let (train, val) = load_train_val_pools(&manifest, &base, ctx.cfg.phase1.train_fraction, &mut rng)?;
    log::info!(
        "train pool {} utterances, val pool {} utterances, generators {:?}",
        train.len(),
        val.len(),
        train.generators()
    );

    let extractor = if args.phase == Phase::Two {
        let (ext, hash) = load_extractor(&phase1_ckpt)?;
        log::info!("loaded Phase 1 extractor {} ({})", phase1_ckpt.display(), &hash[..12]);
        ext
    } else {
        let (ext, mut report) = train_extractor(&train, &val, &ctx.cfg.phase1, &mut rng)?;
        let path = ctx.path("extractor_phase1.ckpt");
        let hash = save_extractor(&path, &ext)?;
        report.checkpoint_path = Some(path.display().to_string());
        write_json(ctx.path("report_phase1.json"), &report)?;
        summarize(&report);
        println!("phase 1 extractor {} sha256 {hash}", path.display());
        ext
    };

    if args.phase != Phase::One {
        let mut outcome = train_similarity(&extractor, &train, &val, &p2, &mut rng)?;
        let ext_path = ctx.path("extractor_phase2.ckpt");
        let ext_hash = save_extractor(&ext_path, &outcome.extractor)?;
        let head_path = ctx.path("head.ckpt");
        save_head(&head_path, &outcome.head, p2.segment_len(), &ext_hash)?;
        outcome.report.checkpoint_path = Some(head_path.display().to_string());
        write_json(ctx.path("report_phase2.json"), &outcome.report)?;
        summarize(&outcome.report);
        println!(
            "phase 2 ({:?}, {} s segments) head {} extractor sha256 {ext_hash}",
            p2.strategy,
            p2.segment_s,
            head_path.display()
        );
    }
    ctx.write_metadata()
}
