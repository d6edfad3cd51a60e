use std::path::PathBuf;

use clap::Args;
use serde::Serialize;
use srcverify::corpus::{Split, UtterancePool};
use srcverify::evaluation::{
    calibrate_threshold, detection_matrix, roc_curve, sample_index_pairs, score_index_pairs, write_json,
    write_matrix_csv, write_trials_csv, BaselineKind, BaselineScorer, ConstantScorer, PairScorer, SiameseScorer,
    VerificationMetrics,
};
use srcverify::training::load_train_val_pools;

use super::{load_manifest, load_model};
use crate::error::{CliError, CliResult};
use crate::plot;
use crate::run::RunContext;

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,

    /// Default `<out>/extractor_phase2.ckpt`.
    #[arg(long)]
    extractor: Option<PathBuf>,

    /// Default `<out>/head.ckpt`.
    #[arg(long)]
    head: Option<PathBuf>,

    /// Replace the model by a scorer that outputs this value for every pair.
    #[arg(long)]
    constant_score: Option<f64>,
}

#[derive(Debug, Serialize)]
struct Baseline {
    kind: BaselineKind,
    eer: f64,
    auc: f64,
}

#[derive(Debug, Serialize)]
struct MatrixSummary {
    generators: Vec<usize>,
    pairs_per_cell: usize,
    mean_diagonal: f64,
    mean_off_diagonal: f64,
}

#[derive(Debug, Serialize)]
struct Metrics {
    scorer: String,
    segment_len: usize,
    test_pairs: usize,
    test_generators: Vec<usize>,
    eer: f64,
    auc: f64,
    eer_threshold: f64,
    /// Operating threshold, calibrated at the EER point of validation pairs.
    tau: f64,
    baselines: Vec<Baseline>,
    matrix: MatrixSummary,
    roc: Vec<(f64, f64)>,
}

pub fn run(ctx: &RunContext, args: EvaluateArgs) -> CliResult<()> {
    let ev = &ctx.cfg.evaluate;
    let model = match args.constant_score {
        Some(_) => None,
        None => Some(load_model(ctx, args.extractor, args.head)?),
    };
    let (manifest, base) = load_manifest(ctx, args.manifest)?;
    if manifest.in_split(Split::Test).next().is_none() {
        return Err(CliError::Missing("the manifest has no test records".into()));
    }
    let (train, val) = load_train_val_pools(&manifest, &base, ctx.cfg.phase1.train_fraction, &mut ctx.rng(0))?;
    let test = UtterancePool::load(&manifest, Split::Test, &base)?;

    let segment_len = model.as_ref().map_or(ctx.cfg.phase2.segment_len(), |m| m.meta.segment_len);
    let (scorer, name): (Box<dyn PairScorer + '_>, String) = match (&model, args.constant_score) {
        (Some(m), _) => (
            Box::new(SiameseScorer {
                backbone: &m.extractor,
                head: &m.head,
                segment_len,
            }),
            "siamese".into(),
        ),
        (None, Some(value)) => (Box::new(ConstantScorer { value, segment_len }), format!("constant({value})")),
        (None, None) => unreachable!(),
    };

    let test_pairs = sample_index_pairs(&test, ev.test_pairs, &mut ctx.rng(1))?;
    let trials = score_index_pairs(scorer.as_ref(), &test, &test_pairs)?;
    let m = VerificationMetrics::of(&trials)?;
    log::info!("{name}: EER {:.4} AUC {:.4} on {} open-set pairs", m.eer, m.auc, trials.len());

    let mut baselines = Vec::new();
    if let Some(model) = &model {
        for kind in [BaselineKind::Cosine, BaselineKind::Euclidean] {
            let b = BaselineScorer {
                backbone: &model.extractor,
                kind,
                segment_len,
            };
            let bm = VerificationMetrics::of(&score_index_pairs(&b, &test, &test_pairs)?)?;
            log::info!("{kind:?} baseline: EER {:.4} AUC {:.4}", bm.eer, bm.auc);
            baselines.push(Baseline {
                kind,
                eer: bm.eer,
                auc: bm.auc,
            });
        }
    }

    let val_pairs = sample_index_pairs(&val, ev.calibration_pairs, &mut ctx.rng(3))?;
    let tau = calibrate_threshold(&score_index_pairs(scorer.as_ref(), &val, &val_pairs)?)?;
    let matrix = detection_matrix(scorer.as_ref(), &train, tau, ev.matrix_pairs, &mut ctx.rng(4))?;
    log::info!(
        "detection matrix at tau {tau:.4}: diagonal {:.3}, off-diagonal {:.3}",
        matrix.mean_diagonal(),
        matrix.mean_off_diagonal()
    );

    write_trials_csv(ctx.path("trials.csv"), &trials)?;
    matrix.write_csv(ctx.path("matrix.csv"))?;
    write_matrix_csv(&ctx.path("matrix_symmetric.csv"), &matrix.generators, &matrix.symmetrized())?;
    plot::heatmap(&matrix.values).save(ctx.path("matrix.png"))?;

    let metrics = Metrics {
        scorer: name,
        segment_len,
        test_pairs: trials.len(),
        test_generators: test.generators(),
        eer: m.eer,
        auc: m.auc,
        eer_threshold: m.tau,
        tau,
        baselines,
        matrix: MatrixSummary {
            generators: matrix.generators.clone(),
            pairs_per_cell: ev.matrix_pairs,
            mean_diagonal: matrix.mean_diagonal(),
            mean_off_diagonal: matrix.mean_off_diagonal(),
        },
        roc: roc_curve(&trials)?,
    };
    write_json(ctx.path("metrics.json"), &metrics)?;
    println!(
        "EER {:.4} AUC {:.4} tau {:.4} matrix diagonal {:.3} off-diagonal {:.3}",
        metrics.eer, metrics.auc, tau, metrics.matrix.mean_diagonal, metrics.matrix.mean_off_diagonal
    );
    ctx.write_metadata()
}
