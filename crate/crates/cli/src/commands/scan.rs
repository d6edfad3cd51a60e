use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};
use srcverify::corpus::load_waveform;
use srcverify::evaluation::{auc, roc_curve, write_json, ScoredTrial, SiameseScorer};
use srcverify::splicing::{score_track, splice_report, Decision};

use super::load_model;
use crate::error::{CliError, CliResult};
use crate::plot;
use crate::run::RunContext;

#[derive(Debug, Args)]
pub struct ScanArgs {
    /// A WAV file or a directory of WAV files.
    input: PathBuf,

    /// Ground truth with columns `name,spliced,switch_s` (extra columns are ignored).
    #[arg(long)]
    labels: Option<PathBuf>,

    /// Global-score threshold for the spliced decision (overrides scan.operating_threshold).
    #[arg(long)]
    threshold: Option<f64>,

    /// Default `<out>/extractor_phase2.ckpt`.
    #[arg(long)]
    extractor: Option<PathBuf>,

    /// Default `<out>/head.ckpt`.
    #[arg(long)]
    head: Option<PathBuf>,
}

#[derive(Debug, Deserialize)]
struct Label {
    name: String,
    spliced: u8,
    switch_s: Option<f64>,
}

#[derive(Debug, Serialize)]
struct SummaryRow {
    name: String,
    global_score: f64,
    decision: Decision,
    splice_time_s: Option<f64>,
    minima: usize,
    label: Option<u8>,
    true_switch_s: Option<f64>,
    localization_error_s: Option<f64>,
}

#[derive(Debug, Serialize)]
struct Aggregate {
    tracks: usize,
    operating_threshold: f64,
    auc: f64,
    true_positives: usize,
    false_positives: usize,
    false_negatives: usize,
    true_negatives: usize,
    /// Over true positives only; `null` when there are none.
    median_localization_error_s: Option<f64>,
    roc: Vec<(f64, f64)>,
}

fn inputs(path: &Path) -> CliResult<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    if !path.is_dir() {
        return Err(CliError::Missing(format!("scan input {} does not exist", path.display())));
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(path)
        .map_err(|e| CliError::io(path, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::Missing(format!("no .wav files in {}", path.display())));
    }
    Ok(files)
}

fn read_labels(path: &Path) -> CliResult<BTreeMap<String, Label>> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut out = BTreeMap::new();
    for row in reader.deserialize() {
        let label: Label = row?;
        out.insert(label.name.clone(), label);
    }
    Ok(out)
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

pub fn run(ctx: &RunContext, args: ScanArgs) -> CliResult<()> {
    let cfg = &ctx.cfg.scan;
    let threshold = args.threshold.unwrap_or(cfg.operating_threshold);
    let files = inputs(&args.input)?;
    let labels = args.labels.as_deref().map(read_labels).transpose()?;
    let model = load_model(ctx, args.extractor, args.head)?;
    if model.meta.segment_len != cfg.window_len() {
        return Err(srcverify::Error::Shape(format!(
            "the head was trained on {}-sample segments but the scan window is {} samples; \
             train Phase 2 with --segment-s {} or change scan.window_s",
            model.meta.segment_len,
            cfg.window_len(),
            cfg.window_s
        ))
        .into());
    }
    let scorer = SiameseScorer {
        backbone: &model.extractor,
        head: &model.head,
        segment_len: model.meta.segment_len,
    };

    let dir = ctx.subdir("scan")?;
    let mut rows = Vec::with_capacity(files.len());
    for file in &files {
        let name = file.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let wave = load_waveform(file)?;
        let seq = score_track(&scorer, &wave, &name, cfg)?;
        let report = splice_report(&seq, cfg, threshold);
        seq.write_csv(dir.join(format!("{name}.csv")))?;
        write_json(dir.join(format!("{name}.json")), &report)?;
        plot::score_curve(&seq, &report).save(dir.join(format!("{name}.png")))?;

        let label = labels.as_ref().and_then(|l| l.get(&name));
        let true_switch_s = label.and_then(|l| l.switch_s);
        let localization_error_s = match (report.decision, label, report.splice_time_s, true_switch_s) {
            (Decision::Spliced, Some(l), Some(found), Some(truth)) if l.spliced == 1 => Some((found - truth).abs()),
            _ => None,
        };
        log::info!("{name}: global score {:.3} -> {:?}", report.global_score, report.decision);
        rows.push(SummaryRow {
            name,
            global_score: report.global_score,
            decision: report.decision,
            splice_time_s: report.splice_time_s,
            minima: report.minima.len(),
            label: label.map(|l| l.spliced),
            true_switch_s,
            localization_error_s,
        });
    }

    let summary_path = dir.join("summary.csv");
    let mut w = csv::Writer::from_path(&summary_path)?;
    for row in &rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| CliError::io(&summary_path, e))?;

    let labelled: Vec<&SummaryRow> = rows.iter().filter(|r| r.label.is_some()).collect();
    if labels.is_some() {
        if labelled.len() < rows.len() {
            log::warn!("{} of {} tracks have no label", rows.len() - labelled.len(), rows.len());
        }
        let trials: Vec<ScoredTrial> = labelled
            .iter()
            .map(|r| ScoredTrial::new(r.global_score, r.label.unwrap_or(0)))
            .collect();
        let count = |label: u8, decision: Decision| {
            labelled
                .iter()
                .filter(|r| r.label == Some(label) && r.decision == decision)
                .count()
        };
        let aggregate = Aggregate {
            tracks: labelled.len(),
            operating_threshold: threshold,
            auc: auc(&trials)?,
            true_positives: count(1, Decision::Spliced),
            false_positives: count(0, Decision::Spliced),
            false_negatives: count(1, Decision::Authentic),
            true_negatives: count(0, Decision::Authentic),
            median_localization_error_s: median(rows.iter().filter_map(|r| r.localization_error_s).collect()),
            roc: roc_curve(&trials)?,
        };
        write_json(dir.join("aggregate.json"), &aggregate)?;
        println!(
            "{} tracks: AUC {:.3}, TP {} FP {} FN {} TN {}, median localization error {}",
            aggregate.tracks,
            aggregate.auc,
            aggregate.true_positives,
            aggregate.false_positives,
            aggregate.false_negatives,
            aggregate.true_negatives,
            aggregate
                .median_localization_error_s
                .map_or("n/a".into(), |e| format!("{e:.3} s"))
        );
    } else {
        let spliced = rows.iter().filter(|r| r.decision == Decision::Spliced).count();
        println!("{} tracks scanned, {spliced} flagged as spliced", rows.len());
    }
    ctx.write_metadata()
}
