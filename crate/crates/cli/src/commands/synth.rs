use std::collections::BTreeMap;

use clap::Args;
use serde::Serialize;
use srcverify::corpus::{build_toy_manifest, write_waveform, Manifest, ManifestRecord, Split, ToyGeneratorSpec};
use srcverify::splicing::toy_splice_tracks;

use crate::error::{CliError, CliResult};
use crate::run::RunContext;

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Number of toy generators (at least 4).
    #[arg(long)]
    gens: Option<usize>,

    /// Utterances per generator.
    #[arg(long)]
    utts: Option<usize>,

    /// Also write this many labelled scan tracks, half of them spliced.
    #[arg(long, default_value_t = 0)]
    splice_tracks: usize,

    #[arg(long, default_value_t = 4.0)]
    track_duration: f64,
}

#[derive(Debug, Serialize)]
struct TrackLabel<'a> {
    name: &'a str,
    spliced: u8,
    switch_s: Option<f64>,
    generator_a: usize,
    generator_b: usize,
}

pub fn run(ctx: &RunContext, args: SynthArgs) -> CliResult<()> {
    let corpus = &ctx.cfg.corpus;
    let gens = args.gens.unwrap_or(corpus.generators);
    let utts = args.utts.unwrap_or(corpus.utterances);
    let lazy = build_toy_manifest(gens, utts, corpus.ratios, ctx.cfg.seed)?;

    let mut counters: BTreeMap<(Split, usize), usize> = BTreeMap::new();
    let mut records = Vec::with_capacity(lazy.records().len());
    for record in lazy.records() {
        let n = counters.entry((record.split, record.generator_label)).or_default();
        let rel = format!("audio/{}/g{:02}_{:04}.wav", record.split, record.generator_label, n);
        *n += 1;
        ctx.subdir(&format!("audio/{}", record.split))?;
        write_waveform(ctx.path(&rel), &record.load(&ctx.out)?)?;
        records.push(ManifestRecord {
            audio_ref: rel,
            ..record.clone()
        });
    }
    let manifest = Manifest::new(records)?;
    let manifest_path = ctx.path("manifest.jsonl");
    manifest.write_jsonl(&manifest_path)?;

    if args.splice_tracks > 0 {
        let mut specs: Vec<ToyGeneratorSpec> = manifest.records().iter().filter_map(|r| r.toy_spec.clone()).collect();
        specs.sort_by_key(|s| s.generator_id);
        specs.dedup_by_key(|s| s.generator_id);
        let n_homogeneous = args.splice_tracks / 2;
        let margin = ctx.cfg.scan.window_s * 2.0;
        if !(args.track_duration > 2.0 * margin) {
            return Err(CliError::Config(format!(
                "--track-duration must exceed {:.2} s to leave two scan windows on each side of a splice",
                2.0 * margin
            )));
        }
        let tracks = toy_splice_tracks(
            &specs,
            n_homogeneous,
            args.splice_tracks - n_homogeneous,
            args.track_duration,
            (margin, args.track_duration - margin),
            &mut ctx.rng(5),
        )?;
        let dir = ctx.subdir("tracks")?;
        let labels_path = dir.join("labels.csv");
        let mut labels = csv::Writer::from_path(&labels_path)?;
        for t in &tracks {
            write_waveform(dir.join(format!("{}.wav", t.name)), &t.waveform)?;
            labels.serialize(TrackLabel {
                name: &t.name,
                spliced: u8::from(t.switch_s.is_some()),
                switch_s: t.switch_s,
                generator_a: t.generators.0,
                generator_b: t.generators.1,
            })?;
        }
        labels.flush().map_err(|e| CliError::io(&labels_path, e))?;
        log::info!("{} scan tracks in {}", tracks.len(), dir.display());
    }

    for split in [Split::Train, Split::Val, Split::Test] {
        let n = manifest.in_split(split).count();
        let g = manifest.generators(split);
        println!("{split}: {n} utterances from generators {g:?}");
    }
    println!("manifest {} sha256 {}", manifest_path.display(), manifest.content_hash());
    ctx.write_metadata()
}
