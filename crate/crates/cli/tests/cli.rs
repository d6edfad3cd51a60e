use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &str = r#"
[phase1]
epochs = 1
batch_size = 4
samples_per_epoch = 8
segment_s = 0.5
[phase1.mel]
n_mels = 16
[phase1.lcnn]
channels = [4, 4, 4]
kernel = 3
embedding_dim = 8
[phase2]
epochs = 1
batch_size = 4
pairs_per_epoch = 8
val_pairs = 8
segment_s = 0.5
[phase2.head]
embedding_dim = 8
projection_dim = 4
[evaluate]
test_pairs = 40
calibration_pairs = 20
matrix_pairs = 2
"#;

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
        Self { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn run(&self, out: &str, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_srcverify"))
            .arg("--config")
            .arg(self.path("tiny.toml"))
            .arg("--out")
            .arg(self.path(out))
            .args(args)
            .env("RUST_LOG", "warn")
            .output()
            .unwrap()
    }

    fn ok(&self, out: &str, args: &[&str]) -> String {
        let o = self.run(out, args);
        assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
        String::from_utf8(o.stdout).unwrap()
    }

    /// Runs a command that must fail and returns the `kind` of its structured error.
    fn fails(&self, out: &str, args: &[&str]) -> String {
        let o = self.run(out, args);
        assert_eq!(o.status.code(), Some(1), "{args:?} should fail");
        let stderr = String::from_utf8(o.stderr).unwrap();
        let last = stderr.lines().last().unwrap_or_default();
        let v: Value = serde_json::from_str(last).unwrap_or_else(|_| panic!("not JSON: {stderr}"));
        assert!(v["error"]["message"].as_str().is_some_and(|m| !m.is_empty()));
        v["error"]["kind"].as_str().unwrap().to_string()
    }

    fn json(&self, rel: &str) -> Value {
        serde_json::from_str(&std::fs::read_to_string(self.path(rel)).unwrap()).unwrap()
    }
}

fn manifest_arg(ws: &Workspace, out: &str) -> String {
    ws.path(&format!("{out}/manifest.jsonl")).display().to_string()
}

fn bytes(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn synth_corpus_is_deterministic_under_a_seed() {
    let ws = Workspace::new();
    let a = ws.ok("a", &["--seed", "3", "synth-corpus", "--gens", "4", "--utts", "3"]);
    let b = ws.ok("b", &["--seed", "3", "synth-corpus", "--gens", "4", "--utts", "3"]);
    let c = ws.ok("c", &["--seed", "4", "synth-corpus", "--gens", "4", "--utts", "3"]);
    let hash = |s: &str| s.lines().last().unwrap().rsplit(' ').next().unwrap().to_string();
    assert_eq!(hash(&a), hash(&b));
    assert_ne!(hash(&a), hash(&c));
    assert_eq!(bytes(&ws.path("a/manifest.jsonl")), bytes(&ws.path("b/manifest.jsonl")));
    assert_eq!(
        bytes(&ws.path("a/audio/test/g03_0002.wav")),
        bytes(&ws.path("b/audio/test/g03_0002.wav"))
    );

    let meta = || bytes(&ws.path("a/run_synth_corpus.json"));
    let first = meta();
    ws.ok("a", &["--seed", "3", "synth-corpus", "--gens", "4", "--utts", "3"]);
    assert_eq!(first, meta());
    let m = ws.json("a/run_synth_corpus.json");
    assert_eq!(m["seed"], 3);
    assert_eq!(m["config_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn manifest_paths_are_relative_and_loadable() {
    let ws = Workspace::new();
    ws.ok("m", &["synth-corpus", "--gens", "4", "--utts", "2"]);
    let text = std::fs::read_to_string(ws.path("m/manifest.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 8);
    for line in text.lines() {
        let rec: Value = serde_json::from_str(line).unwrap();
        let rel = rec["audio_ref"].as_str().unwrap();
        assert!(rel.starts_with("audio/"));
        assert!(ws.path("m").join(rel).is_file());
        assert!(rec["toy_spec"].is_object());
    }
}

#[test]
fn invalid_requests_exit_with_structured_errors() {
    let ws = Workspace::new();
    assert_eq!(ws.fails("e", &["synth-corpus", "--gens", "3"]), "invalid_argument");
    let missing = ws.path("nope.jsonl").display().to_string();
    assert_eq!(ws.fails("e", &["train", "--manifest", &missing]), "missing_input");
    assert_eq!(ws.fails("e", &["train"]), "missing_input");
    assert_eq!(ws.fails("e", &["--set", "phase1.lr=-1", "train"]), "invalid_argument");
    assert_eq!(ws.fails("e", &["--set", "phse1.lr=1", "train"]), "config");
    assert_eq!(ws.fails("e", &["scan", &ws.path("no_such_dir").display().to_string()]), "missing_input");

    ws.ok("c", &["synth-corpus", "--gens", "4", "--utts", "4"]);
    let manifest = manifest_arg(&ws, "c");
    assert_eq!(ws.fails("c", &["train", "--manifest", &manifest, "--phase", "2"]), "missing_input");
    assert_eq!(ws.fails("c", &["evaluate", "--manifest", &manifest]), "missing_input");
}

#[test]
fn frozen_phase_two_leaves_the_extractor_untouched() {
    let ws = Workspace::new();
    ws.ok("f", &["synth-corpus", "--gens", "4", "--utts", "6"]);
    let manifest = manifest_arg(&ws, "f");
    ws.ok("f", &["train", "--manifest", &manifest, "--phase", "1"]);
    assert!(!ws.path("f/head.ckpt").exists());
    ws.ok("f", &["train", "--manifest", &manifest, "--phase", "2", "--strategy", "frozen"]);
    assert_eq!(bytes(&ws.path("f/extractor_phase1.ckpt")), bytes(&ws.path("f/extractor_phase2.ckpt")));
    assert_eq!(ws.json("f/report_phase2.json")["strategy"], "frozen");
}

#[test]
fn toy_pipeline_runs_end_to_end() {
    let ws = Workspace::new();
    let synth = ws.ok("p", &["synth-corpus", "--gens", "6", "--utts", "6", "--splice-tracks", "4"]);
    assert!(synth.contains("test: 12 utterances"), "{synth}");
    let manifest = manifest_arg(&ws, "p");

    ws.ok("p", &["train", "--manifest", &manifest]);
    for f in ["extractor_phase1.ckpt", "extractor_phase2.ckpt", "head.ckpt"] {
        assert!(ws.path(&format!("p/{f}")).is_file(), "{f}");
    }
    assert_eq!(ws.json("p/report_phase1.json")["phase"], "phase1");
    assert_eq!(ws.json("p/report_phase2.json")["strategy"], "unfrozen");

    ws.ok("p", &["evaluate", "--manifest", &manifest]);
    let m = ws.json("p/metrics.json");
    for key in ["eer", "auc", "tau"] {
        let v = m[key].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&v), "{key} = {v}");
    }
    assert_eq!(m["test_pairs"], 40);
    assert_eq!(m["baselines"].as_array().unwrap().len(), 2);
    let png = image::open(ws.path("p/matrix.png")).unwrap();
    assert_eq!(png.width(), png.height());
    let matrix = std::fs::read_to_string(ws.path("p/matrix.csv")).unwrap();
    assert_eq!(matrix.lines().count(), 5);

    let tracks = ws.path("p/tracks").display().to_string();
    let labels = ws.path("p/tracks/labels.csv").display().to_string();
    ws.ok("p", &["scan", &tracks, "--labels", &labels]);
    let summary = std::fs::read_to_string(ws.path("p/scan/summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 5);
    let agg = ws.json("p/scan/aggregate.json");
    assert_eq!(agg["tracks"], 4);
    assert!((0.0..=1.0).contains(&agg["auc"].as_f64().unwrap()));
    assert!(image::open(ws.path("p/scan/spliced_000.png")).is_ok());
    let report = ws.json("p/scan/spliced_000.json");
    assert!(report["decision"] == "spliced" || report["decision"] == "authentic");

    let single = ws.path("p/tracks/homogeneous_000.wav").display().to_string();
    let out = ws.ok("p", &["scan", &single]);
    assert!(out.starts_with("1 tracks scanned"), "{out}");

    let wide = ["--set", "scan.window_s=1.0", "scan", tracks.as_str()];
    assert_eq!(ws.fails("p", &wide), "shape_mismatch");
}

#[test]
fn constant_scorer_evaluation_sits_at_chance() {
    let ws = Workspace::new();
    ws.ok("k", &["synth-corpus", "--gens", "6", "--utts", "6"]);
    let manifest = manifest_arg(&ws, "k");
    ws.ok("k", &["evaluate", "--manifest", &manifest, "--constant-score", "0.7"]);
    let m = ws.json("k/metrics.json");
    assert_eq!(m["auc"], 0.5);
    assert_eq!(m["eer"], 0.5);
    assert_eq!(m["matrix"]["mean_diagonal"], 1.0);
    assert_eq!(m["matrix"]["mean_off_diagonal"], 0.0);

    let first = bytes(&ws.path("k/metrics.json"));
    ws.ok("k", &["evaluate", "--manifest", &manifest, "--constant-score", "0.7"]);
    assert_eq!(first, bytes(&ws.path("k/metrics.json")));
}
