use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use frigid::config::RunConfig;
use frigid_core::synth::{synthetic_corpus, SynthConfig};

const TINY: &str = "\
model.n_layers = 1
model.d_model = 16
model.n_heads = 2
model.d_ff = 32
model.max_len = 32
model.fp_max_active = 64
model.fp_attn_layers = 1
train.steps = 10
train.batch_size = 8
train.warmup_steps = 2
checkpointing.checkpoint_every = 5
length.stages = 20
generation.batch = 8
refine.rounds = 2
refine.budget = 8
refine.top_k = 2
refine.variants = 2
";

fn frigid(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_frigid"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Corpus, vocabulary, simulated dataset and a config in a fresh directory.
struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new(extra: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let corpus = synthetic_corpus(40, 3, &SynthConfig::default()).join("\n");
        fs::write(dir.path().join("corpus.smi"), corpus).unwrap();
        fs::write(dir.path().join("run.cfg"), format!("{TINY}{extra}")).unwrap();
        let w = Workspace { dir };
        let out = frigid(&["tokenizer-train", s(&w.p("corpus.smi")), "--vocab-size", "40", "--out", s(&w.p("vocab.json"))]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let out = frigid(&["simulate", s(&w.p("corpus.smi")), "--out", s(&w.p("data.jsonl"))]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        w
    }

    fn p(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn train(&self, extra: &[&str]) -> Output {
        let (cfg, data, vocab, ck) = (self.p("run.cfg"), self.p("data.jsonl"), self.p("vocab.json"), self.p("m.ckpt"));
        let mut args = vec!["--config", s(&cfg), "train"];
        args.extend([s(&data), "--vocab", s(&vocab), "--out", s(&ck)]);
        args.extend(extra);
        frigid(&args)
    }
}

#[test]
fn train_elucidate_and_bench() {
    let w = Workspace::new("");
    let out = w.train(&[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for sib in ["m.ckpt", "m.ckpt.vocab.json", "m.ckpt.length.json", "m.ckpt.loss.csv"] {
        assert!(w.p(sib).exists(), "{sib}");
    }

    let head: String = fs::read_to_string(w.p("data.jsonl")).unwrap().lines().take(2).collect::<Vec<_>>().join("\n");
    fs::write(w.p("two.jsonl"), head).unwrap();
    let out = frigid(&[
        "--config",
        s(&w.p("run.cfg")),
        "--rounds",
        "3",
        "elucidate",
        s(&w.p("two.jsonl")),
        "--checkpoint",
        s(&w.p("m.ckpt")),
        "--out-dir",
        s(&w.p("out")),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let metrics: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    for key in ["accuracy@1", "accuracy@10", "tanimoto@1", "tanimoto@10", "validity"] {
        assert!(metrics[key].is_number(), "{key} missing from {metrics}");
    }
    let traces: Vec<_> = fs::read_dir(w.p("out"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.to_str().unwrap().ends_with(".trace.csv"))
        .collect();
    assert_eq!(traces.len(), 2);
    for t in &traces {
        let text = fs::read_to_string(t).unwrap();
        assert!(text.starts_with("round,cumulative_candidates,cumulative_seconds,denoiser_calls,top1_key,top1_score,exact_match_flag"));
        assert_eq!(text.lines().count(), 1 + 3);
        let tsv = fs::read_to_string(t.to_str().unwrap().replace(".trace.csv", ".tsv")).unwrap();
        assert!(tsv.starts_with("rank\tsmiles\tkey\tformula\tscore\tround_created"));
    }
    assert!(w.p("out/metrics.json").exists() && w.p("out/scaling.csv").exists());

    let out = frigid(&[
        "--config",
        s(&w.p("run.cfg")),
        "bench",
        s(&w.p("two.jsonl")),
        "--checkpoint",
        s(&w.p("m.ckpt")),
        "--out",
        s(&w.p("bench.csv")),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(w.p("bench.csv")).unwrap();
    assert!(csv.starts_with("spectrum_id,phase,mean_seconds,std_seconds,repeats"));
    assert_eq!(csv.lines().count(), 1 + 2 * 2);
}

#[test]
fn resume_continues_step_count_and_log() {
    let w = Workspace::new("");
    assert!(w.train(&[]).status.success());
    let long = fs::read_to_string(w.p("run.cfg")).unwrap().replace("train.steps = 10", "train.steps = 20");
    fs::write(w.p("run.cfg"), &long).unwrap();
    let out = w.train(&["--resume"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!((summary["first_step"].as_u64(), summary["last_step"].as_u64()), (Some(10), Some(20)));
    let log = fs::read_to_string(w.p("m.ckpt.loss.csv")).unwrap();
    let steps: Vec<u64> = log.lines().skip(1).map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(steps, (1..=20).collect::<Vec<_>>());
}

#[test]
fn non_finite_loss_exits_3() {
    let w = Workspace::new("train.peak_lr = 1e30\ntrain.grad_clip = 1e30\n");
    let out = w.train(&[]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn input_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.jsonl");
    assert_eq!(frigid(&["simulate", s(&missing), "--out", "x"]).status.code(), Some(2));
    fs::write(dir.path().join("bad.cfg"), "refine.pmax = 0.5\n").unwrap();
    let out = frigid(&["--config", s(&dir.path().join("bad.cfg")), "formula-hyp", "--precursor", "79.054"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("refine.pmax"));
    assert_eq!(frigid(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(frigid(&["noise-fp", "--smiles", "CCO", "--q", "1.5"]).status.code(), Some(2));
}

#[test]
fn small_tools() {
    let out = frigid(&["formula-hyp", "--precursor", "79.05423", "-n", "3"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().count() <= 3 && text.lines().any(|l| l.starts_with("C6H6\t")), "{text}");

    let a = frigid(&["--seed", "4", "noise-fp", "--smiles", "CC(=O)Oc1ccccc1C(=O)O", "--q", "0.7"]);
    let b = frigid(&["--seed", "4", "noise-fp", "--smiles", "CC(=O)Oc1ccccc1C(=O)O", "--q", "0.7"]);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
    let t: f64 = String::from_utf8_lossy(&a.stderr).trim().trim_start_matches("tanimoto ").parse().unwrap();
    assert!((t - 0.7).abs() <= 0.02, "{t}");
}

#[test]
fn tokenizer_training_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.smi"), synthetic_corpus(60, 9, &SynthConfig::default()).join("\n")).unwrap();
    let run = |name: &str| {
        let out = frigid(&["tokenizer-train", s(&dir.path().join("c.smi")), "--vocab-size", "50", "--out", s(&dir.path().join(name))]);
        assert!(out.status.success());
        fs::read(dir.path().join(name)).unwrap()
    };
    assert_eq!(run("a.json"), run("b.json"));
}

#[test]
fn config_file_round_trip() {
    let mut c = RunConfig::default();
    c.refine.gamma = 2.5;
    c.model.n_layers = 3;
    let text = c.serialize();
    let back = RunConfig::parse(&text).unwrap();
    assert_eq!(back, c);
    assert_eq!(back.serialize(), text);
}
