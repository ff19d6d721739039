//! Verb implementations shared by the binary and the tests.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use anyhow::{anyhow, Context};
use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use frigid_core::chemgraph::{monoisotopic_mass, Adduct, Fingerprint, Formula};
use frigid_core::denoiser::{
    load_checkpoint, save_checkpoint, train, DenoiserError, DenoiserModel, TrainState,
};
use frigid_core::fragmenter::simulate_spectrum;
use frigid_core::lengthmodel::{fit_length_model, LengthModel};
use frigid_core::pipeline::{elucidate, example, length_pair, Prepared};
use frigid_core::refine::{RefineConfig, TraceRow, TRACE_HEADER};
use frigid_core::sampler::{rank_pool, top_k_metrics, write_ranked_tsv, Candidate, CandidatePool, TopKMetrics};
use frigid_core::tokenizer::{train_bpe, Vocabulary};

use crate::config::{FormulaMode, RunConfig};
use crate::dataset::{self, Checked, DatasetRecord, FingerprintInput};
use crate::tools::{formula_hypotheses, noise_fingerprint, split_budget};

/// Failure classes with stable exit codes.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0:#}")]
    Input(anyhow::Error),
    #[error("{0:#}")]
    Numeric(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Input(e)
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Write via a sibling temporary file and rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    let tmp = path.with_extension("tmp-write");
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming to {}", path.display()))?;
    Ok(())
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn vocab_path(checkpoint: &Path) -> PathBuf {
    sibling(checkpoint, ".vocab.json")
}

pub fn length_path(checkpoint: &Path) -> PathBuf {
    sibling(checkpoint, ".length.json")
}

pub fn loss_path(checkpoint: &Path) -> PathBuf {
    sibling(checkpoint, ".loss.csv")
}

/// Train BPE merges on a one-SMILES-per-line corpus and save the vocabulary.
pub fn cmd_tokenizer_train(corpus: &Path, vocab_size: usize, out: &Path) -> CliResult<Vocabulary> {
    let text = fs::read_to_string(corpus).with_context(|| format!("reading corpus {}", corpus.display()))?;
    let lines: Vec<&str> = text.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
    let vocab = train_bpe(lines.iter(), vocab_size).map_err(|e| anyhow!(e))?;
    write_atomic(out, vocab.to_json().as_bytes())?;
    Ok(vocab)
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub examples: usize,
    pub skipped: usize,
    pub first_step: usize,
    pub last_step: usize,
    pub final_loss: Option<f64>,
}

fn record_fp(rec: &Checked, threshold: f64) -> anyhow::Result<Option<Fingerprint>> {
    rec.record
        .fingerprint
        .as_ref()
        .map(|f| f.resolve(threshold).map_err(|e| anyhow!("record {}: {e}", rec.record.id)))
        .transpose()
}

/// Train (or resume) a denoiser and fit the length model on a JSONL dataset.
///
/// Writes the checkpoint to `out` plus `.vocab.json`, `.length.json` and
/// `.loss.csv` siblings. A non-finite loss aborts with the last periodic
/// checkpoint left in place.
pub fn cmd_train(data: &Path, vocab_file: &Path, cfg: &RunConfig, out: &Path, resume: bool) -> CliResult<TrainSummary> {
    let records = dataset::load(data).with_context(|| format!("loading {}", data.display()))?;
    let vocab = Vocabulary::load(vocab_file).map_err(|e| anyhow!("vocabulary {}: {e}", vocab_file.display()))?;
    let mut mcfg = cfg.model.clone();
    if mcfg.vocab_size != vocab.len() {
        info!("model.vocab_size {} replaced by the vocabulary size {}", mcfg.vocab_size, vocab.len());
        mcfg.vocab_size = vocab.len();
    }
    let (mut model, mut state) = if resume && out.exists() {
        let ck = load_checkpoint(out, Some(&vocab.hash())).map_err(|e| anyhow!("resuming from {}: {e}", out.display()))?;
        if ck.model.config != mcfg {
            return Err(anyhow!("checkpoint model configuration differs from the run configuration").into());
        }
        let state = ck.state.ok_or_else(|| anyhow!("checkpoint has no optimizer state to resume"))?;
        (ck.model, state)
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let model = DenoiserModel::init(mcfg, vocab.specials(), &vocab.hash(), &mut rng).map_err(|e| anyhow!(e))?;
        let state = TrainState::new(&model);
        (model, state)
    };

    let mut examples = Vec::new();
    let mut pairs = Vec::new();
    let mut skipped = 0;
    for rec in &records {
        let Some(truth) = &rec.truth else {
            skipped += 1;
            continue;
        };
        match (example(truth, &vocab, &model), length_pair(truth, &vocab, model.config.max_len)) {
            (Ok(mut ex), Ok(pair)) => {
                if let Some(fp) = record_fp(rec, model.config.fp_threshold)? {
                    ex.cond = frigid_core::denoiser::ConditioningInput::new(&truth.formula, &fp, model.config.fp_max_active);
                }
                examples.push(ex);
                pairs.push(pair);
            }
            _ => skipped += 1,
        }
    }
    if skipped > 0 {
        warn!("{skipped} records skipped (no SMILES, unknown token or too long)");
    }
    let lengths = fit_length_model(&pairs, &cfg.length).map_err(|e| anyhow!("length model: {e}"))?;
    lengths.save(&length_path(out)).map_err(|e| anyhow!(e))?;
    write_atomic(&vocab_path(out), vocab.to_json().as_bytes())?;

    let first_step = state.step;
    let mut log_file = fs::OpenOptions::new()
        .create(true)
        .append(resume)
        .write(true)
        .truncate(!resume)
        .open(loss_path(out))
        .context("opening loss log")?;
    if first_step == 0 {
        writeln!(log_file, "step,loss,lr,grad_norm").context("writing loss log")?;
    }
    let every = cfg.checkpointing.checkpoint_every;
    let mut save_err = None;
    let result = train(&mut model, &mut state, &examples, &cfg.train, |m, s, loss| {
        if s.step % 100 == 0 {
            info!("step {} loss {loss:.4}", s.step);
        }
        if s.step % every == 0 {
            if let Err(e) = save_checkpoint(m, Some(s), out) {
                save_err = Some(e);
                return false;
            }
        }
        true
    });
    let log = match result {
        Ok(log) => log,
        Err(e @ DenoiserError::NonFiniteLoss { .. }) => return Err(CliError::Numeric(anyhow!(e))),
        Err(e) => return Err(anyhow!(e).into()),
    };
    if let Some(e) = save_err {
        return Err(anyhow!("saving checkpoint: {e}").into());
    }
    for (step, loss, lr, norm) in &log.steps {
        writeln!(log_file, "{step},{loss},{lr},{norm}").context("writing loss log")?;
    }
    save_checkpoint(&model, Some(&state), out).map_err(|e| anyhow!(e))?;
    Ok(TrainSummary {
        examples: examples.len(),
        skipped,
        first_step,
        last_step: state.step,
        final_loss: log.steps.last().map(|s| s.1),
    })
}

/// Model, vocabulary and length model loaded from a checkpoint path.
pub struct Bundle {
    pub model: DenoiserModel,
    pub vocab: Vocabulary,
    pub lengths: LengthModel,
}

impl Bundle {
    pub fn load(checkpoint: &Path) -> CliResult<Self> {
        let vocab = Vocabulary::load(&vocab_path(checkpoint)).map_err(|e| anyhow!("vocabulary next to checkpoint: {e}"))?;
        let ck = load_checkpoint(checkpoint, Some(&vocab.hash())).map_err(|e| anyhow!("{}: {e}", checkpoint.display()))?;
        let lengths = LengthModel::load(&length_path(checkpoint)).map_err(|e| anyhow!("length model next to checkpoint: {e}"))?;
        Ok(Bundle {
            model: ck.model,
            vocab,
            lengths,
        })
    }
}

/// Ranked candidates and per-round trace for one spectrum.
#[derive(Debug, Clone)]
pub struct SpectrumResult {
    pub id: String,
    pub ranked: Vec<Candidate>,
    pub trace: Vec<TraceRow>,
    pub metrics: Option<TopKMetrics>,
    pub invalid: usize,
    pub generated: usize,
}

fn spectrum_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

/// Run refinement for one record under the configured formula mode.
pub fn elucidate_record(b: &Bundle, rec: &Checked, cfg: &RunConfig, index: usize) -> CliResult<SpectrumResult> {
    let model = &b.model;
    let fp = match record_fp(rec, model.config.fp_threshold)? {
        Some(fp) => fp,
        None => match &rec.truth {
            Some(t) => t.fp.clone(),
            None => return Err(anyhow!("record {} has neither a fingerprint nor SMILES", rec.record.id).into()),
        },
    };
    let formulas: Vec<(Formula, usize)> = match cfg.eval.formula_mode {
        FormulaMode::Known => vec![(rec.formula.clone(), cfg.refine.budget)],
        FormulaMode::Hypotheses => {
            let hyps = formula_hypotheses(rec.record.precursor_mz, cfg.eval.n_hypotheses, cfg.eval.hypothesis_ppm)
                .map_err(|e| anyhow!("record {}: {e}", rec.record.id))?;
            let shares = split_budget(cfg.refine.budget, hyps.len());
            hyps.into_iter().map(|h| h.formula).zip(shares).filter(|(_, s)| *s > 0).collect()
        }
    };
    let truth_key = rec.truth.as_ref().map(|t| frigid_core::chemgraph::canonical_key(&t.mol));
    let mut rng = spectrum_rng(cfg.seed, index);
    let mut merged = CandidatePool::new(fp.clone(), formulas[0].0.clone());
    let mut trace: Vec<TraceRow> = Vec::new();
    let (mut invalid, mut generated) = (0, 0);
    for (formula, share) in &formulas {
        let rc = RefineConfig {
            budget: *share,
            ..cfg.refine.clone()
        };
        let outcome = elucidate(
            model,
            &b.lengths,
            &b.vocab,
            formula,
            &fp,
            model.config.fp_max_active,
            &rec.spectrum,
            truth_key.as_deref(),
            &cfg.generation,
            &rc,
            &mut rng,
        )
        .map_err(|e| anyhow!(e))?;
        for c in outcome.pool.candidates() {
            merged.insert(c.clone());
        }
        for row in outcome.trace {
            invalid += row.invalid;
            match trace.iter_mut().find(|r| r.round == row.round) {
                None => trace.push(row),
                Some(acc) => {
                    acc.cumulative_candidates += row.cumulative_candidates;
                    acc.cumulative_seconds += row.cumulative_seconds;
                    acc.denoiser_calls += row.denoiser_calls;
                    acc.invalid += row.invalid;
                    if (row.top1_stratum, -row.top1_score) < (acc.top1_stratum, -acc.top1_score) {
                        acc.top1_key = row.top1_key;
                        acc.top1_score = row.top1_score;
                        acc.top1_stratum = row.top1_stratum;
                        acc.exact_match_flag = row.exact_match_flag;
                    }
                }
            }
        }
    }
    generated += merged.len();
    let ranked = rank_pool(&merged);
    let metrics = rec.truth.as_ref().map(|t| top_k_metrics(&ranked, &t.mol, &[1, 10]));
    Ok(SpectrumResult {
        id: rec.record.id.clone(),
        ranked,
        trace,
        metrics,
        invalid,
        generated,
    })
}

/// Elucidate every record, `workers` at a time. Results come back in input
/// order and do not depend on the worker count.
pub fn elucidate_all(b: &Bundle, records: &[Checked], cfg: &RunConfig, workers: usize) -> CliResult<Vec<SpectrumResult>> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<CliResult<SpectrumResult>>>> = Mutex::new((0..records.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers.max(1).min(records.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= records.len() {
                    break;
                }
                let r = elucidate_record(b, &records[i], cfg, i);
                slots.lock().unwrap()[i] = Some(r);
            });
        }
    });
    slots.into_inner().unwrap().into_iter().map(|r| r.expect("every record processed")).collect()
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct AggregateMetrics {
    pub spectra: usize,
    pub evaluated: usize,
    #[serde(rename = "accuracy@1")]
    pub accuracy_1: f64,
    #[serde(rename = "accuracy@10")]
    pub accuracy_10: f64,
    #[serde(rename = "tanimoto@1")]
    pub tanimoto_1: f64,
    #[serde(rename = "tanimoto@10")]
    pub tanimoto_10: f64,
    pub validity: f64,
}

pub fn aggregate(results: &[SpectrumResult]) -> AggregateMetrics {
    let evald: Vec<&TopKMetrics> = results.iter().filter_map(|r| r.metrics.as_ref()).collect();
    let mean = |f: &dyn Fn(&TopKMetrics) -> f64| {
        if evald.is_empty() {
            0.0
        } else {
            evald.iter().map(|m| f(m)).sum::<f64>() / evald.len() as f64
        }
    };
    let invalid: usize = results.iter().map(|r| r.invalid).sum();
    let valid: usize = results.iter().flat_map(|r| r.trace.last()).map(|t| t.cumulative_candidates).sum();
    AggregateMetrics {
        spectra: results.len(),
        evaluated: evald.len(),
        accuracy_1: mean(&|m| m.accuracy[&1]),
        accuracy_10: mean(&|m| m.accuracy[&10]),
        tanimoto_1: mean(&|m| m.tanimoto[&1]),
        tanimoto_10: mean(&|m| m.tanimoto[&10]),
        validity: if valid + invalid == 0 { 0.0 } else { valid as f64 / (valid + invalid) as f64 },
    }
}

pub fn trace_csv(trace: &[TraceRow]) -> String {
    let mut s = format!("{TRACE_HEADER}\n");
    for r in trace {
        s.push_str(&r.csv());
        s.push('\n');
    }
    s
}

/// Per-round means over spectra: the data behind accuracy-versus-compute curves.
pub fn scaling_csv(results: &[SpectrumResult]) -> String {
    let rounds = results.iter().map(|r| r.trace.len()).max().unwrap_or(0);
    let mut s = String::from("round,spectra,mean_cumulative_candidates,mean_cumulative_seconds,total_denoiser_calls,top1_accuracy\n");
    for round in 0..rounds {
        let rows: Vec<&TraceRow> = results.iter().filter_map(|r| r.trace.get(round)).collect();
        let n = rows.len() as f64;
        let scored = results.iter().filter(|r| r.metrics.is_some()).filter_map(|r| r.trace.get(round));
        let (hits, m) = scored.fold((0usize, 0usize), |(h, m), t| (h + usize::from(t.exact_match_flag), m + 1));
        s.push_str(&format!(
            "{},{},{:.3},{:.6},{},{:.6}\n",
            round + 1,
            rows.len(),
            rows.iter().map(|r| r.cumulative_candidates).sum::<usize>() as f64 / n,
            rows.iter().map(|r| r.cumulative_seconds).sum::<f64>() / n,
            rows.iter().map(|r| r.denoiser_calls).sum::<usize>(),
            if m == 0 { 0.0 } else { hits as f64 / m as f64 },
        ));
    }
    s
}

fn safe_id(id: &str) -> String {
    id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

/// Elucidate a dataset and write `<id>.tsv`, `<id>.trace.csv`,
/// `metrics.json` and `scaling.csv` into `out_dir`.
pub fn cmd_elucidate(data: &Path, checkpoint: &Path, cfg: &RunConfig, out_dir: &Path, workers: usize) -> CliResult<AggregateMetrics> {
    let records = dataset::load(data).with_context(|| format!("loading {}", data.display()))?;
    let bundle = Bundle::load(checkpoint)?;
    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let results = elucidate_all(&bundle, &records, cfg, workers)?;
    for r in &results {
        let mut tsv = Vec::new();
        write_ranked_tsv(&r.ranked, &mut tsv).context("formatting ranked list")?;
        let id = safe_id(&r.id);
        write_atomic(&out_dir.join(format!("{id}.tsv")), &tsv)?;
        write_atomic(&out_dir.join(format!("{id}.trace.csv")), trace_csv(&r.trace).as_bytes())?;
    }
    let agg = aggregate(&results);
    write_atomic(&out_dir.join("metrics.json"), serde_json::to_string_pretty(&agg).unwrap().as_bytes())?;
    write_atomic(&out_dir.join("scaling.csv"), scaling_csv(&results).as_bytes())?;
    Ok(agg)
}

/// Build dataset records from SMILES: simulated [M+H]+ spectrum, precursor
/// m/z and (optionally noised) fingerprint.
pub fn simulate_records(smiles: &[String], cfg: &RunConfig, noise_q: Option<f64>) -> CliResult<Vec<DatasetRecord>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::with_capacity(smiles.len());
    for (i, s) in smiles.iter().enumerate() {
        let p = Prepared::new(s).map_err(|e| anyhow!("line {}: {s:?}: {e}", i + 1))?;
        let sim = simulate_spectrum(&p.mol, Adduct::Proton, &cfg.refine.sim).map_err(|e| anyhow!("line {}: {e}", i + 1))?;
        let fp = match noise_q {
            Some(q) => noise_fingerprint(&p.fp, q, &mut rng).map_err(|e| anyhow!("line {}: {e}", i + 1))?,
            None => p.fp.clone(),
        };
        out.push(DatasetRecord {
            id: format!("mol{:05}", i + 1),
            smiles: Some(s.clone()),
            formula: p.formula.to_string(),
            spectrum: sim.peaks.iter().map(|pk| [pk.mz, pk.intensity]).collect(),
            precursor_mz: monoisotopic_mass(&p.formula, Adduct::Proton),
            fingerprint: Some(FingerprintInput::Hex(fp.to_hex())),
        });
    }
    Ok(out)
}

pub fn read_smiles_lines(path: &Path) -> CliResult<Vec<String>> {
    let f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.context("reading SMILES list")?;
        let t = line.trim();
        if !t.is_empty() {
            out.push(t.to_string());
        }
    }
    Ok(out)
}

pub fn cmd_simulate(smiles_file: &Path, cfg: &RunConfig, noise_q: Option<f64>, out: &Path) -> CliResult<usize> {
    let smiles = read_smiles_lines(smiles_file)?;
    let records = simulate_records(&smiles, cfg, noise_q)?;
    let mut buf = Vec::new();
    dataset::write_jsonl(&records, &mut buf).context("formatting records")?;
    write_atomic(out, &buf)?;
    Ok(records.len())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub spectrum_id: String,
    pub phase: String,
    pub mean_seconds: f64,
    pub std_seconds: f64,
    pub repeats: usize,
}

pub const BENCH_HEADER: &str = "spectrum_id,phase,mean_seconds,std_seconds,repeats";

/// Per-spectrum wall time of round-1 generation and of each refinement
/// round, over `bench.repeats` runs after `bench.warmup` discarded runs.
pub fn bench_rows(b: &Bundle, records: &[Checked], cfg: &RunConfig) -> CliResult<Vec<BenchRow>> {
    if records.is_empty() {
        return Err(anyhow!("bench needs at least one record").into());
    }
    let warm = Instant::now();
    for i in 0..cfg.bench.warmup {
        elucidate_record(b, &records[i % records.len()], cfg, i)?;
    }
    info!("warmup {:.2}s excluded", warm.elapsed().as_secs_f64());
    let mut rows = Vec::new();
    for (i, rec) in records.iter().enumerate() {
        let mut per_phase: Vec<Vec<f64>> = Vec::new();
        for _ in 0..cfg.bench.repeats {
            let r = elucidate_record(b, rec, cfg, i)?;
            let mut prev = 0.0;
            for (k, t) in r.trace.iter().enumerate() {
                if per_phase.len() <= k {
                    per_phase.push(Vec::new());
                }
                per_phase[k].push(t.cumulative_seconds - prev);
                prev = t.cumulative_seconds;
            }
        }
        for (k, xs) in per_phase.iter().enumerate() {
            let n = xs.len() as f64;
            let mean = xs.iter().sum::<f64>() / n;
            let var = if xs.len() > 1 {
                xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
            } else {
                0.0
            };
            rows.push(BenchRow {
                spectrum_id: rec.record.id.clone(),
                phase: if k == 0 { "generation".into() } else { format!("round{}", k + 1) },
                mean_seconds: mean,
                std_seconds: var.sqrt(),
                repeats: xs.len(),
            });
        }
    }
    Ok(rows)
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut s = format!("{BENCH_HEADER}\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{:.6},{:.6},{}\n",
            r.spectrum_id, r.phase, r.mean_seconds, r.std_seconds, r.repeats
        ));
    }
    s
}

pub fn cmd_bench(checkpoint: &Path, data: &Path, cfg: &RunConfig, out: &Path) -> CliResult<Vec<BenchRow>> {
    let records = dataset::load(data).with_context(|| format!("loading {}", data.display()))?;
    let bundle = Bundle::load(checkpoint)?;
    let rows = bench_rows(&bundle, &records, cfg)?;
    write_atomic(out, bench_csv(&rows).as_bytes())?;
    Ok(rows)
}

/// Reject missing input files with an input error.
pub fn require_file(path: &Path) -> CliResult<()> {
    if !path.is_file() {
        return Err(CliError::Input(anyhow!("{} does not exist", path.display())));
    }
    Ok(())
}
