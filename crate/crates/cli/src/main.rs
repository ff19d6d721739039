use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::anyhow;
use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use frigid::commands::{self, CliError, CliResult};
use frigid::config::RunConfig;
use frigid::tools::{formula_hypotheses, noise_fingerprint};
use frigid_core::chemgraph::{tanimoto, Fingerprint, FP_BITS};
use frigid_core::pipeline::Prepared;

#[derive(Parser)]
#[command(name = "frigid", version, about = "Structure elucidation from MS/MS spectra")]
struct Cli {
    /// Flat `section.key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    /// Overrides refine.rounds.
    #[arg(long, global = true)]
    rounds: Option<usize>,
    /// Overrides refine.budget.
    #[arg(long, global = true)]
    budget: Option<usize>,
    /// Default root for relative dataset paths.
    #[arg(long, global = true, env = "FRIGID_DATA_DIR")]
    data_dir: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Learn BPE merges from a one-SMILES-per-line corpus.
    TokenizerTrain {
        corpus: PathBuf,
        #[arg(long, default_value_t = 256)]
        vocab_size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the denoiser and length model on a JSONL dataset.
    Train {
        dataset: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from `out` if it exists.
        #[arg(long)]
        resume: bool,
    },
    /// Rank candidate structures for every spectrum in a dataset.
    Elucidate {
        dataset: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Turn a SMILES list into JSONL records with simulated spectra.
    Simulate {
        smiles: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Noise fingerprints to this Tanimoto similarity.
        #[arg(long)]
        noise_q: Option<f64>,
    },
    /// Per-phase latency CSV.
    Bench {
        dataset: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Noise a fingerprint (hex, or computed from SMILES) to a target Tanimoto.
    NoiseFp {
        #[arg(long, conflicts_with = "hex", required_unless_present = "hex")]
        smiles: Option<String>,
        #[arg(long)]
        hex: Option<String>,
        #[arg(long)]
        q: f64,
    },
    /// Candidate formulae for a precursor m/z.
    FormulaHyp {
        #[arg(long)]
        precursor: f64,
        #[arg(short, default_value_t = 5)]
        n: usize,
        #[arg(long, default_value_t = 5.0)]
        ppm: f64,
    },
}

fn resolve(root: &Option<PathBuf>, p: &Path) -> PathBuf {
    match root {
        Some(r) if p.is_relative() && !p.exists() => r.join(p),
        _ => p.to_path_buf(),
    }
}

fn run(cli: Cli) -> CliResult<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).map_err(|e| anyhow!("{}: {e}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.set_seed(s);
    }
    if let Some(r) = cli.rounds {
        cfg.refine.rounds = r;
    }
    if let Some(b) = cli.budget {
        cfg.refine.budget = b;
        cfg.generation.batch = b;
    }
    cfg.validate().map_err(|e| anyhow!(e))?;
    let data = |p: &Path| resolve(&cli.data_dir, p);
    match &cli.cmd {
        Cmd::TokenizerTrain { corpus, vocab_size, out } => {
            let v = commands::cmd_tokenizer_train(&data(corpus), *vocab_size, out)?;
            println!("{} tokens written to {}", v.len(), out.display());
        }
        Cmd::Train { dataset, vocab, out, resume } => {
            let s = commands::cmd_train(&data(dataset), vocab, &cfg, out, *resume)?;
            println!("{}", serde_json::to_string(&s).unwrap());
        }
        Cmd::Elucidate { dataset, checkpoint, out_dir } => {
            let m = commands::cmd_elucidate(&data(dataset), checkpoint, &cfg, out_dir, cli.workers)?;
            println!("{}", serde_json::to_string_pretty(&m).unwrap());
        }
        Cmd::Simulate { smiles, out, noise_q } => {
            let n = commands::cmd_simulate(&data(smiles), &cfg, *noise_q, out)?;
            println!("{n} records written to {}", out.display());
        }
        Cmd::Bench { dataset, checkpoint, out } => {
            let rows = commands::cmd_bench(checkpoint, &data(dataset), &cfg, out)?;
            println!("{} rows written to {}", rows.len(), out.display());
        }
        Cmd::NoiseFp { smiles, hex, q } => {
            let fp = match (smiles, hex) {
                (Some(s), _) => Prepared::new(s).map_err(|e| anyhow!(e))?.fp,
                (None, Some(h)) => Fingerprint::from_hex(h, FP_BITS).map_err(|e| anyhow!(e))?,
                (None, None) => unreachable!("clap requires one input"),
            };
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let noisy = noise_fingerprint(&fp, *q, &mut rng).map_err(|e| anyhow!(e))?;
            eprintln!("tanimoto {:.4}", tanimoto(&noisy, &fp));
            println!("{}", noisy.to_hex());
        }
        Cmd::FormulaHyp { precursor, n, ppm } => {
            for h in formula_hypotheses(*precursor, *n, *ppm).map_err(|e| anyhow!(e))? {
                println!("{}\t{:.3}\t{}", h.formula, h.ppm, h.violations);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let code: CliError = e;
            ExitCode::from(code.exit_code() as u8)
        }
    }
}
