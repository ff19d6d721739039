//! Fragment-consistency scoring, targeted re-masking and multi-round
//! refinement of a candidate pool.

use std::time::Instant;

use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::chemgraph::{parse_smiles, Fingerprint, Formula};
use crate::denoiser::Denoiser;
use crate::fragmenter::{match_peaks, MatchConfig, MatchResult, ObservedSpectrum, SimConfig, SimulatedSpectrum, SpectrumCache};
use crate::lengthmodel::LengthModel;
use crate::sampler::{candidates_from_tokens, generate_batch, unmask, BatchOutcome, CandidatePool, GenerationConfig, Target};
use crate::tokenizer::{encode, Specials, TokenId, TokenSequence, Vocabulary};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum RefineError {
    #[error("token {token} refers to atom {atom} but the molecule has {n_atoms} atoms")]
    AlignmentMismatch { token: usize, atom: usize, n_atoms: usize },
    #[error("invalid refinement config: {0}")]
    InvalidConfig(String),
}

/// How renoising positions are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Masking {
    /// From fragment-consistency scores.
    Guided,
    /// Each content token independently with probability `p_max / 2`.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineConfig {
    pub rounds: usize,
    pub budget: usize,
    pub top_k: usize,
    pub variants: usize,
    pub gamma: f64,
    pub p_max: f64,
    pub masking: Masking,
    pub matching: MatchConfig,
    pub sim: SimConfig,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            rounds: 5,
            budget: 128,
            top_k: 12,
            variants: 8,
            gamma: 1.0,
            p_max: 0.75,
            masking: Masking::Guided,
            matching: MatchConfig::default(),
            sim: SimConfig::default(),
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<(), RefineError> {
        let bad = |m: &str| Err(RefineError::InvalidConfig(m.to_string()));
        if self.rounds == 0 {
            return bad("rounds must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.p_max) {
            return bad("p_max must lie in [0, 1]");
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return bad("gamma must be a finite non-negative number");
        }
        if !(self.matching.tol_ppm > 0.0) {
            return bad("tol_ppm must be positive");
        }
        Ok(())
    }

    /// Variants per refined candidate, clamped so that `top_k * variants <= budget`.
    pub fn effective_variants(&self) -> usize {
        if self.top_k == 0 || self.top_k * self.variants <= self.budget {
            return self.variants;
        }
        let m = self.budget / self.top_k;
        warn!(
            "top_k * variants = {} exceeds budget {}; clamping variants to {m}",
            self.top_k * self.variants,
            self.budget
        );
        m
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AtomScores {
    pub raw: Vec<f64>,
    pub normalized: Vec<f64>,
}

/// Sum over informative peaks of +1 (matched) or -gamma (hallucinated) for
/// every atom in the peak's fragment, then scale by the largest magnitude.
pub fn atom_scores(n_atoms: usize, sim: &SimulatedSpectrum, m: &MatchResult, gamma: f64) -> AtomScores {
    let mut raw = vec![0.0; n_atoms];
    let signed = m.matched.iter().map(|&i| (i, 1.0)).chain(m.hallucinated.iter().map(|&i| (i, -gamma)));
    for (i, delta) in signed {
        for &a in &sim.peaks[i].fragment.atoms {
            raw[a] += delta;
        }
    }
    let max = raw.iter().fold(0.0f64, |acc, x| acc.max(x.abs()));
    let normalized = if max > 0.0 {
        raw.iter().map(|x| x / max).collect()
    } else {
        vec![0.0; n_atoms]
    };
    AtomScores { raw, normalized }
}

/// Worst normalized score over the atoms a token covers; +1 for tokens
/// covering no atom (specials, bonds, ring digits, parentheses).
pub fn token_scores(seq: &TokenSequence, s: &AtomScores) -> Result<Vec<f64>, RefineError> {
    let n_atoms = s.normalized.len();
    seq.atom_spans
        .iter()
        .enumerate()
        .map(|(token, span)| {
            let mut worst = 1.0f64;
            for &atom in span {
                let v = *s
                    .normalized
                    .get(atom)
                    .ok_or(RefineError::AlignmentMismatch { token, atom, n_atoms })?;
                worst = worst.min(v);
            }
            Ok(worst)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskPlan {
    pub p_mask: Vec<f64>,
    pub token_scores: Vec<f64>,
}

pub fn mask_plan(token_scores: &[f64], p_max: f64) -> MaskPlan {
    MaskPlan {
        p_mask: token_scores
            .iter()
            .map(|&s| if s <= 0.0 { p_max * s.abs() } else { 0.0 })
            .collect(),
        token_scores: token_scores.to_vec(),
    }
}

/// Uniform plan over content tokens.
pub fn random_plan(seq: &TokenSequence, p: f64, specials: Specials) -> MaskPlan {
    MaskPlan {
        p_mask: seq.ids.iter().map(|&t| if specials.contains(t) { 0.0 } else { p }).collect(),
        token_scores: vec![0.0; seq.ids.len()],
    }
}

/// Consistency-guided plan for one candidate sequence.
pub fn guided_plan(
    seq: &TokenSequence,
    n_atoms: usize,
    sim: &SimulatedSpectrum,
    obs: &ObservedSpectrum,
    rc: &RefineConfig,
) -> Result<MaskPlan, RefineError> {
    let m = match_peaks(sim, obs, &rc.matching);
    let s = atom_scores(n_atoms, sim, &m, rc.gamma);
    Ok(mask_plan(&token_scores(seq, &s)?, rc.p_max))
}

/// Independently replace token `j` by `[MASK]` with probability `plan.p_mask[j]`.
pub fn apply_plan<R: Rng + ?Sized>(ids: &[TokenId], plan: &MaskPlan, specials: Specials, rng: &mut R) -> Vec<TokenId> {
    ids.iter()
        .zip(&plan.p_mask)
        .map(|(&t, &p)| {
            if !specials.contains(t) && p > 0.0 && rng.random::<f64>() < p {
                specials.mask
            } else {
                t
            }
        })
        .collect()
}

/// Mask per plan, unmask exactly the masked positions, decode. `None` when
/// the result does not parse.
#[allow(clippy::too_many_arguments)]
pub fn renoise_denoise<D: Denoiser, R: Rng + ?Sized>(
    model: &D,
    ctx: &D::Context,
    vocab: &Vocabulary,
    seq: &TokenSequence,
    plan: &MaskPlan,
    tau0: f64,
    target_fp: &Fingerprint,
    round: usize,
    rng: &mut R,
) -> (Option<crate::sampler::Candidate>, usize) {
    let specials = vocab.specials();
    let mut seqs = vec![apply_plan(&seq.ids, plan, specials, rng)];
    let calls = unmask(model, ctx, &mut seqs, tau0, specials, rng);
    let mut out = BatchOutcome::default();
    candidates_from_tokens(&seqs, vocab, target_fp, round, &mut out);
    (out.candidates.pop(), calls)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub round: usize,
    pub cumulative_candidates: usize,
    pub cumulative_seconds: f64,
    pub denoiser_calls: usize,
    pub top1_key: String,
    pub top1_score: f64,
    pub exact_match_flag: bool,
    /// Stratum of the top-1 candidate: 0 when its formula matches.
    pub top1_stratum: u8,
    pub invalid: usize,
}

pub const TRACE_HEADER: &str = "round,cumulative_candidates,cumulative_seconds,denoiser_calls,top1_key,top1_score,exact_match_flag";

impl TraceRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{:.6},{},{},{:.6},{}",
            self.round,
            self.cumulative_candidates,
            self.cumulative_seconds,
            self.denoiser_calls,
            self.top1_key,
            self.top1_score,
            u8::from(self.exact_match_flag)
        )
    }
}

/// Everything fixed for one target spectrum.
pub struct RefineTarget<'a, D: Denoiser> {
    pub ctx: &'a D::Context,
    pub formula: &'a Formula,
    /// Conditioning fingerprint; also the ranking reference.
    pub fp: &'a Fingerprint,
    pub obs: &'a ObservedSpectrum,
    /// Canonical key of the true structure, when known, for the trace.
    pub truth_key: Option<&'a str>,
}

#[derive(Debug)]
pub struct RefineOutcome {
    pub pool: CandidatePool,
    pub trace: Vec<TraceRow>,
    pub cache: SpectrumCache,
}

/// Round 1 draws `budget` fresh samples. Each later round renoises
/// `variants` copies of each of the `top_k` best candidates and fills the
/// rest of the budget with fresh samples.
#[allow(clippy::too_many_arguments)]
pub fn run_refinement<D: Denoiser, R: Rng + ?Sized>(
    model: &D,
    lengths: &LengthModel,
    vocab: &Vocabulary,
    target: &RefineTarget<'_, D>,
    gc: &GenerationConfig,
    rc: &RefineConfig,
    rng: &mut R,
) -> Result<RefineOutcome, RefineError> {
    rc.validate()?;
    let start = Instant::now();
    let specials = vocab.specials();
    let variants = rc.effective_variants();
    let gen_target = Target::<D> {
        ctx: target.ctx,
        formula: target.formula,
        fp: target.fp,
    };
    let mut pool = CandidatePool::new(target.fp.clone(), target.formula.clone());
    let mut cache = SpectrumCache::new();
    let mut trace = Vec::with_capacity(rc.rounds);

    for round in 1..=rc.rounds {
        let mut out = BatchOutcome::default();
        let mut renoised: Vec<Vec<TokenId>> = Vec::new();
        if round > 1 && variants > 0 {
            for parent in crate::sampler::rank_pool(&pool).into_iter().take(rc.top_k) {
                // Candidates that no longer tokenize within max_len cannot be renoised.
                let Ok(seq) = encode(&parent.smiles, vocab, model.max_len()) else { continue };
                let plan = match rc.masking {
                    Masking::Random => random_plan(&seq, rc.p_max / 2.0, specials),
                    Masking::Guided => {
                        let Ok(mol) = parse_smiles(&parent.smiles) else { continue };
                        let Ok(sim) = cache.get_or_simulate(&parent.key, &mol, &rc.sim) else { continue };
                        guided_plan(&seq, mol.atom_count(), &sim, target.obs, rc)?
                    }
                };
                for _ in 0..variants {
                    renoised.push(apply_plan(&seq.ids, &plan, specials, rng));
                }
            }
            out.denoiser_calls += unmask(model, target.ctx, &mut renoised, gc.tau0, specials, rng);
            candidates_from_tokens(&renoised, vocab, target.fp, round, &mut out);
        }
        let fresh = rc.budget.saturating_sub(renoised.len());
        let gen = generate_batch(model, &gen_target, lengths, vocab, gc, fresh, round, rng);
        out.denoiser_calls += gen.denoiser_calls;
        out.invalid += gen.invalid;
        out.candidates.extend(gen.candidates);

        for c in out.candidates {
            pool.insert(c);
        }
        let (top1_key, top1_score, top1_stratum) = match pool.best() {
            Some(b) => (b.key.clone(), b.score, pool.rank_key(b).0),
            None => (String::new(), 0.0, 1),
        };
        trace.push(TraceRow {
            round,
            cumulative_candidates: pool.len(),
            cumulative_seconds: start.elapsed().as_secs_f64(),
            denoiser_calls: out.denoiser_calls,
            exact_match_flag: target.truth_key.is_some_and(|k| k == top1_key),
            top1_key,
            top1_score,
            top1_stratum,
            invalid: out.invalid,
        });
    }
    Ok(RefineOutcome { pool, trace, cache })
}
