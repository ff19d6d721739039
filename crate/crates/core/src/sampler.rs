//! Confidence-ordered unmasking, candidate pools and ranking metrics.

use std::collections::{BTreeMap, HashSet};
use std::io::{self, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::chemgraph::{canonical_key, morgan_fingerprint, parse_smiles, tanimoto, ChemError, Fingerprint, Formula, Molecule, FP_BITS};
use crate::denoiser::Denoiser;
use crate::lengthmodel::LengthModel;
use crate::tokenizer::{decode, Specials, TokenId, Vocabulary};

/// Morgan radius used for candidate and target fingerprints.
pub const FP_RADIUS: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub batch: usize,
    pub lambda: f64,
    pub tau0: f64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            batch: 128,
            lambda: 1.0,
            tau0: 1.0,
        }
    }
}

fn gumbel<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    -(-u.ln()).ln()
}

/// Softmax over non-special tokens, as `f64`.
fn content_probs(row: &[f32], specials: Specials) -> Vec<f64> {
    let mut m = f64::NEG_INFINITY;
    for (v, &x) in row.iter().enumerate() {
        if !specials.contains(v as TokenId) {
            m = m.max(x as f64);
        }
    }
    let mut p: Vec<f64> = row
        .iter()
        .enumerate()
        .map(|(v, &x)| {
            if specials.contains(v as TokenId) {
                0.0
            } else {
                (x as f64 - m).exp()
            }
        })
        .collect();
    let z: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= z);
    p
}

fn draw<R: Rng + ?Sized>(p: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &x) in p.iter().enumerate() {
        if x > 0.0 {
            acc += x;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

/// Fill every `[MASK]` in `seqs`, one position per step per sequence.
///
/// At each step the masked positions are scored by `ln max_v pi + tau * g`
/// with Gumbel noise `g` and `tau = tau0 * remaining / initial`; the
/// highest-scoring position receives a token drawn from its categorical.
/// Sequences advance together in batched calls. Returns the number of
/// per-sequence denoiser evaluations.
pub fn unmask<D: Denoiser, R: Rng + ?Sized>(
    model: &D,
    ctx: &D::Context,
    seqs: &mut [Vec<TokenId>],
    tau0: f64,
    specials: Specials,
    rng: &mut R,
) -> usize {
    let initial: Vec<usize> = seqs.iter().map(|s| s.iter().filter(|&&t| t == specials.mask).count()).collect();
    let mut remaining = initial.clone();
    let mut calls = 0;
    loop {
        let active: Vec<usize> = (0..seqs.len()).filter(|&i| remaining[i] > 0).collect();
        if active.is_empty() {
            return calls;
        }
        let batch: Vec<Vec<TokenId>> = active.iter().map(|&i| seqs[i].clone()).collect();
        let logits = model.logits(ctx, &batch);
        calls += active.len();
        for (k, &i) in active.iter().enumerate() {
            let tau = tau0 * remaining[i] as f64 / initial[i] as f64;
            let mut best: Option<(f64, usize)> = None;
            for (pos, &t) in seqs[i].iter().enumerate() {
                if t != specials.mask {
                    continue;
                }
                let conf = content_probs(logits[k].row(pos), specials)
                    .into_iter()
                    .fold(0.0, f64::max);
                let score = conf.ln() + if tau > 0.0 { tau * gumbel(rng) } else { 0.0 };
                if best.is_none_or(|(b, _)| score > b) {
                    best = Some((score, pos));
                }
            }
            let (_, pos) = best.expect("sequence has a masked position");
            let p = content_probs(logits[k].row(pos), specials);
            seqs[i][pos] = draw(&p, rng) as TokenId;
            remaining[i] -= 1;
        }
    }
}

/// Generate one sequence of `l` content tokens. Exactly `l` denoiser calls.
pub fn generate<D: Denoiser, R: Rng + ?Sized>(
    model: &D,
    ctx: &D::Context,
    l: usize,
    tau0: f64,
    specials: Specials,
    rng: &mut R,
) -> (Vec<TokenId>, usize) {
    let mut seqs = vec![masked_template(l, specials)];
    let calls = unmask(model, ctx, &mut seqs, tau0, specials, rng);
    (seqs.pop().unwrap(), calls)
}

pub fn masked_template(l: usize, specials: Specials) -> Vec<TokenId> {
    let mut s = Vec::with_capacity(l + 2);
    s.push(specials.bos);
    s.extend(std::iter::repeat_n(specials.mask, l));
    s.push(specials.eos);
    s
}

/// A scored structure hypothesis.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    /// SMILES as decoded; atom order matches its own parse.
    pub smiles: String,
    pub key: String,
    pub formula: Formula,
    pub fp: Fingerprint,
    /// Tanimoto similarity to the target fingerprint.
    pub score: f64,
    pub round_created: usize,
}

impl Candidate {
    pub fn from_smiles(smiles: &str, target_fp: &Fingerprint, round: usize) -> Result<Self, ChemError> {
        let mol = parse_smiles(smiles)?;
        Self::from_molecule(smiles, &mol, target_fp, round)
    }

    pub fn from_molecule(smiles: &str, mol: &Molecule, target_fp: &Fingerprint, round: usize) -> Result<Self, ChemError> {
        if mol.atom_count() == 0 {
            return Err(ChemError::EmptyInput { offset: 0 });
        }
        let formula = mol.formula()?;
        let fp = morgan_fingerprint(mol, FP_RADIUS, target_fp.nbits());
        Ok(Candidate {
            smiles: smiles.to_string(),
            key: canonical_key(mol),
            score: tanimoto(&fp, target_fp),
            formula,
            fp,
            round_created: round,
        })
    }
}

/// Outcome of one generation batch.
#[derive(Debug, Clone, Default)]
pub struct BatchOutcome {
    pub candidates: Vec<Candidate>,
    pub invalid: usize,
    pub denoiser_calls: usize,
}

/// Conditioning shared by every call of one elucidation.
pub struct Target<'a, D: Denoiser> {
    pub ctx: &'a D::Context,
    pub formula: &'a Formula,
    pub fp: &'a Fingerprint,
}

/// Decode finished sequences into candidates, dropping the unparseable.
pub fn candidates_from_tokens(
    seqs: &[Vec<TokenId>],
    vocab: &Vocabulary,
    target_fp: &Fingerprint,
    round: usize,
    out: &mut BatchOutcome,
) {
    for s in seqs {
        let cand = decode(s, vocab)
            .ok()
            .and_then(|smi| Candidate::from_smiles(&smi, target_fp, round).ok());
        match cand {
            Some(c) => out.candidates.push(c),
            None => out.invalid += 1,
        }
    }
}

/// Sample `n` lengths from the length model and generate one sequence each.
#[allow(clippy::too_many_arguments)]
pub fn generate_batch<D: Denoiser, R: Rng + ?Sized>(
    model: &D,
    target: &Target<'_, D>,
    lengths: &LengthModel,
    vocab: &Vocabulary,
    gc: &GenerationConfig,
    n: usize,
    round: usize,
    rng: &mut R,
) -> BatchOutcome {
    let specials = vocab.specials();
    let l_max = model.max_len().saturating_sub(2).max(3);
    let mut seqs: Vec<Vec<TokenId>> = (0..n)
        .map(|_| {
            let l = lengths.sample_length(target.formula, gc.lambda, 3, l_max, rng);
            masked_template(l, specials)
        })
        .collect();
    let calls = unmask(model, target.ctx, &mut seqs, gc.tau0, specials, rng);
    let mut out = BatchOutcome {
        denoiser_calls: calls,
        ..BatchOutcome::default()
    };
    candidates_from_tokens(&seqs, vocab, target.fp, round, &mut out);
    out
}

/// Key-deduplicated candidates for one target.
#[derive(Debug, Clone)]
pub struct CandidatePool {
    candidates: Vec<Candidate>,
    keys: HashSet<String>,
    pub target_fp: Fingerprint,
    pub target_formula: Formula,
}

impl CandidatePool {
    pub fn new(target_fp: Fingerprint, target_formula: Formula) -> Self {
        CandidatePool {
            candidates: Vec::new(),
            keys: HashSet::new(),
            target_fp,
            target_formula,
        }
    }

    /// `false` (and no change) when the key is already present.
    pub fn insert(&mut self, c: Candidate) -> bool {
        if !self.keys.insert(c.key.clone()) {
            return false;
        }
        self.candidates.push(c);
        true
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn candidates(&self) -> &[Candidate] {
        &self.candidates
    }

    pub fn contains_key(&self, key: &str) -> bool {
        self.keys.contains(key)
    }

    /// Stratum (0 when the formula matches the target) and score of a candidate.
    pub fn rank_key(&self, c: &Candidate) -> (u8, f64) {
        (u8::from(c.formula != self.target_formula), c.score)
    }

    pub fn best(&self) -> Option<&Candidate> {
        self.ranked_refs().into_iter().next()
    }

    fn ranked_refs(&self) -> Vec<&Candidate> {
        let mut v: Vec<&Candidate> = self.candidates.iter().collect();
        v.sort_by(|a, b| {
            let (sa, xa) = self.rank_key(a);
            let (sb, xb) = self.rank_key(b);
            sa.cmp(&sb)
                .then(xb.total_cmp(&xa))
                .then(a.round_created.cmp(&b.round_created))
                .then_with(|| a.key.cmp(&b.key))
        });
        v
    }
}

/// Formula-matching candidates first, then by descending score, earlier
/// round, and key.
pub fn rank_pool(pool: &CandidatePool) -> Vec<Candidate> {
    pool.ranked_refs().into_iter().cloned().collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TopKMetrics {
    pub accuracy: BTreeMap<usize, f64>,
    pub tanimoto: BTreeMap<usize, f64>,
}

/// Exact-match accuracy and best Tanimoto (against the true structure's
/// fingerprint) within the first `k` ranked candidates.
pub fn top_k_metrics(ranked: &[Candidate], truth: &Molecule, ks: &[usize]) -> TopKMetrics {
    let key = canonical_key(truth);
    let tfp = morgan_fingerprint(truth, FP_RADIUS, ranked.first().map_or(FP_BITS, |c| c.fp.nbits()));
    let mut m = TopKMetrics::default();
    for &k in ks {
        let head = &ranked[..k.min(ranked.len())];
        let hit = head.iter().any(|c| c.key == key);
        let best = head.iter().map(|c| tanimoto(&c.fp, &tfp)).fold(0.0, f64::max);
        m.accuracy.insert(k, if hit { 1.0 } else { 0.0 });
        m.tanimoto.insert(k, best);
    }
    m
}

/// Ranked list as TSV: rank, smiles, key, formula, score, round_created.
pub fn write_ranked_tsv<W: Write>(ranked: &[Candidate], mut w: W) -> io::Result<()> {
    writeln!(w, "rank\tsmiles\tkey\tformula\tscore\tround_created")?;
    for (i, c) in ranked.iter().enumerate() {
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{:.6}\t{}",
            i + 1,
            c.smiles,
            c.key,
            c.formula,
            c.score,
            c.round_created
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Mat;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cand(smiles: &str, target: &Fingerprint, round: usize) -> Candidate {
        Candidate::from_smiles(smiles, target, round).unwrap()
    }

    fn fp_of(s: &str) -> Fingerprint {
        morgan_fingerprint(&parse_smiles(s).unwrap(), FP_RADIUS, FP_BITS)
    }

    #[test]
    fn stratified_ranking() {
        let tfp = fp_of("CCO");
        let tf = parse_smiles("CCO").unwrap().formula().unwrap();
        let mut pool = CandidatePool::new(tfp.clone(), tf);
        let mut wrong = cand("CCCO", &tfp, 1);
        wrong.score = 0.9;
        let mut right = cand("COC", &tfp, 1);
        right.score = 0.3;
        pool.insert(wrong);
        pool.insert(right);
        let r = rank_pool(&pool);
        assert_eq!(r[0].key, canonical_key(&parse_smiles("COC").unwrap()));
    }

    #[test]
    fn ties_prefer_earlier_rounds_and_dedup() {
        let tfp = fp_of("CCO");
        let tf = parse_smiles("CCO").unwrap().formula().unwrap();
        let mut pool = CandidatePool::new(tfp.clone(), tf);
        let mut a = cand("COC", &tfp, 3);
        a.score = 0.5;
        let mut b = cand("OCC", &tfp, 1);
        b.score = 0.5;
        assert!(pool.insert(a));
        assert!(pool.insert(b));
        assert!(!pool.insert(cand("C(O)C", &tfp, 4)));
        assert_eq!(pool.len(), 2);
        let r = rank_pool(&pool);
        assert_eq!(r[0].round_created, 1);
    }

    #[test]
    fn metrics() {
        let truth = parse_smiles("CCO").unwrap();
        let tfp = fp_of("CCO");
        let mut ranked: Vec<Candidate> = ["C", "CC", "CCC", "CCCC", "CCCCC", "CCCCCC"]
            .iter()
            .map(|s| cand(s, &tfp, 1))
            .collect();
        let m = top_k_metrics(&ranked, &truth, &[1, 10]);
        assert_eq!(m.accuracy[&10], 0.0);
        ranked.push(cand("OCC", &tfp, 1));
        let m = top_k_metrics(&ranked, &truth, &[1, 10]);
        assert_eq!((m.accuracy[&1], m.accuracy[&10]), (0.0, 1.0));
        assert_eq!(m.tanimoto[&10], 1.0);
        let m = top_k_metrics(&ranked[6..], &truth, &[1]);
        assert_eq!((m.accuracy[&1], m.tanimoto[&1]), (1.0, 1.0));
    }

    /// Logits favour token 4 + position parity; BOS/EOS/PAD/MASK are 0..4.
    struct Fixed;

    impl Denoiser for Fixed {
        type Context = ();

        fn vocab_size(&self) -> usize {
            6
        }

        fn max_len(&self) -> usize {
            16
        }

        fn condition(&self, _: &crate::denoiser::ConditioningInput) {}

        fn logits(&self, _: &(), seqs: &[Vec<TokenId>]) -> Vec<Mat<f32>> {
            seqs.iter()
                .map(|s| {
                    let mut m = Mat::zeros(s.len(), 6);
                    for r in 0..s.len() {
                        m.row_mut(r)[4 + r % 2] = 5.0;
                        // specials must never be sampled even if favoured
                        m.row_mut(r)[0] = 50.0;
                    }
                    m
                })
                .collect()
        }
    }

    fn sp() -> Specials {
        Specials {
            pad: 0,
            bos: 1,
            eos: 2,
            mask: 3,
        }
    }

    #[test]
    fn generate_takes_exactly_l_steps() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for l in [1, 3, 7] {
            let (s, calls) = generate(&Fixed, &(), l, 1.0, sp(), &mut rng);
            assert_eq!(calls, l);
            assert_eq!(s.len(), l + 2);
            assert!(s[1..=l].iter().all(|&t| t == 4 || t == 5));
        }
    }

    #[test]
    fn zero_temperature_is_seed_independent_for_peaked_logits() {
        struct Peaked;
        impl Denoiser for Peaked {
            type Context = ();
            fn vocab_size(&self) -> usize {
                6
            }
            fn max_len(&self) -> usize {
                16
            }
            fn condition(&self, _: &crate::denoiser::ConditioningInput) {}
            fn logits(&self, _: &(), seqs: &[Vec<TokenId>]) -> Vec<Mat<f32>> {
                seqs.iter()
                    .map(|s| {
                        let mut m = Mat::zeros(s.len(), 6);
                        for r in 0..s.len() {
                            m.row_mut(r)[4 + r % 2] = 80.0 + r as f32;
                        }
                        m
                    })
                    .collect()
            }
        }
        let a = generate(&Peaked, &(), 5, 0.0, sp(), &mut ChaCha8Rng::seed_from_u64(1)).0;
        let b = generate(&Peaked, &(), 5, 0.0, sp(), &mut ChaCha8Rng::seed_from_u64(2)).0;
        assert_eq!(a, b);
        assert_eq!(a, vec![1, 5, 4, 5, 4, 5, 2]);
    }

    #[test]
    fn tsv_layout() {
        let tfp = fp_of("CCO");
        let mut buf = Vec::new();
        write_ranked_tsv(&[cand("OCC", &tfp, 2)], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "rank\tsmiles\tkey\tformula\tscore\tround_created");
        assert_eq!(lines[1], "1\tOCC\tCCO\tC2H6O\t1.000000\t2");
    }
}
