//! Conditional masked diffusion language model.
//!
//! Sequences are corrupted by independently replacing content tokens with
//! `[MASK]`; a transformer conditioned on the molecular formula and a
//! fingerprint bit set learns to predict the original tokens.

mod checkpoint;
mod gradcheck;
mod net;
mod train;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{Mat, Tape};
use crate::chemgraph::{Fingerprint, Formula, ELEMENT_SLOTS};
use crate::tokenizer::{Specials, TokenId, TokenSequence};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use gradcheck::{gradient_check, linear_probe_check, GradCheckReport};
pub use net::{param_shapes, Layout};
pub use train::{
    lr_at, mdlm_loss, train, AdamState, TrainConfig, TrainExample, TrainLog, TrainState,
};

#[derive(Debug, Error)]
pub enum DenoiserError {
    #[error("t = {0} is outside [0, 1]")]
    Domain(f64),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("checkpoint does not match: {0}")]
    ConfigMismatch(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Log-linear schedule `alpha(t) = exp((1-t) ln a_max + t ln a_min)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub alpha_max: f64,
    pub alpha_min: f64,
    pub sampling_epsilon: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        NoiseSchedule {
            alpha_max: 1.0,
            alpha_min: 1e-3,
            sampling_epsilon: 1e-3,
        }
    }
}

impl NoiseSchedule {
    pub fn validate(&self) -> Result<(), DenoiserError> {
        if !(0.0 < self.alpha_min && self.alpha_min < self.alpha_max && self.alpha_max <= 1.0) {
            return Err(DenoiserError::InvalidConfig(format!(
                "need 0 < alpha_min < alpha_max <= 1, got {} and {}",
                self.alpha_min, self.alpha_max
            )));
        }
        Ok(())
    }

    pub fn alpha(&self, t: f64) -> Result<f64, DenoiserError> {
        if !(0.0..=1.0).contains(&t) {
            return Err(DenoiserError::Domain(t));
        }
        Ok(((1.0 - t) * self.alpha_max.ln() + t * self.alpha_min.ln()).exp())
    }
}

/// Default-schedule shorthand.
pub fn alpha(t: f64) -> Result<f64, DenoiserError> {
    NoiseSchedule::default().alpha(t)
}

/// Replace each content token with `[MASK]` with probability `1 - alpha(t)`.
/// `[BOS]`, `[EOS]` and `[PAD]` are never touched.
pub fn corrupt<R: Rng + ?Sized>(
    x0: &TokenSequence,
    t: f64,
    schedule: &NoiseSchedule,
    specials: Specials,
    rng: &mut R,
) -> Result<TokenSequence, DenoiserError> {
    let keep = schedule.alpha(t)?;
    let mut out = x0.clone();
    corrupt_ids(&mut out.ids, 1.0 - keep, specials, rng);
    Ok(out)
}

pub(crate) fn corrupt_ids<R: Rng + ?Sized>(ids: &mut [TokenId], p_mask: f64, specials: Specials, rng: &mut R) -> usize {
    let mut n = 0;
    for id in ids.iter_mut() {
        if *id == specials.bos || *id == specials.eos || *id == specials.pad {
            continue;
        }
        // one draw per content position keeps mask patterns reproducible
        let u: f64 = rng.random();
        if u < p_mask {
            *id = specials.mask;
            n += 1;
        }
    }
    n
}

/// Transformer and conditioner hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub dropout: f64,
    pub cond_dropout_fp: f64,
    pub n_elements: usize,
    pub max_count: usize,
    pub fp_bits: usize,
    pub fp_max_active: usize,
    pub fp_attn_layers: usize,
    pub fp_threshold: f64,
}

impl ModelConfig {
    pub fn full() -> Self {
        Self::preset(12, 768, 12, 3072, 256, 1880)
    }

    pub fn desk() -> Self {
        Self::preset(4, 128, 4, 512, 64, 256)
    }

    fn preset(n_layers: usize, d_model: usize, n_heads: usize, d_ff: usize, max_len: usize, vocab_size: usize) -> Self {
        ModelConfig {
            n_layers,
            d_model,
            n_heads,
            d_ff,
            max_len,
            vocab_size,
            dropout: 0.1,
            cond_dropout_fp: 0.25,
            n_elements: ELEMENT_SLOTS,
            max_count: 200,
            fp_bits: crate::chemgraph::FP_BITS,
            fp_max_active: 256,
            fp_attn_layers: 3,
            fp_threshold: 0.187,
        }
    }

    pub fn validate(&self) -> Result<(), DenoiserError> {
        let bad = |m: String| Err(DenoiserError::InvalidConfig(m));
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.max_len < 3 {
            return bad("max_len must be at least 3".into());
        }
        if self.vocab_size < 5 {
            return bad("vocab_size must exceed the special tokens".into());
        }
        if !(0.0..1.0).contains(&self.dropout) || !(0.0..=1.0).contains(&self.cond_dropout_fp) {
            return bad("dropout probabilities out of range".into());
        }
        if self.n_elements != ELEMENT_SLOTS {
            return bad(format!("n_elements must be {ELEMENT_SLOTS}"));
        }
        if self.fp_bits == 0 || self.fp_max_active == 0 {
            return bad("fingerprint sizes must be positive".into());
        }
        Ok(())
    }
}

/// Formula counts plus a capped, sorted list of active fingerprint bits.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConditioningInput {
    pub formula_counts: Vec<u32>,
    pub active_bits: Vec<u32>,
}

impl ConditioningInput {
    /// Keeps the `max_active` lowest active bits.
    pub fn new(formula: &Formula, fp: &Fingerprint, max_active: usize) -> Self {
        ConditioningInput {
            formula_counts: formula.count_vector().to_vec(),
            active_bits: fp.active().into_iter().take(max_active).map(|b| b as u32).collect(),
        }
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<(), DenoiserError> {
        if self.formula_counts.len() != cfg.n_elements {
            return Err(DenoiserError::ShapeMismatch(format!(
                "{} formula slots, expected {}",
                self.formula_counts.len(),
                cfg.n_elements
            )));
        }
        if self.active_bits.len() > cfg.fp_max_active {
            return Err(DenoiserError::ShapeMismatch(format!(
                "{} active bits exceed the cap {}",
                self.active_bits.len(),
                cfg.fp_max_active
            )));
        }
        if self.active_bits.windows(2).any(|w| w[0] >= w[1])
            || self.active_bits.last().is_some_and(|&b| b as usize >= cfg.fp_bits)
        {
            return Err(DenoiserError::ShapeMismatch(
                "active bits must be strictly increasing and in range".into(),
            ));
        }
        Ok(())
    }
}

/// Inference never draws from this; it only satisfies the signature.
fn idle_rng() -> rand_chacha::ChaCha8Rng {
    rand::SeedableRng::seed_from_u64(0)
}

/// Anything that maps partially masked sequences to per-position logits.
pub trait Denoiser {
    /// Precomputed conditioning reused across sampling steps.
    type Context;

    fn vocab_size(&self) -> usize;
    fn max_len(&self) -> usize;
    fn condition(&self, cond: &ConditioningInput) -> Self::Context;
    /// One `[len, vocab]` logit matrix per input sequence.
    fn logits(&self, ctx: &Self::Context, seqs: &[Vec<TokenId>]) -> Vec<Mat<f32>>;
}

/// Named parameter matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    pub names: Vec<String>,
    pub mats: Vec<Mat<f32>>,
}

impl ParamSet {
    pub fn count(&self) -> usize {
        self.mats.iter().map(|m| m.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.mats.iter().all(|m| m.data.iter().all(|x| x.is_finite()))
    }
}

/// Trained weights, their moving average and the vocabulary they belong to.
#[derive(Debug, Clone)]
pub struct DenoiserModel {
    pub config: ModelConfig,
    pub specials: Specials,
    pub vocab_hash: String,
    pub params: ParamSet,
    pub ema: ParamSet,
    layout: Layout,
}

/// Cached conditioning sequence for inference.
#[derive(Debug, Clone)]
pub struct CondContext {
    z: Mat<f32>,
    key_mask: Vec<bool>,
}

impl DenoiserModel {
    /// Normal(0, 0.02) weights, zero biases, unit layer-norm gains.
    pub fn init<R: Rng + ?Sized>(
        config: ModelConfig,
        specials: Specials,
        vocab_hash: &str,
        rng: &mut R,
    ) -> Result<Self, DenoiserError> {
        config.validate()?;
        let params: ParamSet = net::init_params::<f32, _>(&config, rng).into();
        Ok(Self::from_parts(config, specials, vocab_hash.to_string(), params.clone(), params))
    }

    pub(crate) fn from_parts(
        config: ModelConfig,
        specials: Specials,
        vocab_hash: String,
        params: ParamSet,
        ema: ParamSet,
    ) -> Self {
        let layout = Layout::new(&config);
        DenoiserModel {
            config,
            specials,
            vocab_hash,
            params,
            ema,
            layout,
        }
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    /// Logits for a batch with per-example conditioning. `training` enables
    /// dropout and fingerprint-condition dropout drawn from `rng`; the raw
    /// (non-averaged) weights are used in both modes.
    pub fn forward_logits<R: Rng + ?Sized>(
        &self,
        seqs: &[Vec<TokenId>],
        conds: &[ConditioningInput],
        training: bool,
        rng: &mut R,
    ) -> Result<Vec<Mat<f32>>, DenoiserError> {
        self.forward_with(&self.params, seqs, conds, training, rng)
    }

    /// Same as [`forward_logits`](Self::forward_logits) in inference mode
    /// with the averaged weights.
    pub fn forward_logits_ema(
        &self,
        seqs: &[Vec<TokenId>],
        conds: &[ConditioningInput],
    ) -> Result<Vec<Mat<f32>>, DenoiserError> {
        let mut rng = idle_rng();
        self.forward_with(&self.ema, seqs, conds, false, &mut rng)
    }

    fn forward_with<R: Rng + ?Sized>(
        &self,
        params: &ParamSet,
        seqs: &[Vec<TokenId>],
        conds: &[ConditioningInput],
        training: bool,
        rng: &mut R,
    ) -> Result<Vec<Mat<f32>>, DenoiserError> {
        if seqs.len() != conds.len() {
            return Err(DenoiserError::ShapeMismatch(format!(
                "{} sequences but {} conditions",
                seqs.len(),
                conds.len()
            )));
        }
        self.check_seqs(seqs)?;
        for c in conds {
            c.validate(&self.config)?;
        }
        let mut tape = Tape::new();
        let mut ctx = net::Net::new(&self.config, &self.layout, &params.mats, false);
        let drop = if training {
            Some(net::DropCfg {
                p: self.config.dropout,
                p_fp: self.config.cond_dropout_fp,
            })
        } else {
            None
        };
        let refs: Vec<&ConditioningInput> = conds.iter().collect();
        let logits = ctx.logits(&mut tape, seqs, net::CondSource::PerExample(&refs), drop, rng);
        Ok(net::split_rows(tape.take_value(logits), seqs))
    }

    fn check_seqs(&self, seqs: &[Vec<TokenId>]) -> Result<(), DenoiserError> {
        for s in seqs {
            if s.is_empty() || s.len() > self.config.max_len {
                return Err(DenoiserError::ShapeMismatch(format!(
                    "sequence length {} outside 1..={}",
                    s.len(),
                    self.config.max_len
                )));
            }
            if let Some(&bad) = s.iter().find(|&&t| t as usize >= self.config.vocab_size) {
                return Err(DenoiserError::ShapeMismatch(format!("token id {bad} out of range")));
            }
        }
        Ok(())
    }
}

impl Denoiser for DenoiserModel {
    type Context = CondContext;

    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn max_len(&self) -> usize {
        self.config.max_len
    }

    fn condition(&self, cond: &ConditioningInput) -> CondContext {
        let mut tape = Tape::new();
        let mut net = net::Net::new(&self.config, &self.layout, &self.ema.mats, false);
        let mut rng = idle_rng();
        let (z, key_mask) = net.encode_cond(&mut tape, &[cond], None, &mut rng);
        CondContext {
            z: tape.take_value(z),
            key_mask,
        }
    }

    fn logits(&self, ctx: &CondContext, seqs: &[Vec<TokenId>]) -> Vec<Mat<f32>> {
        if seqs.is_empty() {
            return Vec::new();
        }
        let mut tape = Tape::new();
        let mut net = net::Net::new(&self.config, &self.layout, &self.ema.mats, false);
        let mut rng = idle_rng();
        let logits = net.logits(
            &mut tape,
            seqs,
            net::CondSource::Shared(&ctx.z, &ctx.key_mask),
            None,
            &mut rng,
        );
        net::split_rows(tape.take_value(logits), seqs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn alpha_examples() {
        assert_eq!(alpha(0.0).unwrap(), 1.0);
        assert!((alpha(1.0).unwrap() - 1e-3).abs() < 1e-15);
        assert!((alpha(0.5).unwrap() - 10f64.powf(-1.5)).abs() < 1e-12);
        assert!(alpha(-0.1).is_err());
        assert!(alpha(1.5).is_err());
        // log-alpha is affine in t
        let (a, b, c) = (
            alpha(0.2).unwrap().ln(),
            alpha(0.5).unwrap().ln(),
            alpha(0.8).unwrap().ln(),
        );
        assert!(((a + c) / 2.0 - b).abs() < 1e-12);
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
    fn corrupt_respects_specials_and_t0() {
        let x0 = TokenSequence {
            ids: vec![1, 5, 6, 7, 2, 0, 0],
            atom_spans: vec![vec![]; 7],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = NoiseSchedule::default();
        assert_eq!(corrupt(&x0, 0.0, &s, sp(), &mut rng).unwrap(), x0);
        let y = corrupt(&x0, 1.0, &s, sp(), &mut rng).unwrap();
        assert_eq!((y.ids[0], y.ids[4], y.ids[5], y.ids[6]), (1, 2, 0, 0));
        assert_eq!(y.atom_spans, x0.atom_spans);
    }

    #[test]
    fn corrupt_is_reproducible() {
        let x0 = TokenSequence {
            ids: vec![1, 4, 5, 6, 7, 8, 9, 2],
            atom_spans: vec![vec![]; 8],
        };
        let s = NoiseSchedule::default();
        let a = corrupt(&x0, 0.5, &s, sp(), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = corrupt(&x0, 0.5, &s, sp(), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    fn tiny() -> ModelConfig {
        let mut c = ModelConfig::desk();
        c.n_layers = 2;
        c.d_model = 16;
        c.n_heads = 2;
        c.d_ff = 32;
        c.max_len = 16;
        c.vocab_size = 10;
        c.fp_bits = 64;
        c.fp_max_active = 16;
        c.max_count = 12;
        c
    }

    fn cond(bits: &[u32]) -> ConditioningInput {
        let mut f = vec![0u32; 30];
        f[0] = 3;
        f[1] = 8;
        f[3] = 1;
        ConditioningInput {
            formula_counts: f,
            active_bits: bits.to_vec(),
        }
    }

    fn examples() -> Vec<TrainExample> {
        vec![
            TrainExample {
                tokens: vec![1, 4, 5, 6, 7, 2],
                cond: cond(&[1, 9, 40]),
            },
            TrainExample {
                tokens: vec![1, 8, 9, 2],
                cond: cond(&[]),
            },
            TrainExample {
                tokens: vec![1, 5, 5, 9, 4, 8, 6, 2],
                cond: cond(&[0, 2, 3, 63]),
            },
        ]
    }

    #[test]
    fn gradient_check_tiny_model() {
        for seed in 0..2 {
            let r = gradient_check(&tiny(), sp(), &examples(), 200, seed);
            assert!(r.masked_positions > 0);
            assert!(r.max_abs_grad > 0.0);
            assert!(r.max_rel_error <= 1e-4, "seed {seed}: {r:?}");
        }
    }

    #[test]
    fn uniform_model_loss_is_log_vocab() {
        let mut m = DenoiserModel::init(tiny(), sp(), "h", &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let l = m.layout().clone();
        for i in [l.out_w_index(), l.out_b_index()] {
            m.params.mats[i].data.iter_mut().for_each(|x| *x = 0.0);
        }
        let loss = mdlm_loss(&m, &examples(), &NoiseSchedule::default(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert!((loss - (10f64).ln()).abs() < 1e-6, "{loss}");
    }

    #[test]
    fn masked_fingerprint_equals_empty_fingerprint() {
        let mut cfg = tiny();
        cfg.dropout = 0.0;
        cfg.cond_dropout_fp = 1.0;
        let m = DenoiserModel::init(cfg, sp(), "h", &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let seqs = vec![vec![1, 4, 3, 3, 2]];
        let dropped = m
            .forward_logits(&seqs, &[cond(&[5, 6, 7])], true, &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        let empty = m
            .forward_logits(&seqs, &[cond(&[])], false, &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        assert_eq!(dropped, empty);
    }

    #[test]
    fn bit_order_does_not_matter() {
        let m = DenoiserModel::init(tiny(), sp(), "h", &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let seqs = vec![vec![1, 4, 3, 5, 2]];
        let run = |bits: &[u32]| {
            let c = cond(bits);
            let mut tape = Tape::new();
            let mut net = net::Net::new(&m.config, &m.layout, &m.params.mats, false);
            let out = net.logits(&mut tape, &seqs, net::CondSource::PerExample(&[&c]), None, &mut idle_rng());
            tape.take_value(out)
        };
        let a = run(&[3, 17, 40, 41]);
        let b = run(&[41, 3, 40, 17]);
        for (x, y) in a.data.iter().zip(&b.data) {
            assert!((x - y).abs() < 1e-5);
        }
    }

    #[test]
    fn identical_rows_and_cached_condition_agree() {
        let m = DenoiserModel::init(tiny(), sp(), "h", &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let c = cond(&[2, 9]);
        let seqs = vec![vec![1, 4, 3, 5, 2], vec![1, 4, 3, 5, 2], vec![1, 3, 2]];
        let direct = m.forward_logits_ema(&seqs, &[c.clone(), c.clone(), c.clone()]).unwrap();
        assert_eq!(direct[0], direct[1]);
        let ctx = m.condition(&c);
        let cached = m.logits(&ctx, &seqs);
        for (a, b) in direct.iter().zip(&cached) {
            for (x, y) in a.data.iter().zip(&b.data) {
                assert!((x - y).abs() < 1e-5);
            }
        }
        // conditioning path is live
        let other = m.logits(&m.condition(&cond(&[11])), &seqs[..1]);
        assert_ne!(other[0], cached[0]);
    }

    #[test]
    fn presets_validate() {
        ModelConfig::full().validate().unwrap();
        ModelConfig::desk().validate().unwrap();
        let mut c = ModelConfig::desk();
        c.n_heads = 3;
        assert!(c.validate().is_err());
    }
}
