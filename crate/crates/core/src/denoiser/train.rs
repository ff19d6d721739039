use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::net::{CondSource, DropCfg, Net};
use super::{ConditioningInput, DenoiserError, DenoiserModel, ModelConfig, NoiseSchedule};
use crate::autograd::{Mat, Real, Tape, Var};
use crate::tokenizer::{Specials, TokenId};

/// One training pair: clean token ids (with `[BOS]`/`[EOS]`) and conditioning.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample {
    pub tokens: Vec<TokenId>,
    pub cond: ConditioningInput,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub min_lr: f64,
    pub betas: (f64, f64),
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub ema_decay: f64,
    /// Use `min(ema_decay, (1 + n) / (10 + n))` after `n` updates.
    pub ema_warmup: bool,
    pub schedule: NoiseSchedule,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 3000,
            batch_size: 32,
            peak_lr: 3e-4,
            warmup_steps: 100,
            min_lr: 1e-8,
            betas: (0.9, 0.999),
            adam_eps: 1e-8,
            weight_decay: 0.0,
            grad_clip: 1.0,
            ema_decay: 0.9999,
            ema_warmup: true,
            schedule: NoiseSchedule::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), DenoiserError> {
        let bad = |m: &str| Err(DenoiserError::InvalidConfig(m.to_string()));
        if self.steps > 0 && self.warmup_steps >= self.steps {
            return bad("warmup_steps must be below steps");
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2 for antithetic pairs");
        }
        if !(self.peak_lr > 0.0) || self.min_lr < 0.0 || self.min_lr > self.peak_lr {
            return bad("learning rates out of range");
        }
        if !(0.0..1.0).contains(&self.betas.0) || !(0.0..1.0).contains(&self.betas.1) {
            return bad("betas must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return bad("ema_decay must lie in [0, 1]");
        }
        if !(self.grad_clip > 0.0) {
            return bad("grad_clip must be positive");
        }
        self.schedule.validate()
    }
}

/// Learning rate for 1-based update `step`: linear warmup to the peak, then
/// cosine decay to `min_lr` at `steps`.
pub fn lr_at(tc: &TrainConfig, step: usize) -> f64 {
    if tc.warmup_steps > 0 && step <= tc.warmup_steps {
        return tc.peak_lr * step as f64 / tc.warmup_steps as f64;
    }
    let span = tc.steps.saturating_sub(tc.warmup_steps).max(1) as f64;
    let frac = ((step - tc.warmup_steps) as f64 / span).min(1.0);
    tc.min_lr + (tc.peak_lr - tc.min_lr) * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Mat<f32>>,
    pub v: Vec<Mat<f32>>,
}

/// Optimizer progress; `step` counts completed updates.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub step: usize,
    pub adam: AdamState,
}

impl TrainState {
    pub fn new(model: &DenoiserModel) -> Self {
        let zeros = || model.params.mats.iter().map(|m| Mat::zeros(m.rows, m.cols)).collect();
        TrainState {
            step: 0,
            adam: AdamState { m: zeros(), v: zeros() },
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    /// `(step, loss, learning rate, pre-clip gradient norm)`.
    pub steps: Vec<(usize, f64, f64, f64)>,
    /// Batches in which no position was masked.
    pub empty_batches: usize,
}

/// Antithetic times for `n` examples: `(u, 1-u)` pairs, mapped into
/// `[eps, 1]`.
fn antithetic_times<R: Rng + ?Sized>(n: usize, eps: f64, rng: &mut R) -> Vec<f64> {
    let mut ts = Vec::with_capacity(n);
    while ts.len() < n {
        let u: f64 = rng.random();
        ts.push(eps + (1.0 - eps) * u);
        if ts.len() < n {
            ts.push(eps + (1.0 - eps) * (1.0 - u));
        }
    }
    ts
}

/// Record the masked-token NLL of a corrupted batch on `tape`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn loss_on_tape<T: Real, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    lay: &super::Layout,
    src: &[Mat<T>],
    specials: Specials,
    batch: &[&TrainExample],
    schedule: &NoiseSchedule,
    training: bool,
    rng: &mut R,
) -> (Var, usize) {
    let ts = antithetic_times(batch.len(), schedule.sampling_epsilon, rng);
    let mut noisy = Vec::with_capacity(batch.len());
    for (ex, &t) in batch.iter().zip(&ts) {
        let mut ids = ex.tokens.clone();
        let keep = schedule.alpha(t).expect("t lies in [eps, 1]");
        super::corrupt_ids(&mut ids, 1.0 - keep, specials, rng);
        noisy.push(ids);
    }
    let lmax = noisy.iter().map(|s| s.len()).max().unwrap_or(0);
    let mut targets = vec![None; batch.len() * lmax];
    let mut count = 0;
    for (i, (ex, ns)) in batch.iter().zip(&noisy).enumerate() {
        for (j, (&orig, &cur)) in ex.tokens.iter().zip(ns).enumerate() {
            if cur == specials.mask && orig != specials.pad {
                targets[i * lmax + j] = Some(orig as usize);
                count += 1;
            }
        }
    }
    let drop = training.then_some(DropCfg {
        p: cfg.dropout,
        p_fp: cfg.cond_dropout_fp,
    });
    let conds: Vec<&ConditioningInput> = batch.iter().map(|e| &e.cond).collect();
    let mut net = Net::new(cfg, lay, src, true);
    let logits = net.logits(tape, &noisy, CondSource::PerExample(&conds), drop, rng);
    (tape.masked_nll(logits, &targets), count)
}

/// Masked-token NLL (global mean) of one randomly corrupted batch with the
/// raw weights in training mode. Zero when nothing was masked.
pub fn mdlm_loss<R: Rng + ?Sized>(
    model: &DenoiserModel,
    batch: &[TrainExample],
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<f64, DenoiserError> {
    if batch.len() < 2 {
        return Err(DenoiserError::ShapeMismatch("batch needs at least two examples".into()));
    }
    let refs: Vec<&TrainExample> = batch.iter().collect();
    check_examples(model, &refs)?;
    let mut tape = Tape::new();
    let (loss, _) = loss_on_tape(
        &mut tape,
        &model.config,
        &model.layout,
        &model.params.mats,
        model.specials,
        &refs,
        schedule,
        true,
        rng,
    );
    Ok(tape.value(loss).data[0] as f64)
}

fn check_examples(model: &DenoiserModel, batch: &[&TrainExample]) -> Result<(), DenoiserError> {
    let seqs: Vec<Vec<TokenId>> = batch.iter().map(|e| e.tokens.clone()).collect();
    model.check_seqs(&seqs)?;
    for e in batch {
        if e.tokens.contains(&model.specials.mask) {
            return Err(DenoiserError::ShapeMismatch("training sequence contains [MASK]".into()));
        }
        e.cond.validate(&model.config)?;
    }
    Ok(())
}

/// Per-step generator: identical for a given `(seed, step)` so resumed runs
/// draw the same batches as uninterrupted ones.
fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64);
    rng
}

/// Run AdamW updates from `state.step` up to `tc.steps`.
///
/// `on_step` sees each completed update and returns `false` to stop early.
/// A non-finite loss or gradient stops training before the offending update
/// is applied.
pub fn train(
    model: &mut DenoiserModel,
    state: &mut TrainState,
    data: &[TrainExample],
    tc: &TrainConfig,
    mut on_step: impl FnMut(&DenoiserModel, &TrainState, f64) -> bool,
) -> Result<TrainLog, DenoiserError> {
    tc.validate()?;
    let mut log = TrainLog::default();
    if state.step >= tc.steps {
        return Ok(log);
    }
    if data.len() < 2 {
        return Err(DenoiserError::ShapeMismatch("need at least two training examples".into()));
    }
    let all: Vec<&TrainExample> = data.iter().collect();
    check_examples(model, &all)?;
    let bs = tc.batch_size.min(data.len());
    while state.step < tc.steps {
        let step = state.step + 1;
        let mut rng = step_rng(tc.seed, step);
        let batch: Vec<&TrainExample> = sample(&mut rng, data.len(), bs).into_iter().map(|i| &data[i]).collect();
        let mut tape = Tape::new();
        let (loss, count) = loss_on_tape(
            &mut tape,
            &model.config,
            &model.layout,
            &model.params.mats,
            model.specials,
            &batch,
            &tc.schedule,
            true,
            &mut rng,
        );
        let loss_val = tape.value(loss).data[0] as f64;
        if count == 0 {
            log.empty_batches += 1;
        }
        if !loss_val.is_finite() {
            return Err(DenoiserError::NonFiniteLoss { step });
        }
        let mut grads: Vec<Option<Mat<f32>>> = vec![None; model.params.mats.len()];
        for (i, g) in tape.backward(loss) {
            grads[i] = Some(g);
        }
        drop(tape);
        let sq: f64 = grads
            .iter()
            .flatten()
            .flat_map(|g| g.data.iter())
            .map(|&x| (x as f64) * (x as f64))
            .sum();
        let norm = sq.sqrt();
        if !norm.is_finite() {
            return Err(DenoiserError::NonFiniteLoss { step });
        }
        let scale = if norm > tc.grad_clip { tc.grad_clip / norm } else { 1.0 };
        let lr = lr_at(tc, step);
        adamw_update(model, state, &grads, scale as f32, lr, tc, step);
        ema_update(model, tc, step);
        state.step = step;
        log.steps.push((step, loss_val, lr, norm));
        if !on_step(model, state, loss_val) {
            break;
        }
    }
    Ok(log)
}

fn adamw_update(
    model: &mut DenoiserModel,
    state: &mut TrainState,
    grads: &[Option<Mat<f32>>],
    scale: f32,
    lr: f64,
    tc: &TrainConfig,
    step: usize,
) {
    let (b1, b2) = (tc.betas.0 as f32, tc.betas.1 as f32);
    let bc1 = 1.0 - (tc.betas.0).powi(step as i32);
    let bc2 = 1.0 - (tc.betas.1).powi(step as i32);
    let lr = lr as f32;
    let wd = tc.weight_decay as f32;
    let eps = tc.adam_eps as f32;
    let (bc1, bc2) = (bc1 as f32, bc2 as f32);
    for (i, p) in model.params.mats.iter_mut().enumerate() {
        let m = &mut state.adam.m[i].data;
        let v = &mut state.adam.v[i].data;
        let g = grads[i].as_ref().map(|g| &g.data[..]);
        for k in 0..p.data.len() {
            let gk = g.map_or(0.0, |g| g[k] * scale);
            m[k] = b1 * m[k] + (1.0 - b1) * gk;
            v[k] = b2 * v[k] + (1.0 - b2) * gk * gk;
            let mh = m[k] / bc1;
            let vh = v[k] / bc2;
            p.data[k] -= lr * (mh / (vh.sqrt() + eps) + wd * p.data[k]);
        }
    }
}

/// Decay applied after update number `step` (1-based).
pub(crate) fn ema_decay_at(tc: &TrainConfig, step: usize) -> f64 {
    if tc.ema_warmup {
        tc.ema_decay.min((1.0 + step as f64) / (10.0 + step as f64))
    } else {
        tc.ema_decay
    }
}

fn ema_update(model: &mut DenoiserModel, tc: &TrainConfig, step: usize) {
    let d = ema_decay_at(tc, step) as f32;
    for (e, p) in model.ema.mats.iter_mut().zip(&model.params.mats) {
        for (x, &y) in e.data.iter_mut().zip(&p.data) {
            *x = d * *x + (1.0 - d) * y;
        }
    }
}
