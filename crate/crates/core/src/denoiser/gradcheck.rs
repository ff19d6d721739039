use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::net::{init_params, Layout};
use super::train::loss_on_tape;
use super::{ModelConfig, NoiseSchedule, TrainExample};
use crate::autograd::{Mat, Tape};
use crate::tokenizer::Specials;

/// Denominator floor for relative errors, so coordinates whose true gradient
/// is (numerically) zero are not judged on round-off alone.
const REL_FLOOR: f64 = 1e-6;
const FD_STEP: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coords_checked: usize,
    /// Largest analytic gradient magnitude among checked coordinates.
    pub max_abs_grad: f64,
    /// Positions masked in the fixed corruption draw.
    pub masked_positions: usize,
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

/// Compare analytic gradients of the masked-token loss against central
/// finite differences at double precision.
///
/// Parameters are freshly initialized from `seed`. Corruption, dropout and
/// fingerprint dropout are drawn from a generator reset before every loss
/// evaluation, so the loss is a deterministic smooth function of the
/// parameters. Coordinates are sampled by first picking a parameter matrix
/// uniformly, so every component is exercised.
pub fn gradient_check(
    cfg: &ModelConfig,
    specials: Specials,
    batch: &[TrainExample],
    coords: usize,
    seed: u64,
) -> GradCheckReport {
    let mut init_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = init_params::<f64, _>(cfg, &mut init_rng).mats;
    // perturb gains and biases away from their symmetric initial values
    for m in params.iter_mut() {
        for x in m.data.iter_mut() {
            *x += init_rng.random_range(-0.05..0.05);
        }
    }
    let lay = Layout::new(cfg);
    let schedule = NoiseSchedule::default();
    let refs: Vec<&TrainExample> = batch.iter().collect();
    let loss_seed = seed.wrapping_add(0x5eed);

    let eval = |ps: &[Mat<f64>]| -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(loss_seed);
        let mut tape = Tape::new();
        let (l, _) = loss_on_tape(&mut tape, cfg, &lay, ps, specials, &refs, &schedule, true, &mut rng);
        tape.value(l).data[0]
    };

    let mut rng = ChaCha8Rng::seed_from_u64(loss_seed);
    let mut tape = Tape::new();
    let (loss, masked) = loss_on_tape(&mut tape, cfg, &lay, &params, specials, &refs, &schedule, true, &mut rng);
    let mut grads: Vec<Mat<f64>> = params.iter().map(|m| Mat::zeros(m.rows, m.cols)).collect();
    for (i, g) in tape.backward(loss) {
        grads[i] = g;
    }
    drop(tape);

    let mut pick = ChaCha8Rng::seed_from_u64(seed ^ 0xc0ffee);
    let mut worst: f64 = 0.0;
    let mut max_abs: f64 = 0.0;
    for _ in 0..coords {
        let pi = pick.random_range(0..params.len());
        let ci = pick.random_range(0..params[pi].len());
        let orig = params[pi].data[ci];
        params[pi].data[ci] = orig + FD_STEP;
        let up = eval(&params);
        params[pi].data[ci] = orig - FD_STEP;
        let down = eval(&params);
        params[pi].data[ci] = orig;
        let numeric = (up - down) / (2.0 * FD_STEP);
        let analytic = grads[pi].data[ci];
        worst = worst.max(rel_err(analytic, numeric));
        max_abs = max_abs.max(analytic.abs());
    }
    GradCheckReport {
        max_rel_error: worst,
        coords_checked: coords,
        max_abs_grad: max_abs,
        masked_positions: masked,
    }
}

/// One-weight softmax probe `logits = [w x, 0]`, target class 0: returns
/// `(analytic, finite-difference)` derivatives of the NLL in `w`.
pub fn linear_probe_check(w: f64, x: f64) -> (f64, f64) {
    let eval = |w: f64| -> (f64, Option<f64>) {
        let mut t: Tape<f64> = Tape::new();
        let wv = t.param(0, Mat::from_vec(1, 1, vec![w]));
        let xv = t.input(Mat::from_vec(1, 2, vec![x, 0.0]));
        let logits = t.matmul(wv, xv, false);
        let loss = t.masked_nll(logits, &[Some(0)]);
        let g = t.backward(loss).first().map(|(_, g)| g.data[0]);
        (t.value(loss).data[0], g)
    };
    let analytic = eval(w).1.unwrap_or(0.0);
    let numeric = (eval(w + FD_STEP).0 - eval(w - FD_STEP).0) / (2.0 * FD_STEP);
    (analytic, numeric)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::ConditioningInput;

    #[test]
    fn linear_probe_agrees() {
        for (w, x) in [(0.3, 1.5), (-2.0, 0.7), (0.0, -1.0)] {
            let (a, n) = linear_probe_check(w, x);
            assert!((a - n).abs() < 1e-8, "{a} vs {n}");
        }
    }

    #[test]
    fn no_masked_positions_give_zero_gradients() {
        let mut cfg = ModelConfig::desk();
        cfg.n_layers = 1;
        cfg.d_model = 8;
        cfg.n_heads = 2;
        cfg.d_ff = 8;
        cfg.vocab_size = 6;
        cfg.fp_bits = 16;
        cfg.fp_attn_layers = 1;
        let sp = Specials {
            pad: 0,
            bos: 1,
            eos: 2,
            mask: 3,
        };
        // only specials: nothing can be masked
        let ex = TrainExample {
            tokens: vec![1, 2],
            cond: ConditioningInput {
                formula_counts: vec![1; 30],
                active_bits: vec![3],
            },
        };
        let lay = Layout::new(&cfg);
        let params = init_params::<f64, _>(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).mats;
        let mut tape = Tape::new();
        let (loss, n) = loss_on_tape(
            &mut tape,
            &cfg,
            &lay,
            &params,
            sp,
            &[&ex, &ex],
            &NoiseSchedule::default(),
            true,
            &mut ChaCha8Rng::seed_from_u64(2),
        );
        assert_eq!(n, 0);
        assert_eq!(tape.value(loss).data[0], 0.0);
        for (_, g) in tape.backward(loss) {
            assert!(g.data.iter().all(|&x| x == 0.0));
        }
    }
}
