//! Token-length prediction from element counts.
//!
//! A conditional Normal `N(mu, sigma^2)` whose parameters `(mu, ln sigma)`
//! are boosted with regression trees fitted to natural gradients of the
//! negative log-likelihood.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chemgraph::{Formula, ELEMENT_SLOTS};

pub type Features = [f64; ELEMENT_SLOTS];

#[derive(Debug, Error)]
pub enum LengthModelError {
    #[error("need at least 10 training pairs, got {0}")]
    TooFewPairs(usize),
    #[error("lengths must be at least 1")]
    InvalidLength,
    #[error("invalid setting: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Element-count feature vector of a formula.
pub fn features(formula: &Formula) -> Features {
    let mut f = [0.0; ELEMENT_SLOTS];
    for (i, c) in formula.count_vector().iter().enumerate() {
        f[i] = *c as f64;
    }
    f
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub stages: usize,
    pub learning_rate: f64,
    pub depth: usize,
    pub min_leaf: usize,
    pub sigma_floor: f64,
    /// Stop after this many consecutive stages without validation improvement.
    pub patience: usize,
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            stages: 200,
            learning_rate: 0.05,
            depth: 3,
            min_leaf: 5,
            sigma_floor: 0.5,
            patience: 10,
            validation_fraction: 0.2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Tree {
    Leaf {
        value: f64,
    },
    Split {
        feature: usize,
        threshold: f64,
        left: Box<Tree>,
        right: Box<Tree>,
    },
}

impl Tree {
    pub fn predict(&self, x: &Features) -> f64 {
        match self {
            Tree::Leaf { value } => *value,
            Tree::Split {
                feature,
                threshold,
                left,
                right,
            } => {
                if x[*feature] <= *threshold {
                    left.predict(x)
                } else {
                    right.predict(x)
                }
            }
        }
    }

    /// Exact greedy least-squares tree.
    fn fit(xs: &[Features], ys: &[f64], idx: &mut [usize], depth: usize, min_leaf: usize) -> Tree {
        let n = idx.len();
        let mean = idx.iter().map(|&i| ys[i]).sum::<f64>() / n.max(1) as f64;
        if depth == 0 || n < 2 * min_leaf.max(1) {
            return Tree::Leaf { value: mean };
        }
        let total: f64 = idx.iter().map(|&i| ys[i]).sum();
        let total_sq: f64 = idx.iter().map(|&i| ys[i] * ys[i]).sum();
        let parent_sse = total_sq - total * total / n as f64;
        let mut best: Option<(f64, usize, f64)> = None;
        for f in 0..ELEMENT_SLOTS {
            idx.sort_by(|&a, &b| xs[a][f].total_cmp(&xs[b][f]));
            let mut left_sum = 0.0;
            let mut left_sq = 0.0;
            for k in 0..n - 1 {
                let y = ys[idx[k]];
                left_sum += y;
                left_sq += y * y;
                let (xa, xb) = (xs[idx[k]][f], xs[idx[k + 1]][f]);
                let nl = k + 1;
                let nr = n - nl;
                if xa == xb || nl < min_leaf || nr < min_leaf {
                    continue;
                }
                let right_sum = total - left_sum;
                let right_sq = total_sq - left_sq;
                let sse = (left_sq - left_sum * left_sum / nl as f64) + (right_sq - right_sum * right_sum / nr as f64);
                if best.is_none_or(|(b, _, _)| sse < b - 1e-12) {
                    best = Some((sse, f, 0.5 * (xa + xb)));
                }
            }
        }
        match best {
            Some((sse, feature, threshold)) if sse < parent_sse - 1e-12 => {
                let (mut l, mut r): (Vec<usize>, Vec<usize>) = idx.iter().partition(|&&i| xs[i][feature] <= threshold);
                Tree::Split {
                    feature,
                    threshold,
                    left: Box::new(Tree::fit(xs, ys, &mut l, depth - 1, min_leaf)),
                    right: Box::new(Tree::fit(xs, ys, &mut r, depth - 1, min_leaf)),
                }
            }
            _ => Tree::Leaf { value: mean },
        }
    }
}

/// Fitted conditional Normal over token lengths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthModel {
    pub mu0: f64,
    pub log_sigma0: f64,
    pub learning_rate: f64,
    pub sigma_floor: f64,
    pub mu_trees: Vec<Tree>,
    pub log_sigma_trees: Vec<Tree>,
}

fn normal_nll(y: f64, mu: f64, sigma: f64) -> f64 {
    let z = (y - mu) / sigma;
    0.5 * z * z + sigma.ln() + 0.5 * (2.0 * std::f64::consts::PI).ln()
}

impl LengthModel {
    fn raw(&self, x: &Features) -> (f64, f64) {
        let mut mu = self.mu0;
        let mut ls = self.log_sigma0;
        for (tm, ts) in self.mu_trees.iter().zip(&self.log_sigma_trees) {
            mu += self.learning_rate * tm.predict(x);
            ls += self.learning_rate * ts.predict(x);
        }
        (mu, ls)
    }

    pub fn predict_features(&self, x: &Features) -> (f64, f64) {
        let (mu, ls) = self.raw(x);
        (mu, ls.exp().max(self.sigma_floor))
    }

    pub fn predict(&self, formula: &Formula) -> (f64, f64) {
        self.predict_features(&features(formula))
    }

    pub fn stages(&self) -> usize {
        self.mu_trees.len()
    }

    /// Mean Normal NLL over `(features, length)` pairs.
    pub fn mean_nll(&self, pairs: &[(Features, f64)]) -> f64 {
        pairs
            .iter()
            .map(|(x, y)| {
                let (mu, s) = self.predict_features(x);
                normal_nll(*y, mu, s)
            })
            .sum::<f64>()
            / pairs.len().max(1) as f64
    }

    /// Draw from `N(mu, lambda * sigma^2)`, round, clip to `[l_min, l_max]`.
    pub fn sample_length<R: Rng + ?Sized>(
        &self,
        formula: &Formula,
        lambda: f64,
        l_min: usize,
        l_max: usize,
        rng: &mut R,
    ) -> usize {
        let (mu, sigma) = self.predict(formula);
        sample_clipped(mu, sigma, lambda, l_min, l_max, rng)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("length model serializes")
    }

    pub fn save(&self, path: &Path) -> Result<(), LengthModelError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, LengthModelError> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

pub(crate) fn sample_clipped<R: Rng + ?Sized>(
    mu: f64,
    sigma: f64,
    lambda: f64,
    l_min: usize,
    l_max: usize,
    rng: &mut R,
) -> usize {
    assert!(l_min <= l_max, "l_min must not exceed l_max");
    let draw = if lambda > 0.0 {
        Normal::new(mu, lambda.sqrt() * sigma).expect("positive scale").sample(rng)
    } else {
        mu
    };
    let r = draw.round();
    if r.is_nan() || r <= l_min as f64 {
        l_min
    } else if r >= l_max as f64 {
        l_max
    } else {
        r as usize
    }
}

/// Fit by natural-gradient boosting with early stopping on a held-out split.
pub fn fit_length_model(pairs: &[(Features, usize)], cfg: &FitConfig) -> Result<LengthModel, LengthModelError> {
    if pairs.len() < 10 {
        return Err(LengthModelError::TooFewPairs(pairs.len()));
    }
    if pairs.iter().any(|p| p.1 == 0) {
        return Err(LengthModelError::InvalidLength);
    }
    if !(0.0..1.0).contains(&cfg.validation_fraction) || cfg.sigma_floor <= 0.0 || cfg.learning_rate <= 0.0 {
        return Err(LengthModelError::InvalidConfig("fraction, floor or learning rate out of range".into()));
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let n_val = ((pairs.len() as f64 * cfg.validation_fraction).round() as usize).min(pairs.len() - 2);
    let (val_idx, train_idx) = order.split_at(n_val);
    let xs: Vec<Features> = train_idx.iter().map(|&i| pairs[i].0).collect();
    let ys: Vec<f64> = train_idx.iter().map(|&i| pairs[i].1 as f64).collect();
    let val: Vec<(Features, f64)> = val_idx.iter().map(|&i| (pairs[i].0, pairs[i].1 as f64)).collect();

    let n = ys.len() as f64;
    let mean = ys.iter().sum::<f64>() / n;
    let std = (ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n).sqrt();
    let mut model = LengthModel {
        mu0: mean,
        log_sigma0: std.max(cfg.sigma_floor).ln(),
        learning_rate: cfg.learning_rate,
        sigma_floor: cfg.sigma_floor,
        mu_trees: Vec::new(),
        log_sigma_trees: Vec::new(),
    };
    let mut mu = vec![model.mu0; ys.len()];
    let mut ls = vec![model.log_sigma0; ys.len()];
    let mut val_mu = vec![model.mu0; val.len()];
    let mut val_ls = vec![model.log_sigma0; val.len()];
    let val_nll = |m: &[f64], l: &[f64]| -> f64 {
        val.iter()
            .enumerate()
            .map(|(i, (_, y))| normal_nll(*y, m[i], l[i].exp().max(cfg.sigma_floor)))
            .sum::<f64>()
            / val.len().max(1) as f64
    };
    let mut best = (val_nll(&val_mu, &val_ls), 0usize);
    let mut since_best = 0;
    let mut all_idx: Vec<usize> = (0..ys.len()).collect();
    for stage in 1..=cfg.stages {
        // negative natural gradient of the NLL in (mu, ln sigma)
        let mut g_mu = Vec::with_capacity(ys.len());
        let mut g_ls = Vec::with_capacity(ys.len());
        for i in 0..ys.len() {
            let s2 = (2.0 * ls[i]).exp();
            let r = ys[i] - mu[i];
            g_mu.push(r);
            g_ls.push(-(1.0 - r * r / s2) / 2.0);
        }
        let tm = Tree::fit(&xs, &g_mu, &mut all_idx, cfg.depth, cfg.min_leaf);
        let ts = Tree::fit(&xs, &g_ls, &mut all_idx, cfg.depth, cfg.min_leaf);
        for i in 0..ys.len() {
            mu[i] += cfg.learning_rate * tm.predict(&xs[i]);
            ls[i] += cfg.learning_rate * ts.predict(&xs[i]);
        }
        for (i, (x, _)) in val.iter().enumerate() {
            val_mu[i] += cfg.learning_rate * tm.predict(x);
            val_ls[i] += cfg.learning_rate * ts.predict(x);
        }
        model.mu_trees.push(tm);
        model.log_sigma_trees.push(ts);
        if val.is_empty() {
            best = (0.0, stage);
            continue;
        }
        let v = val_nll(&val_mu, &val_ls);
        if v < best.0 {
            best = (v, stage);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    model.mu_trees.truncate(best.1);
    model.log_sigma_trees.truncate(best.1);
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn feat(c: u32, n: u32) -> Features {
        let mut f = [0.0; ELEMENT_SLOTS];
        f[0] = c as f64;
        f[2] = n as f64;
        f
    }

    #[test]
    fn constant_targets_hit_the_floor() {
        let pairs: Vec<(Features, usize)> = (0..40).map(|i| (feat(i % 7, i % 3), 20)).collect();
        let m = fit_length_model(&pairs, &FitConfig::default()).unwrap();
        for p in &pairs {
            let (mu, s) = m.predict_features(&p.0);
            assert!((mu - 20.0).abs() < 1e-9);
            assert_eq!(s, 0.5);
        }
    }

    #[test]
    fn zero_stages_return_base_parameters() {
        let pairs: Vec<(Features, usize)> = (0..30).map(|i| (feat(i, 0), 5 + i as usize)).collect();
        let cfg = FitConfig {
            stages: 0,
            ..FitConfig::default()
        };
        let m = fit_length_model(&pairs, &cfg).unwrap();
        assert_eq!(m.stages(), 0);
        let a = m.predict_features(&feat(1, 0));
        let b = m.predict_features(&feat(25, 4));
        assert_eq!(a, b);
        assert_eq!(a, (m.mu0, m.log_sigma0.exp().max(0.5)));
    }

    #[test]
    fn too_few_pairs() {
        let pairs: Vec<(Features, usize)> = (0..9).map(|i| (feat(i, 0), 5)).collect();
        assert!(matches!(
            fit_length_model(&pairs, &FitConfig::default()),
            Err(LengthModelError::TooFewPairs(9))
        ));
    }

    #[test]
    fn sampling_rules() {
        let m = LengthModel {
            mu0: 100.0,
            log_sigma0: 0.0,
            learning_rate: 0.05,
            sigma_floor: 0.5,
            mu_trees: vec![],
            log_sigma_trees: vec![],
        };
        let f = Formula::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            assert_eq!(m.sample_length(&f, 1.0, 3, 64, &mut rng), 64);
        }
        let m2 = LengthModel { mu0: 12.4, ..m.clone() };
        for _ in 0..20 {
            assert_eq!(m2.sample_length(&f, 0.0, 3, 64, &mut rng), 12);
        }
    }

    #[test]
    fn sampled_spread_tracks_sigma() {
        let m = LengthModel {
            mu0: 30.0,
            log_sigma0: 3f64.ln(),
            learning_rate: 0.05,
            sigma_floor: 0.5,
            mu_trees: vec![],
            log_sigma_trees: vec![],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let xs: Vec<f64> = (0..10_000)
            .map(|_| m.sample_length(&Formula::new(), 1.0, 3, 100, &mut rng) as f64)
            .collect();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64).sqrt();
        // rounding adds variance 1/12
        let expected = (9.0f64 + 1.0 / 12.0).sqrt();
        assert!((sd - expected).abs() < 0.1 * expected, "{sd}");
    }

    #[test]
    fn json_round_trip() {
        let pairs: Vec<(Features, usize)> = (0..60).map(|i| (feat(i % 11, i % 2), 4 + 2 * (i % 11) as usize)).collect();
        let m = fit_length_model(&pairs, &FitConfig::default()).unwrap();
        let back: LengthModel = serde_json::from_str(&m.to_json()).unwrap();
        assert_eq!(back, m);
        assert!(m.stages() > 0);
    }
}
