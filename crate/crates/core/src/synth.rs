//! Small random molecules for tests, demos and desk-scale benchmarks.
//!
//! Molecules are random trees of C, N and O with occasional double bonds and
//! at most one ring substituent, emitted as canonical SMILES.

use std::collections::HashSet;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::chemgraph::{canonical_key, parse_smiles};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub min_atoms: usize,
    pub max_atoms: usize,
    pub double_bond_rate: f64,
    pub ring_rate: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            min_atoms: 4,
            max_atoms: 10,
            double_bond_rate: 0.15,
            ring_rate: 0.25,
        }
    }
}

#[derive(Clone, Copy)]
enum Kind {
    Atom(&'static str, u8),
    Ring(&'static str),
}

struct Node {
    kind: Kind,
    free: u8,
    children: Vec<(usize, u8)>,
}

fn emit(nodes: &[Node], i: usize, out: &mut String) {
    match nodes[i].kind {
        Kind::Atom(s, _) | Kind::Ring(s) => out.push_str(s),
    }
    let n = nodes[i].children.len();
    for (k, &(c, order)) in nodes[i].children.iter().enumerate() {
        let last = k + 1 == n;
        if !last {
            out.push('(');
        }
        if order == 2 {
            out.push('=');
        }
        emit(nodes, c, out);
        if !last {
            out.push(')');
        }
    }
}

/// One random molecule as (non-canonical) SMILES.
pub fn random_smiles<R: Rng + ?Sized>(cfg: &SynthConfig, rng: &mut R) -> String {
    const ELEMENTS: [(&str, u8, u32); 3] = [("C", 4, 14), ("N", 3, 3), ("O", 2, 3)];
    let pick = |rng: &mut R| {
        let total: u32 = ELEMENTS.iter().map(|e| e.2).sum();
        let mut x = rng.random_range(0..total);
        for &(s, v, w) in &ELEMENTS {
            if x < w {
                return (s, v);
            }
            x -= w;
        }
        unreachable!()
    };
    let n = rng.random_range(cfg.min_atoms..=cfg.max_atoms);
    let mut nodes = vec![Node {
        kind: Kind::Atom("C", 4),
        free: 4,
        children: Vec::new(),
    }];
    let ring = rng.random_bool(cfg.ring_rate);
    for k in 1..n {
        let open: Vec<usize> = (0..nodes.len()).filter(|&i| nodes[i].free > 0).collect();
        let Some(&parent) = open.choose(rng) else { break };
        let kind = if ring && k == n - 1 {
            Kind::Ring(*["c1ccccc1", "C1CC1", "C1CCCCC1", "c1ccncc1"].choose(rng).unwrap())
        } else {
            let (s, v) = pick(rng);
            Kind::Atom(s, v)
        };
        let valence = match kind {
            Kind::Atom(_, v) => v,
            Kind::Ring(_) => 1,
        };
        let double = nodes[parent].free >= 2 && valence >= 2 && rng.random_bool(cfg.double_bond_rate);
        let order = if double { 2 } else { 1 };
        nodes[parent].free -= order;
        let child = nodes.len();
        nodes[parent].children.push((child, order));
        nodes.push(Node {
            kind,
            free: valence - order,
            children: Vec::new(),
        });
    }
    let mut s = String::new();
    emit(&nodes, 0, &mut s);
    s
}

/// `n` distinct canonical SMILES, deterministic in `seed`.
pub fn synthetic_corpus(n: usize, seed: u64, cfg: &SynthConfig) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(n);
    let mut attempts = 0usize;
    while out.len() < n {
        attempts += 1;
        assert!(attempts < 1000 * (n + 10), "molecule space exhausted before {n} distinct structures");
        let smi = random_smiles(cfg, &mut rng);
        let Ok(mol) = parse_smiles(&smi) else { continue };
        let key = canonical_key(&mol);
        if seen.insert(key.clone()) {
            out.push(key);
        }
    }
    out
}
