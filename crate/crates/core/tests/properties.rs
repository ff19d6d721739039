use std::collections::{HashSet, VecDeque};
use std::sync::OnceLock;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use frigid_core::autograd::Mat;
use frigid_core::chemgraph::{
    canonical_key, monoisotopic_mass, morgan_fingerprint, parse_smiles, write_smiles, Adduct, Molecule,
};
use frigid_core::denoiser::{corrupt, ConditioningInput, Denoiser, NoiseSchedule};
use frigid_core::fragmenter::{
    fragment_formula, match_peaks, simulate_spectrum, MatchConfig, ObservedSpectrum, SimConfig,
};
use frigid_core::refine::{apply_plan, guided_plan, mask_plan, random_plan, RefineConfig};
use frigid_core::sampler::{generate, rank_pool, Candidate, CandidatePool};
use frigid_core::synth::{random_smiles, synthetic_corpus, SynthConfig};
use frigid_core::tokenizer::{decode, encode, train_bpe, Specials, TokenId, Vocabulary};

fn vocab() -> &'static Vocabulary {
    static V: OnceLock<Vocabulary> = OnceLock::new();
    V.get_or_init(|| train_bpe(synthetic_corpus(500, 1, &SynthConfig::default()).iter(), 96).unwrap())
}

fn molecule(seed: u64) -> (String, Molecule) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = random_smiles(&SynthConfig::default(), &mut rng);
    let m = parse_smiles(&s).unwrap();
    (s, m)
}

fn connected(mol: &Molecule, atoms: &[usize]) -> bool {
    let set: HashSet<usize> = atoms.iter().copied().collect();
    let mut seen = HashSet::from([atoms[0]]);
    let mut queue = VecDeque::from([atoms[0]]);
    while let Some(a) = queue.pop_front() {
        for &(nb, _) in mol.neighbors(a) {
            if set.contains(&nb) && seen.insert(nb) {
                queue.push_back(nb);
            }
        }
    }
    seen.len() == set.len()
}

/// Uniform logits over content tokens 4..8; `[PAD]` gets a large logit.
struct Flat;

const SP: Specials = Specials {
    pad: 0,
    bos: 1,
    eos: 2,
    mask: 3,
};

impl Denoiser for Flat {
    type Context = ();
    fn vocab_size(&self) -> usize {
        8
    }
    fn max_len(&self) -> usize {
        64
    }
    fn condition(&self, _: &ConditioningInput) {}
    fn logits(&self, _: &(), seqs: &[Vec<TokenId>]) -> Vec<Mat<f32>> {
        seqs.iter()
            .map(|s| {
                let mut m = Mat::zeros(s.len(), 8);
                for r in 0..s.len() {
                    m.row_mut(r)[0] = 10.0;
                }
                m
            })
            .collect()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tokenizer_round_trip(seed in any::<u64>()) {
        let (s, mol) = molecule(seed);
        let seq = encode(&s, vocab(), 256).unwrap();
        prop_assert_eq!(decode(&seq.ids, vocab()).unwrap(), s.clone());
        prop_assert_eq!(seq.ids.len(), seq.atom_spans.len());
        let mut covered: Vec<usize> = seq.atom_spans.iter().flatten().copied().collect();
        covered.sort_unstable();
        // ring-closure digits also carry the atoms they join
        covered.dedup();
        prop_assert_eq!(covered, (0..mol.atom_count()).collect::<Vec<_>>());
    }

    #[test]
    fn canonical_key_ignores_atom_order(seed in any::<u64>(), shuffle in any::<u64>()) {
        let (_, mol) = molecule(seed);
        let mut perm: Vec<usize> = (0..mol.atom_count()).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle));
        let p = mol.permuted(&perm);
        prop_assert_eq!(canonical_key(&mol), canonical_key(&p));
        prop_assert_eq!(morgan_fingerprint(&mol, 2, 4096), morgan_fingerprint(&p, 2, 4096));
        let rewritten = parse_smiles(&write_smiles(&p)).unwrap();
        prop_assert_eq!(canonical_key(&rewritten), canonical_key(&mol));
    }

    #[test]
    fn fragments_are_connected_subgraphs(seed in any::<u64>()) {
        let (_, mol) = molecule(seed);
        let sim = simulate_spectrum(&mol, Adduct::Proton, &SimConfig::default()).unwrap();
        let max = sim.peaks.iter().fold(0.0f64, |a, p| a.max(p.intensity));
        prop_assert!(sim.peaks.is_empty() || (max - 1.0).abs() < 1e-12);
        for p in &sim.peaks {
            let atoms = &p.fragment.atoms;
            prop_assert!(!atoms.is_empty() && atoms.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(connected(&mol, atoms));
            prop_assert_eq!(&fragment_formula(&mol, atoms).unwrap(), &p.fragment.formula);
            prop_assert!(p.intensity > 0.0 && p.intensity <= 1.0);
        }
        prop_assert!(sim.peaks.windows(2).all(|w| w[0].mz <= w[1].mz));
    }

    #[test]
    fn true_structure_is_never_masked(seed in any::<u64>()) {
        let (s, mol) = molecule(seed);
        let rc = RefineConfig::default();
        let sim = simulate_spectrum(&mol, Adduct::Proton, &rc.sim).unwrap();
        let precursor = monoisotopic_mass(&mol.formula().unwrap(), Adduct::Proton);
        let obs = ObservedSpectrum::from_simulated(&sim, precursor);
        prop_assert!(match_peaks(&sim, &obs, &MatchConfig::default()).hallucinated.is_empty());
        let seq = encode(&s, vocab(), 256).unwrap();
        let plan = guided_plan(&seq, mol.atom_count(), &sim, &obs, &rc).unwrap();
        prop_assert!(plan.p_mask.iter().all(|&p| p == 0.0));
    }

    #[test]
    fn mask_probabilities_bounded(scores in prop::collection::vec(-1.0f64..=1.0, 1..40), p_max in 0.0f64..=1.0) {
        let plan = mask_plan(&scores, p_max);
        for (&s, &p) in scores.iter().zip(&plan.p_mask) {
            prop_assert!((0.0..=p_max).contains(&p));
            if s > 0.0 {
                prop_assert_eq!(p, 0.0);
            }
        }
    }

    #[test]
    fn masking_keeps_specials(seed in any::<u64>(), p in 0.0f64..=1.0, t in 0.0f64..=1.0) {
        let (s, _) = molecule(seed);
        let v = vocab();
        let sp = v.specials();
        let seq = encode(&s, v, 256).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for ids in [
            apply_plan(&seq.ids, &random_plan(&seq, p, sp), sp, &mut rng),
            corrupt(&seq, t, &NoiseSchedule::default(), sp, &mut rng).unwrap().ids,
        ] {
            prop_assert_eq!(ids.len(), seq.ids.len());
            for (&a, &b) in ids.iter().zip(&seq.ids) {
                prop_assert!(a == b || (a == sp.mask && !sp.contains(b)));
            }
        }
        prop_assert_eq!(apply_plan(&seq.ids, &random_plan(&seq, 0.0, sp), sp, &mut rng), seq.ids.clone());
        let all = apply_plan(&seq.ids, &random_plan(&seq, 1.0, sp), sp, &mut rng);
        prop_assert!(all.iter().zip(&seq.ids).all(|(&a, &b)| sp.contains(b) == (a != sp.mask)));
    }

    #[test]
    fn generation_takes_exactly_l_steps(l in 1usize..20, tau0 in 0.0f64..2.0, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (s, calls) = generate(&Flat, &(), l, tau0, SP, &mut rng);
        prop_assert_eq!(calls, l);
        prop_assert_eq!(s.len(), l + 2);
        prop_assert!(s[1..=l].iter().all(|&t| (4..8).contains(&t)));
    }

    #[test]
    fn pool_best_never_gets_worse(seeds in prop::collection::vec(0u64..200, 1..30)) {
        let (_, target) = molecule(7);
        let fp = morgan_fingerprint(&target, 2, 4096);
        let mut pool = CandidatePool::new(fp.clone(), target.formula().unwrap());
        let mut best: Option<(u8, f64)> = None;
        for (round, seed) in seeds.iter().enumerate() {
            let (s, _) = molecule(*seed);
            let c = Candidate::from_smiles(&s, &fp, round).unwrap();
            let fresh = !pool.contains_key(&c.key);
            prop_assert_eq!(pool.insert(c), fresh);
            let top = pool.rank_key(pool.best().unwrap());
            if let Some(prev) = best {
                prop_assert!(top.0 < prev.0 || (top.0 == prev.0 && top.1 >= prev.1));
            }
            best = Some(top);
        }
        let ranked = rank_pool(&pool);
        prop_assert_eq!(ranked.len(), pool.len());
        let keys: HashSet<&str> = ranked.iter().map(|c| c.key.as_str()).collect();
        prop_assert_eq!(keys.len(), ranked.len());
        prop_assert_eq!(&ranked[0].key, &pool.best().unwrap().key);
    }
}
