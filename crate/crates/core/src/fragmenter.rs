//! Rule-based fragmentation: bond-cut enumeration, a simple intensity rule,
//! and ppm peak matching against observed spectra.

use std::collections::{HashMap, HashSet, VecDeque};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chemgraph::{monoisotopic_mass, Adduct, BondOrder, ChemError, Element, Formula, Molecule};

#[derive(Debug, Error)]
pub enum SpectrumError {
    #[error(transparent)]
    Chem(#[from] ChemError),
    #[error("invalid spectrum: {0}")]
    Invalid(String),
}

/// Connected atom subset of a parent molecule.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fragment {
    /// Sorted parent atom indices.
    pub atoms: Vec<usize>,
    /// Includes one extra hydrogen per cut bond.
    pub formula: Formula,
    pub n_breaks: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimPeak {
    pub fragment: Fragment,
    pub mz: f64,
    pub intensity: f64,
}

/// Peaks sorted by m/z, maximum intensity 1.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedSpectrum {
    pub peaks: Vec<SimPeak>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservedSpectrum {
    peaks: Vec<(f64, f64)>,
    pub precursor_mz: f64,
}

impl ObservedSpectrum {
    /// Sorts by m/z; rejects negative or non-finite values and duplicate m/z
    /// within 1e-6 Da.
    pub fn new(mut peaks: Vec<(f64, f64)>, precursor_mz: f64) -> Result<Self, SpectrumError> {
        if !precursor_mz.is_finite() || precursor_mz <= 0.0 {
            return Err(SpectrumError::Invalid(format!("precursor m/z {precursor_mz}")));
        }
        if peaks.iter().any(|&(m, i)| !m.is_finite() || m <= 0.0 || !i.is_finite() || i < 0.0) {
            return Err(SpectrumError::Invalid("peaks need positive m/z and non-negative intensity".into()));
        }
        peaks.sort_by(|a, b| a.0.total_cmp(&b.0));
        if peaks.windows(2).any(|w| w[1].0 - w[0].0 <= MERGE_TOL) {
            return Err(SpectrumError::Invalid("duplicate m/z".into()));
        }
        Ok(ObservedSpectrum { peaks, precursor_mz })
    }

    /// Observed spectrum equal to a simulated one.
    pub fn from_simulated(sim: &SimulatedSpectrum, precursor_mz: f64) -> Self {
        ObservedSpectrum {
            peaks: sim.peaks.iter().map(|p| (p.mz, p.intensity)).collect(),
            precursor_mz,
        }
    }

    pub fn peaks(&self) -> &[(f64, f64)] {
        &self.peaks
    }
}

/// Indices into [`SimulatedSpectrum::peaks`].
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MatchResult {
    pub matched: Vec<usize>,
    pub hallucinated: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub max_breaks: usize,
    pub max_frags: usize,
    pub beta: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            max_breaks: 2,
            max_frags: 256,
            beta: 0.6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchConfig {
    pub tol_ppm: f64,
    pub top_p: usize,
    pub min_rel_int: f64,
}

impl Default for MatchConfig {
    fn default() -> Self {
        MatchConfig {
            tol_ppm: 20.0,
            top_p: 20,
            min_rel_int: 0.01,
        }
    }
}

const MERGE_TOL: f64 = 1e-6;

fn cleavable(mol: &Molecule, bond: usize) -> bool {
    let b = &mol.bonds()[bond];
    b.order == BondOrder::Single && !b.in_ring
}

/// Connected component of `start` within `set`, ignoring bond `skip`.
fn component(mol: &Molecule, set: &HashSet<usize>, start: usize, skip: usize) -> Vec<usize> {
    let mut seen = HashSet::from([start]);
    let mut queue = VecDeque::from([start]);
    while let Some(a) = queue.pop_front() {
        for &(nb, bi) in mol.neighbors(a) {
            if bi != skip && set.contains(&nb) && seen.insert(nb) {
                queue.push_back(nb);
            }
        }
    }
    let mut v: Vec<usize> = seen.into_iter().collect();
    v.sort_unstable();
    v
}

/// Formula of an atom subset with one hydrogen per bond leaving the subset.
pub fn fragment_formula(mol: &Molecule, atoms: &[usize]) -> Result<Formula, ChemError> {
    let set: HashSet<usize> = atoms.iter().copied().collect();
    let mut f = Formula::new();
    for &a in atoms {
        let at = &mol.atoms()[a];
        f.add_count(at.element, 1);
        f.add_count(Element::H, mol.hydrogen_count(a)? as u32);
        f.charge += at.formal_charge as i32;
        let cuts = mol.neighbors(a).iter().filter(|(nb, _)| !set.contains(nb)).count();
        f.add_count(Element::H, cuts as u32);
    }
    Ok(f)
}

/// Breadth-first enumeration of fragments obtained by removing up to
/// `max_breaks` acyclic single bonds. The whole molecule is included with
/// zero breaks. Fragments are deduplicated by atom set (keeping the fewest
/// breaks) and the `max_frags` largest are returned, largest first.
pub fn enumerate_fragments(mol: &Molecule, max_breaks: usize, max_frags: usize) -> Result<Vec<Fragment>, ChemError> {
    let all: Vec<usize> = (0..mol.atom_count()).collect();
    let mut seen: HashMap<Vec<usize>, usize> = HashMap::new();
    let mut order: Vec<Vec<usize>> = Vec::new();
    seen.insert(all.clone(), 0);
    order.push(all.clone());
    let mut frontier = vec![all];
    for depth in 1..=max_breaks {
        let mut next = Vec::new();
        for frag in &frontier {
            let set: HashSet<usize> = frag.iter().copied().collect();
            for (bi, b) in mol.bonds().iter().enumerate() {
                if !cleavable(mol, bi) || !set.contains(&b.a) || !set.contains(&b.b) {
                    continue;
                }
                for side in [component(mol, &set, b.a, bi), component(mol, &set, b.b, bi)] {
                    if !seen.contains_key(&side) {
                        seen.insert(side.clone(), depth);
                        order.push(side.clone());
                        next.push(side);
                    }
                }
            }
        }
        frontier = next;
    }
    let mut frags = Vec::with_capacity(order.len());
    for atoms in order {
        let n_breaks = seen[&atoms];
        frags.push(Fragment {
            formula: fragment_formula(mol, &atoms)?,
            atoms,
            n_breaks,
        });
    }
    frags.sort_by(|a, b| {
        b.atoms
            .len()
            .cmp(&a.atoms.len())
            .then(a.n_breaks.cmp(&b.n_breaks))
            .then_with(|| a.atoms.cmp(&b.atoms))
    });
    frags.truncate(max_frags);
    Ok(frags)
}

/// Fragment peaks at protonated monoisotopic m/z with intensity
/// `beta^n_breaks * |fragment| / |molecule|`, normalized to a maximum of 1.
/// Peaks within 1e-6 Da are merged, keeping the more intense.
pub fn simulate_spectrum(mol: &Molecule, adduct: Adduct, cfg: &SimConfig) -> Result<SimulatedSpectrum, ChemError> {
    let n = mol.atom_count().max(1) as f64;
    let mut peaks: Vec<SimPeak> = enumerate_fragments(mol, cfg.max_breaks, cfg.max_frags)?
        .into_iter()
        .map(|fragment| {
            let intensity = cfg.beta.powi(fragment.n_breaks as i32) * fragment.atoms.len() as f64 / n;
            SimPeak {
                mz: monoisotopic_mass(&fragment.formula, adduct),
                intensity,
                fragment,
            }
        })
        .filter(|p| p.intensity > 0.0)
        .collect();
    peaks.sort_by(|a, b| a.mz.total_cmp(&b.mz).then(b.intensity.total_cmp(&a.intensity)));
    let mut merged: Vec<SimPeak> = Vec::with_capacity(peaks.len());
    for p in peaks {
        match merged.last_mut() {
            Some(last) if (p.mz - last.mz).abs() <= MERGE_TOL => {
                if p.intensity > last.intensity {
                    *last = p;
                }
            }
            _ => merged.push(p),
        }
    }
    let max = merged.iter().map(|p| p.intensity).fold(0.0, f64::max);
    if max > 0.0 {
        for p in &mut merged {
            p.intensity /= max;
        }
    }
    Ok(SimulatedSpectrum { peaks: merged })
}

pub fn ppm_error(m_sim: f64, m_obs: f64) -> f64 {
    (m_sim - m_obs).abs() / m_obs * 1e6
}

/// Indices of the informative simulated peaks: above the relative-intensity
/// floor, away from the precursor, the `top_p` most intense.
pub fn informative_peaks(sim: &SimulatedSpectrum, precursor_mz: f64, cfg: &MatchConfig) -> Vec<usize> {
    let max = sim.peaks.iter().map(|p| p.intensity).fold(0.0, f64::max);
    let mut idx: Vec<usize> = (0..sim.peaks.len())
        .filter(|&i| {
            let p = &sim.peaks[i];
            p.intensity >= cfg.min_rel_int * max && ppm_error(p.mz, precursor_mz) > cfg.tol_ppm
        })
        .collect();
    idx.sort_by(|&a, &b| sim.peaks[b].intensity.total_cmp(&sim.peaks[a].intensity).then(a.cmp(&b)));
    idx.truncate(cfg.top_p);
    idx.sort_unstable();
    idx
}

/// Split informative peaks into matched (some observed peak within
/// `tol_ppm`) and hallucinated.
pub fn match_peaks(sim: &SimulatedSpectrum, obs: &ObservedSpectrum, cfg: &MatchConfig) -> MatchResult {
    let mut out = MatchResult::default();
    for i in informative_peaks(sim, obs.precursor_mz, cfg) {
        let m = sim.peaks[i].mz;
        // observed peaks are sorted; only neighbors of the insertion point can be closest
        let pos = obs.peaks.partition_point(|p| p.0 < m);
        let hit = [pos.checked_sub(1), Some(pos)]
            .into_iter()
            .flatten()
            .filter_map(|j| obs.peaks.get(j))
            .any(|&(mo, _)| ppm_error(m, mo) <= cfg.tol_ppm);
        if hit {
            out.matched.push(i);
        } else {
            out.hallucinated.push(i);
        }
    }
    out
}

/// Simulated spectra keyed by canonical key; entries are shared, never
/// recomputed.
#[derive(Debug, Default)]
pub struct SpectrumCache {
    map: HashMap<String, Arc<SimulatedSpectrum>>,
    hits: usize,
}

impl SpectrumCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get_or_simulate(
        &mut self,
        key: &str,
        mol: &Molecule,
        cfg: &SimConfig,
    ) -> Result<Arc<SimulatedSpectrum>, ChemError> {
        if let Some(s) = self.map.get(key) {
            self.hits += 1;
            return Ok(Arc::clone(s));
        }
        let s = Arc::new(simulate_spectrum(mol, Adduct::Proton, cfg)?);
        self.map.insert(key.to_string(), Arc::clone(&s));
        Ok(s)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn hits(&self) -> usize {
        self.hits
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chemgraph::{parse_smiles, PROTON_MASS};

    fn sets(frags: &[Fragment]) -> Vec<Vec<usize>> {
        let mut v: Vec<Vec<usize>> = frags.iter().map(|f| f.atoms.clone()).collect();
        v.sort();
        v
    }

    #[test]
    fn ethanol_single_cuts() {
        let m = parse_smiles("CCO").unwrap();
        let f = enumerate_fragments(&m, 1, 256).unwrap();
        assert_eq!(sets(&f), vec![vec![0], vec![0, 1], vec![0, 1, 2], vec![1, 2], vec![2]]);
        assert_eq!(f[0].atoms, vec![0, 1, 2]);
        assert_eq!(f[0].n_breaks, 0);
    }

    #[test]
    fn rings_and_zero_breaks() {
        let benzene = parse_smiles("c1ccccc1").unwrap();
        assert_eq!(enumerate_fragments(&benzene, 2, 256).unwrap().len(), 1);
        let cyclohexane = parse_smiles("C1CCCCC1").unwrap();
        assert_eq!(enumerate_fragments(&cyclohexane, 2, 256).unwrap().len(), 1);
        let m = parse_smiles("CCCCO").unwrap();
        assert_eq!(enumerate_fragments(&m, 0, 256).unwrap().len(), 1);
        assert_eq!(enumerate_fragments(&m, 2, 3).unwrap().len(), 3);
    }

    #[test]
    fn ethanol_spectrum_masses() {
        let m = parse_smiles("CCO").unwrap();
        let s = simulate_spectrum(&m, Adduct::Proton, &SimConfig::default()).unwrap();
        let whole = s.peaks.iter().find(|p| p.fragment.n_breaks == 0).unwrap();
        let expected = monoisotopic_mass(&m.formula().unwrap(), Adduct::None) + PROTON_MASS;
        assert!((whole.mz - expected).abs() < 1e-9);
        assert_eq!(whole.intensity, 1.0);
        let co = s.peaks.iter().find(|p| p.fragment.atoms == vec![1, 2]).unwrap();
        assert_eq!(co.fragment.formula.to_string(), "CH4O");
        assert!((co.mz - 33.03349).abs() < 1e-4);
    }

    #[test]
    fn beta_zero_keeps_only_parent() {
        let m = parse_smiles("CCOC(C)N").unwrap();
        let cfg = SimConfig {
            beta: 0.0,
            ..SimConfig::default()
        };
        let s = simulate_spectrum(&m, Adduct::Proton, &cfg).unwrap();
        assert_eq!(s.peaks.len(), 1);
        assert_eq!(s.peaks[0].fragment.n_breaks, 0);
    }

    fn one_peak(mz: f64) -> SimulatedSpectrum {
        let m = parse_smiles("C").unwrap();
        SimulatedSpectrum {
            peaks: vec![SimPeak {
                fragment: Fragment {
                    atoms: vec![0],
                    formula: m.formula().unwrap(),
                    n_breaks: 1,
                },
                mz,
                intensity: 1.0,
            }],
        }
    }

    #[test]
    fn ppm_matching_examples() {
        let cfg = MatchConfig::default();
        let obs = ObservedSpectrum::new(vec![(100.0015, 1.0)], 300.0).unwrap();
        assert_eq!(match_peaks(&one_peak(100.0), &obs, &cfg).matched, vec![0]);
        let obs = ObservedSpectrum::new(vec![(100.0030, 1.0)], 300.0).unwrap();
        assert_eq!(match_peaks(&one_peak(100.0), &obs, &cfg).hallucinated, vec![0]);
        let obs = ObservedSpectrum::new(vec![(100.0, 1.0)], 100.0).unwrap();
        assert_eq!(match_peaks(&one_peak(100.0), &obs, &cfg), MatchResult::default());
        assert!((ppm_error(100.0, 100.0015) - 14.999775).abs() < 1e-3);
    }

    #[test]
    fn observed_validation() {
        assert!(ObservedSpectrum::new(vec![(10.0, 1.0), (10.0000001, 1.0)], 50.0).is_err());
        assert!(ObservedSpectrum::new(vec![(10.0, -1.0)], 50.0).is_err());
        let o = ObservedSpectrum::new(vec![(20.0, 1.0), (10.0, 0.5)], 50.0).unwrap();
        assert_eq!(o.peaks()[0].0, 10.0);
    }

    #[test]
    fn cache_shares_entries() {
        let m = parse_smiles("CCN").unwrap();
        let mut c = SpectrumCache::new();
        let a = c.get_or_simulate("CCN", &m, &SimConfig::default()).unwrap();
        let b = c.get_or_simulate("CCN", &m, &SimConfig::default()).unwrap();
        assert!(Arc::ptr_eq(&a, &b));
        assert_eq!((c.len(), c.hits()), (1, 1));
    }
}
