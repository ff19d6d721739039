//! Connectivity-based canonical labeling.
//!
//! Atoms are partitioned by iterated neighborhood refinement starting from
//! (element, degree, charge, hydrogen count, ring flag, aromaticity). Ties that
//! survive refinement are broken by individualizing each member of the first
//! tied class in turn; every complete labeling is rendered as SMILES and the
//! lexicographically smallest string is the key. The search visits the same
//! set of labelings for any input atom order, so the key is invariant.

use super::smiles::smiles_from_ranks;
use super::Molecule;

/// Upper bound on explored complete labelings. Beyond it only the first
/// branch of each remaining tie is followed.
const MAX_LEAVES: usize = 4096;

/// Stereochemistry-agnostic canonical key; also the canonical SMILES.
///
/// Molecules whose valence cannot be satisfied still receive a key, built
/// with zero hydrogens on the offending atoms.
pub fn canonical_key(mol: &Molecule) -> String {
    let hydrogens = hydrogens_or_zero(mol);
    let mut best: Option<String> = None;
    let mut leaves = 0usize;
    let start = refine(mol, &hydrogens, initial_classes(mol, &hydrogens));
    search(mol, &hydrogens, start, &mut best, &mut leaves);
    best.unwrap_or_default()
}

/// Canonical rank per atom (a permutation of `0..n`): the first labeling
/// reached by always individualizing the lowest-indexed member of a tie.
/// Only the key is guaranteed order-invariant.
pub fn canonical_ranks(mol: &Molecule) -> Vec<u32> {
    let hydrogens = hydrogens_or_zero(mol);
    let mut ranks = refine(mol, &hydrogens, initial_classes(mol, &hydrogens));
    while let Some(class) = first_tied_class(&ranks) {
        let pick = class[0];
        ranks = refine(mol, &hydrogens, individualize(&ranks, pick));
    }
    ranks
}

fn hydrogens_or_zero(mol: &Molecule) -> Vec<u8> {
    (0..mol.atom_count())
        .map(|i| mol.hydrogen_count(i).unwrap_or(0))
        .collect()
}

fn search(
    mol: &Molecule,
    hydrogens: &[u8],
    ranks: Vec<u32>,
    best: &mut Option<String>,
    leaves: &mut usize,
) {
    match first_tied_class(&ranks) {
        None => {
            *leaves += 1;
            let s = smiles_from_ranks(mol, &ranks, hydrogens);
            if best.as_ref().is_none_or(|b| s < *b) {
                *best = Some(s);
            }
        }
        Some(class) => {
            for (k, &atom) in class.iter().enumerate() {
                if k > 0 && *leaves >= MAX_LEAVES {
                    break;
                }
                let next = refine(mol, hydrogens, individualize(&ranks, atom));
                search(mol, hydrogens, next, best, leaves);
            }
        }
    }
}

fn initial_classes(mol: &Molecule, hydrogens: &[u8]) -> Vec<u32> {
    let keys: Vec<(u8, usize, i8, u8, bool, bool)> = mol
        .atoms()
        .iter()
        .enumerate()
        .map(|(i, a)| {
            (
                a.element.atomic_number(),
                mol.degree(i),
                a.formal_charge,
                hydrogens[i],
                mol.atom_in_ring(i),
                a.aromatic,
            )
        })
        .collect();
    dense_ranks(&keys)
}

/// Dense ranks (0-based) of the sorted distinct keys.
fn dense_ranks<K: Ord + Clone>(keys: &[K]) -> Vec<u32> {
    let mut sorted: Vec<K> = keys.to_vec();
    sorted.sort();
    sorted.dedup();
    keys.iter()
        .map(|k| sorted.binary_search(k).unwrap() as u32)
        .collect()
}

fn class_count(ranks: &[u32]) -> usize {
    let mut r = ranks.to_vec();
    r.sort_unstable();
    r.dedup();
    r.len()
}

fn refine(mol: &Molecule, _hydrogens: &[u8], mut ranks: Vec<u32>) -> Vec<u32> {
    let mut classes = class_count(&ranks);
    loop {
        let keys: Vec<(u32, Vec<(u32, u8)>)> = (0..mol.atom_count())
            .map(|i| {
                let mut env: Vec<(u32, u8)> = mol
                    .neighbors(i)
                    .iter()
                    .map(|&(nb, bi)| (ranks[nb], mol.bonds()[bi].order.code()))
                    .collect();
                env.sort_unstable();
                (ranks[i], env)
            })
            .collect();
        let next = dense_ranks(&keys);
        let next_classes = class_count(&next);
        ranks = next;
        if next_classes == classes {
            return ranks;
        }
        classes = next_classes;
    }
}

/// Members of the lowest-ranked class with more than one atom.
fn first_tied_class(ranks: &[u32]) -> Option<Vec<usize>> {
    let mut counts = vec![0usize; ranks.len()];
    for &r in ranks {
        counts[r as usize] += 1;
    }
    let tied = counts.iter().position(|&c| c > 1)? as u32;
    Some(
        ranks
            .iter()
            .enumerate()
            .filter(|&(_, &r)| r == tied)
            .map(|(i, _)| i)
            .collect(),
    )
}

fn individualize(ranks: &[u32], atom: usize) -> Vec<u32> {
    let keys: Vec<(u32, u8)> = ranks
        .iter()
        .enumerate()
        .map(|(i, &r)| (r, if i == atom { 0 } else { 1 }))
        .collect();
    dense_ranks(&keys)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chemgraph::parse_smiles;

    fn key(s: &str) -> String {
        canonical_key(&parse_smiles(s).unwrap())
    }

    #[test]
    fn same_molecule_different_traversal() {
        assert_eq!(key("CCO"), key("OCC"));
        assert_eq!(key("c1ccccc1O"), key("Oc1ccccc1"));
        assert_eq!(key("C1CC(N)CCC1O"), key("OC1CCC(N)CC1"));
        assert_eq!(key("CC.O"), key("O.CC"));
    }

    #[test]
    fn constitutional_isomers_differ() {
        assert_ne!(key("CCO"), key("COC"));
        assert_ne!(key("Cc1ccccc1C"), key("Cc1cccc(C)c1"));
    }

    #[test]
    fn ranks_are_a_permutation() {
        let m = parse_smiles("CC(C)(C)c1ccccc1").unwrap();
        let mut r = canonical_ranks(&m);
        r.sort_unstable();
        assert_eq!(r, (0..m.atom_count() as u32).collect::<Vec<_>>());
    }

    #[test]
    fn regular_graphs_are_distinguished() {
        // Two disjoint triangles vs a hexagon: same degree sequence.
        assert_ne!(key("C1CC1.C1CC1"), key("C1CCCCC1"));
        assert_eq!(key("C1CCC2CCCCC2C1"), key("C12CCCCC1CCCC2"));
    }
}
