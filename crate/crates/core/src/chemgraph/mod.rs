//! Molecular graphs: SMILES-subset parsing and writing, formulae and masses,
//! circular fingerprints, and connectivity-based canonical keys.

mod canon;
mod element;
mod fingerprint;
mod formula;
mod smiles;

pub use canon::{canonical_key, canonical_ranks};
pub use element::{Element, ELEMENT_SLOTS};
pub use fingerprint::{morgan_fingerprint, tanimoto, Fingerprint, FP_BITS};
pub use formula::{monoisotopic_mass, Adduct, Formula, PROTON_MASS};
pub use smiles::{
    parse_smiles, parse_smiles_lexemes, write_smiles, write_smiles_in_order, Lexeme, LexemeKind,
};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ChemError {
    #[error("empty SMILES input")]
    EmptyInput { offset: usize },
    #[error("unclosed ring bond opened at byte {offset}")]
    UnclosedRing { offset: usize },
    #[error("unbalanced parenthesis at byte {offset}")]
    UnbalancedParenthesis { offset: usize },
    #[error("unknown element at byte {offset}")]
    UnknownElement { offset: usize },
    #[error("unexpected character {ch:?} at byte {offset}")]
    UnexpectedChar { offset: usize, ch: char },
    #[error("unexpected end of input at byte {offset}")]
    UnexpectedEnd { offset: usize },
    #[error("duplicate or self bond at byte {offset}")]
    InvalidBond { offset: usize },
    #[error("atom {atom} exceeds its maximum valence")]
    ValenceOverflow { atom: usize },
    #[error("invalid molecular formula {0:?}")]
    InvalidFormula(String),
    #[error("invalid fingerprint: {0}")]
    InvalidFingerprint(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BondOrder {
    Single,
    Double,
    Triple,
    Aromatic,
}

impl BondOrder {
    /// Small integer code used by invariant hashing.
    pub fn code(self) -> u8 {
        match self {
            BondOrder::Single => 1,
            BondOrder::Double => 2,
            BondOrder::Triple => 3,
            BondOrder::Aromatic => 4,
        }
    }

    fn valence_contribution(self) -> u8 {
        match self {
            BondOrder::Single | BondOrder::Aromatic => 1,
            BondOrder::Double => 2,
            BondOrder::Triple => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Atom {
    pub element: Element,
    pub formal_charge: i8,
    /// Hydrogen count written inside brackets; `Some` only for bracket atoms.
    pub explicit_h: Option<u8>,
    pub aromatic: bool,
    pub index: usize,
}

impl Atom {
    pub fn new(element: Element, index: usize) -> Self {
        Atom {
            element,
            formal_charge: 0,
            explicit_h: None,
            aromatic: false,
            index,
        }
    }

    pub fn is_bracket(&self) -> bool {
        self.explicit_h.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bond {
    pub a: usize,
    pub b: usize,
    pub order: BondOrder,
    pub in_ring: bool,
}

impl Bond {
    pub fn other(&self, atom: usize) -> usize {
        if self.a == atom {
            self.b
        } else {
            self.a
        }
    }
}

/// Attributed molecular graph. Adjacency and ring flags are derived on
/// construction, so a `Molecule` is always internally consistent.
#[derive(Debug, Clone)]
pub struct Molecule {
    atoms: Vec<Atom>,
    bonds: Vec<Bond>,
    adjacency: Vec<Vec<(usize, usize)>>,
}

impl Molecule {
    /// Build a molecule; bond `in_ring` flags are recomputed.
    pub fn new(mut atoms: Vec<Atom>, mut bonds: Vec<Bond>) -> Result<Self, ChemError> {
        let n = atoms.len();
        for (i, a) in atoms.iter_mut().enumerate() {
            a.index = i;
        }
        let mut adjacency = vec![Vec::new(); n];
        for (bi, bond) in bonds.iter().enumerate() {
            if bond.a == bond.b || bond.a >= n || bond.b >= n {
                return Err(ChemError::InvalidBond { offset: bi });
            }
            if adjacency[bond.a].iter().any(|&(nb, _)| nb == bond.b) {
                return Err(ChemError::InvalidBond { offset: bi });
            }
            adjacency[bond.a].push((bond.b, bi));
            adjacency[bond.b].push((bond.a, bi));
        }
        let ring = ring_bonds(n, &bonds, &adjacency);
        for (bond, r) in bonds.iter_mut().zip(ring) {
            bond.in_ring = r;
        }
        Ok(Molecule {
            atoms,
            bonds,
            adjacency,
        })
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn bonds(&self) -> &[Bond] {
        &self.bonds
    }

    pub fn atom_count(&self) -> usize {
        self.atoms.len()
    }

    /// `(neighbor, bond index)` pairs of an atom.
    pub fn neighbors(&self, atom: usize) -> &[(usize, usize)] {
        &self.adjacency[atom]
    }

    pub fn degree(&self, atom: usize) -> usize {
        self.adjacency[atom].len()
    }

    pub fn bond_between(&self, a: usize, b: usize) -> Option<&Bond> {
        self.adjacency[a]
            .iter()
            .find(|&&(nb, _)| nb == b)
            .map(|&(_, bi)| &self.bonds[bi])
    }

    pub fn atom_in_ring(&self, atom: usize) -> bool {
        self.adjacency[atom]
            .iter()
            .any(|&(_, bi)| self.bonds[bi].in_ring)
    }

    /// Implicit hydrogens of a non-bracket atom from standard valences, or the
    /// explicit count of a bracket atom after a valence check.
    pub fn hydrogen_count(&self, atom: usize) -> Result<u8, ChemError> {
        let at = &self.atoms[atom];
        let mut plain = 0u32;
        let mut aromatic = 0u32;
        for &(_, bi) in &self.adjacency[atom] {
            let order = self.bonds[bi].order;
            if order == BondOrder::Aromatic {
                aromatic += 1;
            } else {
                plain += order.valence_contribution() as u32;
            }
        }
        // Aromatic atoms either take one extra valence unit from the pi
        // system or donate a lone pair (pyrrole-type n, furan o, thiophene s).
        let mut loads = vec![plain + aromatic];
        if aromatic > 0 {
            loads.insert(0, plain + aromatic + 1);
        }
        let valences = at.element.charged_valences(at.formal_charge as i32);
        match at.explicit_h {
            Some(h) => {
                let fits = loads
                    .iter()
                    .any(|&load| valences.iter().any(|&v| load + h as u32 <= v as u32));
                if fits {
                    Ok(h)
                } else {
                    Err(ChemError::ValenceOverflow { atom })
                }
            }
            None => {
                for &load in &loads {
                    if let Some(&v) = valences.iter().find(|&&v| v as u32 >= load) {
                        return Ok((v as u32 - load) as u8);
                    }
                }
                Err(ChemError::ValenceOverflow { atom })
            }
        }
    }

    /// Hydrogen counts for every atom.
    pub fn hydrogen_counts(&self) -> Result<Vec<u8>, ChemError> {
        (0..self.atoms.len()).map(|i| self.hydrogen_count(i)).collect()
    }

    /// Heavy-atom connected components, each sorted ascending.
    pub fn components(&self) -> Vec<Vec<usize>> {
        let n = self.atoms.len();
        let mut seen = vec![false; n];
        let mut out = Vec::new();
        for start in 0..n {
            if seen[start] {
                continue;
            }
            let mut comp = vec![start];
            seen[start] = true;
            let mut i = 0;
            while i < comp.len() {
                let a = comp[i];
                for &(nb, _) in &self.adjacency[a] {
                    if !seen[nb] {
                        seen[nb] = true;
                        comp.push(nb);
                    }
                }
                i += 1;
            }
            comp.sort_unstable();
            out.push(comp);
        }
        out
    }

    /// Relabel atoms: atom `i` of `self` becomes atom `perm[i]` of the result.
    pub fn permuted(&self, perm: &[usize]) -> Molecule {
        assert_eq!(perm.len(), self.atoms.len());
        let mut atoms = self.atoms.clone();
        for (i, a) in self.atoms.iter().enumerate() {
            atoms[perm[i]] = a.clone();
        }
        let bonds = self
            .bonds
            .iter()
            .map(|b| Bond {
                a: perm[b.a],
                b: perm[b.b],
                order: b.order,
                in_ring: false,
            })
            .collect();
        Molecule::new(atoms, bonds).expect("permutation preserves validity")
    }
}

/// Bridge detection: a bond lies in a ring iff it is not a bridge.
fn ring_bonds(n: usize, bonds: &[Bond], adjacency: &[Vec<(usize, usize)>]) -> Vec<bool> {
    let mut disc = vec![usize::MAX; n];
    let mut low = vec![0usize; n];
    let mut is_bridge = vec![false; bonds.len()];
    let mut timer = 0;
    for root in 0..n {
        if disc[root] != usize::MAX {
            continue;
        }
        // Iterative DFS: (atom, parent bond, next neighbor cursor).
        let mut stack: Vec<(usize, usize, usize)> = vec![(root, usize::MAX, 0)];
        disc[root] = timer;
        low[root] = timer;
        timer += 1;
        while let Some(&mut (v, parent_bond, ref mut cursor)) = stack.last_mut() {
            if *cursor < adjacency[v].len() {
                let (w, bi) = adjacency[v][*cursor];
                *cursor += 1;
                if bi == parent_bond {
                    continue;
                }
                if disc[w] == usize::MAX {
                    disc[w] = timer;
                    low[w] = timer;
                    timer += 1;
                    stack.push((w, bi, 0));
                } else {
                    low[v] = low[v].min(disc[w]);
                }
            } else {
                stack.pop();
                if let Some(&(p, _, _)) = stack.last() {
                    low[p] = low[p].min(low[v]);
                    if low[v] > disc[p] {
                        is_bridge[parent_bond] = true;
                    }
                }
            }
        }
    }
    is_bridge.iter().map(|&b| !b).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ring_flags() {
        let m = parse_smiles("C1CC1CC").unwrap();
        let flags: Vec<bool> = m.bonds().iter().map(|b| b.in_ring).collect();
        assert_eq!(flags.iter().filter(|&&f| f).count(), 3);
        assert!(!m.bond_between(3, 4).unwrap().in_ring);
        assert!(!m.bond_between(2, 3).unwrap().in_ring);
    }

    #[test]
    fn fused_ring_bonds_all_in_ring() {
        let m = parse_smiles("c1ccc2ccccc2c1").unwrap();
        assert!(m.bonds().iter().all(|b| b.in_ring));
    }

    #[test]
    fn hydrogen_counts_follow_valence_rules() {
        let m = parse_smiles("CC(=O)N").unwrap();
        assert_eq!(m.hydrogen_counts().unwrap(), vec![3, 0, 0, 2]);
        let m = parse_smiles("c1ccncc1").unwrap();
        assert_eq!(m.hydrogen_counts().unwrap(), vec![1, 1, 1, 0, 1, 1]);
        let m = parse_smiles("c1cc[nH]c1").unwrap();
        assert_eq!(m.hydrogen_count(3).unwrap(), 1);
        let m = parse_smiles("c1ccoc1").unwrap();
        assert_eq!(m.hydrogen_count(3).unwrap(), 0);
        let m = parse_smiles("CS(=O)(=O)C").unwrap();
        assert_eq!(m.hydrogen_count(1).unwrap(), 0);
    }

    #[test]
    fn valence_overflow_detected() {
        let m = parse_smiles("C(C)(C)(C)(C)C").unwrap();
        assert_eq!(
            m.hydrogen_count(0),
            Err(ChemError::ValenceOverflow { atom: 0 })
        );
        let m = parse_smiles("O=O=O").unwrap();
        assert!(m.hydrogen_count(1).is_err());
    }

    #[test]
    fn rejects_duplicate_bond() {
        let atoms = vec![Atom::new(Element::C, 0), Atom::new(Element::C, 1)];
        let b = Bond {
            a: 0,
            b: 1,
            order: BondOrder::Single,
            in_ring: false,
        };
        assert!(Molecule::new(atoms, vec![b.clone(), b]).is_err());
    }
}
