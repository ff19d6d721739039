use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::ops::Range;

use super::{Atom, Bond, BondOrder, ChemError, Element, Molecule};

/// Lexical unit of a parsed SMILES string with the atoms it touches.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Lexeme {
    pub span: Range<usize>,
    pub kind: LexemeKind,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LexemeKind {
    Atom(usize),
    /// Explicit bond symbol between two atoms.
    Bond(usize, usize),
    /// Ring-closure label; both lexemes of a pair carry the closure endpoints.
    RingClosure(usize, usize),
    BranchOpen,
    BranchClose,
    Dot,
}

impl Lexeme {
    pub fn atoms(&self) -> Vec<usize> {
        match self.kind {
            LexemeKind::Atom(a) => vec![a],
            LexemeKind::Bond(a, b) | LexemeKind::RingClosure(a, b) => vec![a, b],
            _ => Vec::new(),
        }
    }
}

pub fn parse_smiles(text: &str) -> Result<Molecule, ChemError> {
    parse_smiles_lexemes(text).map(|(m, _)| m)
}

struct OpenRing {
    atom: usize,
    order: Option<BondOrder>,
    lexeme: usize,
    bond_lexeme: Option<usize>,
    offset: usize,
}

/// Parse a SMILES string, also returning its lexemes in text order.
pub fn parse_smiles_lexemes(text: &str) -> Result<(Molecule, Vec<Lexeme>), ChemError> {
    if text.is_empty() {
        return Err(ChemError::EmptyInput { offset: 0 });
    }
    let bytes = text.as_bytes();
    let mut atoms: Vec<Atom> = Vec::new();
    let mut bonds: Vec<Bond> = Vec::new();
    let mut lexemes: Vec<Lexeme> = Vec::new();
    let mut prev: Option<usize> = None;
    // (order, lexeme index, byte offset) of a bond symbol awaiting its second atom
    let mut pending: Option<(BondOrder, Option<usize>, usize)> = None;
    let mut branches: Vec<(usize, usize)> = Vec::new();
    let mut rings: BTreeMap<u32, OpenRing> = BTreeMap::new();
    let mut i = 0;

    let add_bond = |bonds: &mut Vec<Bond>,
                    atoms: &[Atom],
                    a: usize,
                    b: usize,
                    order: Option<BondOrder>,
                    offset: usize|
     -> Result<(), ChemError> {
        if a == b || bonds.iter().any(|x| (x.a == a && x.b == b) || (x.a == b && x.b == a)) {
            return Err(ChemError::InvalidBond { offset });
        }
        let order = order.unwrap_or(if atoms[a].aromatic && atoms[b].aromatic {
            BondOrder::Aromatic
        } else {
            BondOrder::Single
        });
        bonds.push(Bond {
            a,
            b,
            order,
            in_ring: false,
        });
        Ok(())
    };

    while i < bytes.len() {
        let c = bytes[i];
        let start = i;
        match c {
            b'(' => {
                if prev.is_none() || pending.is_some() {
                    return Err(ChemError::UnbalancedParenthesis { offset: i });
                }
                branches.push((prev.unwrap(), i));
                lexemes.push(Lexeme {
                    span: i..i + 1,
                    kind: LexemeKind::BranchOpen,
                });
                i += 1;
                if bytes.get(i) == Some(&b')') {
                    return Err(ChemError::UnexpectedChar { offset: i, ch: ')' });
                }
            }
            b')' => {
                let (atom, _) = branches
                    .pop()
                    .ok_or(ChemError::UnbalancedParenthesis { offset: i })?;
                if pending.is_some() {
                    return Err(ChemError::UnexpectedChar { offset: i, ch: ')' });
                }
                prev = Some(atom);
                lexemes.push(Lexeme {
                    span: i..i + 1,
                    kind: LexemeKind::BranchClose,
                });
                i += 1;
            }
            b'.' => {
                if prev.is_none() || pending.is_some() {
                    return Err(ChemError::UnexpectedChar { offset: i, ch: '.' });
                }
                prev = None;
                lexemes.push(Lexeme {
                    span: i..i + 1,
                    kind: LexemeKind::Dot,
                });
                i += 1;
            }
            b'-' | b'=' | b'#' | b':' | b'/' | b'\\' => {
                if prev.is_none() || pending.is_some() {
                    return Err(ChemError::UnexpectedChar {
                        offset: i,
                        ch: c as char,
                    });
                }
                let order = match c {
                    b'=' => BondOrder::Double,
                    b'#' => BondOrder::Triple,
                    b':' => BondOrder::Aromatic,
                    _ => BondOrder::Single,
                };
                lexemes.push(Lexeme {
                    span: i..i + 1,
                    kind: LexemeKind::Bond(prev.unwrap(), usize::MAX),
                });
                pending = Some((order, Some(lexemes.len() - 1), i));
                i += 1;
            }
            b'0'..=b'9' | b'%' => {
                let Some(atom) = prev else {
                    return Err(ChemError::UnexpectedChar {
                        offset: i,
                        ch: c as char,
                    });
                };
                let label = if c == b'%' {
                    let digits = bytes.get(i + 1..i + 3).filter(|d| d.iter().all(u8::is_ascii_digit));
                    let Some(d) = digits else {
                        return Err(ChemError::UnexpectedEnd { offset: i });
                    };
                    i += 3;
                    ((d[0] - b'0') * 10 + (d[1] - b'0')) as u32
                } else {
                    i += 1;
                    (c - b'0') as u32
                };
                lexemes.push(Lexeme {
                    span: start..i,
                    kind: LexemeKind::RingClosure(atom, usize::MAX),
                });
                let lex = lexemes.len() - 1;
                let (order, bond_lexeme) = match pending.take() {
                    Some((o, l, _)) => (Some(o), l),
                    None => (None, None),
                };
                if let Some(open) = rings.remove(&label) {
                    let order = match (open.order, order) {
                        (Some(a), Some(b)) if a != b => {
                            return Err(ChemError::InvalidBond { offset: start })
                        }
                        (a, b) => a.or(b),
                    };
                    add_bond(&mut bonds, &atoms, open.atom, atom, order, start)?;
                    lexemes[open.lexeme].kind = LexemeKind::RingClosure(open.atom, atom);
                    lexemes[lex].kind = LexemeKind::RingClosure(open.atom, atom);
                    for l in [open.bond_lexeme, bond_lexeme].into_iter().flatten() {
                        lexemes[l].kind = LexemeKind::Bond(open.atom, atom);
                    }
                } else {
                    rings.insert(
                        label,
                        OpenRing {
                            atom,
                            order,
                            lexeme: lex,
                            bond_lexeme,
                            offset: start,
                        },
                    );
                }
            }
            _ => {
                let (atom, len) = parse_atom(bytes, i, atoms.len())?;
                atoms.push(atom);
                let idx = atoms.len() - 1;
                if let Some(p) = prev {
                    let (order, bond_lexeme) = match pending.take() {
                        Some((o, l, _)) => (Some(o), l),
                        None => (None, None),
                    };
                    add_bond(&mut bonds, &atoms, p, idx, order, start)?;
                    if let Some(l) = bond_lexeme {
                        lexemes[l].kind = LexemeKind::Bond(p, idx);
                    }
                }
                lexemes.push(Lexeme {
                    span: start..start + len,
                    kind: LexemeKind::Atom(idx),
                });
                prev = Some(idx);
                i += len;
            }
        }
    }
    if let Some((_, _, offset)) = pending {
        return Err(ChemError::UnexpectedEnd { offset });
    }
    if let Some(open) = rings.values().min_by_key(|r| r.offset) {
        return Err(ChemError::UnclosedRing {
            offset: open.offset,
        });
    }
    if let Some(&(_, offset)) = branches.last() {
        return Err(ChemError::UnbalancedParenthesis { offset });
    }
    if atoms.is_empty() {
        return Err(ChemError::EmptyInput { offset: 0 });
    }
    let mol = Molecule::new(atoms, bonds)?;
    Ok((mol, lexemes))
}

fn parse_atom(bytes: &[u8], i: usize, index: usize) -> Result<(Atom, usize), ChemError> {
    let c = bytes[i];
    if c == b'[' {
        return parse_bracket_atom(bytes, i, index);
    }
    let two = bytes.get(i..i + 2);
    let (element, aromatic, len) = match (c, two) {
        (b'C', Some(b"Cl")) => (Element::Cl, false, 2),
        (b'B', Some(b"Br")) => (Element::Br, false, 2),
        (b'B', _) => (Element::B, false, 1),
        (b'C', _) => (Element::C, false, 1),
        (b'N', _) => (Element::N, false, 1),
        (b'O', _) => (Element::O, false, 1),
        (b'P', _) => (Element::P, false, 1),
        (b'S', _) => (Element::S, false, 1),
        (b'F', _) => (Element::F, false, 1),
        (b'I', _) => (Element::I, false, 1),
        (b'b', _) => (Element::B, true, 1),
        (b'c', _) => (Element::C, true, 1),
        (b'n', _) => (Element::N, true, 1),
        (b'o', _) => (Element::O, true, 1),
        (b'p', _) => (Element::P, true, 1),
        (b's', _) => (Element::S, true, 1),
        _ if c.is_ascii_alphabetic() || c == b'*' => {
            return Err(ChemError::UnknownElement { offset: i })
        }
        _ => {
            return Err(ChemError::UnexpectedChar {
                offset: i,
                ch: c as char,
            })
        }
    };
    let mut atom = Atom::new(element, index);
    atom.aromatic = aromatic;
    Ok((atom, len))
}

fn parse_bracket_atom(bytes: &[u8], open: usize, index: usize) -> Result<(Atom, usize), ChemError> {
    let close = bytes[open..]
        .iter()
        .position(|&b| b == b']')
        .map(|p| open + p)
        .ok_or(ChemError::UnexpectedEnd { offset: open })?;
    let mut i = open + 1;
    if bytes.get(i).is_some_and(u8::is_ascii_digit) {
        // isotope labels are outside the supported subset
        return Err(ChemError::UnexpectedChar {
            offset: i,
            ch: bytes[i] as char,
        });
    }
    let sym_start = i;
    let (element, aromatic) = {
        let first = *bytes.get(i).ok_or(ChemError::UnexpectedEnd { offset: i })?;
        let second = bytes.get(i + 1).copied().filter(u8::is_ascii_lowercase);
        let mut found = None;
        if first.is_ascii_uppercase() {
            if let Some(s) = second {
                let sym = [first, s];
                if let Ok(e) = std::str::from_utf8(&sym).unwrap().parse::<Element>() {
                    found = Some((e, false, 2));
                }
            }
            if found.is_none() {
                let sym = [first];
                if let Ok(e) = std::str::from_utf8(&sym).unwrap().parse::<Element>() {
                    found = Some((e, false, 1));
                }
            }
        } else if first.is_ascii_lowercase() {
            let up = first.to_ascii_uppercase();
            if let Ok(e) = std::str::from_utf8(&[up]).unwrap().parse::<Element>() {
                if e.can_be_aromatic() {
                    found = Some((e, true, 1));
                }
            }
        }
        let (e, arom, len) = found.ok_or(ChemError::UnknownElement { offset: sym_start })?;
        i += len;
        (e, arom)
    };
    while i < close && bytes[i] == b'@' {
        i += 1;
    }
    let mut h = 0u8;
    if i < close && bytes[i] == b'H' {
        i += 1;
        h = 1;
        if i < close && bytes[i].is_ascii_digit() {
            h = bytes[i] - b'0';
            i += 1;
        }
    }
    let mut charge: i8 = 0;
    if i < close && (bytes[i] == b'+' || bytes[i] == b'-') {
        let sign: i8 = if bytes[i] == b'+' { 1 } else { -1 };
        let sym = bytes[i];
        i += 1;
        let mut mag: i8 = 1;
        if i < close && bytes[i].is_ascii_digit() {
            mag = (bytes[i] - b'0') as i8;
            i += 1;
        } else {
            while i < close && bytes[i] == sym {
                mag += 1;
                i += 1;
            }
        }
        charge = sign * mag;
    }
    if i < close && bytes[i] == b':' {
        // atom-class labels are accepted and ignored
        i += 1;
        while i < close && bytes[i].is_ascii_digit() {
            i += 1;
        }
    }
    if i != close {
        return Err(ChemError::UnexpectedChar {
            offset: i,
            ch: bytes[i] as char,
        });
    }
    let atom = Atom {
        element,
        formal_charge: charge,
        explicit_h: Some(h),
        aromatic,
        index,
    };
    Ok((atom, close + 1 - open))
}

/// Canonical SMILES for a molecule. Re-parsing the output yields a graph
/// isomorphic to the input.
pub fn write_smiles(mol: &Molecule) -> String {
    super::canon::canonical_key(mol)
}

/// Atom text in normalized form: bare organic-subset symbol when the implicit
/// valence model reproduces the hydrogen count, bracket form otherwise.
pub(super) fn atom_text(mol: &Molecule, atom: usize, hydrogens: u8) -> String {
    let at = &mol.atoms()[atom];
    let symbol = if at.aromatic {
        at.element.symbol().to_ascii_lowercase()
    } else {
        at.element.symbol().to_string()
    };
    let needs_bracket = at.formal_charge != 0
        || !at.element.in_organic_subset()
        || (at.aromatic && !at.element.can_be_aromatic())
        || implicit_if_bare(mol, atom) != Some(hydrogens);
    if !needs_bracket {
        return symbol;
    }
    let mut s = String::from("[");
    s.push_str(&symbol);
    match hydrogens {
        0 => {}
        1 => s.push('H'),
        n => {
            let _ = write!(s, "H{n}");
        }
    }
    match at.formal_charge {
        0 => {}
        1 => s.push('+'),
        -1 => s.push('-'),
        q if q > 0 => {
            let _ = write!(s, "+{q}");
        }
        q => {
            let _ = write!(s, "-{}", -q);
        }
    }
    s.push(']');
    s
}

/// Hydrogen count the parser would assign to this atom written without brackets.
fn implicit_if_bare(mol: &Molecule, atom: usize) -> Option<u8> {
    let mut probe = mol.atoms()[atom].clone();
    probe.explicit_h = None;
    probe.formal_charge = 0;
    let mut atoms = mol.atoms().to_vec();
    atoms[atom] = probe;
    // cheap: neighbors only matter through bonds, which are unchanged
    let m = Molecule {
        atoms,
        bonds: mol.bonds().to_vec(),
        adjacency: (0..mol.atom_count()).map(|i| mol.neighbors(i).to_vec()).collect(),
    };
    m.hydrogen_count(atom).ok()
}

pub(super) fn bond_text(mol: &Molecule, bond: &Bond) -> &'static str {
    let both_aromatic = mol.atoms()[bond.a].aromatic && mol.atoms()[bond.b].aromatic;
    match bond.order {
        BondOrder::Single if both_aromatic => "-",
        BondOrder::Single => "",
        BondOrder::Double => "=",
        BondOrder::Triple => "#",
        BondOrder::Aromatic if both_aromatic => "",
        BondOrder::Aromatic => ":",
    }
}

/// Depth-first SMILES emission with neighbors visited in ascending rank.
pub(super) fn smiles_from_ranks(mol: &Molecule, ranks: &[u32], hydrogens: &[u8]) -> String {
    let n = mol.atom_count();
    let mut components = mol.components();
    for c in components.iter_mut() {
        c.sort_by_key(|&a| ranks[a]);
    }
    let mut parts: Vec<String> = components
        .iter()
        .map(|comp| write_component(mol, ranks, hydrogens, comp[0], n))
        .collect();
    parts.sort();
    parts.join(".")
}

fn write_component(mol: &Molecule, ranks: &[u32], hydrogens: &[u8], root: usize, n: usize) -> String {
    // Pass 1: spanning tree and ring closures.
    let mut visited = vec![false; n];
    let mut children: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut order = Vec::new();
    // ring closures at each atom: (bond index, partner)
    let mut closures: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
    let mut closure_bond = vec![false; mol.bonds().len()];
    let mut tree_bond = vec![false; mol.bonds().len()];
    dfs(
        mol,
        ranks,
        root,
        usize::MAX,
        &mut visited,
        &mut children,
        &mut order,
        &mut closures,
        &mut closure_bond,
        &mut tree_bond,
    );

    // Pass 2: emit.
    let mut out = String::new();
    let mut digits: BTreeMap<usize, u32> = BTreeMap::new();
    let mut free: Vec<bool> = vec![true; 100];
    emit(
        mol,
        hydrogens,
        root,
        None,
        &children,
        &closures,
        &mut digits,
        &mut free,
        &mut out,
    );
    out
}

#[allow(clippy::too_many_arguments)]
fn dfs(
    mol: &Molecule,
    ranks: &[u32],
    atom: usize,
    parent_bond: usize,
    visited: &mut [bool],
    children: &mut [Vec<usize>],
    order: &mut Vec<usize>,
    closures: &mut [Vec<(usize, usize)>],
    closure_bond: &mut [bool],
    tree_bond: &mut [bool],
) {
    visited[atom] = true;
    order.push(atom);
    let mut nbrs: Vec<(usize, usize)> = mol.neighbors(atom).to_vec();
    nbrs.sort_by_key(|&(nb, _)| ranks[nb]);
    for (nb, bi) in nbrs {
        if bi == parent_bond || tree_bond[bi] || closure_bond[bi] {
            continue;
        }
        if visited[nb] {
            closure_bond[bi] = true;
            closures[nb].push((bi, atom));
            closures[atom].push((bi, nb));
        } else {
            tree_bond[bi] = true;
            children[atom].push(nb);
            dfs(
                mol,
                ranks,
                nb,
                bi,
                visited,
                children,
                order,
                closures,
                closure_bond,
                tree_bond,
            );
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn emit(
    mol: &Molecule,
    hydrogens: &[u8],
    atom: usize,
    parent: Option<usize>,
    children: &[Vec<usize>],
    closures: &[Vec<(usize, usize)>],
    digits: &mut BTreeMap<usize, u32>,
    free: &mut [bool],
    out: &mut String,
) {
    if let Some(p) = parent {
        out.push_str(bond_text(mol, mol.bond_between(p, atom).unwrap()));
    }
    out.push_str(&atom_text(mol, atom, hydrogens[atom]));
    // Closings (bond already numbered) first, then openings.
    let (closing, opening): (Vec<_>, Vec<_>) = closures[atom]
        .iter()
        .partition(|(bi, _)| digits.contains_key(bi));
    for &(bi, _) in &closing {
        let d = digits.remove(&bi).unwrap();
        out.push_str(&label_text(d));
        free[d as usize] = true;
    }
    for &(bi, _) in &opening {
        let d = (1..free.len()).find(|&d| free[d]).expect("ring label space exhausted") as u32;
        free[d as usize] = false;
        digits.insert(bi, d);
        out.push_str(bond_text(mol, &mol.bonds()[bi]));
        out.push_str(&label_text(d));
    }
    let kids = &children[atom];
    for (k, &child) in kids.iter().enumerate() {
        let last = k + 1 == kids.len();
        if !last {
            out.push('(');
        }
        emit(mol, hydrogens, child, Some(atom), children, closures, digits, free, out);
        if !last {
            out.push(')');
        }
    }
}

fn label_text(d: u32) -> String {
    if d < 10 {
        d.to_string()
    } else {
        format!("%{d:02}")
    }
}

/// SMILES emitted in the given atom order without canonicalization.
pub fn write_smiles_in_order(mol: &Molecule) -> Result<String, ChemError> {
    let ranks: Vec<u32> = (0..mol.atom_count() as u32).collect();
    let h = mol.hydrogen_counts()?;
    Ok(smiles_from_ranks(mol, &ranks, &h))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ethanol() {
        let m = parse_smiles("CCO").unwrap();
        assert_eq!(m.atom_count(), 3);
        let els: Vec<_> = m.atoms().iter().map(|a| a.element).collect();
        assert_eq!(els, vec![Element::C, Element::C, Element::O]);
        assert_eq!(m.bonds().len(), 2);
        assert!(m.bonds().iter().all(|b| b.order == BondOrder::Single));
    }

    #[test]
    fn benzene_is_one_aromatic_ring() {
        let m = parse_smiles("c1ccccc1").unwrap();
        assert_eq!(m.atom_count(), 6);
        assert!(m.atoms().iter().all(|a| a.aromatic && a.element == Element::C));
        assert_eq!(m.bonds().len(), 6);
        assert!(m.bonds().iter().all(|b| b.order == BondOrder::Aromatic && b.in_ring));
        for i in 0..6 {
            assert_eq!(m.degree(i), 2);
        }
        assert!(m.bond_between(0, 5).is_some());
    }

    #[test]
    fn error_offsets() {
        assert_eq!(
            parse_smiles("C(").unwrap_err(),
            ChemError::UnbalancedParenthesis { offset: 1 }
        );
        assert_eq!(parse_smiles("").unwrap_err(), ChemError::EmptyInput { offset: 0 });
        assert_eq!(
            parse_smiles("CC1CC").unwrap_err(),
            ChemError::UnclosedRing { offset: 2 }
        );
        assert_eq!(
            parse_smiles("CCX").unwrap_err(),
            ChemError::UnknownElement { offset: 2 }
        );
        assert_eq!(
            parse_smiles("C)").unwrap_err(),
            ChemError::UnbalancedParenthesis { offset: 1 }
        );
        assert_eq!(
            parse_smiles("C[Xe]").unwrap_err(),
            ChemError::UnknownElement { offset: 2 }
        );
        assert!(parse_smiles("C1C1").is_err());
        assert!(parse_smiles("CC=").is_err());
    }

    #[test]
    fn bracket_atoms() {
        let m = parse_smiles("[NH4+]").unwrap();
        let a = &m.atoms()[0];
        assert_eq!(a.element, Element::N);
        assert_eq!(a.formal_charge, 1);
        assert_eq!(a.explicit_h, Some(4));
        let m = parse_smiles("C[O-]").unwrap();
        assert_eq!(m.atoms()[1].formal_charge, -1);
        assert_eq!(m.atoms()[1].explicit_h, Some(0));
        let m = parse_smiles("[C@@H](F)(Cl)Br").unwrap();
        assert_eq!(m.atoms()[0].explicit_h, Some(1));
        let m = parse_smiles("[Fe+2]");
        assert!(m.is_err());
        let m = parse_smiles("[O--]").unwrap();
        assert_eq!(m.atoms()[0].formal_charge, -2);
    }

    #[test]
    fn stereo_markers_are_ignored() {
        let a = parse_smiles("F/C=C/F").unwrap();
        let b = parse_smiles("FC=CF").unwrap();
        assert_eq!(canonical_key_of(&a), canonical_key_of(&b));
    }

    fn canonical_key_of(m: &Molecule) -> String {
        super::super::canonical_key(m)
    }

    #[test]
    fn ring_closure_with_bond_symbol_and_percent_labels() {
        let m = parse_smiles("C=1CCC1").unwrap();
        assert_eq!(m.bond_between(0, 3).unwrap().order, BondOrder::Double);
        let m = parse_smiles("C%12CC%12").unwrap();
        assert_eq!(m.bonds().len(), 3);
        let (_, lex) = parse_smiles_lexemes("C%12CC%12").unwrap();
        assert_eq!(lex[1].span, 1..4);
        assert_eq!(lex[1].kind, LexemeKind::RingClosure(0, 2));
    }

    #[test]
    fn dot_disconnection() {
        let m = parse_smiles("CC.O").unwrap();
        assert_eq!(m.components().len(), 2);
    }

    #[test]
    fn lexemes_cover_input() {
        let s = "CC(=O)Nc1ccc(Cl)cc1";
        let (_, lex) = parse_smiles_lexemes(s).unwrap();
        let joined: String = lex.iter().map(|l| &s[l.span.clone()]).collect();
        assert_eq!(joined, s);
        let bond = lex.iter().find(|l| &s[l.span.clone()] == "=").unwrap();
        assert_eq!(bond.kind, LexemeKind::Bond(1, 2));
    }

    #[test]
    fn writer_examples() {
        assert_eq!(write_smiles(&parse_smiles("C").unwrap()), "C");
        let benz = write_smiles(&parse_smiles("c1ccccc1").unwrap());
        let back = parse_smiles(&benz).unwrap();
        assert_eq!(back.atom_count(), 6);
        assert!(back.atoms().iter().all(|a| a.aromatic));
        let s = write_smiles(&parse_smiles("c1ccccc1-c1ccccc1").unwrap());
        assert!(s.contains('-'), "{s}");
        let s = write_smiles(&parse_smiles("[NH4+]").unwrap());
        assert_eq!(s, "[NH4+]");
        let s = write_smiles(&parse_smiles("c1cc[nH]c1").unwrap());
        assert!(s.contains("[nH]"), "{s}");
        let s = write_smiles(&parse_smiles("[CH4]").unwrap());
        assert_eq!(s, "C");
    }

    #[test]
    fn in_order_writer_round_trips() {
        let m = parse_smiles("OC1CCC(N)CC1").unwrap();
        let s = write_smiles_in_order(&m).unwrap();
        assert_eq!(canonical_key_of(&parse_smiles(&s).unwrap()), canonical_key_of(&m));
    }
}
