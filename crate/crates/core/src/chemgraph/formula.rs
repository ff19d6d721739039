use std::collections::BTreeMap;
use std::fmt;
use std::ops::Add;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{ChemError, Element, Molecule, ELEMENT_SLOTS};

/// Mass of a proton, in Da.
pub const PROTON_MASS: f64 = 1.00727646;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Adduct {
    None,
    Proton,
}

/// Element counts (hydrogens included) plus net charge.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Formula {
    counts: BTreeMap<Element, u32>,
    pub charge: i32,
}

impl Formula {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_counts<I: IntoIterator<Item = (Element, u32)>>(counts: I) -> Self {
        let mut f = Formula::new();
        for (e, c) in counts {
            f.add_count(e, c);
        }
        f
    }

    pub fn count(&self, e: Element) -> u32 {
        self.counts.get(&e).copied().unwrap_or(0)
    }

    pub fn add_count(&mut self, e: Element, n: u32) {
        if n > 0 {
            *self.counts.entry(e).or_insert(0) += n;
        }
    }

    pub fn set_count(&mut self, e: Element, n: u32) {
        if n == 0 {
            self.counts.remove(&e);
        } else {
            self.counts.insert(e, n);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (Element, u32)> + '_ {
        self.counts.iter().map(|(&e, &c)| (e, c))
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    /// Count vector over the fixed element slots.
    pub fn count_vector(&self) -> [u32; ELEMENT_SLOTS] {
        let mut v = [0u32; ELEMENT_SLOTS];
        for (e, c) in self.iter() {
            v[e.slot()] = c;
        }
        v
    }

    /// Ring-plus-double-bond equivalents (halogens count as hydrogens).
    pub fn rdbe(&self) -> f64 {
        let c = self.count(Element::C) as f64;
        let h = self.count(Element::H) as f64;
        let x = (self.count(Element::F)
            + self.count(Element::Cl)
            + self.count(Element::Br)
            + self.count(Element::I)) as f64;
        let n = (self.count(Element::N) + self.count(Element::P) + self.count(Element::B)) as f64;
        c - h / 2.0 - x / 2.0 + n / 2.0 + 1.0
    }
}

impl Add for &Formula {
    type Output = Formula;

    fn add(self, rhs: &Formula) -> Formula {
        let mut out = self.clone();
        for (e, c) in rhs.iter() {
            out.add_count(e, c);
        }
        out.charge += rhs.charge;
        out
    }
}

/// Hill notation: C then H first when carbon is present, everything else
/// alphabetical. Charge is not part of the string.
impl fmt::Display for Formula {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut order: Vec<(Element, u32)> = self.iter().collect();
        let has_carbon = self.count(Element::C) > 0;
        order.sort_by(|a, b| {
            let rank = |e: Element| -> (u8, &'static str) {
                match e {
                    Element::C if has_carbon => (0, ""),
                    Element::H if has_carbon => (1, ""),
                    _ => (2, e.symbol()),
                }
            };
            rank(a.0).cmp(&rank(b.0))
        });
        for (e, c) in order {
            if c == 1 {
                write!(f, "{e}")?;
            } else {
                write!(f, "{e}{c}")?;
            }
        }
        Ok(())
    }
}

impl FromStr for Formula {
    type Err = ChemError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bytes = s.as_bytes();
        let mut f = Formula::new();
        let mut i = 0;
        let bad = || ChemError::InvalidFormula(s.to_string());
        if bytes.is_empty() {
            return Err(bad());
        }
        while i < bytes.len() {
            if !bytes[i].is_ascii_uppercase() {
                return Err(bad());
            }
            let mut j = i + 1;
            if j < bytes.len() && bytes[j].is_ascii_lowercase() {
                j += 1;
            }
            let e: Element = s[i..j].parse().map_err(|_| bad())?;
            let mut k = j;
            while k < bytes.len() && bytes[k].is_ascii_digit() {
                k += 1;
            }
            let n: u32 = if k == j { 1 } else { s[j..k].parse().map_err(|_| bad())? };
            f.add_count(e, n);
            i = k;
        }
        Ok(f)
    }
}

impl Molecule {
    /// Heavy atoms plus explicit and implicit hydrogens; net formal charge.
    pub fn formula(&self) -> Result<Formula, ChemError> {
        let mut f = Formula::new();
        for (i, a) in self.atoms().iter().enumerate() {
            f.add_count(a.element, 1);
            f.add_count(Element::H, self.hydrogen_count(i)? as u32);
            f.charge += a.formal_charge as i32;
        }
        Ok(f)
    }
}

/// Sum of most-abundant-isotope masses, optionally with a proton adduct.
pub fn monoisotopic_mass(f: &Formula, adduct: Adduct) -> f64 {
    let neutral: f64 = f
        .iter()
        .map(|(e, c)| e.monoisotopic_mass() * c as f64)
        .sum();
    match adduct {
        Adduct::None => neutral,
        Adduct::Proton => neutral + PROTON_MASS,
    }
}
