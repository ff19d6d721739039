use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Number of element slots in the formula count vector. Only the first
/// [`Element::ALL`]`.len()` slots are populated; the rest are reserved and
/// always zero.
pub const ELEMENT_SLOTS: usize = 30;

/// Supported chemical elements.
///
/// The declaration order is the conditioning slot order (C and H first, as in
/// Hill notation, then the remaining organic-subset elements).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Element {
    C,
    H,
    N,
    O,
    P,
    S,
    F,
    Cl,
    Br,
    I,
    B,
}

impl Element {
    pub const ALL: [Element; 11] = [
        Element::C,
        Element::H,
        Element::N,
        Element::O,
        Element::P,
        Element::S,
        Element::F,
        Element::Cl,
        Element::Br,
        Element::I,
        Element::B,
    ];

    pub fn symbol(self) -> &'static str {
        match self {
            Element::C => "C",
            Element::H => "H",
            Element::N => "N",
            Element::O => "O",
            Element::P => "P",
            Element::S => "S",
            Element::F => "F",
            Element::Cl => "Cl",
            Element::Br => "Br",
            Element::I => "I",
            Element::B => "B",
        }
    }

    pub fn atomic_number(self) -> u8 {
        match self {
            Element::H => 1,
            Element::B => 5,
            Element::C => 6,
            Element::N => 7,
            Element::O => 8,
            Element::F => 9,
            Element::P => 15,
            Element::S => 16,
            Element::Cl => 17,
            Element::Br => 35,
            Element::I => 53,
        }
    }

    /// Position of this element in the fixed-length formula count vector.
    pub fn slot(self) -> usize {
        self as usize
    }

    pub fn from_slot(slot: usize) -> Option<Element> {
        Element::ALL.get(slot).copied()
    }

    /// Mass of the most abundant isotope, in Da.
    pub fn monoisotopic_mass(self) -> f64 {
        match self {
            Element::C => 12.000000,
            Element::H => 1.00782503,
            Element::N => 14.00307401,
            Element::O => 15.99491462,
            Element::S => 31.97207117,
            Element::P => 30.97376199,
            Element::F => 18.99840322,
            Element::Cl => 34.96885268,
            Element::Br => 78.9183376,
            Element::I => 126.904473,
            Element::B => 11.00930536,
        }
    }

    /// Allowed neutral valences, ascending.
    pub fn valences(self) -> &'static [u8] {
        match self {
            Element::H => &[1],
            Element::B => &[3],
            Element::C => &[4],
            Element::N => &[3, 5],
            Element::O => &[2],
            Element::P => &[3, 5],
            Element::S => &[2, 4, 6],
            Element::F | Element::Cl | Element::Br | Element::I => &[1],
        }
    }

    /// Elements that may appear without brackets.
    pub fn in_organic_subset(self) -> bool {
        !matches!(self, Element::H)
    }

    /// Elements with a lowercase aromatic form.
    pub fn can_be_aromatic(self) -> bool {
        matches!(
            self,
            Element::B | Element::C | Element::N | Element::O | Element::P | Element::S
        )
    }

    /// Valences allowed for a given formal charge.
    pub fn charged_valences(self, charge: i32) -> Vec<u8> {
        if charge == 0 {
            return self.valences().to_vec();
        }
        let shift: i32 = match self {
            Element::C => -charge.abs(),
            Element::B => -charge,
            Element::H => -charge.abs(),
            _ => charge,
        };
        self.valences()
            .iter()
            .map(|&v| v as i32 + shift)
            .filter(|&v| v >= 0)
            .map(|v| v as u8)
            .collect()
    }
}

impl fmt::Display for Element {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.symbol())
    }
}

impl FromStr for Element {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Element::ALL
            .iter()
            .copied()
            .find(|e| e.symbol() == s)
            .ok_or(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slots_are_dense_and_round_trip() {
        for (i, e) in Element::ALL.iter().enumerate() {
            assert_eq!(e.slot(), i);
            assert_eq!(Element::from_slot(i), Some(*e));
            assert_eq!(e.symbol().parse::<Element>(), Ok(*e));
        }
        assert!(Element::ALL.len() <= ELEMENT_SLOTS);
        assert_eq!(Element::from_slot(ELEMENT_SLOTS - 1), None);
    }

    #[test]
    fn charged_valences_follow_isoelectronic_shift() {
        assert_eq!(Element::N.charged_valences(1), vec![4, 6]);
        assert_eq!(Element::O.charged_valences(-1), vec![1]);
        assert_eq!(Element::C.charged_valences(-1), vec![3]);
        assert_eq!(Element::B.charged_valences(-1), vec![4]);
    }
}
