use super::{ChemError, Molecule};

/// Default fingerprint width.
pub const FP_BITS: usize = 4096;

const HASH_SEED: u64 = 0x4652_4947_4944_0001;

/// Fixed-width set of active bit indices.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Fingerprint {
    nbits: usize,
    words: Vec<u64>,
}

impl Fingerprint {
    pub fn empty(nbits: usize) -> Self {
        Fingerprint {
            nbits,
            words: vec![0; nbits.div_ceil(64)],
        }
    }

    pub fn from_indices<I: IntoIterator<Item = usize>>(nbits: usize, bits: I) -> Result<Self, ChemError> {
        let mut fp = Fingerprint::empty(nbits);
        for b in bits {
            if b >= nbits {
                return Err(ChemError::InvalidFingerprint(format!(
                    "bit {b} out of range for width {nbits}"
                )));
            }
            fp.set(b);
        }
        Ok(fp)
    }

    pub fn nbits(&self) -> usize {
        self.nbits
    }

    pub fn set(&mut self, bit: usize) {
        assert!(bit < self.nbits);
        self.words[bit / 64] |= 1 << (bit % 64);
    }

    pub fn clear(&mut self, bit: usize) {
        assert!(bit < self.nbits);
        self.words[bit / 64] &= !(1 << (bit % 64));
    }

    pub fn contains(&self, bit: usize) -> bool {
        bit < self.nbits && self.words[bit / 64] >> (bit % 64) & 1 == 1
    }

    pub fn count(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.words.iter().all(|&w| w == 0)
    }

    /// Active indices in ascending order.
    pub fn active(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.count());
        for (wi, &w) in self.words.iter().enumerate() {
            let mut w = w;
            while w != 0 {
                let b = w.trailing_zeros() as usize;
                out.push(wi * 64 + b);
                w &= w - 1;
            }
        }
        out
    }

    pub fn intersection_count(&self, other: &Fingerprint) -> usize {
        self.words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a & b).count_ones() as usize)
            .sum()
    }

    pub fn union_count(&self, other: &Fingerprint) -> usize {
        self.words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a | b).count_ones() as usize)
            .sum()
    }

    /// Lowercase hex of the bit vector; the most significant bit of the first
    /// hex digit is index 0.
    pub fn to_hex(&self) -> String {
        let mut out = String::with_capacity(self.nbits / 4);
        for chunk in 0..self.nbits.div_ceil(4) {
            let mut v = 0u8;
            for k in 0..4 {
                if self.contains(chunk * 4 + k) {
                    v |= 8 >> k;
                }
            }
            out.push(char::from_digit(v as u32, 16).unwrap());
        }
        out
    }

    pub fn from_hex(hex: &str, nbits: usize) -> Result<Self, ChemError> {
        if hex.len() != nbits.div_ceil(4) {
            return Err(ChemError::InvalidFingerprint(format!(
                "expected {} hex digits, found {}",
                nbits.div_ceil(4),
                hex.len()
            )));
        }
        let mut fp = Fingerprint::empty(nbits);
        for (chunk, c) in hex.chars().enumerate() {
            let v = c
                .to_digit(16)
                .filter(|_| !c.is_ascii_uppercase())
                .ok_or_else(|| ChemError::InvalidFingerprint(format!("bad hex digit {c:?}")))?;
            for k in 0..4 {
                if v & (8 >> k) != 0 {
                    let bit = chunk * 4 + k;
                    if bit >= nbits {
                        return Err(ChemError::InvalidFingerprint("padding bit set".into()));
                    }
                    fp.set(bit);
                }
            }
        }
        Ok(fp)
    }
}

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Order-sensitive 64-bit hash of a word sequence with a pinned seed.
pub fn hash_words(words: &[u64]) -> u64 {
    let mut h = HASH_SEED;
    for &w in words {
        h = mix(h ^ w.wrapping_add(0x9e37_79b9_7f4a_7c15));
    }
    mix(h ^ words.len() as u64)
}

/// Radius-0 invariant of an atom.
pub(crate) fn atom_invariant(mol: &Molecule, atom: usize) -> u64 {
    let a = &mol.atoms()[atom];
    let h = mol.hydrogen_count(atom).unwrap_or(0);
    hash_words(&[
        a.element.atomic_number() as u64,
        mol.degree(atom) as u64,
        a.formal_charge as i64 as u64,
        h as u64,
        mol.atom_in_ring(atom) as u64,
    ])
}

/// ECFP-style circular fingerprint.
///
/// Every atom contributes its radius-0 invariant. At each further radius an
/// atom's invariant is rehashed with the sorted (bond order, neighbor
/// invariant) pairs; it contributes only while its bond environment is still
/// growing.
pub fn morgan_fingerprint(mol: &Molecule, radius: usize, nbits: usize) -> Fingerprint {
    let n = mol.atom_count();
    let nb_bonds = mol.bonds().len();
    let mut fp = Fingerprint::empty(nbits);
    let mut inv: Vec<u64> = (0..n).map(|i| atom_invariant(mol, i)).collect();
    for &v in &inv {
        fp.set((v % nbits as u64) as usize);
    }
    let words = nb_bonds.div_ceil(64).max(1);
    let mut env: Vec<Vec<u64>> = vec![vec![0u64; words]; n];
    for _ in 1..=radius {
        let mut next_inv = Vec::with_capacity(n);
        let mut next_env = env.clone();
        for i in 0..n {
            let mut pairs: Vec<(u64, u64)> = mol
                .neighbors(i)
                .iter()
                .map(|&(nb, bi)| (mol.bonds()[bi].order.code() as u64, inv[nb]))
                .collect();
            pairs.sort_unstable();
            let mut words_in = Vec::with_capacity(1 + 2 * pairs.len());
            words_in.push(inv[i]);
            for (o, v) in pairs {
                words_in.push(o);
                words_in.push(v);
            }
            next_inv.push(hash_words(&words_in));
            for &(nb, bi) in mol.neighbors(i) {
                next_env[i][bi / 64] |= 1 << (bi % 64);
                for w in 0..words {
                    next_env[i][w] |= env[nb][w];
                }
            }
        }
        for i in 0..n {
            if next_env[i] != env[i] {
                fp.set((next_inv[i] % nbits as u64) as usize);
            }
        }
        inv = next_inv;
        env = next_env;
    }
    fp
}

/// |a ∩ b| / |a ∪ b|; two empty fingerprints score 0.
pub fn tanimoto(a: &Fingerprint, b: &Fingerprint) -> f64 {
    assert_eq!(a.nbits, b.nbits, "fingerprint widths differ");
    let union = a.union_count(b);
    if union == 0 {
        return 0.0;
    }
    a.intersection_count(b) as f64 / union as f64
}
