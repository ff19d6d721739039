//! Fingerprint noising and precursor-mass formula hypotheses.

use rand::seq::SliceRandom;
use rand::Rng;

use frigid_core::chemgraph::{Element, Fingerprint, Formula, PROTON_MASS};
use frigid_core::fragmenter::ppm_error;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ToolError {
    #[error("target Tanimoto {0} is outside (0, 1]")]
    BadTarget(f64),
    #[error("Tanimoto {target} is unreachable within 0.02 for a fingerprint with {active} active bits")]
    Unreachable { target: f64, active: usize },
    #[error("no formula within {ppm} ppm of neutral mass {mass:.5}")]
    NoCandidateFormula { mass: f64, ppm: f64 },
}

pub const NOISE_TOLERANCE: f64 = 0.02;

/// Remove `r` active bits and set `s` inactive ones so that the Tanimoto
/// similarity `(a - r) / (a + s)` to `fp` lands within 0.02 of `q`. The most
/// balanced admissible pair wins, keeping the bit count close to the original.
pub fn noise_fingerprint<R: Rng + ?Sized>(fp: &Fingerprint, q: f64, rng: &mut R) -> Result<Fingerprint, ToolError> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(ToolError::BadTarget(q));
    }
    let mut on = fp.active();
    let a = on.len();
    if a < 3 {
        return Err(ToolError::Unreachable { target: q, active: a });
    }
    let mut off: Vec<usize> = (0..fp.nbits()).filter(|&b| !fp.contains(b)).collect();
    on.shuffle(rng);
    off.shuffle(rng);
    let sim = |r: usize, s: usize| (a - r) as f64 / (a + s) as f64;
    let (r, s) = (0..a)
        .flat_map(|r| {
            let ideal = ((a - r) as f64 / q - a as f64).max(0.0);
            [ideal.floor() as usize, ideal.ceil() as usize]
                .into_iter()
                .filter(|&s| s <= off.len())
                .map(move |s| (r, s))
        })
        .filter(|&(r, s)| (sim(r, s) - q).abs() <= NOISE_TOLERANCE)
        .min_by(|x, y| {
            let key = |&(r, s): &(usize, usize)| (r.abs_diff(s), (sim(r, s) - q).abs());
            let (kx, ky) = (key(x), key(y));
            kx.0.cmp(&ky.0).then(kx.1.total_cmp(&ky.1))
        })
        .ok_or(ToolError::Unreachable { target: q, active: a })?;
    let mut g = fp.clone();
    for &b in &on[..r] {
        g.clear(b);
    }
    for &b in &off[..s] {
        g.set(b);
    }
    Ok(g)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub formula: Formula,
    pub ppm: f64,
    pub violations: u32,
}

/// Elemental-ratio rules a typical small organic molecule satisfies.
fn violations(f: &Formula) -> u32 {
    let c = f.count(Element::C) as f64;
    let h = f.count(Element::H) as f64;
    let n = f.count(Element::N) as f64;
    let o = f.count(Element::O) as f64;
    if c == 0.0 {
        return 4;
    }
    let rdbe = f.rdbe();
    u32::from(!(0.2..=3.1).contains(&(h / c))) + u32::from(n / c > 1.3) + u32::from(o / c > 1.2) + u32::from(rdbe > c)
}

/// Neutral formulae over C, H, N, O, P, S and halogens whose monoisotopic
/// mass lies within `ppm` of `precursor_mz - proton`, with non-negative
/// integer RDBE. Ordered by rule violations, then mass error; truncated to `n`.
pub fn formula_hypotheses(precursor_mz: f64, n: usize, ppm: f64) -> Result<Vec<Hypothesis>, ToolError> {
    let target = precursor_mz - PROTON_MASS;
    let none = || ToolError::NoCandidateFormula { mass: target, ppm };
    if !(target > 1.0) {
        return Err(none());
    }
    let tol = target * ppm * 1e-6;
    let m = |e: Element| e.monoisotopic_mass();
    // (element, cap) for the rare elements, enumerated outermost
    let rare = [
        (Element::I, 2u32),
        (Element::Br, 2),
        (Element::Cl, 3),
        (Element::S, 2),
        (Element::P, 1),
        (Element::F, 6),
    ];
    let mut out = Vec::new();
    let mut counts = [0u32; 6];
    loop {
        let base: f64 = rare.iter().zip(&counts).map(|(&(e, _), &k)| m(e) * k as f64).sum();
        if base <= target + tol {
            for c in 0..=((target + tol - base) / m(Element::C)) as u32 {
                let mc = base + c as f64 * m(Element::C);
                for nn in 0..=((target + tol - mc) / m(Element::N)) as u32 {
                    let mn = mc + nn as f64 * m(Element::N);
                    for o in 0..=((target + tol - mn) / m(Element::O)) as u32 {
                        let mo = mn + o as f64 * m(Element::O);
                        let h = ((target - mo) / m(Element::H)).round();
                        if h < 0.0 {
                            continue;
                        }
                        let mass = mo + h * m(Element::H);
                        if (mass - target).abs() > tol {
                            continue;
                        }
                        let mut f = Formula::from_counts([
                            (Element::C, c),
                            (Element::H, h as u32),
                            (Element::N, nn),
                            (Element::O, o),
                        ]);
                        for (&(e, _), &k) in rare.iter().zip(&counts) {
                            f.add_count(e, k);
                        }
                        let rdbe = f.rdbe();
                        if rdbe < 0.0 || rdbe.fract() != 0.0 {
                            continue;
                        }
                        out.push(Hypothesis {
                            ppm: ppm_error(mass, target),
                            violations: violations(&f),
                            formula: f,
                        });
                    }
                }
            }
        }
        // odometer over the rare-element counts
        let mut i = 0;
        while i < rare.len() {
            counts[i] += 1;
            if counts[i] <= rare[i].1 {
                break;
            }
            counts[i] = 0;
            i += 1;
        }
        if i == rare.len() {
            break;
        }
    }
    if out.is_empty() {
        return Err(none());
    }
    out.sort_by(|a, b| {
        a.violations
            .cmp(&b.violations)
            .then(a.ppm.total_cmp(&b.ppm))
            .then_with(|| a.formula.to_string().cmp(&b.formula.to_string()))
    });
    out.truncate(n);
    Ok(out)
}

/// Split `budget` across `parts` as evenly as possible, earlier parts first.
pub fn split_budget(budget: usize, parts: usize) -> Vec<usize> {
    if parts == 0 {
        return Vec::new();
    }
    (0..parts).map(|i| budget / parts + usize::from(i < budget % parts)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use frigid_core::chemgraph::{monoisotopic_mass, tanimoto, Adduct};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn noise_hits_target() {
        let fp = Fingerprint::from_indices(4096, (0..100).map(|i| i * 37)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = noise_fingerprint(&fp, 0.5, &mut rng).unwrap();
        let t = tanimoto(&g, &fp);
        assert!((0.48..=0.52).contains(&t), "{t}");
        assert!(g.count().abs_diff(100) <= 1);
        // balanced flips give 0.882 or 0.778 here; unbalanced ones reach 0.8
        let small = Fingerprint::from_indices(4096, 0..16).unwrap();
        let t = tanimoto(&noise_fingerprint(&small, 0.8, &mut rng).unwrap(), &small);
        assert!((t - 0.8).abs() <= NOISE_TOLERANCE, "{t}");
        assert_eq!(noise_fingerprint(&fp, 1.0, &mut rng).unwrap(), fp);
        let empty = Fingerprint::empty(4096);
        assert!(noise_fingerprint(&empty, 0.8, &mut rng).is_err());
    }

    #[test]
    fn benzene_among_hypotheses() {
        let c6h6: Formula = "C6H6".parse().unwrap();
        let mz = monoisotopic_mass(&c6h6, Adduct::Proton);
        let h = formula_hypotheses(mz, 5, 5.0).unwrap();
        assert!(h.iter().any(|x| x.formula == c6h6));
        assert_eq!(formula_hypotheses(mz, 1, 5.0).unwrap().len(), 1);
        assert!(matches!(
            formula_hypotheses(0.5, 5, 5.0),
            Err(ToolError::NoCandidateFormula { .. })
        ));
    }

    #[test]
    fn budget_split() {
        assert_eq!(split_budget(128, 5), vec![26, 26, 26, 25, 25]);
        assert_eq!(split_budget(3, 5).iter().sum::<usize>(), 3);
    }
}
