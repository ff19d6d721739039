//! JSONL spectrum records.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use frigid_core::chemgraph::{Fingerprint, Formula, FP_BITS};
use frigid_core::fragmenter::ObservedSpectrum;
use frigid_core::pipeline::Prepared;

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("line {line}: {msg}")]
    Invalid { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Fingerprint as binary hex or per-bit probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FingerprintInput {
    Hex(String),
    Probabilities(Vec<f64>),
}

impl FingerprintInput {
    pub fn resolve(&self, threshold: f64) -> Result<Fingerprint, String> {
        match self {
            FingerprintInput::Hex(h) => Fingerprint::from_hex(h, FP_BITS).map_err(|e| e.to_string()),
            FingerprintInput::Probabilities(p) => {
                if p.len() != FP_BITS {
                    return Err(format!("{} probabilities, expected {FP_BITS}", p.len()));
                }
                if let Some(x) = p.iter().find(|x| !(0.0..=1.0).contains(*x)) {
                    return Err(format!("probability {x} outside [0, 1]"));
                }
                Fingerprint::from_indices(FP_BITS, (0..FP_BITS).filter(|&i| p[i] >= threshold))
                    .map_err(|e| e.to_string())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub smiles: Option<String>,
    pub formula: String,
    pub spectrum: Vec<[f64; 2]>,
    pub precursor_mz: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fingerprint: Option<FingerprintInput>,
}

/// A record after validation.
#[derive(Debug, Clone)]
pub struct Checked {
    pub record: DatasetRecord,
    pub formula: Formula,
    pub truth: Option<Prepared>,
    pub spectrum: ObservedSpectrum,
}

impl DatasetRecord {
    /// Parse the formula, check it against the SMILES, check peak order, and
    /// build the observed spectrum.
    pub fn check(self) -> Result<Checked, String> {
        let formula: Formula = self.formula.parse().map_err(|e| format!("formula {:?}: {e}", self.formula))?;
        let truth = match &self.smiles {
            Some(s) => {
                let p = Prepared::new(s).map_err(|e| format!("smiles {s:?}: {e}"))?;
                if p.formula != formula {
                    return Err(format!("declared formula {} but smiles {s:?} has {}", self.formula, p.formula));
                }
                Some(p)
            }
            None => None,
        };
        if self.spectrum.windows(2).any(|w| w[0][0] > w[1][0]) {
            return Err("spectrum is not sorted by m/z".into());
        }
        let spectrum = ObservedSpectrum::new(self.spectrum.iter().map(|p| (p[0], p[1])).collect(), self.precursor_mz)
            .map_err(|e| e.to_string())?;
        Ok(Checked {
            record: self,
            formula,
            truth,
            spectrum,
        })
    }
}

pub fn read_jsonl<R: BufRead>(reader: R) -> Result<Vec<Checked>, DatasetError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let invalid = |msg: String| DatasetError::Invalid { line: line_no, msg };
        let rec: DatasetRecord = serde_json::from_str(&line).map_err(|e| invalid(e.to_string()))?;
        out.push(rec.check().map_err(invalid)?);
    }
    Ok(out)
}

pub fn load(path: &Path) -> Result<Vec<Checked>, DatasetError> {
    read_jsonl(std::io::BufReader::new(std::fs::File::open(path)?))
}

pub fn write_jsonl<W: Write>(records: &[DatasetRecord], mut w: W) -> std::io::Result<()> {
    for r in records {
        writeln!(w, "{}", serde_json::to_string(r).expect("record serializes"))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(smiles: &str, formula: &str) -> String {
        format!(r#"{{"id":"a","smiles":"{smiles}","formula":"{formula}","spectrum":[[15.0,1.0],[31.0,0.5]],"precursor_mz":47.049}}"#)
    }

    #[test]
    fn formula_mismatch_rejected() {
        assert!(read_jsonl(rec("CCO", "C2H6O").as_bytes()).is_ok());
        let err = read_jsonl(rec("CCO", "C2H4O").as_bytes()).unwrap_err();
        assert!(matches!(err, DatasetError::Invalid { line: 1, .. }), "{err}");
    }

    #[test]
    fn probabilities_are_thresholded() {
        let mut p = vec![0.0; FP_BITS];
        p[3] = 0.2;
        p[9] = 0.1;
        let fp = FingerprintInput::Probabilities(p).resolve(0.187).unwrap();
        assert_eq!(fp.active(), vec![3]);
    }

    #[test]
    fn unsorted_spectrum_rejected() {
        let line = r#"{"id":"a","formula":"C2H6O","spectrum":[[31.0,1.0],[15.0,0.5]],"precursor_mz":47.049}"#;
        assert!(read_jsonl(line.as_bytes()).is_err());
    }
}
