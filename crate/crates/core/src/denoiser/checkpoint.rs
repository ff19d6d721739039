//! Binary checkpoint: magic, version, length-prefixed JSON header, then
//! little-endian f32 blobs in manifest order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::net::param_shapes;
use super::{AdamState, DenoiserError, DenoiserModel, ModelConfig, ParamSet, TrainState};
use crate::autograd::Mat;
use crate::tokenizer::Specials;

const MAGIC: &[u8; 8] = b"FRGDCKPT";
const VERSION: u16 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: [usize; 2],
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    specials: Specials,
    vocab_hash: String,
    step: usize,
    has_optimizer: bool,
    blob_bytes: u64,
    manifest: Vec<ManifestEntry>,
}

/// Model plus optional optimizer state for resuming.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: DenoiserModel,
    pub state: Option<TrainState>,
}

/// Write atomically (temporary file then rename).
pub fn save_checkpoint(model: &DenoiserModel, state: Option<&TrainState>, path: &Path) -> Result<(), DenoiserError> {
    let mut groups: Vec<(&str, &[Mat<f32>])> = vec![("param/", &model.params.mats), ("ema/", &model.ema.mats)];
    if let Some(st) = state {
        groups.push(("adam_m/", &st.adam.m));
        groups.push(("adam_v/", &st.adam.v));
    }
    let mut manifest = Vec::new();
    let mut offset = 0u64;
    for (prefix, mats) in &groups {
        for (n, m) in model.params.names.iter().zip(mats.iter()) {
            manifest.push(ManifestEntry {
                name: format!("{prefix}{n}"),
                shape: [m.rows, m.cols],
                offset,
            });
            offset += 4 * m.len() as u64;
        }
    }
    let header = Header {
        config: model.config.clone(),
        specials: model.specials,
        vocab_hash: model.vocab_hash.clone(),
        step: state.map_or(0, |s| s.step),
        has_optimizer: state.is_some(),
        blob_bytes: offset,
        manifest,
    };
    let json = serde_json::to_vec(&header).map_err(|e| DenoiserError::CorruptCheckpoint(e.to_string()))?;
    let mut buf = Vec::with_capacity(14 + json.len() + offset as usize);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    for m in groups.iter().flat_map(|(_, mats)| mats.iter()) {
        for x in &m.data {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&buf)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Read a checkpoint. With `expected_vocab_hash`, a checkpoint trained for a
/// different vocabulary is rejected.
pub fn load_checkpoint(path: &Path, expected_vocab_hash: Option<&str>) -> Result<Checkpoint, DenoiserError> {
    let bytes = fs::read(path)?;
    decode(&bytes, expected_vocab_hash)
}

fn corrupt(msg: impl Into<String>) -> DenoiserError {
    DenoiserError::CorruptCheckpoint(msg.into())
}

fn decode(bytes: &[u8], expected_vocab_hash: Option<&str>) -> Result<Checkpoint, DenoiserError> {
    if bytes.len() < 14 || &bytes[..8] != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = u16::from_le_bytes([bytes[8], bytes[9]]);
    if version != VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    let hlen = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
    let body = 14usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| corrupt("truncated header"))?;
    let header: Header = serde_json::from_slice(&bytes[14..body]).map_err(|e| corrupt(format!("header: {e}")))?;
    let blob = &bytes[body..];
    if blob.len() as u64 != header.blob_bytes {
        return Err(corrupt(format!(
            "expected {} blob bytes, found {}",
            header.blob_bytes,
            blob.len()
        )));
    }
    if let Some(h) = expected_vocab_hash {
        if h != header.vocab_hash {
            return Err(DenoiserError::ConfigMismatch(format!(
                "vocabulary hash {} does not match {}",
                header.vocab_hash, h
            )));
        }
    }
    header
        .config
        .validate()
        .map_err(|e| DenoiserError::ConfigMismatch(e.to_string()))?;
    let shapes = param_shapes(&header.config);
    let groups = if header.has_optimizer { 4 } else { 2 };
    if header.manifest.len() != groups * shapes.len() {
        return Err(DenoiserError::ConfigMismatch("manifest does not match the configured layout".into()));
    }
    let prefixes = ["param/", "ema/", "adam_m/", "adam_v/"];
    let mut sets: Vec<Vec<Mat<f32>>> = Vec::new();
    for (g, prefix) in prefixes.iter().enumerate().take(groups) {
        let mut mats = Vec::with_capacity(shapes.len());
        for (i, (name, r, c)) in shapes.iter().enumerate() {
            let e = &header.manifest[g * shapes.len() + i];
            if e.name != format!("{prefix}{name}") || e.shape != [*r, *c] {
                return Err(DenoiserError::ConfigMismatch(format!("unexpected manifest entry {}", e.name)));
            }
            let start = e.offset as usize;
            let end = start + 4 * r * c;
            if end > blob.len() {
                return Err(corrupt(format!("blob for {} out of bounds", e.name)));
            }
            let data = blob[start..end]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            mats.push(Mat::from_vec(*r, *c, data));
        }
        sets.push(mats);
    }
    let names: Vec<String> = shapes.into_iter().map(|(n, _, _)| n).collect();
    let mut it = sets.into_iter();
    let params = ParamSet {
        names: names.clone(),
        mats: it.next().unwrap(),
    };
    let ema = ParamSet {
        names,
        mats: it.next().unwrap(),
    };
    let state = if header.has_optimizer {
        Some(TrainState {
            step: header.step,
            adam: AdamState {
                m: it.next().unwrap(),
                v: it.next().unwrap(),
            },
        })
    } else {
        None
    };
    let model = DenoiserModel::from_parts(header.config, header.specials, header.vocab_hash, params, ema);
    Ok(Checkpoint { model, state })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model() -> DenoiserModel {
        let mut c = ModelConfig::desk();
        c.n_layers = 1;
        c.d_model = 8;
        c.n_heads = 2;
        c.d_ff = 8;
        c.max_len = 10;
        c.vocab_size = 7;
        c.fp_bits = 32;
        c.fp_attn_layers = 1;
        let sp = Specials {
            pad: 0,
            bos: 1,
            eos: 2,
            mask: 3,
        };
        DenoiserModel::init(c, sp, "abc", &mut ChaCha8Rng::seed_from_u64(4)).unwrap()
    }

    #[test]
    fn round_trip_and_failures() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let m = model();
        save_checkpoint(&m, None, &p).unwrap();
        let back = load_checkpoint(&p, Some("abc")).unwrap();
        assert_eq!(back.model.params, m.params);
        assert_eq!(back.model.ema, m.ema);
        assert!(back.state.is_none());
        assert!(matches!(
            load_checkpoint(&p, Some("other")),
            Err(DenoiserError::ConfigMismatch(_))
        ));
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_checkpoint(&p, None), Err(DenoiserError::CorruptCheckpoint(_))));
        fs::write(&p, b"NOTACKPT\x01\x00").unwrap();
        assert!(matches!(load_checkpoint(&p, None), Err(DenoiserError::CorruptCheckpoint(_))));
    }
}
