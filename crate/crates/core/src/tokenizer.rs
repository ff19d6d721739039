//! Byte-pair encoding over primitive SMILES tokens with per-token atom spans.
//!
//! Primitive tokens are the lexemes of the SMILES grammar (atoms, bond
//! symbols, ring-closure labels, parentheses, dots), so every merged token
//! covers a well-defined set of atoms.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::chemgraph::{parse_smiles_lexemes, ChemError};

pub type TokenId = u32;

pub const PAD: &str = "[PAD]";
pub const BOS: &str = "[BOS]";
pub const EOS: &str = "[EOS]";
pub const MASK: &str = "[MASK]";

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error(transparent)]
    Parse(#[from] ChemError),
    #[error("empty training corpus")]
    EmptyCorpus,
    #[error("target vocabulary {target} is below the required minimum {required}")]
    VocabTooSmall { target: usize, required: usize },
    #[error("token {0:?} is not in the vocabulary")]
    UnknownToken(String),
    #[error("sequence of {len} tokens exceeds max_len {max_len}")]
    SequenceTooLong { len: usize, max_len: usize },
    #[error("sequence contains a [MASK] token at position {0}")]
    MaskInSequence(usize),
    #[error("token id {0} out of range")]
    BadTokenId(TokenId),
    #[error("malformed vocabulary: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Specials {
    pub pad: TokenId,
    pub bos: TokenId,
    pub eos: TokenId,
    pub mask: TokenId,
}

impl Specials {
    pub fn contains(&self, id: TokenId) -> bool {
        id == self.pad || id == self.bos || id == self.eos || id == self.mask
    }
}

#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    token_to_id: HashMap<String, TokenId>,
    merges: Vec<(String, String)>,
    merge_rank: HashMap<(TokenId, TokenId), (usize, TokenId)>,
    specials: Specials,
}

/// On-disk vocabulary layout.
#[derive(Serialize, Deserialize)]
struct VocabFile {
    tokens: Vec<String>,
    merges: Vec<[String; 2]>,
    specials: Specials,
}

impl Vocabulary {
    fn from_parts(tokens: Vec<String>, merges: Vec<(String, String)>) -> Result<Self, TokenizerError> {
        let mut token_to_id = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if token_to_id.insert(t.clone(), i as TokenId).is_some() {
                return Err(TokenizerError::Malformed(format!("duplicate token {t:?}")));
            }
        }
        let id = |s: &str| {
            token_to_id
                .get(s)
                .copied()
                .ok_or_else(|| TokenizerError::Malformed(format!("missing token {s:?}")))
        };
        let specials = Specials {
            pad: id(PAD)?,
            bos: id(BOS)?,
            eos: id(EOS)?,
            mask: id(MASK)?,
        };
        let mut merge_rank = HashMap::with_capacity(merges.len());
        for (rank, (a, b)) in merges.iter().enumerate() {
            let key = (id(a)?, id(b)?);
            let out = id(&format!("{a}{b}"))?;
            merge_rank.entry(key).or_insert((rank, out));
        }
        Ok(Vocabulary {
            tokens,
            token_to_id,
            merges,
            merge_rank,
            specials,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn specials(&self) -> Specials {
        self.specials
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.token_to_id.get(token).copied()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn to_json(&self) -> String {
        let file = VocabFile {
            tokens: self.tokens.clone(),
            merges: self.merges.iter().map(|(a, b)| [a.clone(), b.clone()]).collect(),
            specials: self.specials,
        };
        serde_json::to_string_pretty(&file).expect("vocabulary serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, TokenizerError> {
        let file: VocabFile = serde_json::from_str(text)?;
        let merges = file.merges.into_iter().map(|[a, b]| (a, b)).collect();
        let v = Vocabulary::from_parts(file.tokens, merges)?;
        if v.specials != file.specials {
            return Err(TokenizerError::Malformed("special ids disagree with token list".into()));
        }
        Ok(v)
    }

    pub fn save(&self, path: &Path) -> Result<(), TokenizerError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TokenizerError> {
        Vocabulary::from_json(&std::fs::read_to_string(path)?)
    }

    /// SHA-256 of the serialized vocabulary, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }
}

/// Token ids with the atoms each token covers. Non-atom tokens (specials,
/// branch parentheses, dots) carry empty spans.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<TokenId>,
    pub atom_spans: Vec<Vec<usize>>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Sequence of `content` masks between `[BOS]` and `[EOS]`.
    pub fn masked(content: usize, specials: Specials) -> Self {
        let mut ids = Vec::with_capacity(content + 2);
        ids.push(specials.bos);
        ids.extend(std::iter::repeat_n(specials.mask, content));
        ids.push(specials.eos);
        TokenSequence {
            atom_spans: vec![Vec::new(); ids.len()],
            ids,
        }
    }
}

/// Split a SMILES string into primitive tokens with their atom sets.
pub fn base_tokenize(smiles: &str) -> Result<Vec<(String, Vec<usize>)>, TokenizerError> {
    let (_, lexemes) = parse_smiles_lexemes(smiles)?;
    Ok(lexemes
        .into_iter()
        .map(|l| {
            let mut atoms = l.atoms();
            atoms.sort_unstable();
            (smiles[l.span.clone()].to_string(), atoms)
        })
        .collect())
}

/// Greedy BPE: repeatedly merge the most frequent adjacent pair (ties broken by
/// the lexicographically smallest pair) until the vocabulary reaches
/// `target_vocab` or no pair occurs at least twice.
pub fn train_bpe<I, S>(corpus: I, target_vocab: usize) -> Result<Vocabulary, TokenizerError>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut word_counts: BTreeMap<Vec<String>, u64> = BTreeMap::new();
    for s in corpus {
        let toks: Vec<String> = base_tokenize(s.as_ref())?.into_iter().map(|(t, _)| t).collect();
        *word_counts.entry(toks).or_insert(0) += 1;
    }
    if word_counts.is_empty() {
        return Err(TokenizerError::EmptyCorpus);
    }
    let mut primitives: Vec<String> = word_counts.keys().flatten().cloned().collect();
    primitives.sort();
    primitives.dedup();
    let mut tokens: Vec<String> = [PAD, BOS, EOS, MASK].iter().map(|s| s.to_string()).collect();
    tokens.extend(primitives);
    let required = tokens.len();
    if target_vocab < required {
        return Err(TokenizerError::VocabTooSmall {
            target: target_vocab,
            required,
        });
    }
    let mut index: HashMap<String, TokenId> = tokens
        .iter()
        .enumerate()
        .map(|(i, t)| (t.clone(), i as TokenId))
        .collect();
    let mut words: Vec<(Vec<TokenId>, u64)> = word_counts
        .into_iter()
        .map(|(w, c)| (w.iter().map(|t| index[t]).collect(), c))
        .collect();
    let mut merges = Vec::new();

    while tokens.len() < target_vocab {
        let mut pair_counts: HashMap<(TokenId, TokenId), u64> = HashMap::new();
        for (w, c) in &words {
            for p in w.windows(2) {
                *pair_counts.entry((p[0], p[1])).or_insert(0) += c;
            }
        }
        let best = pair_counts
            .iter()
            .filter(|&(_, &c)| c >= 2)
            .max_by(|(pa, ca), (pb, cb)| {
                ca.cmp(cb).then_with(|| {
                    let ka = (&tokens[pa.0 as usize], &tokens[pa.1 as usize]);
                    let kb = (&tokens[pb.0 as usize], &tokens[pb.1 as usize]);
                    kb.cmp(&ka)
                })
            })
            .map(|(&p, _)| p);
        let Some((a, b)) = best else { break };
        let merged = format!("{}{}", tokens[a as usize], tokens[b as usize]);
        let new_id = *index.entry(merged.clone()).or_insert_with(|| {
            tokens.push(merged);
            (tokens.len() - 1) as TokenId
        });
        merges.push((tokens[a as usize].clone(), tokens[b as usize].clone()));
        for (w, _) in words.iter_mut() {
            *w = merge_pair(w, a, b, new_id);
        }
    }
    Vocabulary::from_parts(tokens, merges)
}

fn merge_pair(w: &[TokenId], a: TokenId, b: TokenId, out: TokenId) -> Vec<TokenId> {
    let mut res = Vec::with_capacity(w.len());
    let mut i = 0;
    while i < w.len() {
        if i + 1 < w.len() && w[i] == a && w[i + 1] == b {
            res.push(out);
            i += 2;
        } else {
            res.push(w[i]);
            i += 1;
        }
    }
    res
}

/// Tokenize, apply merges in training order, and wrap with `[BOS]`/`[EOS]`.
pub fn encode(smiles: &str, vocab: &Vocabulary, max_len: usize) -> Result<TokenSequence, TokenizerError> {
    let mut ids = Vec::new();
    let mut spans: Vec<Vec<usize>> = Vec::new();
    for (tok, atoms) in base_tokenize(smiles)? {
        let id = vocab.id(&tok).ok_or(TokenizerError::UnknownToken(tok))?;
        ids.push(id);
        spans.push(atoms);
    }
    // Lowest-rank applicable merge first, which equals replaying the merge
    // list in training order.
    loop {
        let best = ids
            .windows(2)
            .enumerate()
            .filter_map(|(i, p)| vocab.merge_rank.get(&(p[0], p[1])).map(|&(r, out)| (r, i, out)))
            .min();
        let Some((rank, _, out)) = best else { break };
        let (a, b) = (ids_of(vocab, &vocab.merges[rank].0), ids_of(vocab, &vocab.merges[rank].1));
        let mut new_ids = Vec::with_capacity(ids.len());
        let mut new_spans = Vec::with_capacity(ids.len());
        let mut i = 0;
        while i < ids.len() {
            if i + 1 < ids.len() && ids[i] == a && ids[i + 1] == b {
                new_ids.push(out);
                let mut s = spans[i].clone();
                s.extend_from_slice(&spans[i + 1]);
                s.sort_unstable();
                s.dedup();
                new_spans.push(s);
                i += 2;
            } else {
                new_ids.push(ids[i]);
                new_spans.push(std::mem::take(&mut spans[i]));
                i += 1;
            }
        }
        ids = new_ids;
        spans = new_spans;
    }
    let sp = vocab.specials();
    ids.insert(0, sp.bos);
    spans.insert(0, Vec::new());
    ids.push(sp.eos);
    spans.push(Vec::new());
    if ids.len() > max_len {
        return Err(TokenizerError::SequenceTooLong {
            len: ids.len(),
            max_len,
        });
    }
    Ok(TokenSequence {
        ids,
        atom_spans: spans,
    })
}

fn ids_of(vocab: &Vocabulary, tok: &str) -> TokenId {
    vocab.token_to_id[tok]
}

/// Concatenate token strings between `[BOS]` and `[EOS]`, skipping `[PAD]`.
/// The result is not validated as SMILES.
pub fn decode(seq: &[TokenId], vocab: &Vocabulary) -> Result<String, TokenizerError> {
    let sp = vocab.specials();
    let mut out = String::new();
    for (pos, &id) in seq.iter().enumerate() {
        if id == sp.mask {
            return Err(TokenizerError::MaskInSequence(pos));
        }
        if id == sp.eos {
            break;
        }
        if id == sp.bos || id == sp.pad {
            continue;
        }
        out.push_str(vocab.token(id).ok_or(TokenizerError::BadTokenId(id))?);
    }
    Ok(out)
}
