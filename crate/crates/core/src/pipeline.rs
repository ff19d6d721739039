//! Glue between molecules, tokens, conditioning and refinement.

use rand::Rng;

use crate::chemgraph::{morgan_fingerprint, parse_smiles, ChemError, Fingerprint, Formula, Molecule, FP_BITS};
use crate::denoiser::{ConditioningInput, Denoiser, DenoiserModel, TrainExample};
use crate::fragmenter::ObservedSpectrum;
use crate::lengthmodel::{features, Features};
use crate::refine::{run_refinement, RefineConfig, RefineError, RefineOutcome, RefineTarget};
use crate::lengthmodel::LengthModel;
use crate::sampler::{GenerationConfig, FP_RADIUS};
use crate::tokenizer::{encode, TokenizerError, Vocabulary};

/// A parsed molecule with its formula and fingerprint.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub smiles: String,
    pub mol: Molecule,
    pub formula: Formula,
    pub fp: Fingerprint,
}

impl Prepared {
    pub fn new(smiles: &str) -> Result<Self, ChemError> {
        let mol = parse_smiles(smiles)?;
        Ok(Prepared {
            smiles: smiles.to_string(),
            formula: mol.formula()?,
            fp: morgan_fingerprint(&mol, FP_RADIUS, FP_BITS),
            mol,
        })
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PrepareError {
    #[error(transparent)]
    Chem(#[from] ChemError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
}

/// Training example with the true fingerprint as conditioning.
pub fn example(p: &Prepared, vocab: &Vocabulary, model: &DenoiserModel) -> Result<TrainExample, PrepareError> {
    let seq = encode(&p.smiles, vocab, model.config.max_len)?;
    Ok(TrainExample {
        tokens: seq.ids,
        cond: ConditioningInput::new(&p.formula, &p.fp, model.config.fp_max_active),
    })
}

/// (formula features, content-token count) for length-model fitting.
pub fn length_pair(p: &Prepared, vocab: &Vocabulary, max_len: usize) -> Result<(Features, usize), PrepareError> {
    let seq = encode(&p.smiles, vocab, max_len)?;
    Ok((features(&p.formula), seq.ids.len() - 2))
}

/// Condition on `(formula, fp)` and run the refinement loop against `obs`.
#[allow(clippy::too_many_arguments)]
pub fn elucidate<D: Denoiser, R: Rng + ?Sized>(
    model: &D,
    lengths: &LengthModel,
    vocab: &Vocabulary,
    formula: &Formula,
    fp: &Fingerprint,
    max_active: usize,
    obs: &ObservedSpectrum,
    truth_key: Option<&str>,
    gc: &GenerationConfig,
    rc: &RefineConfig,
    rng: &mut R,
) -> Result<RefineOutcome, RefineError> {
    let ctx = model.condition(&ConditioningInput::new(formula, fp, max_active));
    let target = RefineTarget::<D> {
        ctx: &ctx,
        formula,
        fp,
        obs,
        truth_key,
    };
    run_refinement(model, lengths, vocab, &target, gc, rc, rng)
}
