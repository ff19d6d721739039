//! Structure elucidation from tandem mass spectra with a conditional masked
//! diffusion language model and fragment-guided inference-time refinement.

pub mod autograd;
pub mod chemgraph;
pub mod denoiser;
pub mod fragmenter;
pub mod lengthmodel;
pub mod pipeline;
pub mod refine;
pub mod sampler;
pub mod synth;
pub mod tokenizer;
