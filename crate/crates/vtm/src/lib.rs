//! Table-to-text generation with disentangled template and content latents.
//!
//! The crate trains a variational template machine: sentences are produced
//! from a template latent `z` (sampled from a Gaussian prior at generation
//! time) and a content latent `c` (pinned to the encoding of the input table
//! for paired data, inferred from the sentence for raw text). Training mixes
//! paired table-sentence data with raw sentences and adds preserving-template,
//! preserving-content and mutual-information losses on top of the two ELBOs.
//!
//! Everything runs in `f64` on a small reverse-mode tape ([`tensor`]) so that
//! gradients can be audited against finite differences and training runs are
//! bit-for-bit reproducible under a fixed seed.

pub mod cli;
pub mod corpus;
pub mod generator;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod rng;
pub mod sampling;
pub mod table_encoder;
pub mod tensor;
pub mod trainer;
