//! Domain-generalizable point cloud classification with selective
//! state-space sequence blocks.
//!
//! The pipeline tokenizes a cloud into a serialized patch sequence, runs it
//! through stages of selective-scan blocks and, after the first stage,
//! applies three plug-in modules: a learned Gumbel-Softmax token mask
//! ([`msd`]), cross-domain same-class feature aggregation with a shared
//! global prompt ([`scfa`]), and two scan passes over the aggregated
//! sequence in intra- and cross-block order ([`dds`]).

pub mod bench;
pub mod checkpoint;
pub mod data;
pub mod dds;
pub mod gradsuite;
pub mod layers;
pub mod model;
pub mod msd;
pub mod params;
pub mod rng;
pub mod scfa;
pub mod ssm;
pub mod tensor;
pub mod tokenizer;
pub mod train;
