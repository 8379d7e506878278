//! Token-level kNN datastores over a reference neural language model,
//! interpolated next-token distributions, decoding, and the diagnostics used
//! to study where retrieval helps and how it changes generation.

pub mod corpus;
pub mod datastore;
pub mod decode;
pub mod diagnostics;
pub mod error;
pub mod interp;
mod io_util;
pub mod linalg;
pub mod reflm;
pub mod rng;
pub mod synth;
pub mod textmetrics;

pub type TokenId = u32;

pub use corpus::{build_vocab, decode as detokenize, encode, Vocab};
pub use datastore::{Datastore, DistanceMode, IvfIndex, Neighbor, Retriever};
pub use decode::{generate, DecodingStrategy, GenerationRecord, Retrieval};
pub use error::{Error, Result};
pub use interp::{interpolate, knn_distribution, InterpConfig};
pub use reflm::{ContextVector, ModelParams, ModelShape, NextTokenDistribution};
