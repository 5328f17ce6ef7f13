//! Query-aware visual token selection for long token sequences.
//!
//! The crate is organised bottom-up:
//!
//! * [`numerics`] dense `f64` tensors and a reverse-mode gradient tape.
//! * [`softrank`] hard ranks, isotonic regression, permutahedron soft ranks,
//!   Spearman correlation and the rank loss.
//! * [`model`] token sequences, attention records, the tiny reference decoder
//!   and the planted attention oracle.
//! * [`probe`] needle-in-haystack construction, Recall@K layer profiling and
//!   PCA projection.
//! * [`pipeline`] frame-set partitioning, per-set scoring, top-k and
//!   aggregation.
//! * [`selector`] the lightweight rank-supervised scorer and its trainer.
//! * [`flops`] the analytical prefill cost model.
//! * [`weights`] the binary weight-file format.

pub mod error;
pub mod flops;
pub mod model;
pub mod numerics;
pub mod optim;
pub mod pipeline;
pub mod probe;
pub mod selector;
pub mod softrank;
pub mod weights;

mod transformer;

pub use error::{Error, Result};
pub use model::{
    AttentionRecord, ConcentrationProfile, ModelConfig, ModelWeights, PlantedSpec, RelevanceScores,
    TokenSequence, VisualToken,
};
pub use numerics::{Tape, Tensor, Var};
pub use pipeline::{Budget, SelectedToken, SelectedTokens, SelectionConfig};
pub use probe::{Haystack, HaystackSpec, ProbeResult};
pub use selector::{SelectorConfig, SelectorWeights};
