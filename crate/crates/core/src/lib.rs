//! Self-supervised metric learning over a feature dictionary.
//!
//! The pipeline stores one L2-normalised feature per training sample in a
//! [`Dictionary`], mines pseudo-positive labels from it by combining a
//! similarity threshold, relative-rank consistency and adjacent feature
//! distribution similarity ([`dplm`]), and trains an embedding head with a
//! dictionary-based triplet loss ([`loss`]) that pulls mined positives towards
//! cosine 1 and pushes hard negatives towards cosine -1.
//!
//! Everything operates on feature vectors. The [`synthdata`] module generates
//! identity-clustered corpora for verification and [`eval`] scores retrieval
//! with CMC and mAP.
//!
//! ## Feature flags
//!
//! ### `parallel` (default)
//!   - Runs the similarity kernel, per-probe mining, per-sample forward and
//!     backward passes and per-query evaluation on the rayon thread pool.
//!   - Without it the same code paths run sequentially. Reductions use a
//!     fixed order either way, so results are identical bit for bit.

pub mod cli;
pub mod dplm;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod featurestore;
pub mod io;
pub mod loss;
pub mod par;
pub mod similarity;
pub mod synthdata;
pub mod trainer;
pub mod vector;

pub use dplm::{mine, mine_all, LabelAssignment, MiningKind, MiningResult};
pub use embedding::{EmbeddingModel, ModelConfig};
pub use error::{Error, Result};
pub use eval::{EpochReport, MiningQuality, RetrievalMetrics};
pub use featurestore::{Dictionary, FeatureMatrix};
pub use loss::{LossValue, TripletConfig};
pub use similarity::{SimilarityMatrix, SimilarityVector};
pub use synthdata::{SynthCorpus, SynthSpec};
pub use trainer::{LossKind, TrainConfig, TrainOutcome};
