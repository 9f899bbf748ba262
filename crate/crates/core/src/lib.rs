//! Random-subspace margin softmax training.
//!
//! Each training batch draws one random subset of embedding dimensions. Both
//! the embeddings and the classifier's class centers are restricted to that
//! subset, normalized, and fed to an ArcFace/CosFace-style margin softmax.
//! Evaluation always uses the full embedding.
//!
//! The crate also carries the small MLP embedder, synthetic identity data,
//! verification metrics and checkpoints needed to run the method end to end.
//! Hot loops run through [`Exec`], which uses rayon when the `parallel`
//! feature is enabled and gives bitwise identical results either way.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod exec;
pub mod experiment;
pub mod head;
pub mod math;
pub mod mlp;
pub mod rng;
pub mod sampler;
pub mod trainer;

pub use error::{Error, ErrorKind, Result};
pub use exec::Exec;
pub use head::{ClassWeights, HeadOutput, LogitForm, MarginConfig, MarginHead, MarginPreset};
pub use math::{DenseMatrix, IndexSet};
pub use mlp::{MlpSpec, MlpState};
pub use rng::SeededRng;
pub use sampler::{MaskMode, SubspaceConfig};
pub use trainer::{TrainConfig, TrainRecord, Trainer};
