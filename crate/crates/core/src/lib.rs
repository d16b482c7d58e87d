//! DoLFIn: text classification through distributions over latent features.
//!
//! A text is encoded per position, each position is mapped to a
//! distribution over `d` unordered latent features, and the text is
//! represented by the truncated sum of those distributions. Because every
//! quantity on that path is a probability, the support a word lends to a
//! category can be computed exactly from model statistics
//! ([`interpret`]).

pub mod autodiff;
pub mod baselines;
pub mod bolf;
pub mod checkpoint;
pub mod data;
pub mod encoders;
pub mod error;
pub mod gradcheck;
pub mod interpret;
pub mod layers;
pub mod model;
pub mod params;
pub mod synthetic;
pub mod tensor;
pub mod training;

pub use autodiff::{OpKind, Tape, Var};
pub use checkpoint::{Checkpoint, CheckpointHeader};
pub use data::{Dataset, DatasetKind, Example, Split, Vocab};
pub use error::{DolfinError, Result};
pub use interpret::{FeatureSupportTable, Format, WordSupport};
pub use model::{Architecture, Classifier, ModelConfig, Prediction};
pub use params::{Gradients, ParamId, ParamStore};
pub use tensor::{Scalar, Tensor};
pub use training::{Encoded, RunSummary, TrainConfig, TrainHistory};
