//! Prompt-ensemble classification over frozen embeddings.
//!
//! Each class keeps `K` cosine sub-classifiers initialized from prompt
//! embeddings. Their temperature-scaled logits are combined per class
//! through a learned attention matrix, and training adds an entropy
//! penalty that pushes every sample toward a single sub-classifier of each
//! class so the heads do not collapse onto the class centroid.

pub mod error;
pub mod numerics;
pub mod tensor;
pub mod model;
pub mod objective;
pub mod datastore;
pub mod trainer;
pub mod synth;
pub mod evalsuite;

pub use error::{CapelError, Result};
pub use model::{AlphaInit, CapelModel, ClassScores, LogitsTensor, Prediction, ZeroShotClassifier};
pub use objective::{LossBreakdown, ObjectiveConfig, PcScope};
pub use trainer::{FewShotSplit, Shots, TrainConfig, TrainHistory};
pub use tensor::{ClassIndex, EmbeddingMatrix, PromptTensor};
