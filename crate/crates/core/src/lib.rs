//! Zero-shot classification with latent bilinear compatibility models.
//!
//! An image embedding `x` and a class embedding `y` are scored by
//! `F(x, y) = max_i xᵀ W_i y` over `K` learned matrices, and an image is
//! assigned to the candidate class with the highest score. The matrices are
//! trained with a sampled ranking hinge loss by plain SGD; `K` is chosen by
//! cross-validation on held-out classes or by pruning matrices that rarely win.
//!
//! Modules:
//!
//! - [`data`]: file formats, normalization, class splits, early fusion
//! - [`model`]: scoring and prediction
//! - [`loss`]: ranking loss and empirical risk
//! - [`trainer`]: SGD training
//! - [`selection`]: K selection by cross-validation or pruning
//! - [`evaluation`]: per-class accuracy, K sweeps, per-matrix retrieval
//! - [`synthesis`]: planted-structure benchmark data with a ground-truth oracle
//! - [`persist`]: binary model files
//! - [`cli`]: the `latem` command line
//!
//! With the default `parallel` feature, evaluation, risk computation and
//! sweeps run on rayon; training itself is always sequential.

pub mod cli;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod exec;
pub mod loss;
pub mod model;
pub mod persist;
pub mod pipeline;
pub mod selection;
pub mod synthesis;
pub mod trainer;

pub use data::{ClassSet, ImageSet, NormStats, ZeroShotSplit};
pub use error::{Error, Result};
pub use exec::Backend;
pub use model::{LatentModel, ScoredChoice};
pub use pipeline::ZeroShotData;
pub use selection::PruneConfig;
pub use synthesis::{PlantedDataset, PlantedSpec};
pub use trainer::{LossVariant, TrainConfig};
