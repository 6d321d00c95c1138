//! Deep mutual learning with Rényi divergences.
//!
//! A cohort of small classifiers is trained jointly; each student minimizes
//! its cross-entropy plus the mean Rényi divergence of order `alpha` from its
//! peers' predictive distributions. Everything runs on a small dense-tensor
//! reverse-mode autodiff engine in `f64`.
//!
//! - [`autodiff`]: tensors on a tape, backward pass
//! - [`divergence`]: Rényi / KL / Bhattacharyya divergences, cross-entropy, two-event curves
//! - [`models`]: ReLU MLP students and their checkpoint format
//! - [`trainer`]: the mutual-learning loss, SGD with Nesterov momentum, the training loop
//! - [`data`]: synthetic blobs, delimited files, splits and batches
//! - [`metrics`]: epoch records and last-E-epoch accuracy

pub mod autodiff;
pub mod data;
pub mod divergence;
pub mod error;
pub mod metrics;
pub mod models;
pub mod tensor;
pub mod trainer;

pub use autodiff::{Tape, Var};
pub use data::{batches, load_delimited, make_blobs, Batch, Dataset, Schema, Split, SplitKind};
pub use divergence::{
    cross_entropy, divergence_curve, hellinger_check, kl, renyi, CategoricalBatch, CurveRow, DivergenceSpec, FixedSide,
};
pub use error::{Error, Result};
pub use metrics::EpochRecord;
pub use models::StudentModel;
pub use tensor::Tensor;
pub use trainer::{dml_loss, train, train_step, Direction, LossConfig, OptimizerState, TrainConfig, UpdateMode};
