//! Joint training of linear and star-topology ("tree") detection cascades
//! with the firm gated-mixture objective, plus hard-decision evaluation with
//! per-instance cost accounting.
//!
//! Module map:
//!
//! - [`gating`]: the normalized logistic gate `g_alpha`.
//! - [`stage`]: per-stage classifiers (logistic regression, small MLPs).
//! - [`graph`]: architectures and the noisy-AND / firm combination rules.
//! - [`objective`]: log-likelihood, cost regularizers and their gradients.
//! - [`training`]: RMSProp, reverse stage-wise initialization, joint training.
//! - [`inference`]: hard-mode prediction, metrics and timing.
//! - [`data`]: CSV loading, label binarization, stratified folds, synthetic data.
//! - [`experiment`]: lambda sweeps, alpha studies, paired tests and reports.

pub mod data;
pub mod error;
pub mod experiment;
pub mod gating;
pub mod graph;
pub mod inference;
pub mod objective;
pub mod stage;
pub mod training;

pub use error::{CascadeError, Result, StageCoord};
pub use gating::Gating;
pub use graph::{CascadeArchitecture, CascadeMode};
pub use stage::{StageKind, StageModel, StageSpec};
