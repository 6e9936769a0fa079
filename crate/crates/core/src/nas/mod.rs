//! Gaussian-process Bayesian optimization over architectures.

pub mod acquisition;
pub mod gp;
pub mod pipeline;
pub mod planted;
pub mod search;

pub use acquisition::{adaptive_beta, expected_improvement, Acquisition};
pub use gp::{GpHyper, GpSurrogate};
pub use pipeline::{run_ablation, run_search, train_baseline, AblationRow, AblationVariant, SearchOutcome};
pub use search::{bo_search, ArchSpace, EvalRecord, Evaluation, SearchConfig, SearchSpace, SearchTrace};
