//! The training loop: configuration, loss assembly, checkpointing,
//! evaluation and the experiment suites.

mod config;
mod loss;
mod run;
mod trainer;

pub use config::{DivergenceConfig, EvalConfig, Lambdas, MeshField, Mode, PointResidual, RunConfig, Terms, TrainConfig};
pub use loss::{total_loss, LossParts, LossVars, EIKONAL_WEIGHT};
pub use run::{
    load_dataset, median, run_suite, suite_cases, train_and_evaluate, RunOptions, RunOutcome, SuiteCase, SuiteKind,
    SuiteReport, SuiteRow, SuiteRun, DENSITY_POINTS, DENSITY_SOURCE_POINTS, NOISE_LEVELS,
};
pub use trainer::{DivergenceGuard, StepInfo, StepReport, Trainer};

#[cfg(test)]
mod tests;
