//! Episodic meta-training, evaluation and bias diagnostics.

mod adam;
mod config;
mod eval;
mod model;
mod surrogate;
mod train;

pub use adam::{adam_step, AdamState};
pub use config::MetaConfig;
pub use eval::{
    evaluate, evaluate_baseline, gradient_bias, mean_ci95, prototype_bias, BiasReport, EvalConfig, EvalReport,
};
pub use model::{Checkpoint, Model, ModelConfig, ResidualInit, PFPW_MAGIC, PFPW_VERSION};
pub use surrogate::{solve_wall_time, train_e2_surrogate, SurrogateConfig, SurrogateReport};
pub use train::{
    episode_loss, episode_loss_var, final_prototypes, meta_train, solve_episode, EpochMetrics, TrainOutcome,
};
