//! Training, evaluation, fine-tuning and the experiment drivers.

pub mod config;
pub mod consistency;
pub mod finetune;
pub mod matrix;
pub mod oracle;
pub mod train;

pub use config::TrainConfig;
pub use consistency::{compare_models, consistency_experiment, ConsistencyReport, PropertyConsistency};
pub use finetune::{finetune, finetune_model, FinetuneOutcome};
pub use matrix::{cell_jobs, cross_scene_mean, run_matrix, ExperimentMatrix, MatrixCell, SceneWeighting, FINETUNE_GROUPS};
pub use oracle::{oracle_scene, OracleKind, OracleParams, OracleScene};
pub use train::{batch_gradients, evaluate, orientation_loss, opacity_entropy, subset_psnr, train, Evaluation, LossParts, LossWeights, RayPool, TrainOutcome};
