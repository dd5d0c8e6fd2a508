//! Optimizer, learning-rate policy, staged training and experiment matrices.

mod config;
mod experiment;
mod optim;
mod train;

pub use config::{lr_at, ExperimentPlan, Init, LossKind, LossSpec, Schedule, StageSpec, TargetSource, TrainConfig};
pub use experiment::{
    matrix_tsv, pretrain_student_encoder, run_experiment_matrix, run_plan, DataBundle, MatrixRow, PlanOutcome,
    MATRIX_COLUMNS,
};
pub use optim::{adam_step, AdamState};
pub use train::{
    batch_order, decode_all, derive_seed, evaluate, examples_from_samples, score_outputs, target_refs, train_stage,
    transcript_examples, validation_bleu, Example, Input, RunRecord, StageData, StageRecord, TestScores,
};
