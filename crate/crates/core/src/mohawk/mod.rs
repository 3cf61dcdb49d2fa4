//! Three-stage attention-to-SSM distillation: matrix orientation, hidden-state
//! alignment, then weight transfer and logit distillation.

pub mod data;
pub mod losses;
pub mod optim;
pub mod plan;
pub mod train;

pub use data::{ByteTokenizer, MarkovCorpus};
pub use losses::{hidden_state_alignment_loss, kd_loss, kd_parts, matrix_orientation_loss};
pub use optim::{adamw_step, AdamW, OptimizerState};
pub use plan::{parse_kv, wsd_lr, wsd_lr_at, DistillConfig, Stage, StagePlan};
pub use train::{
    evaluate, pretrain_teacher, run_stage, sequence_grads, transfer_weights, StageReport, ToyTask,
    Trainer,
};
