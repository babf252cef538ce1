//! Supervised, FixMatch-style, UniMatch-lite and SupMix + SUFD training.

mod config;
mod labels;
mod run;
mod step;
mod sufd;
#[cfg(test)]
mod tests;

pub use config::{
    ablation_preset, ResolvedConfig, StrongMix, SufdTap, TrainConfig, UnsupNorm, Variant, ABLATION_PRESETS,
    DEFAULT_LAMBDA_ADV, DEFAULT_LAMBDA_U,
};
pub use labels::{argmax_labels, pseudo_label};
pub use run::{
    eval_csv, loss_csv, run_training, EpochLosses, EvalPoint, TrainData, TrainOutcome, CHECKPOINT_FILE,
    DISC_PREFIX, EVAL_TRACE_FILE, LOSS_FILE,
};
pub use step::{
    labeled_batch_indices, labeled_view, mix_strong_views, steps_per_epoch, streams, train_step,
    unlabeled_batch_indices, Batch, StepLosses, TrainState,
};
pub use sufd::{sufd_losses, sufd_tape_losses};
