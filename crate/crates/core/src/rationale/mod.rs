//! Rationale extraction: an extractor producing per-token gates and an
//! encoder classifying the gated input, plus their training loop.

mod model;
mod train;

pub use model::{argmax, Example, ModelConfig, Prediction, RefModel, Vocab, PAD, UNK};
pub use train::{
    draw_noise, mix_seed, ref_loss, ref_loss_with_noise, train_classifier, train_ref, train_ref_on,
    EpochRecord, LossGraph, MultiplierRule, SparsityController, TrainConfig, TrainingReport,
};
pub(crate) use train::{fit, gated_loss, StepOutcome};
