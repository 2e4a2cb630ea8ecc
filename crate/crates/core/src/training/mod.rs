//! Batching, losses, decoder pre-training and fine-tuning.

mod batch;
mod loss;
mod train;

pub use batch::{
    batch_plan, eval_plan, make_paired_batches, make_unpaired_batches, FrameBatch, PairedBatch, PairedExample,
    UnpairedBatch, UnpairedExample,
};
pub use loss::{loss, LossTerms, STOP_POS_WEIGHT};
pub use train::{
    evaluate_paired, evaluate_pretrain, finetune, finetune_init, model_checkpoint, model_from_checkpoint, paired_loss,
    pretrain_decoder, pretrain_loss, split_validation, EvalLoss, FinetuneOutcome, Init, PretrainOutcome, ReportWriter,
    TrainConfig, TrainReport, Validation, FINETUNED_TAG, PRETRAINED_TAG,
};
