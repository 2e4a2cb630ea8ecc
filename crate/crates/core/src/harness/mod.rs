//! Manifests, experiment configuration, the toy corpus, the pipeline
//! commands and the variant/data-amount sweep.

mod config;
mod manifest;
mod pipeline;
mod sweep;
mod toy;

pub use config::{apply_override, DspConfig, ExperimentConfig, PathsConfig, TextConfig, Variant, RUN_ROOT_ENV};
pub use manifest::{Manifest, ManifestEntry, ManifestKind};
pub use pipeline::{
    alignment_svg, cmd_eval, cmd_prepare, cmd_pretrain, cmd_synth, cmd_train, cmd_trainwv, exit_code, Run,
    TrainSummary, CONFIG_SNAPSHOT, EVAL_CSV, FINETUNED_CKPT, PRETRAINED_CKPT, PRETRAIN_LOG, SYNTH_DIR, TRAIN_LOG,
    TRAIN_SUMMARY, VALIDATION_LOG, WORD_VECTORS,
};
pub use sweep::{cell_dir, run_sweep, variant_config, SweepOutcome, SweepRow, SweepSpec, SWEEP_CSV, SWEEP_SVG};
pub use toy::{
    generate_toy_corpus, phoneme_hz, phoneme_name, render_sequence, render_tokens, toy_lexicon, ToyCorpus,
    ToyCorpusSpec, EVAL_MANIFEST, FADE_SAMPLES, LEXICON_FILE, PAIRED_MANIFEST, SEGMENT_SAMPLES, TEXT_CORPUS_FILE,
    TONE_AMPLITUDE, TOY_SAMPLE_RATE, UNPAIRED_MANIFEST,
};
