use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::batch::{
    batch_plan, eval_plan, make_paired_batches, make_unpaired_batches, PairedBatch, PairedExample, UnpairedBatch,
    UnpairedExample,
};
use super::loss::{loss, LossTerms};
use crate::autodiff::{
    adam_step, clip_global_norm, AdamConfig, AdamState, Checkpoint, Gradients, Graph, ParameterSet,
};
use crate::error::{Error, Result};
use crate::model::{check_params, forward_teacher_forced, init_params, ForwardMode, ModelConfig};

pub const PRETRAINED_TAG: &str = "pretrained-decoder";
pub const FINETUNED_TAG: &str = "finetuned";

/// Parameter prefixes held fixed during decoder pre-training.
const PRETRAIN_FROZEN: [&str; 3] = ["enc.", "cond.", "attn."];
/// Parameters carried over from a pretrained checkpoint.
const DECODER_PREFIX: &str = "dec.";

const VALIDATION_SALT: u64 = 0x7661_6c69_6461_7465;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub clip_norm: f64,
    pub stop_pos_weight: f64,
    pub pretrain_steps: u64,
    pub finetune_steps: u64,
    /// Validation interval in steps.
    pub validate_every: u64,
    /// Evaluations without improvement before stopping.
    pub patience: usize,
    pub validation_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 4,
            learning_rate: 1e-3,
            clip_norm: 1.0,
            stop_pos_weight: super::loss::STOP_POS_WEIGHT,
            pretrain_steps: 5000,
            finetune_steps: 10_000,
            validate_every: 100,
            patience: 5,
            validation_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Validation("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.clip_norm > 0.0) || !(self.stop_pos_weight > 0.0) {
            return Err(Error::Validation(
                "learning_rate, clip_norm and stop_pos_weight must be positive".into(),
            ));
        }
        if self.validate_every == 0 || self.patience == 0 {
            return Err(Error::Validation("validate_every and patience must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Validation("validation_fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            ..AdamConfig::default()
        }
    }
}

/// Per-step training log row.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub step: u64,
    pub mel_l1: f64,
    pub stop_bce: f64,
    pub grad_norm: f64,
    pub seconds: f64,
}

/// Writes [`TrainReport`] rows as CSV with a header.
pub struct ReportWriter<W: Write> {
    inner: csv::Writer<W>,
}

impl<W: Write> ReportWriter<W> {
    pub fn new(w: W) -> Self {
        Self {
            inner: csv::Writer::from_writer(w),
        }
    }

    pub fn write(&mut self, r: &TrainReport) -> Result<()> {
        self.inner.serialize(r)?;
        self.inner.flush().map_err(|e| Error::Csv(e.into()))
    }
}

/// Packs a model into a checkpoint.
pub fn model_checkpoint(
    tag: &str,
    cfg: &ModelConfig,
    params: &ParameterSet,
    adam: Option<AdamState>,
    step: u64,
    seed: u64,
) -> Result<Checkpoint> {
    Ok(Checkpoint {
        tag: tag.to_string(),
        config: serde_json::to_value(cfg)?,
        config_hash: cfg.hash(),
        params: params.clone(),
        adam,
        step,
        seed,
    })
}

/// Unpacks and verifies a checkpoint's configuration and parameters.
pub fn model_from_checkpoint(ckpt: &Checkpoint) -> Result<(ModelConfig, ParameterSet)> {
    let cfg: ModelConfig = serde_json::from_value(ckpt.config.clone())?;
    cfg.validate()?;
    if cfg.hash() != ckpt.config_hash {
        return Err(Error::Integrity(format!(
            "checkpoint config hash {} does not match its config ({})",
            ckpt.config_hash,
            cfg.hash()
        )));
    }
    check_params(&cfg, &ckpt.params)?;
    Ok((cfg, ckpt.params.clone()))
}

fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

/// Teacher-forced loss on a paired batch. `rng = Some` selects training mode.
pub fn paired_loss(
    g: &mut Graph,
    cfg: &ModelConfig,
    params: &ParameterSet,
    batch: &PairedBatch,
    pos_weight: f64,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<LossTerms> {
    let out = forward_teacher_forced(
        g,
        cfg,
        params,
        ForwardMode::Paired(&batch.text),
        &batch.audio.targets,
        rng.as_deref_mut(),
    )?;
    loss(g, out.frames, out.stop_logits, &batch.audio, pos_weight)
}

/// Teacher-forced zero-context loss on an audio-only batch.
pub fn pretrain_loss(
    g: &mut Graph,
    cfg: &ModelConfig,
    params: &ParameterSet,
    batch: &UnpairedBatch,
    pos_weight: f64,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<LossTerms> {
    let out = forward_teacher_forced(g, cfg, params, ForwardMode::Pretrain, &batch.audio.targets, rng)?;
    loss(g, out.frames, out.stop_logits, &batch.audio, pos_weight)
}

/// Item-weighted mean of inference-mode loss terms over a data set.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalLoss {
    pub total: f64,
    pub mel_l1: f64,
    pub stop_bce: f64,
}

fn mean_loss<B>(
    batches: &[B],
    size: impl Fn(&B) -> usize,
    mut eval: impl FnMut(&mut Graph, &B) -> Result<LossTerms>,
) -> Result<EvalLoss> {
    let (mut mel, mut stop) = (0.0, 0.0);
    let mut count = 0usize;
    for b in batches {
        let mut g = Graph::new();
        let terms = eval(&mut g, b)?;
        let n = size(b) as f64;
        mel += terms.mel_l1 * n;
        stop += terms.stop_bce * n;
        count += size(b);
    }
    if count == 0 {
        return Err(Error::Empty("evaluation set".into()));
    }
    let (mel_l1, stop_bce) = (mel / count as f64, stop / count as f64);
    Ok(EvalLoss {
        total: mel_l1 + stop_bce,
        mel_l1,
        stop_bce,
    })
}

/// Mean inference-mode paired loss over `examples`.
pub fn evaluate_paired(
    cfg: &ModelConfig,
    params: &ParameterSet,
    examples: &[PairedExample],
    train: &TrainConfig,
) -> Result<EvalLoss> {
    let lengths: Vec<usize> = examples.iter().map(|e| e.frames).collect();
    let batches = make_paired_batches(cfg, examples, &eval_plan(&lengths, train.batch_size)?)?;
    mean_loss(&batches, |b| b.audio.len(), |g, b| {
        paired_loss(g, cfg, params, b, train.stop_pos_weight, None)
    })
}

/// Mean inference-mode pre-training loss over `examples`.
pub fn evaluate_pretrain(
    cfg: &ModelConfig,
    params: &ParameterSet,
    examples: &[UnpairedExample],
    train: &TrainConfig,
) -> Result<EvalLoss> {
    let lengths: Vec<usize> = examples.iter().map(|e| e.frames).collect();
    let batches = make_unpaired_batches(cfg, examples, &eval_plan(&lengths, train.batch_size)?)?;
    mean_loss(&batches, |b| b.audio.len(), |g, b| {
        pretrain_loss(g, cfg, params, b, train.stop_pos_weight, None)
    })
}

/// One optimizer update from a differentiable loss.
fn apply_update(
    g: &mut Graph,
    terms: LossTerms,
    params: &mut ParameterSet,
    adam: &mut AdamState,
    clip: f64,
) -> Result<f64> {
    let mut grads: Gradients = g.backward(terms.total)?;
    grads.retain(|name, _| !params.is_frozen(name));
    let norm = clip_global_norm(&mut grads, clip);
    adam_step(params, &grads, adam)?;
    Ok(norm)
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub checkpoint: Checkpoint,
    /// Inference-mode loss over all unpaired data after the final step.
    pub final_loss: f64,
}

/// Trains the decoder as a zero-context next-frame predictor on audio only.
/// Encoder, conditioning and attention parameters stay at initialization.
pub fn pretrain_decoder(
    examples: &[UnpairedExample],
    cfg: &ModelConfig,
    train: &TrainConfig,
    seed: u64,
    mut report: impl FnMut(&TrainReport) -> Result<()>,
) -> Result<PretrainOutcome> {
    train.validate()?;
    if examples.is_empty() {
        return Err(Error::Empty("unpaired manifest".into()));
    }
    let mut params = init_params(cfg, seed)?;
    for p in PRETRAIN_FROZEN {
        params.freeze_prefix(p);
    }
    let mut adam = AdamState::new(train.adam());
    let lengths: Vec<usize> = examples.iter().map(|e| e.frames).collect();
    let start = Instant::now();
    let mut step = 0u64;
    let mut epoch = 0u64;
    while step < train.pretrain_steps {
        let plan = batch_plan(&lengths, train.batch_size, seed, epoch)?;
        for batch in make_unpaired_batches(cfg, examples, &plan)? {
            if step >= train.pretrain_steps {
                break;
            }
            step += 1;
            let mut rng = step_rng(seed, step);
            let mut g = Graph::new();
            let terms = pretrain_loss(&mut g, cfg, &params, &batch, train.stop_pos_weight, Some(&mut rng))?;
            let grad_norm = apply_update(&mut g, terms, &mut params, &mut adam, train.clip_norm)?;
            report(&TrainReport {
                step,
                mel_l1: terms.mel_l1,
                stop_bce: terms.stop_bce,
                grad_norm,
                seconds: start.elapsed().as_secs_f64(),
            })?;
        }
        epoch += 1;
    }
    let final_loss = evaluate_pretrain(cfg, &params, examples, train)?.total;
    Ok(PretrainOutcome {
        checkpoint: model_checkpoint(PRETRAINED_TAG, cfg, &params, Some(adam), step, seed)?,
        final_loss,
    })
}

/// Starting point for fine-tuning.
#[derive(Clone, Copy, Debug)]
pub enum Init<'a> {
    Fresh,
    /// Decoder parameters come from this checkpoint; everything else is
    /// freshly initialized.
    Pretrained(&'a Checkpoint),
}

/// Deterministic split into `(train, validation)` index lists. With fewer
/// than two utterances, or a zero fraction, validation reuses the training set.
pub fn split_validation(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Validation) {
    let n_val = ((n as f64) * fraction).round() as usize;
    let n_val = if fraction > 0.0 && n >= 2 { n_val.clamp(1, n - 1) } else { 0 };
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ VALIDATION_SALT));
    if n_val == 0 {
        return (order, Validation::TrainingSet);
    }
    let mut val = order.split_off(n - n_val);
    val.sort_unstable();
    order.sort_unstable();
    (order, Validation::HeldOut(val))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Validation {
    HeldOut(Vec<usize>),
    TrainingSet,
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    /// Parameters and optimizer state at the best validation loss.
    pub checkpoint: Checkpoint,
    pub best_step: u64,
    pub best_loss: f64,
    pub steps_run: u64,
    /// `(step, validation loss)` for every evaluation.
    pub validations: Vec<(u64, f64)>,
    pub validation: Validation,
}

impl FinetuneOutcome {
    /// First evaluated step whose validation loss is at or below `threshold`.
    pub fn steps_to_reach(&self, threshold: f64) -> Option<u64> {
        self.validations.iter().find(|(_, l)| *l <= threshold).map(|(s, _)| *s)
    }
}

/// Parameters fine-tuning starts from: fresh initialization with the
/// decoder overwritten from a pretrained checkpoint if given. Nothing frozen.
pub fn finetune_init(cfg: &ModelConfig, init: Init<'_>, seed: u64) -> Result<ParameterSet> {
    let mut params = init_params(cfg, seed)?;
    if let Init::Pretrained(ckpt) = init {
        let (pre_cfg, pre) = model_from_checkpoint(ckpt)?;
        if pre_cfg.decoder_hash() != cfg.decoder_hash() {
            return Err(Error::Validation(format!(
                "pretrained decoder hash {} does not match model decoder hash {}",
                pre_cfg.decoder_hash(),
                cfg.decoder_hash()
            )));
        }
        for (name, t) in pre.iter().filter(|(n, _)| n.starts_with(DECODER_PREFIX)) {
            params.set(name, t.clone())?;
        }
    }
    params.unfreeze_all();
    Ok(params)
}

/// Trains the whole model on paired data with early stopping on a held-out
/// split. Optimizer moments always start from zero.
pub fn finetune(
    examples: &[PairedExample],
    cfg: &ModelConfig,
    train: &TrainConfig,
    init: Init<'_>,
    seed: u64,
    mut report: impl FnMut(&TrainReport) -> Result<()>,
) -> Result<FinetuneOutcome> {
    train.validate()?;
    if examples.is_empty() {
        return Err(Error::Empty("paired manifest".into()));
    }
    let mut params = finetune_init(cfg, init, seed)?;
    let (train_idx, validation) = split_validation(examples.len(), train.validation_fraction, seed);
    let train_set: Vec<PairedExample> = train_idx.iter().map(|&i| examples[i].clone()).collect();
    let val_set: Vec<PairedExample> = match &validation {
        Validation::HeldOut(idx) => idx.iter().map(|&i| examples[i].clone()).collect(),
        Validation::TrainingSet => train_set.clone(),
    };
    let lengths: Vec<usize> = train_set.iter().map(|e| e.frames).collect();
    let mut adam = AdamState::new(train.adam());
    let start = Instant::now();
    let mut best: Option<(u64, f64, ParameterSet, AdamState)> = None;
    let mut validations = Vec::new();
    let mut stale = 0usize;
    let mut step = 0u64;
    let mut epoch = 0u64;
    'outer: while step < train.finetune_steps {
        let plan = batch_plan(&lengths, train.batch_size, seed, epoch)?;
        for batch in make_paired_batches(cfg, &train_set, &plan)? {
            step += 1;
            let mut rng = step_rng(seed, step);
            let mut g = Graph::new();
            let terms = paired_loss(&mut g, cfg, &params, &batch, train.stop_pos_weight, Some(&mut rng))?;
            let grad_norm = apply_update(&mut g, terms, &mut params, &mut adam, train.clip_norm)?;
            report(&TrainReport {
                step,
                mel_l1: terms.mel_l1,
                stop_bce: terms.stop_bce,
                grad_norm,
                seconds: start.elapsed().as_secs_f64(),
            })?;
            if step % train.validate_every == 0 || step == train.finetune_steps {
                let v = evaluate_paired(cfg, &params, &val_set, train)?.total;
                validations.push((step, v));
                if best.as_ref().map_or(true, |b| v < b.1) {
                    best = Some((step, v, params.clone(), adam.clone()));
                    stale = 0;
                } else {
                    stale += 1;
                    if stale >= train.patience {
                        break 'outer;
                    }
                }
            }
            if step >= train.finetune_steps {
                break 'outer;
            }
        }
        epoch += 1;
    }
    let (best_step, best_loss, best_params, best_adam) = best.ok_or_else(|| Error::Empty("no training steps".into()))?;
    Ok(FinetuneOutcome {
        checkpoint: model_checkpoint(FINETUNED_TAG, cfg, &best_params, Some(best_adam), best_step, seed)?,
        best_step,
        best_loss,
        steps_run: step,
        validations,
        validation,
    })
}
