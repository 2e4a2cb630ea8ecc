use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{EncoderInput, FrameTargets, ModelConfig};
use crate::text::TokenSequence;

/// Mixes into the seed for shuffling so it never shares a stream with the
/// per-step dropout generator.
const SHUFFLE_SALT: u64 = 0x7368_7566_666c_6521;

/// Buckets span this many batches; items are length-sorted within a bucket.
const BUCKET_BATCHES: usize = 4;

/// One transcribed utterance with normalized mel features.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedExample {
    pub id: String,
    pub tokens: TokenSequence,
    /// One vector per word of `tokens` (may be empty when unconditioned).
    pub word_vectors: Vec<Vec<f64>>,
    /// `frames x mel_bins`, row-major.
    pub mel: Vec<f64>,
    pub frames: usize,
}

/// One untranscribed utterance. Carries no text by construction.
#[derive(Clone, Debug, PartialEq)]
pub struct UnpairedExample {
    pub id: String,
    pub mel: Vec<f64>,
    pub frames: usize,
}

/// Padded frame targets with their masks.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameBatch {
    pub ids: Vec<String>,
    pub targets: FrameTargets,
    /// `[B, frames]`, 1 on real frames.
    pub frame_mask: Vec<f64>,
    /// `[B, steps]`, 1 on the group holding the final real frame.
    pub stop_targets: Vec<f64>,
    /// `[B, steps]`, 1 on groups holding at least one real frame.
    pub stop_mask: Vec<f64>,
}

impl FrameBatch {
    /// Right-pads every item to the longest, rounded up to a multiple of `r`.
    pub fn new(items: &[(&str, &[f64], usize)], mel_bins: usize, r: usize) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::Empty("batch".into()));
        }
        if r == 0 || mel_bins == 0 {
            return Err(Error::Invalid("reduction and mel bins must be positive".into()));
        }
        for (id, mel, frames) in items {
            if *frames == 0 {
                return Err(Error::Empty(format!("utterance `{id}` has no frames")));
            }
            if mel.len() != frames * mel_bins {
                return Err(Error::Contract(format!(
                    "utterance `{id}`: {} values for {frames} frames of {mel_bins} bins",
                    mel.len()
                )));
            }
        }
        let b = items.len();
        let longest = items.iter().map(|i| i.2).max().expect("non-empty");
        let frames = longest.div_ceil(r) * r;
        let steps = frames / r;
        let mut data = vec![0.0; b * frames * mel_bins];
        let mut frame_mask = vec![0.0; b * frames];
        let mut stop_targets = vec![0.0; b * steps];
        let mut stop_mask = vec![0.0; b * steps];
        for (i, (_, mel, n)) in items.iter().enumerate() {
            data[i * frames * mel_bins..i * frames * mel_bins + mel.len()].copy_from_slice(mel);
            frame_mask[i * frames..i * frames + n].fill(1.0);
            let groups = n.div_ceil(r);
            stop_mask[i * steps..i * steps + groups].fill(1.0);
            stop_targets[i * steps + groups - 1] = 1.0;
        }
        Ok(Self {
            ids: items.iter().map(|i| i.0.to_string()).collect(),
            targets: FrameTargets {
                batch: b,
                frames,
                mel_bins,
                data,
                lengths: items.iter().map(|i| i.2).collect(),
            },
            frame_mask,
            stop_targets,
            stop_mask,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Text and audio for a batch of paired utterances.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedBatch {
    pub text: EncoderInput,
    pub audio: FrameBatch,
}

impl PairedBatch {
    pub fn new(cfg: &ModelConfig, items: &[&PairedExample]) -> Result<Self> {
        let seqs: Vec<&TokenSequence> = items.iter().map(|e| &e.tokens).collect();
        let dim = cfg.conditioning.wordvec_dim;
        let text = if cfg.conditioning.enabled {
            let vectors: Vec<Vec<Vec<f64>>> = items.iter().map(|e| e.word_vectors.clone()).collect();
            EncoderInput::new(&seqs, &vectors, dim)
        } else {
            EncoderInput::without_vectors(&seqs, dim)
        }
        .map_err(|e| match items.first() {
            Some(first) if items.len() == 1 => Error::Utterance {
                id: first.id.clone(),
                source: Box::new(e),
            },
            _ => e,
        })?;
        let audio: Vec<(&str, &[f64], usize)> =
            items.iter().map(|e| (e.id.as_str(), e.mel.as_slice(), e.frames)).collect();
        Ok(Self {
            text,
            audio: FrameBatch::new(&audio, cfg.mel_bins, cfg.reduction)?,
        })
    }
}

/// Audio-only batch used by decoder pre-training.
#[derive(Clone, Debug, PartialEq)]
pub struct UnpairedBatch {
    pub audio: FrameBatch,
}

impl UnpairedBatch {
    pub fn new(cfg: &ModelConfig, items: &[&UnpairedExample]) -> Result<Self> {
        let audio: Vec<(&str, &[f64], usize)> =
            items.iter().map(|e| (e.id.as_str(), e.mel.as_slice(), e.frames)).collect();
        Ok(Self {
            audio: FrameBatch::new(&audio, cfg.mel_bins, cfg.reduction)?,
        })
    }
}

/// Index groups for one epoch: a seeded shuffle, then length-sorting inside
/// buckets of a few batches to limit padding. Only the final batch may be
/// short.
pub fn batch_plan(lengths: &[usize], batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Invalid("batch size must be positive".into()));
    }
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ SHUFFLE_SALT);
    rng.set_stream(epoch);
    order.shuffle(&mut rng);
    let mut batches = Vec::with_capacity(lengths.len().div_ceil(batch_size));
    for bucket in order.chunks(batch_size * BUCKET_BATCHES) {
        let mut bucket = bucket.to_vec();
        bucket.sort_by_key(|&i| (lengths[i], i));
        batches.extend(bucket.chunks(batch_size).map(<[usize]>::to_vec));
    }
    Ok(batches)
}

/// Deterministic, unshuffled groups of similar length for evaluation.
pub fn eval_plan(lengths: &[usize], batch_size: usize) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Invalid("batch size must be positive".into()));
    }
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    order.sort_by_key(|&i| (lengths[i], i));
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

pub fn make_paired_batches(
    cfg: &ModelConfig,
    examples: &[PairedExample],
    plan: &[Vec<usize>],
) -> Result<Vec<PairedBatch>> {
    plan.iter()
        .map(|idx| {
            let items: Vec<&PairedExample> = idx.iter().map(|&i| &examples[i]).collect();
            PairedBatch::new(cfg, &items)
        })
        .collect()
}

pub fn make_unpaired_batches(
    cfg: &ModelConfig,
    examples: &[UnpairedExample],
    plan: &[Vec<usize>],
) -> Result<Vec<UnpairedBatch>> {
    plan.iter()
        .map(|idx| {
            let items: Vec<&UnpairedExample> = idx.iter().map(|&i| &examples[i]).collect();
            UnpairedBatch::new(cfg, &items)
        })
        .collect()
}
