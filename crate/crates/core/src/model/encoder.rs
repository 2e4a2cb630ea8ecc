use rand_chacha::ChaCha8Rng;

use super::layers::{lstm_cell, param, prenet, LstmState};
use super::{ConditioningLocation, ConditioningMethod, ModelConfig};
use crate::autodiff::{Graph, ParameterSet, Tensor, Var};
use crate::error::{Error, Result};
use crate::text::{TokenSequence, PAD};
use crate::wordvec::WordVectorTable;

/// A right-padded batch of token sequences with their word vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderInput {
    pub batch: usize,
    pub max_len: usize,
    /// `[batch, max_len]`, padded with the pad id.
    pub ids: Vec<usize>,
    pub lengths: Vec<usize>,
    /// Word index of every token position (`None` for sil, eos and padding).
    pub token_words: Vec<Option<usize>>,
    pub word_counts: Vec<usize>,
    /// At least 1 so that empty texts still produce well-formed tensors.
    pub max_words: usize,
    pub wordvec_dim: usize,
    /// `[batch, max_words, wordvec_dim]`, zero beyond each item's word count.
    pub word_vectors: Vec<f64>,
}

impl EncoderInput {
    /// `vectors[b]` holds one length-`dim` vector per word of `seqs[b]`.
    pub fn new(seqs: &[&TokenSequence], vectors: &[Vec<Vec<f64>>], dim: usize) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::Empty("encoder batch".into()));
        }
        if vectors.len() != seqs.len() {
            return Err(Error::Contract(format!(
                "{} word-vector lists for {} sequences",
                vectors.len(),
                seqs.len()
            )));
        }
        let batch = seqs.len();
        let max_len = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        if max_len == 0 {
            return Err(Error::Empty("token sequence".into()));
        }
        let max_words = seqs.iter().map(|s| s.word_spans.len()).max().unwrap_or(0).max(1);
        let mut ids = vec![PAD; batch * max_len];
        let mut token_words = vec![None; batch * max_len];
        let mut word_vectors = vec![0.0; batch * max_words * dim];
        for (b, (s, vs)) in seqs.iter().zip(vectors).enumerate() {
            if vs.len() != s.word_spans.len() {
                return Err(Error::Contract(format!(
                    "item {b}: {} word vectors for {} word spans",
                    vs.len(),
                    s.word_spans.len()
                )));
            }
            for span in &s.word_spans {
                if span.start >= span.end || span.end > s.len() || span.word >= vs.len() {
                    return Err(Error::Contract(format!("item {b}: span {span:?} out of bounds")));
                }
            }
            ids[b * max_len..b * max_len + s.len()].copy_from_slice(&s.token_ids);
            token_words[b * max_len..b * max_len + s.len()].copy_from_slice(&s.token_words());
            for (w, v) in vs.iter().enumerate() {
                if v.len() != dim {
                    return Err(Error::Contract(format!(
                        "item {b} word {w}: vector length {} != {dim}",
                        v.len()
                    )));
                }
                let at = (b * max_words + w) * dim;
                word_vectors[at..at + dim].copy_from_slice(v);
            }
        }
        Ok(Self {
            batch,
            max_len,
            ids,
            lengths: seqs.iter().map(|s| s.len()).collect(),
            token_words,
            word_counts: seqs.iter().map(|s| s.word_spans.len()).collect(),
            max_words,
            wordvec_dim: dim,
            word_vectors,
        })
    }

    /// Looks every word up in `table` (OOV words get zero vectors).
    pub fn with_table(seqs: &[&TokenSequence], table: &WordVectorTable) -> Result<Self> {
        let vectors: Vec<Vec<Vec<f64>>> = seqs
            .iter()
            .map(|s| s.words.iter().map(|w| table.lookup(w).0).collect())
            .collect();
        Self::new(seqs, &vectors, table.dim())
    }

    /// All-zero word vectors of dimension `dim`.
    pub fn without_vectors(seqs: &[&TokenSequence], dim: usize) -> Result<Self> {
        let vectors: Vec<Vec<Vec<f64>>> = seqs.iter().map(|s| vec![vec![0.0; dim]; s.word_spans.len()]).collect();
        Self::new(seqs, &vectors, dim)
    }

    pub fn is_padded(&self) -> bool {
        self.lengths.iter().any(|&l| l < self.max_len)
    }

    /// `[batch, max_len]` with 1 on real tokens.
    pub fn position_mask(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.batch * self.max_len];
        for (b, &l) in self.lengths.iter().enumerate() {
            m[b * self.max_len..b * self.max_len + l].iter_mut().for_each(|v| *v = 1.0);
        }
        m
    }
}

/// Result of [`condition_features`].
#[derive(Clone, Copy, Debug)]
pub struct Conditioned {
    /// `[B, T, F + D]`.
    pub features: Var,
    /// Attention method only: `[B, T, W]` softmax weights over words.
    pub weights: Option<Var>,
}

/// Appends a word-vector column block to `features: [B, T, F]`.
///
/// Concat: rows inside word `w`'s span carry `vector(w)`, every other row
/// zeros. Attention: every row carries the additive-attention context over
/// its utterance's word vectors.
pub fn condition_features(
    g: &mut Graph,
    cfg: &ModelConfig,
    params: &ParameterSet,
    features: Var,
    input: &EncoderInput,
) -> Result<Conditioned> {
    let s = g.shape(features).to_vec();
    let (b, t, d, w) = (input.batch, input.max_len, input.wordvec_dim, input.max_words);
    if s.len() != 3 || s[0] != b || s[1] != t {
        return Err(Error::Contract(format!("conditioning features {s:?} vs batch {b}x{t}")));
    }
    if d != cfg.conditioning.wordvec_dim {
        return Err(Error::Contract(format!(
            "word vectors have dimension {d}, model expects {}",
            cfg.conditioning.wordvec_dim
        )));
    }
    match cfg.conditioning.method {
        ConditioningMethod::Concat => {
            let mut cols = vec![0.0; b * t * d];
            for bi in 0..b {
                for ti in 0..input.lengths[bi] {
                    if let Some(wi) = input.token_words[bi * t + ti] {
                        let src = (bi * w + wi) * d;
                        let dst = (bi * t + ti) * d;
                        cols[dst..dst + d].copy_from_slice(&input.word_vectors[src..src + d]);
                    }
                }
            }
            let c = g.constant(Tensor::new(vec![b, t, d], cols)?);
            Ok(Conditioned {
                features: g.concat(&[features, c], 2)?,
                weights: None,
            })
        }
        ConditioningMethod::Attention => {
            let f = s[2];
            let a = cfg.conditioning.attention_dim;
            let wq = param(g, params, "cond.wq")?;
            let wm = param(g, params, "cond.wm")?;
            let v = param(g, params, "cond.v")?;
            let flat = g.reshape(features, &[b * t, f])?;
            let q = g.matmul(flat, wq)?;
            let q = g.reshape(q, &[b, t, a])?;
            let mem = g.constant(Tensor::new(vec![b * w, d], input.word_vectors.clone())?);
            let k = g.matmul(mem, wm)?;
            let k = g.reshape(k, &[b, w, a])?;
            let e = g.additive_scores(q, k, v)?;
            let mut mask = vec![false; b * t * w];
            for bi in 0..b {
                for ti in 0..t {
                    for wi in 0..input.word_counts[bi] {
                        mask[(bi * t + ti) * w + wi] = true;
                    }
                }
            }
            let weights = g.softmax(e, Some(&mask))?;
            let mem3 = g.constant(Tensor::new(vec![b, w, d], input.word_vectors.clone())?);
            let ctx = g.bmm(weights, mem3)?;
            Ok(Conditioned {
                features: g.concat(&[features, ctx], 2)?,
                weights: Some(weights),
            })
        }
    }
}

/// Additive attention of a single query over `memory` (W rows of length D)
/// with the conditioning head's parameters: returns `(context, weights)`.
pub fn additive_attention(
    cfg: &ModelConfig,
    params: &ParameterSet,
    query: &[f64],
    memory: &[Vec<f64>],
) -> Result<(Vec<f64>, Vec<f64>)> {
    if memory.is_empty() {
        return Err(Error::Empty("attention memory".into()));
    }
    let d = memory[0].len();
    let w = memory.len();
    let a = cfg.conditioning.attention_dim;
    let mut g = Graph::new();
    let wq = param(&mut g, params, "cond.wq")?;
    let wm = param(&mut g, params, "cond.wm")?;
    let v = param(&mut g, params, "cond.v")?;
    let qv = g.constant(Tensor::matrix(1, query.len(), query.to_vec())?);
    let q = g.matmul(qv, wq)?;
    let q = g.reshape(q, &[1, 1, a])?;
    let flat: Vec<f64> = memory.iter().flatten().copied().collect();
    let m = g.constant(Tensor::matrix(w, d, flat.clone())?);
    let k = g.matmul(m, wm)?;
    let k = g.reshape(k, &[1, w, a])?;
    let e = g.additive_scores(q, k, v)?;
    let weights = g.softmax(e, None)?;
    let m3 = g.constant(Tensor::new(vec![1, w, d], flat)?);
    let ctx = g.bmm(weights, m3)?;
    Ok((g.value(ctx).data().to_vec(), g.value(weights).data().to_vec()))
}

fn stack_steps(g: &mut Graph, steps: &[Var]) -> Result<Var> {
    let parts = steps
        .iter()
        .map(|&h| {
            let s = g.shape(h).to_vec();
            g.reshape(h, &[s[0], 1, s[1]])
        })
        .collect::<Result<Vec<_>>>()?;
    g.concat(&parts, 1)
}

/// Encoder memory `[B, T, C]`: embedding, optional input conditioning,
/// pre-net, BiLSTM, optional top conditioning. Padding rows are zero.
pub fn encode(
    g: &mut Graph,
    cfg: &ModelConfig,
    params: &ParameterSet,
    input: &EncoderInput,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    let (b, t, h) = (input.batch, input.max_len, cfg.encoder_dim);
    if let Some(&bad) = input.ids.iter().find(|&&i| i >= cfg.vocab_size) {
        return Err(Error::Contract(format!("token id {bad} outside vocabulary of {}", cfg.vocab_size)));
    }
    let cond = cfg.conditioning.enabled;
    let table = param(g, params, "enc.embedding")?;
    let mut x = g.gather(table, &input.ids)?;
    if cond && cfg.conditioning.location == ConditioningLocation::Input {
        let x3 = g.reshape(x, &[b, t, cfg.embed_dim])?;
        let c = condition_features(g, cfg, params, x3, input)?.features;
        x = g.reshape(c, &[b * t, cfg.embed_dim + cfg.conditioning.wordvec_dim])?;
    }
    let x = prenet(g, params, "enc", x, cfg.prenet_dropout, rng.as_deref_mut())?;

    let zeros = g.constant(Tensor::zeros(&[b, h]));
    let mut outputs = Vec::with_capacity(2);
    for dir in ["enc.fwd", "enc.bwd"] {
        let wx = param(g, params, &format!("{dir}.wx"))?;
        let xp = g.matmul(x, wx)?;
        let xp = g.reshape(xp, &[b, t, 4 * h])?;
        let mut state = LstmState { h: zeros, c: zeros };
        let mut hs = vec![zeros; t];
        let order: Vec<usize> = if dir == "enc.fwd" {
            (0..t).collect()
        } else {
            (0..t).rev().collect()
        };
        for ti in order {
            let step = g.slice(xp, 1, ti, ti + 1)?;
            let step = g.reshape(step, &[b, 4 * h])?;
            let mut next = lstm_cell(g, params, dir, step, state)?;
            if dir == "enc.bwd" && input.lengths.iter().any(|&l| ti >= l) {
                // Hold the backward state at zero until each item's last real token.
                let m: Vec<f64> = input
                    .lengths
                    .iter()
                    .flat_map(|&l| std::iter::repeat(if ti < l { 1.0 } else { 0.0 }).take(h))
                    .collect();
                let m = g.constant(Tensor::new(vec![b, h], m)?);
                next = LstmState {
                    h: g.mul(next.h, m)?,
                    c: g.mul(next.c, m)?,
                };
            }
            hs[ti] = next.h;
            state = next;
        }
        outputs.push(stack_steps(g, &hs)?);
    }
    let mut memory = g.concat(&outputs, 2)?;
    if cond && cfg.conditioning.location == ConditioningLocation::Top {
        memory = condition_features(g, cfg, params, memory, input)?.features;
    }
    if input.is_padded() {
        let c = cfg.context_dim();
        let m: Vec<f64> = input
            .position_mask()
            .into_iter()
            .flat_map(|v| std::iter::repeat(v).take(c))
            .collect();
        let m = g.constant(Tensor::new(vec![b, t, c], m)?);
        memory = g.mul(memory, m)?;
    }
    Ok(memory)
}
