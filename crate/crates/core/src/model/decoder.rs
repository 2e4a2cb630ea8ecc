use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::encoder::{encode, EncoderInput};
use super::layers::{linear, lstm_step, prenet, prenet_blocks, zoneout_state, LstmState};
use super::{FeatureNorm, ModelConfig};
use crate::autodiff::{Graph, ParameterSet, Tensor, Var};
use crate::dsp::{Framing, Spectrogram, SpectrogramKind};
use crate::error::{Error, Result};

/// Encoder memory `[B, T, C]` plus a `[B, T]` mask of real positions.
#[derive(Clone, Copy, Debug)]
pub struct Memory {
    pub values: Var,
    pub mask: Option<Var>,
}

impl Memory {
    pub fn new(g: &mut Graph, values: Var, input: &EncoderInput) -> Result<Self> {
        let mask = if input.is_padded() {
            Some(g.constant(Tensor::new(vec![input.batch, input.max_len], input.position_mask())?))
        } else {
            None
        };
        Ok(Self { values, mask })
    }
}

/// Recurrent state carried between decoder steps.
#[derive(Clone, Copy, Debug)]
pub struct DecoderState {
    att: LstmState,
    dec: LstmState,
    context: Var,
    /// `[B, K]` mixture means.
    pub kappa: Var,
}

impl DecoderState {
    /// All-zero state at decode start.
    pub fn initial(g: &mut Graph, cfg: &ModelConfig, batch: usize) -> Self {
        let ha = g.constant(Tensor::zeros(&[batch, cfg.attention_rnn_dim]));
        let hd = g.constant(Tensor::zeros(&[batch, cfg.decoder_rnn_dim]));
        Self {
            att: LstmState { h: ha, c: ha },
            dec: LstmState { h: hd, c: hd },
            context: g.constant(Tensor::zeros(&[batch, cfg.context_dim()])),
            kappa: g.constant(Tensor::zeros(&[batch, cfg.mixtures])),
        }
    }

    /// `[attention h, attention c, decoder h, decoder c]`.
    pub fn recurrent(&self) -> [Var; 4] {
        [self.att.h, self.att.c, self.dec.h, self.dec.c]
    }

    fn tensors(&self, g: &Graph) -> [Tensor; 6] {
        [self.att.h, self.att.c, self.dec.h, self.dec.c, self.context, self.kappa].map(|v| g.value(v).clone())
    }

    fn from_tensors(g: &mut Graph, t: [Tensor; 6]) -> Self {
        let [ah, ac, dh, dc, ctx, k] = t.map(|t| g.constant(t));
        Self {
            att: LstmState { h: ah, c: ac },
            dec: LstmState { h: dh, c: dc },
            context: ctx,
            kappa: k,
        }
    }
}

/// One GMM attention step: `(context [B, C], weights [B, T], kappa [B, K])`.
///
/// `alpha = exp(a)`, `beta = exp(b)`, `kappa = kappa_prev + exp(k)` with
/// `(a, b, k)` from a linear layer on the attention-RNN output. Weights are
/// the unnormalized mixture evaluated at positions `0..T`.
pub fn gmm_attention_step(
    g: &mut Graph,
    cfg: &ModelConfig,
    params: &ParameterSet,
    att_h: Var,
    kappa_prev: Var,
    memory: &Memory,
) -> Result<(Var, Var, Var)> {
    let k = cfg.mixtures;
    let ms = g.shape(memory.values).to_vec();
    let (b, t, c) = (ms[0], ms[1], ms[2]);
    let raw = linear(g, params, "attn.gmm", att_h)?;
    let a_hat = g.slice(raw, 1, 0, k)?;
    let b_hat = g.slice(raw, 1, k, 2 * k)?;
    let k_hat = g.slice(raw, 1, 2 * k, 3 * k)?;
    let alpha = g.exp(a_hat);
    let beta = g.exp(b_hat);
    let step = g.exp(k_hat);
    let kappa = g.add(kappa_prev, step)?;
    let mut phi = g.gmm_weights(alpha, beta, kappa, t)?;
    if let Some(m) = memory.mask {
        phi = g.mul(phi, m)?;
    }
    let phi3 = g.reshape(phi, &[b, 1, t])?;
    let ctx = g.bmm(phi3, memory.values)?;
    let ctx = g.reshape(ctx, &[b, c])?;
    Ok((ctx, phi, kappa))
}

/// Output of one decoder step.
#[derive(Clone, Copy, Debug)]
pub struct StepOutput {
    /// `[B, r * M]`.
    pub frames: Var,
    /// `[B, 1]`.
    pub stop_logit: Var,
    /// `[B, T]` attention weights; `None` with the zero-context flag.
    pub weights: Option<Var>,
    pub state: DecoderState,
}

/// Decoder step from an already pre-net-processed input `x: [B, P]`.
fn step_core(
    g: &mut Graph,
    cfg: &ModelConfig,
    params: &ParameterSet,
    state: DecoderState,
    x: Var,
    memory: Option<&Memory>,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<StepOutput> {
    let att_in = g.concat(&[x, state.context], 1)?;
    let att_new = lstm_step(g, params, "dec.att_rnn", att_in, state.att)?;
    let att = zoneout_state(g, state.att, att_new, cfg.zoneout, rng.as_deref_mut())?;
    let (context, weights, kappa) = match memory {
        Some(mem) => {
            let (c, w, k) = gmm_attention_step(g, cfg, params, att.h, state.kappa, mem)?;
            (c, Some(w), k)
        }
        // Zero-context mode: the context stays the zero vector and attention does not move.
        None => (state.context, None, state.kappa),
    };
    let dec_in = g.concat(&[att.h, context], 1)?;
    let dec_new = lstm_step(g, params, "dec.dec_rnn", dec_in, state.dec)?;
    let dec = zoneout_state(g, state.dec, dec_new, cfg.zoneout, rng)?;
    let proj_in = g.concat(&[dec.h, context], 1)?;
    let frames = linear(g, params, "dec.frames", proj_in)?;
    let stop_logit = linear(g, params, "dec.stop", proj_in)?;
    Ok(StepOutput {
        frames,
        stop_logit,
        weights,
        state: DecoderState {
            att,
            dec,
            context,
            kappa,
        },
    })
}

/// One decoder step fed the previous frame `[B, M]` (all zeros at the first
/// step). `memory = None` is the zero-context mode used for pre-training.
/// Passing `rng` selects training mode (dropout and sampled zoneout).
pub fn decoder_step(
    g: &mut Graph,
    cfg: &ModelConfig,
    params: &ParameterSet,
    state: DecoderState,
    prev_frame: Var,
    memory: Option<&Memory>,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<StepOutput> {
    let x = prenet(g, params, "dec", prev_frame, cfg.prenet_dropout, rng.as_deref_mut())?;
    step_core(g, cfg, params, state, x, memory, rng)
}

/// Normalized target frames, right-padded to a multiple of the reduction factor.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameTargets {
    pub batch: usize,
    pub frames: usize,
    pub mel_bins: usize,
    /// `[batch, frames, mel_bins]`.
    pub data: Vec<f64>,
    /// Real (unpadded) frame count per item.
    pub lengths: Vec<usize>,
}

impl FrameTargets {
    fn frame(&self, b: usize, t: usize) -> &[f64] {
        let at = (b * self.frames + t) * self.mel_bins;
        &self.data[at..at + self.mel_bins]
    }
}

#[derive(Clone, Copy, Debug)]
pub enum ForwardMode<'a> {
    Paired(&'a EncoderInput),
    /// Decoder only, zero attention context, no text.
    Pretrain,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `[B, frames, M]`.
    pub frames: Var,
    /// `[B, steps]`.
    pub stop_logits: Var,
    /// Per step `[B, K]`; empty in pre-training mode.
    pub kappas: Vec<Var>,
    /// Per step `[B, T]`; empty in pre-training mode.
    pub alignments: Vec<Var>,
}

/// Teacher-forced forward pass: step `s` consumes the last ground-truth
/// frame of group `s - 1`.
pub fn forward_teacher_forced(
    g: &mut Graph,
    cfg: &ModelConfig,
    params: &ParameterSet,
    mode: ForwardMode<'_>,
    targets: &FrameTargets,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<ForwardOutput> {
    let (b, m, r) = (targets.batch, targets.mel_bins, cfg.reduction);
    if m != cfg.mel_bins {
        return Err(Error::Contract(format!("targets have {m} mel bins, model {}", cfg.mel_bins)));
    }
    if targets.frames == 0 || targets.frames % r != 0 {
        return Err(Error::Contract(format!(
            "target length {} is not a positive multiple of r={r}",
            targets.frames
        )));
    }
    if targets.data.len() != b * targets.frames * m {
        return Err(Error::Contract("target data size".into()));
    }
    let memory = match mode {
        ForwardMode::Paired(input) => {
            if input.batch != b {
                return Err(Error::Contract(format!("text batch {} vs target batch {b}", input.batch)));
            }
            let v = encode(g, cfg, params, input, rng.as_deref_mut())?;
            Some(Memory::new(g, v, input)?)
        }
        ForwardMode::Pretrain => None,
    };
    let steps = targets.frames / r;
    // Step-major rows so that step s is the row block s*B..(s+1)*B.
    let mut inputs = vec![0.0; steps * b * m];
    for s in 1..steps {
        for bi in 0..b {
            let at = (s * b + bi) * m;
            inputs[at..at + m].copy_from_slice(targets.frame(bi, s * r - 1));
        }
    }
    let inputs = g.constant(Tensor::matrix(steps * b, m, inputs)?);
    // One generator per step keeps the draws of real steps independent of
    // how much padding follows them.
    let mut step_rngs: Vec<ChaCha8Rng> = match rng {
        Some(r) => {
            let base: u64 = r.gen();
            (0..steps as u64)
                .map(|s| {
                    let mut sr = ChaCha8Rng::seed_from_u64(base);
                    sr.set_stream(s);
                    sr
                })
                .collect()
        }
        None => Vec::new(),
    };
    let x_all = prenet_blocks(g, params, "dec", inputs, cfg.prenet_dropout, &mut step_rngs)?;

    let mut state = DecoderState::initial(g, cfg, b);
    let mut frames = Vec::with_capacity(steps);
    let mut stops = Vec::with_capacity(steps);
    let mut kappas = Vec::new();
    let mut alignments = Vec::new();
    for s in 0..steps {
        let x = g.slice(x_all, 0, s * b, (s + 1) * b)?;
        let out = step_core(g, cfg, params, state, x, memory.as_ref(), step_rngs.get_mut(s))?;
        frames.push(g.reshape(out.frames, &[b, 1, r * m])?);
        stops.push(out.stop_logit);
        if let Some(w) = out.weights {
            kappas.push(out.state.kappa);
            alignments.push(w);
        }
        state = out.state;
    }
    let frames = g.concat(&frames, 1)?;
    let frames = g.reshape(frames, &[b, steps * r, m])?;
    let stop_logits = g.concat(&stops, 1)?;
    Ok(ForwardOutput {
        frames,
        stop_logits,
        kappas,
        alignments,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Synthesis {
    /// Log-mel spectrogram (denormalized).
    pub mel: Spectrogram,
    /// Attention weights per decoder step, each of length T.
    pub alignment: Vec<Vec<f64>>,
    /// Mixture means per decoder step.
    pub kappas: Vec<Vec<f64>>,
    pub steps: usize,
    /// True when the stop token never fired within `max_steps`.
    pub truncated: bool,
}

impl Synthesis {
    /// `sum_u u*phi(u) / sum_u phi(u)` per step; `None` where the weights
    /// underflow to zero and the position is undefined.
    pub fn mean_positions(&self) -> Vec<Option<f64>> {
        self.alignment
            .iter()
            .map(|w| {
                let total: f64 = w.iter().sum();
                (total > 0.0).then(|| w.iter().enumerate().map(|(u, x)| u as f64 * x).sum::<f64>() / total)
            })
            .collect()
    }
}

/// Autoregressive inference for a single utterance, feeding back the model's
/// own frames until the stop probability exceeds 0.5 or `max_steps` is hit.
pub fn synthesize(
    cfg: &ModelConfig,
    params: &ParameterSet,
    input: &EncoderInput,
    max_steps: usize,
    framing: Framing,
    floor: f64,
) -> Result<Synthesis> {
    if input.batch != 1 {
        return Err(Error::Contract("synthesize expects a single utterance".into()));
    }
    let (m, r) = (cfg.mel_bins, cfg.reduction);
    let norm = FeatureNorm::new(floor);
    let mut g = Graph::new();
    let mem = encode(&mut g, cfg, params, input, None)?;
    let mem = g.value(mem).clone();
    g.clear();
    let init = DecoderState::initial(&mut g, cfg, 1);
    let mut state = init.tensors(&g);
    let mut prev = vec![0.0; m];
    let mut values = Vec::new();
    let mut alignment = Vec::new();
    let mut kappas = Vec::new();
    let mut truncated = true;
    for _ in 0..max_steps {
        g.clear();
        let values_var = g.constant(mem.clone());
        let memory = Memory::new(&mut g, values_var, input)?;
        let st = DecoderState::from_tensors(&mut g, state);
        let frame = g.constant(Tensor::matrix(1, m, prev.clone())?);
        let out = decoder_step(&mut g, cfg, params, st, frame, Some(&memory), None)?;
        let f = g.value(out.frames).data();
        values.extend(f.iter().map(|&x| norm.denormalize(x)));
        prev.copy_from_slice(&f[(r - 1) * m..]);
        if let Some(w) = out.weights {
            alignment.push(g.value(w).data().to_vec());
        }
        kappas.push(g.value(out.state.kappa).data().to_vec());
        state = out.state.tensors(&g);
        if g.value(out.stop_logit).item() > 0.0 {
            truncated = false;
            break;
        }
    }
    let steps = alignment.len();
    Ok(Synthesis {
        mel: Spectrogram {
            frames: steps * r,
            bins: m,
            values,
            kind: SpectrogramKind::MelLog,
            framing,
            floor,
        },
        alignment,
        kappas,
        steps,
        truncated,
    })
}
