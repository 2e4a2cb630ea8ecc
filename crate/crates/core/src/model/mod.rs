//! Tacotron-style encoder, word-vector conditioning, GMM attention and a
//! zoneout-LSTM autoregressive decoder.
//!
//! Parameters live in a [`ParameterSet`] under stable names:
//! `enc.*` (embedding, pre-net, BiLSTM), `cond.*` (conditioning attention
//! head), `attn.*` (GMM attention layer) and `dec.*` (decoder pre-net, both
//! LSTMs, frame and stop projections).

mod decoder;
mod encoder;
mod layers;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{ParameterSet, Tensor};
use crate::error::{Error, Result};

pub use decoder::{
    decoder_step, forward_teacher_forced, gmm_attention_step, synthesize, DecoderState, ForwardMode, ForwardOutput,
    FrameTargets, Memory, StepOutput, Synthesis,
};
pub use encoder::{additive_attention, condition_features, encode, Conditioned, EncoderInput};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ConditioningMethod {
    #[default]
    Concat,
    Attention,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ConditioningLocation {
    Input,
    #[default]
    Top,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConditioningConfig {
    pub enabled: bool,
    pub method: ConditioningMethod,
    pub location: ConditioningLocation,
    /// Word-vector dimension D.
    pub wordvec_dim: usize,
    /// Attention-head projection size A.
    pub attention_dim: usize,
}

impl Default for ConditioningConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            method: ConditioningMethod::Concat,
            location: ConditioningLocation::Top,
            wordvec_dim: 16,
            attention_dim: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Number of token ids (lexicon inventory size).
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub encoder_prenet_dim: usize,
    /// Hidden size per direction of the encoder BiLSTM.
    pub encoder_dim: usize,
    pub conditioning: ConditioningConfig,
    pub mixtures: usize,
    pub decoder_prenet_dim: usize,
    pub attention_rnn_dim: usize,
    pub decoder_rnn_dim: usize,
    pub zoneout: f64,
    pub prenet_dropout: f64,
    /// Frames emitted per decoder step.
    pub reduction: usize,
    pub mel_bins: usize,
    pub max_decoder_steps: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            embed_dim: 64,
            encoder_prenet_dim: 64,
            encoder_dim: 64,
            conditioning: ConditioningConfig::default(),
            mixtures: 4,
            decoder_prenet_dim: 64,
            attention_rnn_dim: 64,
            decoder_rnn_dim: 64,
            zoneout: 0.1,
            prenet_dropout: 0.5,
            reduction: 2,
            mel_bins: 80,
            max_decoder_steps: 200,
        }
    }
}

fn short_hash(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().take(8).map(|b| format!("{b:02x}")).collect()
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("embed_dim", self.embed_dim),
            ("encoder_prenet_dim", self.encoder_prenet_dim),
            ("encoder_dim", self.encoder_dim),
            ("mixtures", self.mixtures),
            ("decoder_prenet_dim", self.decoder_prenet_dim),
            ("attention_rnn_dim", self.attention_rnn_dim),
            ("decoder_rnn_dim", self.decoder_rnn_dim),
            ("reduction", self.reduction),
            ("mel_bins", self.mel_bins),
            ("max_decoder_steps", self.max_decoder_steps),
            ("conditioning.wordvec_dim", self.conditioning.wordvec_dim),
            ("conditioning.attention_dim", self.conditioning.attention_dim),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Validation(format!("model.{name} must be at least 1")));
        }
        if !(0.0..=1.0).contains(&self.zoneout) {
            return Err(Error::Validation(format!("model.zoneout {} outside [0, 1]", self.zoneout)));
        }
        if !(0.0..1.0).contains(&self.prenet_dropout) {
            return Err(Error::Validation(format!(
                "model.prenet_dropout {} outside [0, 1)",
                self.prenet_dropout
            )));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        short_hash(&serde_json::to_vec(self).expect("config serializes"))
    }

    /// Hash of the fields that fix decoder parameter shapes. A pretrained
    /// decoder can be loaded into any model with the same decoder hash.
    pub fn decoder_hash(&self) -> String {
        let key = serde_json::json!({
            "context": self.context_dim(),
            "mixtures": self.mixtures,
            "decoder_prenet_dim": self.decoder_prenet_dim,
            "attention_rnn_dim": self.attention_rnn_dim,
            "decoder_rnn_dim": self.decoder_rnn_dim,
            "reduction": self.reduction,
            "mel_bins": self.mel_bins,
        });
        short_hash(key.to_string().as_bytes())
    }

    fn conditioned_at(&self, loc: ConditioningLocation) -> bool {
        self.conditioning.enabled && self.conditioning.location == loc
    }

    /// Width of the encoder memory attended by the decoder.
    pub fn context_dim(&self) -> usize {
        2 * self.encoder_dim
            + if self.conditioned_at(ConditioningLocation::Top) {
                self.conditioning.wordvec_dim
            } else {
                0
            }
    }

    fn prenet_input_dim(&self) -> usize {
        self.embed_dim
            + if self.conditioned_at(ConditioningLocation::Input) {
                self.conditioning.wordvec_dim
            } else {
                0
            }
    }

    /// Feature width seen by the conditioning module at its location.
    fn conditioning_query_dim(&self) -> usize {
        match self.conditioning.location {
            ConditioningLocation::Input => self.embed_dim,
            ConditioningLocation::Top => 2 * self.encoder_dim,
        }
    }

    /// Every parameter name with its shape.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut linear = |name: &str, i: usize, o: usize| {
            out.push((format!("{name}.w"), vec![i, o]));
            out.push((format!("{name}.b"), vec![o]));
        };
        let (e, p, h) = (self.embed_dim, self.encoder_prenet_dim, self.encoder_dim);
        linear("enc.prenet1", self.prenet_input_dim(), p);
        linear("enc.prenet2", p, p);
        let c = self.context_dim();
        let (dp, ha, hd, m) = (
            self.decoder_prenet_dim,
            self.attention_rnn_dim,
            self.decoder_rnn_dim,
            self.mel_bins,
        );
        linear("attn.gmm", ha, 3 * self.mixtures);
        linear("dec.prenet1", m, dp);
        linear("dec.prenet2", dp, dp);
        linear("dec.frames", hd + c, self.reduction * m);
        linear("dec.stop", hd + c, 1);
        out.push(("enc.embedding".into(), vec![self.vocab_size, e]));
        for (name, i, hid) in [
            ("enc.fwd", p, h),
            ("enc.bwd", p, h),
            ("dec.att_rnn", dp + c, ha),
            ("dec.dec_rnn", ha + c, hd),
        ] {
            out.push((format!("{name}.wx"), vec![i, 4 * hid]));
            out.push((format!("{name}.wh"), vec![hid, 4 * hid]));
            out.push((format!("{name}.b"), vec![4 * hid]));
        }
        if self.conditioning.enabled && self.conditioning.method == ConditioningMethod::Attention {
            let a = self.conditioning.attention_dim;
            out.push(("cond.wq".into(), vec![self.conditioning_query_dim(), a]));
            out.push(("cond.wm".into(), vec![self.conditioning.wordvec_dim, a]));
            out.push(("cond.v".into(), vec![a]));
        }
        out.sort();
        out
    }
}

/// Uniform(-k, k) with k = 1/sqrt(fan_in); a bias takes the fan-in of its
/// layer's input weight. The GMM bias starts with slow forward motion and
/// equal mixture weights; the stop bias starts well below zero.
fn init_tensor(cfg: &ModelConfig, name: &str, shapes: &[(String, Vec<usize>)], rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let shape = &shapes.iter().find(|(n, _)| n == name).expect("known parameter").1;
    let fan_in = if name == "enc.embedding" {
        1
    } else if let Some(layer) = name.strip_suffix(".b") {
        shapes
            .iter()
            .find(|(n, _)| *n == format!("{layer}.w") || *n == format!("{layer}.wx"))
            .map(|(_, s)| s[0])
            .ok_or_else(|| Error::Contract(format!("bias `{name}` has no weight")))?
    } else {
        shape[0]
    };
    let mut t = Tensor::uniform(shape, 1.0 / (fan_in as f64).sqrt(), rng);
    if name == "attn.gmm.b" {
        let k = cfg.mixtures;
        let d = t.data_mut();
        for i in 0..k {
            d[i] = (1.0 / k as f64).ln();
            d[k + i] = 0.0;
            d[2 * k + i] = 0.5f64.ln();
        }
    } else if name == "dec.stop.b" {
        t.data_mut().fill(-3.0);
    }
    Ok(t)
}

/// Fresh parameters for `cfg`, drawn from a generator seeded by `seed`.
/// Each parameter uses its own stream so that adding or removing a module
/// leaves the others unchanged.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParameterSet> {
    cfg.validate()?;
    let shapes = cfg.parameter_shapes();
    let mut params = ParameterSet::new();
    for (name, _) in &shapes {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(u64::from_le_bytes(Sha256::digest(name.as_bytes())[..8].try_into().expect("8 bytes")));
        let t = init_tensor(cfg, name, &shapes, &mut rng)?;
        params.insert(name.clone(), t)?;
    }
    Ok(params)
}

/// Checks that `params` holds exactly the names and shapes `cfg` requires.
pub fn check_params(cfg: &ModelConfig, params: &ParameterSet) -> Result<()> {
    let want = cfg.parameter_shapes();
    for (name, shape) in &want {
        match params.get(name) {
            None => return Err(Error::Validation(format!("missing parameter `{name}`"))),
            Some(t) if t.shape() != shape.as_slice() => {
                return Err(Error::Validation(format!(
                    "parameter `{name}` has shape {:?}, config requires {shape:?}",
                    t.shape()
                )))
            }
            _ => {}
        }
    }
    if params.len() != want.len() {
        let extra: Vec<_> = params.names().filter(|n| !want.iter().any(|(w, _)| w == *n)).collect();
        return Err(Error::Validation(format!("unexpected parameters {extra:?}")));
    }
    Ok(())
}

/// Affine map between log-mel values and the unit-scale features the
/// network predicts: silence at the floor maps to 0.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FeatureNorm {
    pub log_floor: f64,
}

impl FeatureNorm {
    pub fn new(floor: f64) -> Self {
        Self { log_floor: floor.ln() }
    }

    pub fn normalize(&self, log_mel: f64) -> f64 {
        (log_mel - self.log_floor) / -self.log_floor
    }

    /// Inverse of [`normalize`](Self::normalize), clamped at the floor.
    pub fn denormalize(&self, x: f64) -> f64 {
        (x * -self.log_floor + self.log_floor).max(self.log_floor)
    }
}
