use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use super::toy::ToyCorpusSpec;
use crate::dsp::{Framing, DEFAULT_FLOOR};
use crate::error::{Error, IoContext, Result};
use crate::eval::{EvalSetup, McdSetup};
use crate::model::{ConditioningLocation, ConditioningMethod, ModelConfig};
use crate::text::{OovPolicy, TokenMode};
use crate::training::TrainConfig;
use crate::wordvec::SkipGramConfig;

/// Overrides the directory holding `runs/`.
pub const RUN_ROOT_ENV: &str = "SEMITACO_RUN_ROOT";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "t-base")]
    TBase,
    #[serde(rename = "t-enc")]
    TEnc,
    #[serde(rename = "t-dec")]
    TDec,
    #[serde(rename = "t-enc-dec")]
    TEncDec,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::TBase, Variant::TEnc, Variant::TDec, Variant::TEncDec];

    pub fn name(self) -> &'static str {
        match self {
            Self::TBase => "t-base",
            Self::TEnc => "t-enc",
            Self::TDec => "t-dec",
            Self::TEncDec => "t-enc-dec",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Validation(format!("unknown variant `{s}` (expected t-base, t-enc, t-dec or t-enc-dec)")))
    }

    pub fn uses_word_vectors(self) -> bool {
        matches!(self, Self::TEnc | Self::TEncDec)
    }

    pub fn uses_pretraining(self) -> bool {
        matches!(self, Self::TDec | Self::TEncDec)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DspConfig {
    pub framing: Framing,
    /// Pre-log magnitude floor of the model's mel features.
    pub floor: f64,
}

impl Default for DspConfig {
    fn default() -> Self {
        Self {
            framing: Framing::toy_8k(),
            floor: DEFAULT_FLOOR,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextConfig {
    pub mode: TokenMode,
    pub oov: OovPolicy,
}

impl Default for TextConfig {
    fn default() -> Self {
        Self {
            mode: TokenMode::Phoneme,
            oov: OovPolicy::Error,
        }
    }
}

/// Inputs. Relative paths resolve against the configuration file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Directory the toy corpus is generated into when `corpus` is set.
    pub data_dir: PathBuf,
    pub paired_manifest: PathBuf,
    pub unpaired_manifest: Option<PathBuf>,
    pub eval_manifest: PathBuf,
    pub lexicon: PathBuf,
    /// Sentences for word-vector training, one per line.
    pub text_corpus: Option<PathBuf>,
    /// Pre-computed word vectors; skips training them.
    pub word_vectors: Option<PathBuf>,
    /// Pretrained decoder checkpoint; skips pre-training.
    pub pretrained_checkpoint: Option<PathBuf>,
    /// Feature cache shared between runs; defaults to the run directory.
    pub features: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            data_dir: "data".into(),
            paired_manifest: "data/paired.jsonl".into(),
            unpaired_manifest: Some("data/unpaired.jsonl".into()),
            eval_manifest: "data/eval.jsonl".into(),
            lexicon: "data/lexicon.json".into(),
            text_corpus: Some("data/text_corpus.txt".into()),
            word_vectors: None,
            pretrained_checkpoint: None,
            features: None,
        }
    }
}

/// Everything one run needs: model, optimisation, features, inputs, variant
/// and seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Run directory name under `runs/`.
    pub name: String,
    pub variant: Variant,
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub dsp: DspConfig,
    pub text: TextConfig,
    pub wordvec: SkipGramConfig,
    pub eval: EvalSetup,
    pub paths: PathsConfig,
    /// Generate the toy corpus into `paths.data_dir` during `prepare`.
    pub corpus: Option<ToyCorpusSpec>,
    /// Directory holding `runs/`; the environment variable wins.
    pub run_root: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::toy(Variant::TBase)
    }
}

impl ExperimentConfig {
    /// Small model and schedule sized for the toy corpus.
    pub fn toy(variant: Variant) -> Self {
        let mut model = ModelConfig {
            vocab_size: 0,
            embed_dim: 24,
            encoder_prenet_dim: 24,
            encoder_dim: 16,
            mixtures: 2,
            decoder_prenet_dim: 24,
            attention_rnn_dim: 48,
            decoder_rnn_dim: 48,
            zoneout: 0.1,
            prenet_dropout: 0.5,
            reduction: 2,
            mel_bins: 40,
            max_decoder_steps: 60,
            ..ModelConfig::default()
        };
        model.conditioning.enabled = variant.uses_word_vectors();
        model.conditioning.method = ConditioningMethod::Concat;
        model.conditioning.location = ConditioningLocation::Top;
        model.conditioning.wordvec_dim = 8;
        model.conditioning.attention_dim = 16;
        let train = TrainConfig {
            batch_size: 4,
            learning_rate: 2e-3,
            pretrain_steps: 3000,
            finetune_steps: 3000,
            validate_every: 50,
            patience: 6,
            validation_fraction: 0.1,
            ..TrainConfig::default()
        };
        let wordvec = SkipGramConfig {
            dim: 8,
            window: 2,
            epochs: 5,
            ..SkipGramConfig::default()
        };
        let eval = EvalSetup {
            max_decoder_steps: 60,
            mcd: McdSetup {
                n_mels: 40,
                floor: 1.0,
                ..McdSetup::default()
            },
            ..EvalSetup::default()
        };
        Self {
            name: format!("toy-{}", variant.name()),
            variant,
            seed: 0,
            model,
            train,
            dsp: DspConfig::default(),
            text: TextConfig::default(),
            wordvec,
            eval,
            paths: PathsConfig::default(),
            corpus: Some(ToyCorpusSpec::default()),
            run_root: ".".into(),
        }
    }

    /// Reads a JSON document, applies `key.path=value` overrides, resolves
    /// relative paths against the file's directory and validates.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).at(path)?;
        let value: Value = serde_json::from_str(&text).map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_value(value, overrides, &base)
    }

    pub fn from_value(value: Value, overrides: &[String], base: &Path) -> Result<Self> {
        let parsed: Self = serde_json::from_value(value).map_err(|e| Error::Validation(format!("config: {e}")))?;
        let mut full = serde_json::to_value(&parsed)?;
        for o in overrides {
            apply_override(&mut full, o)?;
        }
        let mut cfg: Self =
            serde_json::from_value(full).map_err(|e| Error::Validation(format!("config after overrides: {e}")))?;
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let p = &mut self.paths;
        fix(&mut p.data_dir);
        fix(&mut p.paired_manifest);
        fix(&mut p.eval_manifest);
        fix(&mut p.lexicon);
        for o in [
            &mut p.unpaired_manifest,
            &mut p.text_corpus,
            &mut p.word_vectors,
            &mut p.pretrained_checkpoint,
            &mut p.features,
        ] {
            if let Some(x) = o.as_mut() {
                fix(x);
            }
        }
        fix(&mut self.run_root);
    }

    /// Variant rules plus the per-section checks.
    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) || self.name.starts_with('.') {
            return Err(Error::Validation(format!("run name `{}` is not a plain directory name", self.name)));
        }
        let cond = self.model.conditioning.enabled;
        let v = self.variant;
        if v.uses_word_vectors() != cond {
            return Err(Error::Validation(format!(
                "{v} requires conditioning {}, but model.conditioning.enabled is {cond}",
                if v.uses_word_vectors() { "enabled" } else { "disabled" }
            )));
        }
        if v.uses_word_vectors() && self.paths.word_vectors.is_none() && self.paths.text_corpus.is_none() {
            return Err(Error::Validation(format!(
                "{v} needs a word-vector table: set paths.word_vectors or paths.text_corpus"
            )));
        }
        if v.uses_word_vectors() && self.paths.word_vectors.is_none() && self.wordvec.dim != self.model.conditioning.wordvec_dim {
            return Err(Error::Validation(format!(
                "wordvec.dim {} differs from model.conditioning.wordvec_dim {}",
                self.wordvec.dim, self.model.conditioning.wordvec_dim
            )));
        }
        if v.uses_pretraining() && self.paths.unpaired_manifest.is_none() && self.paths.pretrained_checkpoint.is_none() {
            return Err(Error::Validation(format!("{v} needs paths.unpaired_manifest for decoder pre-training")));
        }
        if !v.uses_pretraining() && self.paths.pretrained_checkpoint.is_some() {
            return Err(Error::Validation(format!("{v} forbids a pretrained decoder checkpoint")));
        }
        self.dsp.framing.validate().map_err(|e| Error::Validation(e.to_string()))?;
        if self.eval.framing != self.dsp.framing || self.eval.mcd.framing != self.dsp.framing {
            return Err(Error::Validation("eval framing must equal dsp.framing".into()));
        }
        if self.eval.floor != self.dsp.floor {
            return Err(Error::Validation("eval.floor must equal dsp.floor".into()));
        }
        if !(self.dsp.floor > 0.0) {
            return Err(Error::Validation("dsp.floor must be positive".into()));
        }
        self.train.validate()?;
        if let Some(c) = &self.corpus {
            c.validate()?;
        }
        Ok(())
    }

    /// Model configuration with the vocabulary size taken from the lexicon
    /// when left at 0.
    pub fn model_for(&self, vocab_size: usize) -> Result<ModelConfig> {
        let mut m = self.model.clone();
        if m.vocab_size == 0 {
            m.vocab_size = vocab_size;
        } else if m.vocab_size != vocab_size {
            return Err(Error::Validation(format!(
                "model.vocab_size {} differs from the lexicon's {vocab_size}",
                m.vocab_size
            )));
        }
        m.validate().map_err(|e| Error::Validation(e.to_string()))?;
        Ok(m)
    }

    /// Short digest of the whole configuration.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(bytes).iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn run_root(&self) -> PathBuf {
        std::env::var_os(RUN_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| self.run_root.clone())
    }

    pub fn run_dir(&self) -> PathBuf {
        self.run_root().join("runs").join(&self.name)
    }
}

/// Sets the value at a dotted path. The right-hand side is parsed as JSON
/// and falls back to a plain string.
pub fn apply_override(doc: &mut Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Validation(format!("override `{spec}` is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::Validation(format!("override `{key}`: `{}` is not a section", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            if !obj.contains_key(*part) {
                return Err(Error::Validation(format!("override `{key}`: unknown key `{part}`")));
            }
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = match obj.get_mut(*part) {
            Some(v) if v.is_null() => {
                *v = Value::Object(Default::default());
                v
            }
            Some(v) => v,
            None => return Err(Error::Validation(format!("override `{key}`: unknown key `{part}`"))),
        };
    }
    Ok(())
}
