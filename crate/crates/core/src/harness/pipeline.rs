use std::fmt::Write as _;
use std::fs::File;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::manifest::{Manifest, ManifestEntry, ManifestKind};
use super::toy::generate_toy_corpus;
use crate::autodiff::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::dsp::{load_spectrogram, load_wav, mel_log_spectrogram, save_spectrogram, save_wav, MelFilterbank, Spectrogram, Waveform};
use crate::error::{Error, IoContext, Result};
use crate::eval::{evaluate_set, synthesize_waveform, EvalReport};
use crate::model::{EncoderInput, FeatureNorm, ModelConfig, Synthesis};
use crate::text::{normalize_text, tokenize, Lexicon, TokenSequence};
use crate::training::{
    finetune, model_from_checkpoint, pretrain_decoder, FinetuneOutcome, Init, PairedExample, ReportWriter,
    UnpairedExample,
};
use crate::wordvec::{load_table, train_skipgram, WordVectorTable};

pub const CONFIG_SNAPSHOT: &str = "config.json";
pub const WORD_VECTORS: &str = "wordvec.txt";
pub const PRETRAINED_CKPT: &str = "pretrained.ckpt";
pub const PRETRAIN_LOG: &str = "pretrain_log.csv";
pub const FINETUNED_CKPT: &str = "finetuned.ckpt";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const VALIDATION_LOG: &str = "validation.csv";
pub const TRAIN_SUMMARY: &str = "train_summary.json";
pub const EVAL_CSV: &str = "eval.csv";
pub const SYNTH_DIR: &str = "synth";

/// Process exit status for an error: 1 for configuration problems caught
/// before work starts, 2 for everything else.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Validation(_) => 1,
        _ => 2,
    }
}

#[derive(Serialize, Deserialize)]
struct Snapshot {
    config_hash: String,
    config: ExperimentConfig,
}

/// A run directory bound to one configuration.
#[derive(Clone, Debug)]
pub struct Run {
    pub cfg: ExperimentConfig,
    pub dir: PathBuf,
}

impl Run {
    /// Opens `runs/<name>/`, refusing a directory created by a different
    /// configuration.
    pub fn open(cfg: ExperimentConfig) -> Result<Self> {
        let dir = cfg.run_dir();
        Self::at(cfg, dir)
    }

    pub fn at(cfg: ExperimentConfig, dir: PathBuf) -> Result<Self> {
        cfg.validate()?;
        std::fs::create_dir_all(&dir).at(&dir)?;
        let snap = dir.join(CONFIG_SNAPSHOT);
        let hash = cfg.hash();
        if snap.exists() {
            let old: Snapshot = serde_json::from_slice(&std::fs::read(&snap).at(&snap)?)?;
            if old.config_hash != hash {
                return Err(Error::Validation(format!(
                    "{} holds artifacts of config {}, current config is {hash}; choose another run name",
                    dir.display(),
                    old.config_hash
                )));
            }
        } else {
            let body = serde_json::to_vec_pretty(&Snapshot {
                config_hash: hash,
                config: cfg.clone(),
            })?;
            std::fs::write(&snap, body).at(&snap)?;
        }
        Ok(Self { cfg, dir })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn features_dir(&self) -> PathBuf {
        self.cfg.paths.features.clone().unwrap_or_else(|| self.path("features"))
    }

    pub fn lexicon(&self) -> Result<Lexicon> {
        Lexicon::load(&self.cfg.paths.lexicon)
    }

    pub fn model_config(&self, lex: &Lexicon) -> Result<ModelConfig> {
        self.cfg.model_for(lex.vocab_size())
    }

    fn filterbank(&self) -> Result<MelFilterbank> {
        MelFilterbank::with_bins(self.cfg.model.mel_bins, &self.cfg.dsp.framing)
    }

    /// Cached log-mel features of one utterance, computed on a miss. A cached
    /// file from different feature settings is an error.
    pub fn features(&self, set: &str, manifest: &Manifest, entry: &ManifestEntry) -> Result<Spectrogram> {
        let path = self.features_dir().join(set).join(format!("{}.spec", entry.id));
        let want_bins = self.cfg.model.mel_bins;
        if path.exists() {
            let spec = load_spectrogram(&path)?;
            if spec.framing != self.cfg.dsp.framing || spec.floor != self.cfg.dsp.floor || spec.bins != want_bins {
                return Err(Error::Validation(format!(
                    "cached features {} were computed with different settings",
                    path.display()
                )));
            }
            return Ok(spec);
        }
        let wave = load_wav(&manifest.audio_path(entry))?;
        let spec = mel_log_spectrogram(&wave, &self.filterbank()?, &self.cfg.dsp.framing, self.cfg.dsp.floor)?;
        save_spectrogram(&path, &spec)?;
        Ok(spec)
    }

    fn normalized(&self, spec: &Spectrogram) -> Vec<f64> {
        let norm = FeatureNorm::new(self.cfg.dsp.floor);
        spec.values.iter().map(|&v| norm.normalize(v)).collect()
    }

    fn manifest(path: &Path, want: ManifestKind) -> Result<Manifest> {
        let m = Manifest::load(path)?;
        match (m.kind()?, want) {
            (ManifestKind::Empty, _) => Ok(m),
            (k, w) if k == w => Ok(m),
            (k, w) => Err(Error::Validation(format!(
                "{} is a {k:?} manifest, expected {w:?}",
                path.display()
            ))),
        }
    }

    pub fn paired_manifest(&self) -> Result<Manifest> {
        Self::manifest(&self.cfg.paths.paired_manifest, ManifestKind::Paired)
    }

    pub fn eval_manifest(&self) -> Result<Manifest> {
        Self::manifest(&self.cfg.paths.eval_manifest, ManifestKind::Paired)
    }

    pub fn unpaired_manifest(&self) -> Result<Manifest> {
        let path = self
            .cfg
            .paths
            .unpaired_manifest
            .as_ref()
            .ok_or_else(|| Error::Validation("paths.unpaired_manifest is not set".into()))?;
        Self::manifest(path, ManifestKind::Unpaired)
    }

    pub fn tokens(&self, lex: &Lexicon, text: &str) -> Result<TokenSequence> {
        tokenize(&normalize_text(text), lex, self.cfg.text.mode, self.cfg.text.oov)
    }

    /// The word-vector table conditioned variants read, if any.
    pub fn word_vectors(&self) -> Result<Option<WordVectorTable>> {
        if !self.cfg.variant.uses_word_vectors() {
            return Ok(None);
        }
        let path = self.cfg.paths.word_vectors.clone().unwrap_or_else(|| self.path(WORD_VECTORS));
        if !path.exists() {
            return Err(Error::Validation(format!(
                "word vectors {} not found; run `trainwv` first",
                path.display()
            )));
        }
        let table = load_table(&path)?;
        if table.dim() != self.cfg.model.conditioning.wordvec_dim {
            return Err(Error::Validation(format!(
                "word vectors have dimension {}, model expects {}",
                table.dim(),
                self.cfg.model.conditioning.wordvec_dim
            )));
        }
        Ok(Some(table))
    }

    pub fn encoder_input(&self, seq: &TokenSequence, table: Option<&WordVectorTable>) -> Result<EncoderInput> {
        match table {
            Some(t) => EncoderInput::with_table(&[seq], t),
            None => EncoderInput::without_vectors(&[seq], self.cfg.model.conditioning.wordvec_dim),
        }
    }

    pub fn paired_examples(&self, manifest: &Manifest, lex: &Lexicon) -> Result<Vec<PairedExample>> {
        let table = self.word_vectors()?;
        manifest
            .entries
            .iter()
            .map(|e| {
                let at = |err: Error| Error::Utterance {
                    id: e.id.clone(),
                    source: Box::new(err),
                };
                let tokens = self.tokens(lex, e.text.as_deref().unwrap_or_default()).map_err(at)?;
                let word_vectors = match &table {
                    Some(t) => tokens.words.iter().map(|w| t.lookup(w).0).collect(),
                    None => Vec::new(),
                };
                let spec = self.features("paired", manifest, e).map_err(at)?;
                Ok(PairedExample {
                    id: e.id.clone(),
                    tokens,
                    word_vectors,
                    mel: self.normalized(&spec),
                    frames: spec.frames,
                })
            })
            .collect()
    }

    pub fn unpaired_examples(&self, manifest: &Manifest) -> Result<Vec<UnpairedExample>> {
        manifest
            .entries
            .iter()
            .map(|e| {
                let spec = self.features("unpaired", manifest, e)?;
                Ok(UnpairedExample {
                    id: e.id.clone(),
                    mel: self.normalized(&spec),
                    frames: spec.frames,
                })
            })
            .collect()
    }

    fn done(&self, stage: &str) -> PathBuf {
        self.path(&format!("{stage}.done"))
    }

    fn mark_done(&self, stage: &str) -> Result<()> {
        let p = self.done(stage);
        std::fs::write(&p, self.cfg.hash()).at(&p)
    }

    /// Loads a model checkpoint written by this configuration.
    pub fn model_checkpoint(&self, name: &str, lex: &Lexicon) -> Result<(Checkpoint, ModelConfig, crate::autodiff::ParameterSet)> {
        let path = self.path(name);
        if !path.exists() {
            return Err(Error::Validation(format!("{} not found; run the training step first", path.display())));
        }
        let ckpt = load_checkpoint(&path)?;
        let (cfg, params) = model_from_checkpoint(&ckpt)?;
        let want = self.model_config(lex)?;
        if cfg != want {
            return Err(Error::Validation(format!(
                "checkpoint {} has model config {}, run expects {}",
                path.display(),
                cfg.hash(),
                want.hash()
            )));
        }
        Ok((ckpt, cfg, params))
    }
}

/// Generates the toy corpus when configured, checks the manifests and
/// fills the feature cache.
pub fn cmd_prepare(run: &Run) -> Result<()> {
    let paths = &run.cfg.paths;
    if let Some(spec) = &run.cfg.corpus {
        let marker = paths.data_dir.join("corpus.json");
        let want = serde_json::to_string(spec)?;
        let current = std::fs::read_to_string(&marker).ok();
        if current.as_deref() != Some(want.as_str()) {
            log::info!("generating toy corpus in {}", paths.data_dir.display());
            generate_toy_corpus(spec, &paths.data_dir)?;
            std::fs::write(&marker, want).at(&marker)?;
        }
    }
    let lex = run.lexicon()?;
    run.model_config(&lex)?;
    let paired = run.paired_manifest()?;
    let eval = run.eval_manifest()?;
    run.paired_examples_unconditioned(&paired, &lex)?;
    for e in &eval.entries {
        run.features("eval", &eval, e)?;
        run.tokens(&lex, e.text.as_deref().unwrap_or_default())?;
    }
    if run.cfg.paths.unpaired_manifest.is_some() {
        let unpaired = run.unpaired_manifest()?;
        run.unpaired_examples(&unpaired)?;
    }
    log::info!("prepared {} paired and {} evaluation utterances", paired.len(), eval.len());
    run.mark_done("prepare")
}

impl Run {
    /// Features and tokens without word vectors, to validate inputs early.
    fn paired_examples_unconditioned(&self, manifest: &Manifest, lex: &Lexicon) -> Result<()> {
        for e in &manifest.entries {
            self.tokens(lex, e.text.as_deref().unwrap_or_default())
                .map_err(|err| Error::Utterance {
                    id: e.id.clone(),
                    source: Box::new(err),
                })?;
            self.features("paired", manifest, e)?;
        }
        Ok(())
    }
}

/// Trains skip-gram word vectors on the configured text corpus.
pub fn cmd_trainwv(run: &Run) -> Result<WordVectorTable> {
    let path = run
        .cfg
        .paths
        .text_corpus
        .as_ref()
        .ok_or_else(|| Error::Validation("paths.text_corpus is not set".into()))?;
    let text = std::fs::read_to_string(path).at(path)?;
    let sentences: Vec<Vec<String>> = text.lines().map(normalize_text).filter(|s| !s.is_empty()).collect();
    let out = train_skipgram(&sentences, &run.cfg.wordvec, &path.display().to_string())?;
    log::info!(
        "trained {} word vectors, final epoch loss {:.4}",
        out.table.len(),
        out.epoch_losses.last().copied().unwrap_or(f64::NAN)
    );
    out.table.save(&run.path(WORD_VECTORS))?;
    run.mark_done("trainwv")?;
    Ok(out.table)
}

/// Pre-trains the decoder on the unpaired manifest.
pub fn cmd_pretrain(run: &Run) -> Result<Checkpoint> {
    if !run.cfg.variant.uses_pretraining() {
        return Err(Error::Validation(format!("{} does not use decoder pre-training", run.cfg.variant)));
    }
    let lex = run.lexicon()?;
    let model = run.model_config(&lex)?;
    let examples = run.unpaired_examples(&run.unpaired_manifest()?)?;
    let log_path = run.path(PRETRAIN_LOG);
    let mut log = ReportWriter::new(File::create(&log_path).at(&log_path)?);
    let out = pretrain_decoder(&examples, &model, &run.cfg.train, run.cfg.seed, |r| log.write(r))?;
    log::info!("pre-training finished, loss {:.4}", out.final_loss);
    save_checkpoint(&run.path(PRETRAINED_CKPT), &out.checkpoint)?;
    run.mark_done("pretrain")?;
    Ok(out.checkpoint)
}

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub config_hash: String,
    pub best_step: u64,
    pub best_loss: f64,
    pub steps_run: u64,
    pub n_paired: usize,
    pub validations: Vec<(u64, f64)>,
}

/// Fine-tunes on paired data, from the pretrained decoder for t-dec and
/// t-enc-dec.
pub fn cmd_train(run: &Run) -> Result<FinetuneOutcome> {
    let lex = run.lexicon()?;
    let model = run.model_config(&lex)?;
    let examples = run.paired_examples(&run.paired_manifest()?, &lex)?;
    let pretrained = if run.cfg.variant.uses_pretraining() {
        let path = run.cfg.paths.pretrained_checkpoint.clone().unwrap_or_else(|| run.path(PRETRAINED_CKPT));
        if !path.exists() {
            return Err(Error::Validation(format!(
                "pretrained decoder {} not found; run `pretrain` first",
                path.display()
            )));
        }
        Some(load_checkpoint(&path)?)
    } else {
        None
    };
    let init = pretrained.as_ref().map_or(Init::Fresh, Init::Pretrained);
    let log_path = run.path(TRAIN_LOG);
    let mut log = ReportWriter::new(File::create(&log_path).at(&log_path)?);
    let out = finetune(&examples, &model, &run.cfg.train, init, run.cfg.seed, |r| log.write(r))?;
    log::info!(
        "fine-tuning stopped after {} steps, best validation loss {:.4} at step {}",
        out.steps_run,
        out.best_loss,
        out.best_step
    );
    save_checkpoint(&run.path(FINETUNED_CKPT), &out.checkpoint)?;
    let mut val = String::from("step,loss\n");
    for (s, l) in &out.validations {
        let _ = writeln!(val, "{s},{l:?}");
    }
    let vpath = run.path(VALIDATION_LOG);
    std::fs::write(&vpath, val).at(&vpath)?;
    let summary = TrainSummary {
        config_hash: run.cfg.hash(),
        best_step: out.best_step,
        best_loss: out.best_loss,
        steps_run: out.steps_run,
        n_paired: examples.len(),
        validations: out.validations.clone(),
    };
    let spath = run.path(TRAIN_SUMMARY);
    std::fs::write(&spath, serde_json::to_vec_pretty(&summary)?).at(&spath)?;
    run.mark_done("train")?;
    Ok(out)
}

/// Scores the fine-tuned model on the evaluation manifest.
pub fn cmd_eval(run: &Run) -> Result<EvalReport> {
    let lex = run.lexicon()?;
    let (ckpt, model, params) = run.model_checkpoint(FINETUNED_CKPT, &lex)?;
    let table = run.word_vectors()?;
    let manifest = run.eval_manifest()?;
    let prepare = |id: &str| -> Result<(EncoderInput, Waveform)> {
        let e = manifest
            .get(id)
            .ok_or_else(|| Error::Invalid(format!("`{id}` not in manifest")))?;
        let seq = run.tokens(&lex, e.text.as_deref().unwrap_or_default())?;
        Ok((run.encoder_input(&seq, table.as_ref())?, load_wav(&manifest.audio_path(e))?))
    };
    let mut report = evaluate_set(&model, &params, &ckpt.tag, &manifest.ids(), prepare, &run.cfg.eval);
    report.config_hash = run.cfg.hash();
    report.write(&run.path(EVAL_CSV))?;
    log::info!(
        "evaluated {} utterances, mean MCD {:?} dB",
        report.rows.len(),
        report.mean()
    );
    run.mark_done("eval")?;
    Ok(report)
}

/// Synthesizes the given texts (or the evaluation manifest) to WAV files
/// with an SVG alignment plot each. Returns the written WAV paths.
pub fn cmd_synth(run: &Run, texts: &[String]) -> Result<Vec<PathBuf>> {
    let lex = run.lexicon()?;
    let (_, model, params) = run.model_checkpoint(FINETUNED_CKPT, &lex)?;
    let table = run.word_vectors()?;
    let jobs: Vec<(String, String)> = if texts.is_empty() {
        run.eval_manifest()?
            .entries
            .into_iter()
            .map(|e| (e.id, e.text.unwrap_or_default()))
            .collect()
    } else {
        texts.iter().enumerate().map(|(i, t)| (format!("text-{i:03}"), t.clone())).collect()
    };
    let dir = run.path(SYNTH_DIR);
    std::fs::create_dir_all(&dir).at(&dir)?;
    let mut written = Vec::with_capacity(jobs.len());
    for (id, text) in jobs {
        let seq = run.tokens(&lex, &text)?;
        let input = run.encoder_input(&seq, table.as_ref())?;
        let (syn, wave) = synthesize_waveform(&model, &params, &input, &run.cfg.eval)?;
        if syn.truncated {
            log::warn!("`{id}` hit the decoder step limit without stopping");
        }
        let wav = dir.join(format!("{id}.wav"));
        save_wav(&wav, &wave)?;
        let svg = dir.join(format!("{id}.svg"));
        std::fs::write(&svg, alignment_svg(&syn)).at(&svg)?;
        written.push(wav);
    }
    Ok(written)
}

/// Decoder steps on the x axis, encoder positions on the y axis, darker
/// cells for larger attention weights.
pub fn alignment_svg(syn: &Synthesis) -> String {
    const CELL: usize = 6;
    let steps = syn.alignment.len();
    let positions = syn.alignment.first().map_or(0, Vec::len);
    let (w, h) = (steps.max(1) * CELL, positions.max(1) * CELL);
    let mut s = format!(
        "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"{w}\" height=\"{h}\">\n<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n"
    );
    for (t, weights) in syn.alignment.iter().enumerate() {
        let peak = weights.iter().cloned().fold(0.0f64, f64::max);
        for (u, &a) in weights.iter().enumerate() {
            if peak <= 0.0 || a / peak < 0.01 {
                continue;
            }
            let shade = (255.0 * (1.0 - a / peak)).round() as u8;
            let _ = writeln!(
                s,
                "<rect x=\"{}\" y=\"{}\" width=\"{CELL}\" height=\"{CELL}\" fill=\"rgb({shade},{shade},{shade})\"/>",
                t * CELL,
                h - (u + 1) * CELL
            );
        }
    }
    s.push_str("</svg>\n");
    s
}
