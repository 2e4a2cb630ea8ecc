use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{mcd, McdResult, McdSetup};
use crate::autodiff::ParameterSet;
use crate::dsp::{griffin_lim, mel_to_linear, Framing, MelFilterbank, Waveform, DEFAULT_FLOOR};
use crate::error::{IoContext, Result};
use crate::model::{synthesize, EncoderInput, ModelConfig, Synthesis};

pub const EVAL_CSV_HEADER: &str = "id,mcd_db,frames,path_len,error";

/// Synthesis and scoring parameters for a batch evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSetup {
    pub framing: Framing,
    /// Log floor of the model's mel features.
    pub floor: f64,
    pub max_decoder_steps: usize,
    pub griffin_lim_iters: usize,
    pub griffin_lim_seed: u64,
    pub mcd: McdSetup,
}

impl Default for EvalSetup {
    fn default() -> Self {
        Self {
            framing: Framing::toy_8k(),
            floor: DEFAULT_FLOOR,
            max_decoder_steps: 200,
            griffin_lim_iters: 60,
            griffin_lim_seed: 0,
            mcd: McdSetup::default(),
        }
    }
}

/// Text to audio: autoregressive mel prediction, mel inversion and
/// Griffin-Lim phase reconstruction.
pub fn synthesize_waveform(
    cfg: &ModelConfig,
    params: &ParameterSet,
    input: &EncoderInput,
    setup: &EvalSetup,
) -> Result<(Synthesis, Waveform)> {
    let syn = synthesize(cfg, params, input, setup.max_decoder_steps, setup.framing, setup.floor)?;
    let fb = MelFilterbank::with_bins(cfg.mel_bins, &setup.framing)?;
    let linear = mel_to_linear(&syn.mel, &fb)?;
    let wave = griffin_lim(&linear, setup.griffin_lim_iters, setup.griffin_lim_seed)?.waveform;
    Ok((syn, wave))
}

#[derive(Clone, Debug, PartialEq)]
pub enum EvalRow {
    Scored(McdResult),
    Failed { id: String, error: String },
}

impl EvalRow {
    pub fn id(&self) -> &str {
        match self {
            Self::Scored(r) => &r.id,
            Self::Failed { id, .. } => id,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub checkpoint_tag: String,
    pub config_hash: String,
    pub rows: Vec<EvalRow>,
}

#[derive(Serialize)]
struct CsvRow<'a> {
    id: &'a str,
    mcd_db: Option<f64>,
    frames: Option<usize>,
    path_len: Option<usize>,
    error: Option<&'a str>,
}

#[derive(Serialize)]
struct Summary<'a> {
    checkpoint_tag: &'a str,
    config_hash: &'a str,
    scored: usize,
    failed: usize,
    mean_mcd_db: Option<f64>,
    median_mcd_db: Option<f64>,
}

impl EvalReport {
    pub fn scores(&self) -> Vec<f64> {
        self.rows
            .iter()
            .filter_map(|r| match r {
                EvalRow::Scored(m) => Some(m.mcd_db),
                EvalRow::Failed { .. } => None,
            })
            .collect()
    }

    pub fn mean(&self) -> Option<f64> {
        let s = self.scores();
        (!s.is_empty()).then(|| s.iter().sum::<f64>() / s.len() as f64)
    }

    pub fn median(&self) -> Option<f64> {
        median(&self.scores())
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        if self.rows.is_empty() {
            w.write_record(EVAL_CSV_HEADER.split(','))?;
        }
        for row in &self.rows {
            let rec = match row {
                EvalRow::Scored(m) => CsvRow {
                    id: &m.id,
                    mcd_db: Some(m.mcd_db),
                    frames: Some(m.frames),
                    path_len: Some(m.path_len),
                    error: None,
                },
                EvalRow::Failed { id, error } => CsvRow {
                    id,
                    mcd_db: None,
                    frames: None,
                    path_len: None,
                    error: Some(error),
                },
            };
            w.serialize(rec)?;
        }
        let bytes = w.into_inner().map_err(|e| csv::Error::from(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// Writes the CSV and a `.json` summary carrying the identifiers.
    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()?).at(path)?;
        let summary = Summary {
            checkpoint_tag: &self.checkpoint_tag,
            config_hash: &self.config_hash,
            scored: self.scores().len(),
            failed: self.rows.len() - self.scores().len(),
            mean_mcd_db: self.mean(),
            median_mcd_db: self.median(),
        };
        let sidecar = path.with_extension("json");
        std::fs::write(&sidecar, serde_json::to_vec_pretty(&summary)?).at(&sidecar)
    }
}

pub(crate) fn median(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

/// Scores every utterance in id order. `prepare` supplies the encoder input
/// and reference audio for an id; any failure becomes an error row.
pub fn evaluate_set(
    cfg: &ModelConfig,
    params: &ParameterSet,
    checkpoint_tag: &str,
    ids: &[String],
    mut prepare: impl FnMut(&str) -> Result<(EncoderInput, Waveform)>,
    setup: &EvalSetup,
) -> EvalReport {
    let mut ids: Vec<&String> = ids.iter().collect();
    ids.sort();
    let rows = ids
        .into_iter()
        .map(|id| {
            let scored = prepare(id).and_then(|(input, reference)| {
                let (_, wave) = synthesize_waveform(cfg, params, &input, setup)?;
                mcd(id, &reference, &wave, &setup.mcd)
            });
            match scored {
                Ok(m) => EvalRow::Scored(m),
                Err(e) => {
                    log::warn!("evaluation of `{id}` failed: {e}");
                    EvalRow::Failed {
                        id: id.clone(),
                        error: e.to_string(),
                    }
                }
            }
        })
        .collect();
    EvalReport {
        checkpoint_tag: checkpoint_tag.to_string(),
        config_hash: cfg.hash(),
        rows,
    }
}
