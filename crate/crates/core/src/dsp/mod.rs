//! Audio I/O, short-time Fourier analysis/synthesis, mel features and
//! Griffin-Lim phase reconstruction.

mod griffin_lim;
mod mel;
mod stft;
mod wav;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tensor, TensorBlocks};
use crate::error::{Error, IoContext, Result};

pub use griffin_lim::{griffin_lim, GriffinLimOutput};
pub use mel::{hz_to_mel, linear_log_spectrogram, linear_to_mel, mel_log_spectrogram, mel_to_hz, mel_to_linear, MelFilterbank};
pub use stft::{hann_window, istft, stft, StftFrames};
pub use wav::{load_wav, save_wav};

/// Minimum pre-log magnitude.
pub const DEFAULT_FLOOR: f64 = 1e-5;

/// Mono audio with samples nominally in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Invalid("sample rate must be positive".into()));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::Invalid("waveform contains non-finite samples".into()));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn rms(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        (self.samples.iter().map(|s| s * s).sum::<f64>() / self.samples.len() as f64).sqrt()
    }
}

/// Analysis parameters shared by every spectral operation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Framing {
    pub n_fft: usize,
    pub hop_length: usize,
    pub win_length: usize,
    pub sample_rate: u32,
}

impl Framing {
    /// 16 kHz speech framing.
    pub fn speech_16k() -> Self {
        Self {
            n_fft: 1024,
            hop_length: 256,
            win_length: 1024,
            sample_rate: 16_000,
        }
    }

    /// 8 kHz framing used by the toy corpus.
    pub fn toy_8k() -> Self {
        Self {
            n_fft: 512,
            hop_length: 128,
            win_length: 512,
            sample_rate: 8_000,
        }
    }

    pub fn bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.hop_length == 0 || self.hop_length > self.win_length || self.win_length > self.n_fft {
            return Err(Error::Invalid(format!(
                "framing needs 0 < hop <= win <= n_fft, got {self:?}"
            )));
        }
        if self.sample_rate == 0 {
            return Err(Error::Invalid("sample rate must be positive".into()));
        }
        Ok(())
    }

    /// Frames produced for a signal of `len` samples.
    pub fn frame_count(&self, len: usize) -> usize {
        len.div_ceil(self.hop_length)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpectrogramKind {
    LinearLog,
    MelLog,
}

/// `frames x bins` log-magnitude features.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    pub frames: usize,
    pub bins: usize,
    /// Row-major, one row per frame.
    pub values: Vec<f64>,
    pub kind: SpectrogramKind,
    pub framing: Framing,
    pub floor: f64,
}

#[derive(Serialize, Deserialize)]
struct SpectrogramMeta {
    kind: SpectrogramKind,
    framing: Framing,
    floor: f64,
    frames: usize,
    bins: usize,
}

impl Spectrogram {
    pub fn frame(&self, t: usize) -> &[f64] {
        &self.values[t * self.bins..(t + 1) * self.bins]
    }

    pub fn log_floor(&self) -> f64 {
        self.floor.ln()
    }

    fn meta(&self) -> SpectrogramMeta {
        SpectrogramMeta {
            kind: self.kind,
            framing: self.framing,
            floor: self.floor,
            frames: self.frames,
            bins: self.bins,
        }
    }
}

/// Caches a spectrogram in the tensor-block container, with the framing
/// metadata both embedded and written to a `.json` sidecar.
pub fn save_spectrogram(path: &Path, spec: &Spectrogram) -> Result<()> {
    let meta = serde_json::to_value(spec.meta())?;
    let tensor = Tensor::new(vec![spec.frames, spec.bins], spec.values.clone())?;
    TensorBlocks {
        header: meta.clone(),
        blocks: vec![("spectrogram".into(), tensor)],
    }
    .write(path)?;
    let sidecar = path.with_extension("json");
    std::fs::write(&sidecar, serde_json::to_vec_pretty(&meta)?).at(&sidecar)
}

pub fn load_spectrogram(path: &Path) -> Result<Spectrogram> {
    let tb = TensorBlocks::read(path)?;
    let meta: SpectrogramMeta = serde_json::from_value(tb.header)?;
    let (_, t) = tb
        .blocks
        .into_iter()
        .next()
        .ok_or_else(|| Error::Integrity("spectrogram block missing".into()))?;
    if t.shape() != [meta.frames, meta.bins] {
        return Err(Error::Integrity("spectrogram shape disagrees with metadata".into()));
    }
    Ok(Spectrogram {
        frames: meta.frames,
        bins: meta.bins,
        values: t.into_data(),
        kind: meta.kind,
        framing: meta.framing,
        floor: meta.floor,
    })
}
