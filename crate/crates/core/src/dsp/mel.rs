use super::stft::stft;
use super::{Framing, Spectrogram, SpectrogramKind, Waveform};
use crate::error::{Error, Result};

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filters with centres evenly spaced on the HTK mel scale from
/// `fmin` to `fmax`. Each triangle reaches from the previous centre to the
/// next one; the outermost triangles extend one spacing beyond the range so
/// every FFT bin inside `[fmin, fmax]` carries weight.
#[derive(Clone, Debug, PartialEq)]
pub struct MelFilterbank {
    pub n_mels: usize,
    pub n_fft: usize,
    pub sample_rate: u32,
    pub fmin: f64,
    pub fmax: f64,
    /// `n_mels x (n_fft/2 + 1)`, row-major.
    weights: Vec<f64>,
    /// Nonzero column range of each row.
    support: Vec<(usize, usize)>,
}

impl MelFilterbank {
    pub fn new(n_mels: usize, n_fft: usize, sample_rate: u32, fmin: f64, fmax: f64) -> Result<Self> {
        let nyquist = sample_rate as f64 / 2.0;
        if n_mels == 0 || n_fft < 2 || !(0.0..fmax).contains(&fmin) || fmax > nyquist {
            return Err(Error::Invalid(format!(
                "mel filterbank: n_mels {n_mels}, n_fft {n_fft}, range {fmin}..{fmax} Hz at {sample_rate} Hz"
            )));
        }
        let bins = n_fft / 2 + 1;
        let (lo, hi) = (hz_to_mel(fmin), hz_to_mel(fmax));
        let spacing = if n_mels > 1 {
            (hi - lo) / (n_mels - 1) as f64
        } else {
            hi - lo
        };
        let centre = |m: isize| {
            if n_mels > 1 {
                lo + m as f64 * spacing
            } else {
                (lo + hi) / 2.0 + m as f64 * spacing / 2.0
            }
        };
        let bin_hz = |j: usize| j as f64 * sample_rate as f64 / n_fft as f64;
        let mut weights = vec![0.0; n_mels * bins];
        let mut support = Vec::with_capacity(n_mels);
        for m in 0..n_mels {
            let left = mel_to_hz(centre(m as isize - 1)).max(0.0);
            let mid = mel_to_hz(centre(m as isize));
            let right = mel_to_hz(centre(m as isize + 1));
            let (mut first, mut last) = (bins, 0);
            for j in 0..bins {
                let f = bin_hz(j);
                let w = if f > left && f <= mid {
                    (f - left) / (mid - left)
                } else if f > mid && f < right {
                    (right - f) / (right - mid)
                } else {
                    0.0
                };
                if w > 0.0 {
                    weights[m * bins + j] = w;
                    first = first.min(j);
                    last = j + 1;
                }
            }
            if first >= last {
                return Err(Error::Invalid(format!(
                    "mel filter {m} covers no FFT bin; use fewer mel channels or a larger n_fft"
                )));
            }
            support.push((first, last));
        }
        Ok(Self {
            n_mels,
            n_fft,
            sample_rate,
            fmin,
            fmax,
            weights,
            support,
        })
    }

    /// 80 channels from 50 Hz to Nyquist.
    pub fn standard(framing: &Framing) -> Result<Self> {
        Self::with_bins(80, framing)
    }

    /// `n_mels` channels from 50 Hz to Nyquist.
    pub fn with_bins(n_mels: usize, framing: &Framing) -> Result<Self> {
        Self::new(n_mels, framing.n_fft, framing.sample_rate, 50.0, framing.sample_rate as f64 / 2.0)
    }

    pub fn bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    pub fn row(&self, m: usize) -> &[f64] {
        let b = self.bins();
        &self.weights[m * b..(m + 1) * b]
    }

    /// Centre frequency of channel `m` in Hz.
    pub fn centre_hz(&self, m: usize) -> f64 {
        let (lo, hi) = (hz_to_mel(self.fmin), hz_to_mel(self.fmax));
        if self.n_mels == 1 {
            return mel_to_hz((lo + hi) / 2.0);
        }
        mel_to_hz(lo + m as f64 * (hi - lo) / (self.n_mels - 1) as f64)
    }

    fn check(&self, framing: &Framing) -> Result<()> {
        if framing.n_fft != self.n_fft || framing.sample_rate != self.sample_rate {
            return Err(Error::Invalid(format!(
                "filterbank built for n_fft {} at {} Hz, framing is n_fft {} at {} Hz",
                self.n_fft, self.sample_rate, framing.n_fft, framing.sample_rate
            )));
        }
        Ok(())
    }

    /// `out = W x` for one linear-magnitude frame.
    pub fn apply(&self, linear: &[f64], out: &mut [f64]) {
        let b = self.bins();
        for (m, o) in out.iter_mut().enumerate() {
            let (s, e) = self.support[m];
            *o = (s..e).map(|j| self.weights[m * b + j] * linear[j]).sum();
        }
    }

    /// `out = W^T y` for one mel frame.
    pub fn apply_transpose(&self, mel: &[f64], out: &mut [f64]) {
        let b = self.bins();
        out.iter_mut().for_each(|v| *v = 0.0);
        for (m, &y) in mel.iter().enumerate() {
            let (s, e) = self.support[m];
            for j in s..e {
                out[j] += self.weights[m * b + j] * y;
            }
        }
    }
}

fn log_floor(v: f64, floor: f64) -> f64 {
    v.max(floor).ln()
}

/// `ln(max(|STFT|, floor))`.
pub fn linear_log_spectrogram(wave: &Waveform, framing: &Framing, floor: f64) -> Result<Spectrogram> {
    if wave.sample_rate != framing.sample_rate {
        return Err(Error::Invalid("waveform and framing sample rates differ".into()));
    }
    let s = stft(wave, framing)?;
    Ok(Spectrogram {
        frames: s.n_frames,
        bins: s.bins,
        values: s.data.iter().map(|c| log_floor(c.norm(), floor)).collect(),
        kind: SpectrogramKind::LinearLog,
        framing: *framing,
        floor,
    })
}

/// `ln(max(W |STFT|, floor))`.
pub fn mel_log_spectrogram(wave: &Waveform, fb: &MelFilterbank, framing: &Framing, floor: f64) -> Result<Spectrogram> {
    fb.check(framing)?;
    if wave.sample_rate != framing.sample_rate {
        return Err(Error::Invalid("waveform and framing sample rates differ".into()));
    }
    let s = stft(wave, framing)?;
    let mags = s.magnitudes();
    let mut values = vec![0.0; s.n_frames * fb.n_mels];
    for t in 0..s.n_frames {
        let out = &mut values[t * fb.n_mels..(t + 1) * fb.n_mels];
        fb.apply(&mags[t * s.bins..(t + 1) * s.bins], out);
        out.iter_mut().for_each(|v| *v = log_floor(*v, floor));
    }
    Ok(Spectrogram {
        frames: s.n_frames,
        bins: fb.n_mels,
        values,
        kind: SpectrogramKind::MelLog,
        framing: *framing,
        floor,
    })
}

pub fn linear_to_mel(spec: &Spectrogram, fb: &MelFilterbank) -> Result<Spectrogram> {
    if spec.kind != SpectrogramKind::LinearLog {
        return Err(Error::Invalid("linear_to_mel needs a linear-log spectrogram".into()));
    }
    fb.check(&spec.framing)?;
    let mut values = vec![0.0; spec.frames * fb.n_mels];
    let mut lin = vec![0.0; spec.bins];
    for t in 0..spec.frames {
        for (d, s) in lin.iter_mut().zip(spec.frame(t)) {
            *d = s.exp();
        }
        let out = &mut values[t * fb.n_mels..(t + 1) * fb.n_mels];
        fb.apply(&lin, out);
        out.iter_mut().for_each(|v| *v = log_floor(*v, spec.floor));
    }
    Ok(Spectrogram {
        frames: spec.frames,
        bins: fb.n_mels,
        values,
        kind: SpectrogramKind::MelLog,
        framing: spec.framing,
        floor: spec.floor,
    })
}

const NNLS_ITERS: usize = 200;

/// Approximate inverse of the filterbank: per frame, a nonnegative least
/// squares fit `min ||W x - m||, x >= 0` by multiplicative updates started
/// from the normalised back-projection, then re-logged with the floor.
/// Mel energy at or below the floor is treated as silence.
pub fn mel_to_linear(spec: &Spectrogram, fb: &MelFilterbank) -> Result<Spectrogram> {
    if spec.kind != SpectrogramKind::MelLog {
        return Err(Error::Invalid("mel_to_linear needs a mel-log spectrogram".into()));
    }
    fb.check(&spec.framing)?;
    if spec.bins != fb.n_mels {
        return Err(Error::Invalid(format!(
            "spectrogram has {} mel bins, filterbank {}",
            spec.bins, fb.n_mels
        )));
    }
    let bins = fb.bins();
    let mut colsum = vec![0.0; bins];
    fb.apply_transpose(&vec![1.0; fb.n_mels], &mut colsum);
    let mut values = Vec::with_capacity(spec.frames * bins);
    let mut target = vec![0.0; fb.n_mels];
    let mut wt_m = vec![0.0; bins];
    let mut x = vec![0.0; bins];
    let mut wx = vec![0.0; fb.n_mels];
    let mut wtwx = vec![0.0; bins];
    for t in 0..spec.frames {
        for (d, s) in target.iter_mut().zip(spec.frame(t)) {
            *d = (s.exp() - spec.floor).max(0.0);
        }
        fb.apply_transpose(&target, &mut wt_m);
        for j in 0..bins {
            x[j] = if colsum[j] > 0.0 { wt_m[j] / colsum[j] } else { 0.0 };
        }
        for _ in 0..NNLS_ITERS {
            fb.apply(&x, &mut wx);
            fb.apply_transpose(&wx, &mut wtwx);
            for j in 0..bins {
                if x[j] > 0.0 {
                    x[j] *= wt_m[j] / (wtwx[j] + 1e-300);
                }
            }
        }
        values.extend(x.iter().map(|&v| log_floor(v, spec.floor)));
    }
    Ok(Spectrogram {
        frames: spec.frames,
        bins,
        values,
        kind: SpectrogramKind::LinearLog,
        framing: spec.framing,
        floor: spec.floor,
    })
}
