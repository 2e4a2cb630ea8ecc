use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex64;

use super::stft::{istft, stft, StftFrames};
use super::{Spectrogram, SpectrogramKind, Waveform};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GriffinLimOutput {
    pub waveform: Waveform,
    /// `||  |STFT(x_i)| - |S| ||_F / ||S||_F` after each iteration.
    pub convergence: Vec<f64>,
}

/// Griffin-Lim phase reconstruction from a linear log-magnitude
/// spectrogram. The output has `frames * hop` samples.
pub fn griffin_lim(spec: &Spectrogram, n_iters: usize, seed: u64) -> Result<GriffinLimOutput> {
    if spec.kind != SpectrogramKind::LinearLog {
        return Err(Error::Invalid(
            "griffin_lim needs a linear-log spectrogram; convert mel with mel_to_linear".into(),
        ));
    }
    if n_iters == 0 {
        return Err(Error::Invalid("griffin_lim needs at least one iteration".into()));
    }
    let framing = spec.framing;
    if spec.bins != framing.bins() {
        return Err(Error::Invalid("spectrogram bins disagree with framing".into()));
    }
    let length = spec.frames * framing.hop_length;
    let mags: Vec<f64> = spec.values.iter().map(|v| v.exp()).collect();
    let norm = mags.iter().map(|m| m * m).sum::<f64>().sqrt().max(1e-300);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut frames = StftFrames {
        n_frames: spec.frames,
        bins: spec.bins,
        data: mags
            .iter()
            .map(|&m| {
                // uniform on (-pi, pi]
                let phase = PI - rng.gen::<f64>() * 2.0 * PI;
                Complex64::from_polar(m, phase)
            })
            .collect(),
        framing,
    };
    let mut convergence = Vec::with_capacity(n_iters);
    let mut wave = Waveform::new(Vec::new(), framing.sample_rate)?;
    for _ in 0..n_iters {
        wave = istft(&frames, length)?;
        let est = stft(&wave, &framing)?;
        let mut err = 0.0;
        for (i, c) in est.data.iter().enumerate() {
            let a = c.norm();
            err += (a - mags[i]).powi(2);
            frames.data[i] = if a > 0.0 {
                c * (mags[i] / a)
            } else {
                Complex64::new(mags[i], 0.0)
            };
        }
        convergence.push(err.sqrt() / norm);
    }
    Ok(GriffinLimOutput {
        waveform: wave,
        convergence,
    })
}
