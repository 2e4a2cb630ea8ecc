use std::f64::consts::PI;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use super::{Framing, Waveform};
use crate::error::{Error, Result};

/// Complex STFT, `n_frames x (n_fft/2 + 1)` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct StftFrames {
    pub n_frames: usize,
    pub bins: usize,
    pub data: Vec<Complex64>,
    pub framing: Framing,
}

impl StftFrames {
    pub fn frame(&self, t: usize) -> &[Complex64] {
        &self.data[t * self.bins..(t + 1) * self.bins]
    }

    pub fn magnitudes(&self) -> Vec<f64> {
        self.data.iter().map(|c| c.norm()).collect()
    }
}

/// Periodic Hann window of length `win`, centred inside `n_fft` zeros.
pub fn hann_window(win: usize, n_fft: usize) -> Vec<f64> {
    let mut w = vec![0.0; n_fft];
    let off = (n_fft - win) / 2;
    for i in 0..win {
        w[off + i] = 0.5 - 0.5 * (2.0 * PI * i as f64 / win as f64).cos();
    }
    w
}

/// Index into a signal of length `len` under mirror ("reflect") extension.
fn reflect(p: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let m = p.rem_euclid(period);
    if m >= len as isize {
        (period - m) as usize
    } else {
        m as usize
    }
}

/// Frame `t` is centred on sample `t * hop`; the signal is extended by
/// reflection at both ends, so a signal of `len` samples yields
/// `ceil(len / hop)` frames.
pub fn stft(wave: &Waveform, framing: &Framing) -> Result<StftFrames> {
    framing.validate()?;
    let Framing {
        n_fft, hop_length, ..
    } = *framing;
    let len = wave.samples.len();
    let n_frames = framing.frame_count(len);
    let bins = framing.bins();
    let window = hann_window(framing.win_length, n_fft);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_fft);
    let mut data = Vec::with_capacity(n_frames * bins);
    let mut buf = vec![Complex64::new(0.0, 0.0); n_fft];
    let half = (n_fft / 2) as isize;
    for t in 0..n_frames {
        let start = (t * hop_length) as isize - half;
        for (j, slot) in buf.iter_mut().enumerate() {
            let s = wave.samples[reflect(start + j as isize, len)];
            *slot = Complex64::new(s * window[j], 0.0);
        }
        fft.process(&mut buf);
        data.extend_from_slice(&buf[..bins]);
    }
    Ok(StftFrames {
        n_frames,
        bins,
        data,
        framing: *framing,
    })
}

/// Least-squares inverse of [`stft`] for a signal of `length` samples.
///
/// Overlap-added windowed frames are folded back through the same
/// reflection used by the analysis, so `istft(stft(x)) == x` up to rounding
/// whenever every sample is covered by a nonzero window value.
pub fn istft(frames: &StftFrames, length: usize) -> Result<Waveform> {
    let framing = frames.framing;
    framing.validate()?;
    let Framing {
        n_fft, hop_length, ..
    } = framing;
    if frames.bins != framing.bins() {
        return Err(Error::Invalid(format!(
            "istft: {} bins for n_fft {n_fft}",
            frames.bins
        )));
    }
    if length == 0 {
        return Waveform::new(Vec::new(), framing.sample_rate);
    }
    let window = hann_window(framing.win_length, n_fft);
    let ifft = FftPlanner::<f64>::new().plan_fft_inverse(n_fft);
    let mut num = vec![0.0; length];
    let mut den = vec![0.0; length];
    let mut buf = vec![Complex64::new(0.0, 0.0); n_fft];
    let half = (n_fft / 2) as isize;
    let scale = 1.0 / n_fft as f64;
    for t in 0..frames.n_frames {
        let f = frames.frame(t);
        buf[..frames.bins].copy_from_slice(f);
        // DC and Nyquist of a real signal are real.
        buf[0].im = 0.0;
        if n_fft % 2 == 0 {
            buf[n_fft / 2].im = 0.0;
        }
        for k in frames.bins..n_fft {
            buf[k] = buf[n_fft - k].conj();
        }
        ifft.process(&mut buf);
        let start = (t * hop_length) as isize - half;
        for j in 0..n_fft {
            let w = window[j];
            if w == 0.0 {
                continue;
            }
            let i = reflect(start + j as isize, length);
            num[i] += w * buf[j].re * scale;
            den[i] += w * w;
        }
    }
    let samples = num
        .iter()
        .zip(&den)
        .map(|(n, d)| if *d > 1e-12 { n / d } else { 0.0 })
        .collect();
    Waveform::new(samples, framing.sample_rate)
}
