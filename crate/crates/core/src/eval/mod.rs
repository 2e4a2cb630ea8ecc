//! Mel cepstral distortion between reference and synthesized audio, batch
//! reports and sweep plots.

mod plot;
mod report;

use std::f64::consts::{LN_10, PI};

use serde::{Deserialize, Serialize};

use crate::dsp::{mel_log_spectrogram, Framing, MelFilterbank, Spectrogram, SpectrogramKind, Waveform, DEFAULT_FLOOR};
use crate::error::{Error, Result};

pub use plot::emit_plot;
pub use report::{evaluate_set, synthesize_waveform, EvalReport, EvalRow, EvalSetup, EVAL_CSV_HEADER};

/// `10 / ln 10`, converting natural-log cepstral distance to decibels.
pub const DB_PER_NEPER: f64 = 10.0 / LN_10;

/// Orthonormal DCT-II of one frame.
pub fn dct_ii(frame: &[f64]) -> Vec<f64> {
    let n = frame.len();
    let nf = n as f64;
    (0..n)
        .map(|k| {
            let scale = if k == 0 { (1.0 / nf).sqrt() } else { (2.0 / nf).sqrt() };
            let s: f64 = frame
                .iter()
                .enumerate()
                .map(|(i, x)| x * (PI * k as f64 * (2 * i + 1) as f64 / (2.0 * nf)).cos())
                .sum();
            scale * s
        })
        .collect()
}

/// Cepstral coefficients `1..=n_coeffs` of every frame of a log-mel
/// spectrogram; `c0` (overall level) is dropped.
pub fn mel_cepstra(spec: &Spectrogram, n_coeffs: usize) -> Result<Vec<Vec<f64>>> {
    if spec.kind != SpectrogramKind::MelLog {
        return Err(Error::Invalid("mel_cepstra needs a mel-log spectrogram".into()));
    }
    if n_coeffs == 0 || n_coeffs >= spec.bins {
        return Err(Error::Invalid(format!(
            "need 0 < n_coeffs < mel bins, got {n_coeffs} coefficients for {} bins",
            spec.bins
        )));
    }
    Ok((0..spec.frames)
        .map(|t| dct_ii(spec.frame(t))[1..=n_coeffs].to_vec())
        .collect())
}

/// Minimal-cost monotone alignment between two frame sequences.
#[derive(Clone, Debug, PartialEq)]
pub struct DtwPath {
    /// `(index into a, index into b)` from `(0, 0)` to `(last, last)`.
    pub pairs: Vec<(usize, usize)>,
    /// Sum of Euclidean frame distances along the path.
    pub cost: f64,
}

pub fn frame_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// DTW with steps `(1,0)`, `(0,1)`, `(1,1)`. Among paths of equal cost the
/// shortest wins, so swapping the arguments transposes the result.
pub fn dtw_align(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<DtwPath> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Empty("dtw_align needs two non-empty sequences".into()));
    }
    let dim = a[0].len();
    if a.iter().chain(b).any(|f| f.len() != dim) {
        return Err(Error::Invalid("dtw_align frames differ in dimension".into()));
    }
    let (n, m) = (a.len(), b.len());
    // (cost, path length) of the best path ending at each cell
    let mut acc = vec![(f64::INFINITY, usize::MAX); n * m];
    let better = |x: (f64, usize), y: (f64, usize)| x.0 < y.0 || (x.0 == y.0 && x.1 < y.1);
    for i in 0..n {
        for j in 0..m {
            let d = frame_distance(&a[i], &b[j]);
            if i == 0 && j == 0 {
                acc[0] = (d, 1);
                continue;
            }
            let mut best = (f64::INFINITY, usize::MAX);
            for (pi, pj) in predecessors(i, j) {
                let c = acc[pi * m + pj];
                if better(c, best) {
                    best = c;
                }
            }
            acc[i * m + j] = (best.0 + d, best.1 + 1);
        }
    }
    let (cost, len) = acc[n * m - 1];
    let mut pairs = Vec::with_capacity(len);
    let (mut i, mut j) = (n - 1, m - 1);
    pairs.push((i, j));
    while (i, j) != (0, 0) {
        let mut best: Option<((f64, usize), (usize, usize))> = None;
        for p in predecessors(i, j) {
            let c = acc[p.0 * m + p.1];
            if best.map_or(true, |(bc, _)| better(c, bc)) {
                best = Some((c, p));
            }
        }
        (i, j) = best.expect("interior cell has a predecessor").1;
        pairs.push((i, j));
    }
    pairs.reverse();
    Ok(DtwPath { pairs, cost })
}

/// Diagonal first so ties resolve identically under transposition.
fn predecessors(i: usize, j: usize) -> impl Iterator<Item = (usize, usize)> {
    let diag = (i > 0 && j > 0).then(|| (i - 1, j - 1));
    let up = (i > 0).then(|| (i - 1, j));
    let left = (j > 0).then(|| (i, j - 1));
    diag.into_iter().chain(up).chain(left)
}

/// Per-frame-pair distortion in dB.
pub fn frame_mcd(a: &[f64], b: &[f64]) -> f64 {
    DB_PER_NEPER * (2.0 * a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>()).sqrt()
}

/// Mean distortion over the DTW alignment of two cepstral sequences.
pub fn mcd_cepstra(reference: &[Vec<f64>], synthesis: &[Vec<f64>]) -> Result<(f64, DtwPath)> {
    let path = dtw_align(reference, synthesis)?;
    // frame_mcd = sqrt(2) * DB_PER_NEPER * frame_distance, so the mean follows
    // from the path cost, which is exactly symmetric in the arguments.
    let mcd = DB_PER_NEPER * std::f64::consts::SQRT_2 * path.cost / path.pairs.len() as f64;
    Ok((mcd, path))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McdResult {
    pub id: String,
    pub mcd_db: f64,
    /// Frames of the synthesized utterance.
    pub frames: usize,
    pub path_len: usize,
}

/// Feature recipe for cepstral distortion, shared by every comparison.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McdSetup {
    pub framing: Framing,
    pub n_mels: usize,
    pub n_coeffs: usize,
    pub floor: f64,
}

impl Default for McdSetup {
    fn default() -> Self {
        Self {
            framing: Framing::toy_8k(),
            n_mels: 40,
            n_coeffs: 13,
            floor: DEFAULT_FLOOR,
        }
    }
}

impl McdSetup {
    pub fn cepstra(&self, wave: &Waveform) -> Result<Vec<Vec<f64>>> {
        if wave.sample_rate != self.framing.sample_rate {
            return Err(Error::Invalid(format!(
                "waveform is {} Hz, framing expects {} Hz",
                wave.sample_rate, self.framing.sample_rate
            )));
        }
        let fb = MelFilterbank::with_bins(self.n_mels, &self.framing)?;
        mel_cepstra(&mel_log_spectrogram(wave, &fb, &self.framing, self.floor)?, self.n_coeffs)
    }
}

/// Cepstral distortion of `synthesis` against `reference`.
pub fn mcd(id: &str, reference: &Waveform, synthesis: &Waveform, setup: &McdSetup) -> Result<McdResult> {
    if reference.sample_rate != synthesis.sample_rate {
        return Err(Error::Invalid(format!(
            "sample rates differ: reference {} Hz, synthesis {} Hz",
            reference.sample_rate, synthesis.sample_rate
        )));
    }
    let r = setup.cepstra(reference)?;
    let s = setup.cepstra(synthesis)?;
    let (mcd_db, path) = mcd_cepstra(&r, &s)?;
    Ok(McdResult {
        id: id.to_string(),
        mcd_db,
        frames: s.len(),
        path_len: path.pairs.len(),
    })
}
