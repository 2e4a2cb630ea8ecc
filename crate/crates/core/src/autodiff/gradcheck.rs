use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::Gradients;
use super::optim::ParameterSet;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Relative error used by [`grad_check`]:
/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Step sizes tried per coordinate, as fractions of `eps`.
const LADDER: [f64; 6] = [1.0, 0.25, 0.0625, 0.015625, 0.00390625, 0.0009765625];

/// Compares analytic gradients against fourth-order central finite
/// differences `(f(-2h) - 8f(-h) + 8f(h) - f(2h)) / 12h`.
///
/// Each coordinate is differenced at steps `eps * LADDER`; the estimate kept
/// is the finer one of the adjacent pair that agree best. Large steps are
/// spoiled by kinks (relu, abs) and small ones by round-off, and the
/// agreement between neighbours reveals which regime applies without
/// consulting the analytic gradient.
///
/// `closure` maps a parameter set to `(loss, gradients)`; a parameter absent
/// from the gradients is checked against zero. Up to
/// `max_coords` coordinates per parameter are sampled with a fixed seed.
/// Returns the maximum relative error over all sampled coordinates.
pub fn grad_check<F>(mut closure: F, params: &ParameterSet, eps: f64, max_coords: usize) -> Result<f64>
where
    F: FnMut(&ParameterSet) -> Result<(f64, Gradients)>,
{
    let (l0, grads) = closure(params)?;
    let (l1, _) = closure(params)?;
    if l0.to_bits() != l1.to_bits() {
        return Err(Error::NonDeterministic {
            first: l0,
            second: l1,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x6772_6164);
    let mut probe = params.clone();
    let mut worst: f64 = 0.0;
    for (name, value) in params.iter() {
        let n = value.numel();
        let coords: Vec<usize> = if n <= max_coords {
            (0..n).collect()
        } else {
            sample(&mut rng, n, max_coords).into_vec()
        };
        let zeros;
        let analytic = match grads.get(name) {
            Some(g) => g,
            None => {
                zeros = Tensor::zeros(value.shape());
                &zeros
            }
        };
        for i in coords {
            let orig = value.data()[i];
            let mut at = |d: f64| -> Result<f64> {
                probe.get_mut(name).expect("cloned").data_mut()[i] = orig + d;
                Ok(closure(&probe)?.0)
            };
            let mut estimates = [0.0; LADDER.len()];
            for (e, frac) in estimates.iter_mut().zip(LADDER) {
                let h = eps * frac;
                let (p2, p1, m1, m2) = (at(2.0 * h)?, at(h)?, at(-h)?, at(-2.0 * h)?);
                *e = (m2 - 8.0 * m1 + 8.0 * p1 - p2) / (12.0 * h);
            }
            probe.get_mut(name).expect("cloned").data_mut()[i] = orig;
            let numeric = estimates
                .windows(2)
                .min_by(|a, b| (a[0] - a[1]).abs().total_cmp(&(b[0] - b[1]).abs()))
                .map(|w| w[1])
                .expect("ladder has at least two steps");
            worst = worst.max(relative_error(analytic.data()[i], numeric));
        }
    }
    Ok(worst)
}
