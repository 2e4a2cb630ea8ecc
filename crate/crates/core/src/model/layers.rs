use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, ParameterSet, Tensor, Var};
use crate::error::{Error, Result};

/// Registers `name` in the graph; frozen parameters receive no gradient.
pub(crate) fn param(g: &mut Graph, params: &ParameterSet, name: &str) -> Result<Var> {
    let t = params
        .get(name)
        .ok_or_else(|| Error::Contract(format!("parameter `{name}` missing")))?;
    Ok(g.param(name, t, !params.is_frozen(name)))
}

/// `x W + b` for `x: [N, I]`.
pub(crate) fn linear(g: &mut Graph, params: &ParameterSet, name: &str, x: Var) -> Result<Var> {
    let w = param(g, params, &format!("{name}.w"))?;
    let b = param(g, params, &format!("{name}.b"))?;
    let xw = g.matmul(x, w)?;
    g.add(xw, b)
}

/// Inverted dropout in training mode, identity otherwise.
pub(crate) fn dropout(g: &mut Graph, x: Var, p: f64, rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
    match rng {
        Some(rng) if p > 0.0 => {
            let shape = g.shape(x).to_vec();
            let n: usize = shape.iter().product();
            let keep = 1.0 / (1.0 - p);
            let mask: Vec<f64> = (0..n).map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep }).collect();
            let m = g.constant(Tensor::new(shape, mask)?);
            g.mul(x, m)
        }
        _ => Ok(x),
    }
}

/// Inverted dropout where row block `k` (of `rngs.len()` equal blocks) draws
/// its mask from `rngs[k]`.
pub(crate) fn dropout_blocks(g: &mut Graph, x: Var, p: f64, rngs: &mut [ChaCha8Rng]) -> Result<Var> {
    if p <= 0.0 || rngs.is_empty() {
        return Ok(x);
    }
    let shape = g.shape(x).to_vec();
    let n: usize = shape.iter().product();
    if n % rngs.len() != 0 {
        return Err(Error::Contract(format!("{n} values do not split into {} blocks", rngs.len())));
    }
    let per = n / rngs.len();
    let keep = 1.0 / (1.0 - p);
    let mask: Vec<f64> = rngs
        .iter_mut()
        .flat_map(|rng| (0..per).map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep }).collect::<Vec<_>>())
        .collect();
    let m = g.constant(Tensor::new(shape, mask)?);
    g.mul(x, m)
}

fn prenet_with(
    g: &mut Graph,
    params: &ParameterSet,
    prefix: &str,
    x: Var,
    mut drop: impl FnMut(&mut Graph, Var) -> Result<Var>,
) -> Result<Var> {
    let mut h = x;
    for layer in ["prenet1", "prenet2"] {
        let z = linear(g, params, &format!("{prefix}.{layer}"), h)?;
        let a = g.relu(z);
        h = drop(g, a)?;
    }
    Ok(h)
}

/// Two relu layers with dropout after each.
pub(crate) fn prenet(
    g: &mut Graph,
    params: &ParameterSet,
    prefix: &str,
    x: Var,
    p: f64,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    prenet_with(g, params, prefix, x, |g, a| dropout(g, a, p, rng.as_deref_mut()))
}

/// [`prenet`] over stacked row blocks, block `k` using `rngs[k]` for its
/// dropout masks (no dropout when `rngs` is empty).
pub(crate) fn prenet_blocks(
    g: &mut Graph,
    params: &ParameterSet,
    prefix: &str,
    x: Var,
    p: f64,
    rngs: &mut [ChaCha8Rng],
) -> Result<Var> {
    prenet_with(g, params, prefix, x, |g, a| dropout_blocks(g, a, p, rngs))
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct LstmState {
    pub h: Var,
    pub c: Var,
}

/// One LSTM step from a precomputed input projection `x_proj = x Wx`
/// (`[B, 4H]`). Gate order: input, forget, cell, output.
pub(crate) fn lstm_cell(g: &mut Graph, params: &ParameterSet, name: &str, x_proj: Var, s: LstmState) -> Result<LstmState> {
    let wh = param(g, params, &format!("{name}.wh"))?;
    let b = param(g, params, &format!("{name}.b"))?;
    let hw = g.matmul(s.h, wh)?;
    let pre = g.add(x_proj, hw)?;
    let gates = g.add(pre, b)?;
    let h = g.shape(s.h)[1];
    let i = g.slice(gates, 1, 0, h)?;
    let f = g.slice(gates, 1, h, 2 * h)?;
    let c_hat = g.slice(gates, 1, 2 * h, 3 * h)?;
    let o = g.slice(gates, 1, 3 * h, 4 * h)?;
    let (i, f, o) = (g.sigmoid(i), g.sigmoid(f), g.sigmoid(o));
    let c_hat = g.tanh(c_hat);
    let keep = g.mul(f, s.c)?;
    let write = g.mul(i, c_hat)?;
    let c = g.add(keep, write)?;
    let tc = g.tanh(c);
    let h = g.mul(o, tc)?;
    Ok(LstmState { h, c })
}

/// LSTM step computing the input projection from `x: [B, I]`.
pub(crate) fn lstm_step(g: &mut Graph, params: &ParameterSet, name: &str, x: Var, s: LstmState) -> Result<LstmState> {
    let wx = param(g, params, &format!("{name}.wx"))?;
    let xp = g.matmul(x, wx)?;
    lstm_cell(g, params, name, xp, s)
}

/// Zoneout on one state tensor. Training: each unit keeps its previous
/// value with probability `z`. Inference: the expectation `z*prev + (1-z)*new`.
pub(crate) fn zoneout(g: &mut Graph, prev: Var, new: Var, z: f64, rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
    if z == 0.0 {
        return Ok(new);
    }
    if z == 1.0 {
        return Ok(prev);
    }
    match rng {
        Some(rng) => {
            let shape = g.shape(new).to_vec();
            let n: usize = shape.iter().product();
            let d: Vec<f64> = (0..n).map(|_| if rng.gen::<f64>() < z { 1.0 } else { 0.0 }).collect();
            let keep = g.constant(Tensor::new(shape.clone(), d.iter().map(|x| 1.0 - x).collect())?);
            let d = g.constant(Tensor::new(shape, d)?);
            let a = g.mul(prev, d)?;
            let b = g.mul(new, keep)?;
            g.add(a, b)
        }
        None => {
            let a = g.scale(prev, z);
            let b = g.scale(new, 1.0 - z);
            g.add(a, b)
        }
    }
}

pub(crate) fn zoneout_state(
    g: &mut Graph,
    prev: LstmState,
    new: LstmState,
    z: f64,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<LstmState> {
    Ok(LstmState {
        h: zoneout(g, prev.h, new.h, z, rng.as_deref_mut())?,
        c: zoneout(g, prev.c, new.c, z, rng)?,
    })
}
