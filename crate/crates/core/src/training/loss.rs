use super::batch::FrameBatch;
use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Default positive-class weight of the stop-token BCE.
pub const STOP_POS_WEIGHT: f64 = 5.0;

#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    /// `mel_l1 + stop_bce`, differentiable.
    pub total: Var,
    pub mel_l1: f64,
    pub stop_bce: f64,
}

/// Masked mean absolute error over real frames plus masked stop BCE
/// (`pos_weight` on positive targets), averaged over real frame groups.
///
/// `pred` is `[B, frames, M]`, `stop_logits` is `[B, steps]`.
pub fn loss(g: &mut Graph, pred: Var, stop_logits: Var, batch: &FrameBatch, pos_weight: f64) -> Result<LossTerms> {
    let t = &batch.targets;
    let (b, f, m) = (t.batch, t.frames, t.mel_bins);
    if g.shape(pred) != [b, f, m] {
        return Err(Error::Contract(format!(
            "prediction shape {:?} vs targets [{b}, {f}, {m}]",
            g.shape(pred)
        )));
    }
    let steps = batch.stop_targets.len() / b.max(1);
    if g.shape(stop_logits) != [b, steps] {
        return Err(Error::Contract(format!(
            "stop logits shape {:?} vs [{b}, {steps}]",
            g.shape(stop_logits)
        )));
    }
    let real_frames: f64 = batch.frame_mask.iter().sum();
    let real_groups: f64 = batch.stop_mask.iter().sum();
    if real_frames == 0.0 || real_groups == 0.0 {
        return Err(Error::Empty("loss mask selects no frames".into()));
    }

    let target = g.constant(Tensor::new(vec![b, f, m], t.data.clone())?);
    let mask: Vec<f64> = batch.frame_mask.iter().flat_map(|&v| std::iter::repeat(v).take(m)).collect();
    let mask = g.constant(Tensor::new(vec![b, f, m], mask)?);
    let diff = g.sub(pred, target)?;
    let abs = g.abs(diff);
    let masked = g.mul(abs, mask)?;
    let l1_sum = g.sum(masked);
    let mel_l1 = g.div_scalar(l1_sum, real_frames * m as f64);

    // BCE with logits: w+ * y * softplus(-x) + (1 - y) * softplus(x).
    let w_pos: Vec<f64> = batch
        .stop_targets
        .iter()
        .zip(&batch.stop_mask)
        .map(|(y, k)| pos_weight * y * k)
        .collect();
    let w_neg: Vec<f64> = batch.stop_targets.iter().zip(&batch.stop_mask).map(|(y, k)| (1.0 - y) * k).collect();
    let w_pos = g.constant(Tensor::new(vec![b, steps], w_pos)?);
    let w_neg = g.constant(Tensor::new(vec![b, steps], w_neg)?);
    let neg_logits = g.scale(stop_logits, -1.0);
    let sp_pos = g.softplus(neg_logits);
    let sp_neg = g.softplus(stop_logits);
    let pos = g.mul(sp_pos, w_pos)?;
    let neg = g.mul(sp_neg, w_neg)?;
    let terms = g.add(pos, neg)?;
    let bce_sum = g.sum(terms);
    let stop_bce = g.div_scalar(bce_sum, real_groups);

    let total = g.add(mel_l1, stop_bce)?;
    Ok(LossTerms {
        total,
        mel_l1: g.value(mel_l1).item(),
        stop_bce: g.value(stop_bce).item(),
    })
}
