//! Training objective and evaluation metrics.

use crate::config::LossWeights;
use crate::error::{LensError, Result};
use crate::numerics::{grid_dims, Tensor};
use crate::tape::{bce_value, dice_value};

fn same_len(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.len() != b.len() {
        return Err(LensError::shape(format!(
            "{what}: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// Mean clamped BCE between the grounding map and the downsampled mask.
pub fn attention_loss(grounding: &Tensor, mask_small: &Tensor, eps: f64) -> Result<f64> {
    same_len(grounding, mask_small, "attention_loss")?;
    Ok(bce_value(grounding.data(), mask_small.data(), eps))
}

pub fn dice_loss(probs: &Tensor, mask: &Tensor, smooth: f64) -> Result<f64> {
    same_len(probs, mask, "dice_loss")?;
    Ok(dice_value(probs.data(), mask.data(), smooth))
}

pub fn bce_mask_loss(probs: &Tensor, mask: &Tensor, eps: f64) -> Result<f64> {
    same_len(probs, mask, "bce_mask_loss")?;
    Ok(bce_value(probs.data(), mask.data(), eps))
}

pub fn seg_loss(probs: &Tensor, mask: &Tensor, w: &LossWeights) -> Result<f64> {
    Ok(w.lambda_dice * dice_loss(probs, mask, w.dice_smooth)?
        + w.lambda_bce * bce_mask_loss(probs, mask, w.clamp_eps)?)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub attn: f64,
    pub seg: f64,
    pub dice: f64,
    pub bce: f64,
}

impl LossBreakdown {
    pub(crate) fn accumulate(&mut self, other: &LossBreakdown, scale: f64) {
        self.total += scale * other.total;
        self.attn += scale * other.attn;
        self.seg += scale * other.seg;
        self.dice += scale * other.dice;
        self.bce += scale * other.bce;
    }
}

/// `seg_loss + attention_loss`, with the components.
pub fn total_loss(
    probs: &Tensor,
    mask: &Tensor,
    grounding: &Tensor,
    mask_small: &Tensor,
    w: &LossWeights,
) -> Result<LossBreakdown> {
    let dice = dice_loss(probs, mask, w.dice_smooth)?;
    let bce = bce_mask_loss(probs, mask, w.clamp_eps)?;
    let attn = attention_loss(grounding, mask_small, w.clamp_eps)?;
    let seg = w.lambda_dice * dice + w.lambda_bce * bce;
    Ok(LossBreakdown {
        total: seg + attn,
        attn,
        seg,
        dice,
        bce,
    })
}

/// Nearest-neighbor resample of a binary mask to `(h, w)`.
pub fn downsample_nearest(mask: &Tensor, size: (usize, usize)) -> Tensor {
    let (mh, mw, _) = grid_dims(mask);
    let (h, w) = size;
    Tensor::from_fn(h, w, |r, c| {
        let sr = (((r as f64 + 0.5) * mh as f64 / h as f64) as usize).min(mh - 1);
        let sc = (((c as f64 + 0.5) * mw as f64 / w as f64) as usize).min(mw - 1);
        mask.data()[sr * mw + sc]
    })
}

/// Intersection and union of two masks binarized at 0.5.
pub fn intersection_union(pred: &Tensor, gt: &Tensor) -> Result<(u64, u64)> {
    same_len(pred, gt, "iou")?;
    let (mut inter, mut union) = (0, 0);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        let (p, g) = (p >= 0.5, g >= 0.5);
        inter += (p && g) as u64;
        union += (p || g) as u64;
    }
    Ok((inter, union))
}

/// Mean per-sample IoU. A sample whose union is empty counts as 1.
pub fn giou(samples: &[(Tensor, Tensor)]) -> Result<f64> {
    if samples.is_empty() {
        return Err(LensError::InvalidArgument("gIoU over an empty sample list".into()));
    }
    let mut sum = 0.0;
    for (p, g) in samples {
        let (i, u) = intersection_union(p, g)?;
        sum += if u == 0 { 1.0 } else { i as f64 / u as f64 };
    }
    Ok(sum / samples.len() as f64)
}

/// Summed intersections over summed unions. An all-empty set scores 1.
pub fn ciou(samples: &[(Tensor, Tensor)]) -> Result<f64> {
    if samples.is_empty() {
        return Err(LensError::InvalidArgument("cIoU over an empty sample list".into()));
    }
    let (mut i_sum, mut u_sum) = (0u64, 0u64);
    for (p, g) in samples {
        let (i, u) = intersection_union(p, g)?;
        i_sum += i;
        u_sum += u;
    }
    Ok(if u_sum == 0 { 1.0 } else { i_sum as f64 / u_sum as f64 })
}
