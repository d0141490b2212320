//! Reconstruction and segmentation losses. Values and gradients are computed
//! in closed form at double precision; training injects the gradient at the
//! network output, so the loss layer never lives on the tape.

use crate::error::{Error, Result};
use crate::mask::BitMask;
use crate::tensor::{sigmoid, Tensor};
use serde::{Deserialize, Serialize};

const PROB_CLAMP: f64 = 1e-7;

/// Mean squared error over all elements.
pub fn loss_rec(z_hat: &Tensor, z_h: &Tensor) -> Result<f64> {
    if z_hat.shape() != z_h.shape() {
        return Err(Error::shape(format!(
            "loss_rec shapes {:?} vs {:?}",
            z_hat.shape(),
            z_h.shape()
        )));
    }
    Ok(z_hat.mse(z_h))
}

/// d(mse)/d(z_hat) = 2 (z_hat - z_h) / N
pub fn loss_rec_grad(z_hat: &Tensor, z_h: &Tensor) -> Tensor {
    let n = z_hat.numel() as f64;
    z_hat.zip_map(z_h, |a, b| 2.0 * (a - b) / n)
}

#[derive(Copy, Clone, Debug, Serialize, Deserialize)]
pub struct SegLossParams {
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub dice_smooth: f64,
}

impl Default for SegLossParams {
    fn default() -> Self {
        SegLossParams {
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            dice_smooth: 1.0,
        }
    }
}

fn check_seg_shapes(logits: &Tensor, gt: &BitMask) -> Result<()> {
    if logits.shape() != [gt.height, gt.width] {
        return Err(Error::shape(format!(
            "logits {:?} vs mask {}x{}",
            logits.shape(),
            gt.height,
            gt.width
        )));
    }
    Ok(())
}

/// Dice loss plus focal loss on sigmoid probabilities (clamped away from 0
/// and 1 so the loss stays finite for any bounded logits).
pub fn loss_seg(logits: &Tensor, gt: &BitMask, params: &SegLossParams) -> Result<f64> {
    check_seg_shapes(logits, gt)?;
    Ok(seg_value_and_grad(logits, gt, params, false).0)
}

/// Loss value together with d(loss)/d(logits).
pub fn loss_seg_grad(logits: &Tensor, gt: &BitMask, params: &SegLossParams) -> Result<(f64, Tensor)> {
    check_seg_shapes(logits, gt)?;
    let (v, g) = seg_value_and_grad(logits, gt, params, true);
    Ok((v, g.expect("gradient requested")))
}

fn seg_value_and_grad(
    logits: &Tensor,
    gt: &BitMask,
    params: &SegLossParams,
    want_grad: bool,
) -> (f64, Option<Tensor>) {
    let n = logits.numel() as f64;
    let (alpha, gamma, eps_s) = (params.focal_alpha, params.focal_gamma, params.dice_smooth);

    let mut probs = Vec::with_capacity(logits.numel());
    let mut sum_p = 0.0;
    let mut sum_pg = 0.0;
    let mut sum_g = 0.0;
    let mut focal_sum = 0.0;
    for (i, &l) in logits.data().iter().enumerate() {
        let raw = sigmoid(l);
        let p = raw.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        probs.push((p, raw));
        let g = gt.data()[i];
        sum_p += p;
        sum_g += g as u8 as f64;
        if g {
            sum_pg += p;
            focal_sum += -alpha * (1.0 - p).powf(gamma) * p.ln();
        } else {
            focal_sum += -alpha * p.powf(gamma) * (1.0 - p).ln();
        }
    }
    let a = 2.0 * sum_pg + eps_s;
    let b = sum_p + sum_g + eps_s;
    let dice = 1.0 - a / b;
    let focal = focal_sum / n;
    let value = dice + focal;
    if !want_grad {
        return (value, None);
    }

    let mut grad = Tensor::zeros(logits.shape());
    for (i, &(p, raw)) in probs.iter().enumerate() {
        let g = gt.data()[i];
        // dice term: d/dp [ -A/B ] with A, B linear in p
        let d_dice = -(if g { 2.0 } else { 0.0 } * b - a) / (b * b);
        let d_focal = if g {
            alpha * gamma * (1.0 - p).powf(gamma - 1.0) * p.ln() - alpha * (1.0 - p).powf(gamma) / p
        } else {
            -alpha * gamma * p.powf(gamma - 1.0) * (1.0 - p).ln() + alpha * p.powf(gamma) / (1.0 - p)
        };
        // clamped probabilities have zero local slope
        let dp_dl = if raw > PROB_CLAMP && raw < 1.0 - PROB_CLAMP {
            raw * (1.0 - raw)
        } else {
            0.0
        };
        grad.data_mut()[i] = (d_dice + d_focal / n) * dp_dl;
    }
    (value, Some(grad))
}
