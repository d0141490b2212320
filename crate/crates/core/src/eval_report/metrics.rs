//! Segmentation metrics over binary masks. Empty-vs-empty scores 1.0 for
//! overlap metrics by convention.

use crate::error::{Error, Result};
use crate::mask::BitMask;

fn check_shapes(pred: &BitMask, gt: &BitMask) -> Result<()> {
    if (pred.height, pred.width) != (gt.height, gt.width) {
        return Err(Error::shape(format!(
            "mask shapes differ: {}x{} vs {}x{}",
            pred.height, pred.width, gt.height, gt.width
        )));
    }
    Ok(())
}

struct Counts {
    inter: usize,
    union: usize,
    pred: usize,
    gt: usize,
    agree: usize,
    total: usize,
}

fn counts(pred: &BitMask, gt: &BitMask) -> Counts {
    let mut c = Counts {
        inter: 0,
        union: 0,
        pred: 0,
        gt: 0,
        agree: 0,
        total: pred.data().len(),
    };
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        c.inter += (p && g) as usize;
        c.union += (p || g) as usize;
        c.pred += p as usize;
        c.gt += g as usize;
        c.agree += (p == g) as usize;
    }
    c
}

pub fn iou(pred: &BitMask, gt: &BitMask) -> Result<f64> {
    check_shapes(pred, gt)?;
    let c = counts(pred, gt);
    Ok(if c.union == 0 {
        1.0
    } else {
        c.inter as f64 / c.union as f64
    })
}

pub fn dice(pred: &BitMask, gt: &BitMask) -> Result<f64> {
    check_shapes(pred, gt)?;
    let c = counts(pred, gt);
    Ok(if c.pred + c.gt == 0 {
        1.0
    } else {
        2.0 * c.inter as f64 / (c.pred + c.gt) as f64
    })
}

pub fn pixel_accuracy(pred: &BitMask, gt: &BitMask) -> Result<f64> {
    check_shapes(pred, gt)?;
    let c = counts(pred, gt);
    Ok(c.agree as f64 / c.total as f64)
}
