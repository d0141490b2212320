//! Prompt sampling from ground-truth masks: uniform foreground clicks, tight
//! boxes, and center-shift/size-scale noised boxes.

use crate::error::{Error, Result};
use crate::mask::BitMask;
use crate::rng::stream_from;
use crate::seg_model::{PointPrompt, Prompt};
use rand::Rng;

pub const DEFAULT_POINTS: usize = 3;
pub const DEFAULT_BOX_NOISE: f64 = 0.2;

/// `k` distinct foreground pixels, uniform without replacement.
pub fn sample_point_prompt(mask: &BitMask, k: usize, seed: u64) -> Result<Prompt> {
    let mut coords = mask.foreground_coords();
    if coords.len() < k {
        return Err(Error::data(format!(
            "mask has {} foreground pixels, prompt needs {k}",
            coords.len()
        )));
    }
    let mut rng = stream_from(seed);
    let mut points = Vec::with_capacity(k);
    let n = coords.len();
    for i in 0..k {
        let j = rng.gen_range(i..n);
        coords.swap(i, j);
        let (r, c) = coords[i];
        points.push(PointPrompt {
            row: r as f64,
            col: c as f64,
            positive: true,
        });
    }
    Ok(Prompt::Points { points })
}

/// Tight bounding box over the foreground.
pub fn gt_box_prompt(mask: &BitMask) -> Result<Prompt> {
    let coords = mask.foreground_coords();
    if coords.is_empty() {
        return Err(Error::data("mask is empty, cannot derive a box"));
    }
    let (mut r0, mut c0, mut r1, mut c1) = (usize::MAX, usize::MAX, 0usize, 0usize);
    for (r, c) in coords {
        r0 = r0.min(r);
        c0 = c0.min(c);
        r1 = r1.max(r);
        c1 = c1.max(c);
    }
    Ok(Prompt::Box {
        r0: r0 as f64,
        c0: c0 as f64,
        r1: r1 as f64,
        c1: c1 as f64,
    })
}

/// GT box with the center shifted by up to `s/2` of each extent and the
/// extents scaled by (1 - s, 1 + s), clamped to the image.
pub fn noise_box_prompt(mask: &BitMask, noise_scale: f64, seed: u64) -> Result<Prompt> {
    if noise_scale < 0.0 {
        return Err(Error::parameter("noise scale must be non-negative"));
    }
    let (r0, c0, r1, c1) = match gt_box_prompt(mask)? {
        Prompt::Box { r0, c0, r1, c1 } => (r0, c0, r1, c1),
        _ => unreachable!(),
    };
    let s = noise_scale;
    let (mut cy, mut cx) = ((r0 + r1) / 2.0, (c0 + c1) / 2.0);
    let (mut bh, mut bw) = (r1 - r0, c1 - c0);
    if s > 0.0 {
        let mut rng = stream_from(seed);
        let half_h = s * bh / 2.0;
        let half_w = s * bw / 2.0;
        if half_h > 0.0 {
            cy += rng.gen_range(-half_h..half_h);
        }
        if half_w > 0.0 {
            cx += rng.gen_range(-half_w..half_w);
        }
        bh *= rng.gen_range(1.0 - s..1.0 + s);
        bw *= rng.gen_range(1.0 - s..1.0 + s);
    }
    let max_r = (mask.height - 1) as f64;
    let max_c = (mask.width - 1) as f64;
    let nr0 = (cy - bh / 2.0).clamp(0.0, max_r);
    let nr1 = (cy + bh / 2.0).clamp(0.0, max_r);
    let nc0 = (cx - bw / 2.0).clamp(0.0, max_c);
    let nc1 = (cx + bw / 2.0).clamp(0.0, max_c);
    Ok(Prompt::Box {
        r0: nr0,
        c0: nc0,
        r1: nr1,
        c1: nc1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blob() -> BitMask {
        BitMask::from_fn(32, 32, |r, c| {
            let dr = r as f64 - 14.0;
            let dc = c as f64 - 18.0;
            dr * dr + dc * dc < 49.0
        })
    }

    #[test]
    fn points_are_foreground_and_distinct() {
        let mask = blob();
        let prompt = sample_point_prompt(&mask, DEFAULT_POINTS, 7).unwrap();
        let Prompt::Points { points } = &prompt else {
            panic!()
        };
        assert_eq!(points.len(), 3);
        for p in points {
            assert!(mask.get(p.row as usize, p.col as usize));
        }
        for i in 0..points.len() {
            for j in i + 1..points.len() {
                assert_ne!(
                    (points[i].row as usize, points[i].col as usize),
                    (points[j].row as usize, points[j].col as usize)
                );
            }
        }
    }

    #[test]
    fn full_foreground_exhaustion() {
        let mask = BitMask::from_fn(2, 2, |_, _| true);
        let prompt = sample_point_prompt(&mask, 4, 1).unwrap();
        let Prompt::Points { mut points } = prompt else {
            panic!()
        };
        points.sort_by(|a, b| (a.row, a.col).partial_cmp(&(b.row, b.col)).unwrap());
        let got: Vec<(usize, usize)> = points
            .iter()
            .map(|p| (p.row as usize, p.col as usize))
            .collect();
        assert_eq!(got, vec![(0, 0), (0, 1), (1, 0), (1, 1)]);
        assert!(sample_point_prompt(&mask, 5, 1).is_err());
    }

    #[test]
    fn gt_box_cases() {
        let mut single = BitMask::zeros(10, 12);
        single.set(5, 7, true);
        assert_eq!(
            gt_box_prompt(&single).unwrap(),
            Prompt::Box { r0: 5.0, c0: 7.0, r1: 5.0, c1: 7.0 }
        );

        let mut two = BitMask::zeros(10, 12);
        two.set(1, 1, true);
        two.set(4, 6, true);
        assert_eq!(
            gt_box_prompt(&two).unwrap(),
            Prompt::Box { r0: 1.0, c0: 1.0, r1: 4.0, c1: 6.0 }
        );

        assert!(gt_box_prompt(&BitMask::zeros(4, 4)).is_err());

        // random blob vs full-scan oracle
        let mask = blob();
        let Prompt::Box { r0, c0, r1, c1 } = gt_box_prompt(&mask).unwrap() else {
            panic!()
        };
        let coords = mask.foreground_coords();
        let oracle_r0 = coords.iter().map(|&(r, _)| r).min().unwrap() as f64;
        let oracle_r1 = coords.iter().map(|&(r, _)| r).max().unwrap() as f64;
        let oracle_c0 = coords.iter().map(|&(_, c)| c).min().unwrap() as f64;
        let oracle_c1 = coords.iter().map(|&(_, c)| c).max().unwrap() as f64;
        assert_eq!((r0, c0, r1, c1), (oracle_r0, oracle_c0, oracle_r1, oracle_c1));
    }

    #[test]
    fn noise_box_zero_scale_is_exact_and_bounded_otherwise() {
        let mask = blob();
        let gt = gt_box_prompt(&mask).unwrap();
        assert_eq!(noise_box_prompt(&mask, 0.0, 5).unwrap(), gt);

        for seed in 0..1000u64 {
            let Prompt::Box { r0, c0, r1, c1 } =
                noise_box_prompt(&mask, DEFAULT_BOX_NOISE, seed).unwrap()
            else {
                panic!()
            };
            assert!(r0 >= 0.0 && c0 >= 0.0);
            assert!(r1 <= 31.0 && c1 <= 31.0);
            assert!(r0 <= r1 && c0 <= c1);
        }
    }
}
