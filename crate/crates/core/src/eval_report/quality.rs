//! Image-quality score: variance of the 3x3 Laplacian response on the luma
//! plane, mirror padding. Sharp, clean images score high; blur and
//! resolution loss pull the score down.

use crate::degrade::luma;
use crate::tensor::Tensor;

/// Variance of the Laplacian. Accepts a 3 x H x W image in [0,1].
pub fn quality_score(img: &Tensor) -> f64 {
    let gray = luma(img);
    let (h, w) = (gray.shape()[0], gray.shape()[1]);
    let mirror = |i: isize, n: usize| -> usize {
        if i < 0 {
            (-i - 1) as usize
        } else if i >= n as isize {
            2 * n - 1 - i as usize
        } else {
            i as usize
        }
    };
    let at = |r: isize, c: isize| -> f64 { gray.data()[mirror(r, h) * w + mirror(c, w)] };
    let n = (h * w) as f64;
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for r in 0..h as isize {
        for c in 0..w as isize {
            let v = at(r - 1, c) + at(r + 1, c) + at(r, c - 1) + at(r, c + 1) - 4.0 * at(r, c);
            sum += v;
            sum_sq += v * v;
        }
    }
    let mean = sum / n;
    sum_sq / n - mean * mean
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::degrade::{apply_blur, make_blur_kernel, KernelKind};

    fn gray_image(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> Tensor {
        let mut data = vec![0.0; 3 * h * w];
        for r in 0..h {
            for c in 0..w {
                let v = f(r, c);
                data[r * w + c] = v;
                data[h * w + r * w + c] = v;
                data[2 * h * w + r * w + c] = v;
            }
        }
        Tensor::new(&[3, h, w], data).unwrap()
    }

    #[test]
    fn constant_image_scores_zero() {
        let img = gray_image(8, 8, |_, _| 0.7);
        assert_eq!(quality_score(&img), 0.0);
    }

    #[test]
    fn single_center_pixel_hand_oracle() {
        // responses are [0,1,0, 1,-4,1, 0,1,0]; mean 0, variance 20/9
        let img = gray_image(3, 3, |r, c| if r == 1 && c == 1 { 1.0 } else { 0.0 });
        let got = quality_score(&img);
        assert!((got - 20.0 / 9.0).abs() < 1e-9, "{got}");
    }

    #[test]
    fn blur_lowers_the_score() {
        let board = gray_image(32, 32, |r, c| if (r + c) % 2 == 0 { 1.0 } else { 0.0 });
        let k = make_blur_kernel(KernelKind::Gaussian, 7, 1.5, 0.0).unwrap();
        let blurred = apply_blur(&board, &k).unwrap();
        assert!(quality_score(&board) > quality_score(&blurred));
    }
}
