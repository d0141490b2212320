//! The individual degradation operators. Images are 3 x H x W tensors in
//! [0,1]; every operator clips back into range.

use crate::degrade::kernel::BlurKernel;
use crate::error::{Error, Result};
use crate::image_io::jpeg_round_trip;
use crate::tensor::Tensor;
use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResizeAlgo {
    Area,
    Bilinear,
    Bicubic,
}

impl ResizeAlgo {
    pub fn code(self) -> f64 {
        match self {
            ResizeAlgo::Area => 0.0,
            ResizeAlgo::Bilinear => 1.0,
            ResizeAlgo::Bicubic => 2.0,
        }
    }

    pub fn from_code(code: f64) -> Result<Self> {
        match code as i64 {
            0 => Ok(ResizeAlgo::Area),
            1 => Ok(ResizeAlgo::Bilinear),
            2 => Ok(ResizeAlgo::Bicubic),
            other => Err(Error::parameter(format!("unknown resize algo code {other}"))),
        }
    }
}

/// Mirror padding index (edge-inclusive reflection).
fn mirror(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - 1 - i;
        } else {
            return i as usize;
        }
    }
}

/// 2-D correlation with mirror padding, channels filtered independently.
pub fn apply_blur(img: &Tensor, kernel: &BlurKernel) -> Result<Tensor> {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let k = kernel.size;
    if k > h || k > w {
        return Err(Error::parameter(format!(
            "kernel size {k} exceeds image {h}x{w}"
        )));
    }
    let half = (k / 2) as isize;
    let mut out = Tensor::zeros(img.shape());
    for ch in 0..c {
        let src = &img.data()[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for ky in 0..k {
                    let iy = mirror(y as isize + ky as isize - half, h);
                    let krow = ky * k;
                    let irow = iy * w;
                    for kx in 0..k {
                        let ix = mirror(x as isize + kx as isize - half, w);
                        acc += src[irow + ix] * kernel.weights.data()[krow + kx];
                    }
                }
                out.data_mut()[(ch * h + y) * w + x] = acc.clamp(0.0, 1.0);
            }
        }
    }
    Ok(out)
}

pub fn resize(img: &Tensor, out_h: usize, out_w: usize, algo: ResizeAlgo) -> Result<Tensor> {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    if out_h == 0 || out_w == 0 {
        return Err(Error::parameter("resize target has zero dimension"));
    }
    if out_h == h && out_w == w {
        return Ok(img.clone());
    }
    let mut out = Tensor::zeros(&[c, out_h, out_w]);
    match algo {
        ResizeAlgo::Area => {
            let sy = h as f64 / out_h as f64;
            let sx = w as f64 / out_w as f64;
            for ch in 0..c {
                let src = &img.data()[ch * h * w..(ch + 1) * h * w];
                for oy in 0..out_h {
                    let y0 = oy as f64 * sy;
                    let y1 = (oy + 1) as f64 * sy;
                    for ox in 0..out_w {
                        let x0 = ox as f64 * sx;
                        let x1 = (ox + 1) as f64 * sx;
                        let mut acc = 0.0;
                        let mut area = 0.0;
                        let iy0 = y0.floor() as usize;
                        let iy1 = (y1.ceil() as usize).min(h);
                        let ix0 = x0.floor() as usize;
                        let ix1 = (x1.ceil() as usize).min(w);
                        for iy in iy0..iy1 {
                            let cov_y = (y1.min((iy + 1) as f64) - y0.max(iy as f64)).max(0.0);
                            for ix in ix0..ix1 {
                                let cov_x = (x1.min((ix + 1) as f64) - x0.max(ix as f64)).max(0.0);
                                let cov = cov_y * cov_x;
                                acc += src[iy * w + ix] * cov;
                                area += cov;
                            }
                        }
                        out.data_mut()[(ch * out_h + oy) * out_w + ox] =
                            (acc / area).clamp(0.0, 1.0);
                    }
                }
            }
        }
        ResizeAlgo::Bilinear => {
            let sy = h as f64 / out_h as f64;
            let sx = w as f64 / out_w as f64;
            for ch in 0..c {
                let src = &img.data()[ch * h * w..(ch + 1) * h * w];
                for oy in 0..out_h {
                    let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, h as f64 - 1.0);
                    let y0 = fy.floor() as usize;
                    let y1 = (y0 + 1).min(h - 1);
                    let dy = fy - y0 as f64;
                    for ox in 0..out_w {
                        let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, w as f64 - 1.0);
                        let x0 = fx.floor() as usize;
                        let x1 = (x0 + 1).min(w - 1);
                        let dx = fx - x0 as f64;
                        let v = src[y0 * w + x0] * (1.0 - dy) * (1.0 - dx)
                            + src[y0 * w + x1] * (1.0 - dy) * dx
                            + src[y1 * w + x0] * dy * (1.0 - dx)
                            + src[y1 * w + x1] * dy * dx;
                        out.data_mut()[(ch * out_h + oy) * out_w + ox] = v.clamp(0.0, 1.0);
                    }
                }
            }
        }
        ResizeAlgo::Bicubic => {
            let sy = h as f64 / out_h as f64;
            let sx = w as f64 / out_w as f64;
            // Catmull-Rom (a = -0.5)
            let cubic = |t: f64| -> f64 {
                let a = -0.5;
                let t = t.abs();
                if t <= 1.0 {
                    (a + 2.0) * t * t * t - (a + 3.0) * t * t + 1.0
                } else if t < 2.0 {
                    a * t * t * t - 5.0 * a * t * t + 8.0 * a * t - 4.0 * a
                } else {
                    0.0
                }
            };
            for ch in 0..c {
                let src = &img.data()[ch * h * w..(ch + 1) * h * w];
                for oy in 0..out_h {
                    let fy = (oy as f64 + 0.5) * sy - 0.5;
                    let y0 = fy.floor() as isize;
                    let dy = fy - y0 as f64;
                    for ox in 0..out_w {
                        let fx = (ox as f64 + 0.5) * sx - 0.5;
                        let x0 = fx.floor() as isize;
                        let dx = fx - x0 as f64;
                        let mut acc = 0.0;
                        for m in -1..=2isize {
                            let wy = cubic(m as f64 - dy);
                            if wy == 0.0 {
                                continue;
                            }
                            let iy = (y0 + m).clamp(0, h as isize - 1) as usize;
                            for n in -1..=2isize {
                                let wx = cubic(n as f64 - dx);
                                if wx == 0.0 {
                                    continue;
                                }
                                let ix = (x0 + n).clamp(0, w as isize - 1) as usize;
                                acc += src[iy * w + ix] * wy * wx;
                            }
                        }
                        out.data_mut()[(ch * out_h + oy) * out_w + ox] = acc.clamp(0.0, 1.0);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Resize by a scale factor; target dimensions round to the nearest integer
/// and never drop below 1.
pub fn random_resize(img: &Tensor, scale: f64, algo: ResizeAlgo) -> Result<Tensor> {
    if !(scale > 0.0) {
        return Err(Error::parameter(format!("resize scale {scale} must be > 0")));
    }
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let out_h = ((h as f64 * scale).round() as usize).max(1);
    let out_w = ((w as f64 * scale).round() as usize).max(1);
    resize(img, out_h, out_w, algo)
}

/// Additive gaussian noise with standard deviation `sigma_255`/255. Gray
/// noise shares one plane across channels.
pub fn add_gaussian_noise(img: &Tensor, sigma_255: f64, gray: bool, rng: &mut impl Rng) -> Tensor {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let sigma = sigma_255 / 255.0;
    let normal = Normal::new(0.0, 1.0).unwrap();
    let plane = h * w;
    let mut out = img.clone();
    if gray {
        let noise: Vec<f64> = (0..plane).map(|_| normal.sample(rng) * sigma).collect();
        for ch in 0..c {
            for i in 0..plane {
                let v = &mut out.data_mut()[ch * plane + i];
                *v = (*v + noise[i]).clamp(0.0, 1.0);
            }
        }
    } else {
        for v in out.data_mut() {
            *v = (*v + normal.sample(rng) * sigma).clamp(0.0, 1.0);
        }
    }
    out
}

/// Photon-count noise: vals = Poisson(x * L) / L with L = 255 * scale.
/// The gray variant derives one increment plane from luminance.
pub fn add_poisson_noise(img: &Tensor, scale: f64, gray: bool, rng: &mut impl Rng) -> Tensor {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let l = 255.0 * scale;
    let plane = h * w;
    let mut out = img.clone();
    let sample = |lam: f64, rng: &mut dyn rand::RngCore| -> f64 {
        if lam <= 0.0 {
            0.0
        } else {
            Poisson::new(lam).unwrap().sample(rng)
        }
    };
    if gray {
        for i in 0..plane {
            let y = 0.299 * img.data()[i]
                + 0.587 * img.data()[plane + i]
                + 0.114 * img.data()[2 * plane + i];
            let vals = sample(y * l, rng) / l;
            let inc = vals - y;
            for ch in 0..c {
                let v = &mut out.data_mut()[ch * plane + i];
                *v = (*v + inc).clamp(0.0, 1.0);
            }
        }
    } else {
        for v in out.data_mut() {
            *v = (sample(*v * l, rng) / l).clamp(0.0, 1.0);
        }
    }
    out
}

/// Round-trip through the baseline JPEG codec at the given quality factor.
pub fn jpeg_compress(img: &Tensor, quality: u32) -> Result<Tensor> {
    if !(30..=95).contains(&quality) {
        return Err(Error::parameter(format!(
            "jpeg quality {quality} outside [30, 95]"
        )));
    }
    jpeg_round_trip(img, quality as u8)
}

pub fn luma(img: &Tensor) -> Tensor {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let plane = h * w;
    Tensor::from_fn(&[h, w], |i| {
        0.299 * img.data()[i] + 0.587 * img.data()[plane + i] + 0.114 * img.data()[2 * plane + i]
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::degrade::kernel::{make_blur_kernel, KernelKind};
    use crate::rng::stream;

    fn test_image(h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = stream(seed, "ops-img", &[]);
        Tensor::from_fn(&[3, h, w], |_| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn blur_constant_image_unchanged() {
        let img = Tensor::full(&[3, 16, 16], 0.42);
        let k = make_blur_kernel(KernelKind::Gaussian, 7, 1.0, 0.0).unwrap();
        let out = apply_blur(&img, &k).unwrap();
        assert!(out.max_abs_diff(&img) < 1e-12);
    }

    #[test]
    fn blur_matches_naive_loop() {
        let img = test_image(16, 16, 1);
        let k = make_blur_kernel(KernelKind::Gaussian, 7, 1.3, 0.0).unwrap();
        let out = apply_blur(&img, &k).unwrap();
        // independent re-evaluation at a few positions
        for &(ch, y, x) in &[(0usize, 0usize, 0usize), (1, 5, 9), (2, 15, 15), (0, 8, 3)] {
            let mut acc = 0.0;
            for ky in 0..7isize {
                for kx in 0..7isize {
                    let iy = mirror(y as isize + ky - 3, 16);
                    let ix = mirror(x as isize + kx - 3, 16);
                    acc += img.data()[(ch * 16 + iy) * 16 + ix]
                        * k.weights.data()[(ky * 7 + kx) as usize];
                }
            }
            let got = out.data()[(ch * 16 + y) * 16 + x];
            assert!((acc.clamp(0.0, 1.0) - got).abs() < 1e-6);
        }
    }

    #[test]
    fn blur_kernel_larger_than_image_rejected() {
        let img = test_image(5, 5, 2);
        let k = make_blur_kernel(KernelKind::Gaussian, 7, 1.0, 0.0).unwrap();
        assert!(apply_blur(&img, &k).is_err());
    }

    #[test]
    fn resize_scale_contracts() {
        let img = test_image(64, 64, 3);
        for algo in [ResizeAlgo::Area, ResizeAlgo::Bilinear, ResizeAlgo::Bicubic] {
            let same = random_resize(&img, 1.0, algo).unwrap();
            assert_eq!(same.shape(), img.shape());
            assert!(same.max_abs_diff(&img) < 1e-12);
            let half = random_resize(&img, 0.5, algo).unwrap();
            assert_eq!(half.shape(), &[3, 32, 32]);
        }
        assert!(random_resize(&img, 0.0, ResizeAlgo::Area).is_err());
    }

    #[test]
    fn bilinear_upsample_reproduces_ramp() {
        // linear ramp along x
        let img = Tensor::from_fn(&[3, 8, 32], |i| ((i % 32) as f64) / 31.0 * 0.9);
        let up = random_resize(&img, 2.0, ResizeAlgo::Bilinear).unwrap();
        let (h, w) = (16, 64);
        for y in 2..h - 2 {
            for x in 4..w - 4 {
                let fx = (x as f64 + 0.5) * 0.5 - 0.5;
                let expect = fx / 31.0 * 0.9;
                let got = up.data()[y * w + x];
                assert!((got - expect).abs() < 1e-3, "({y},{x}): {got} vs {expect}");
            }
        }
    }

    #[test]
    fn gaussian_noise_gray_shares_plane_and_sigma_zero_noop() {
        let img = test_image(16, 16, 4);
        let mut rng = stream(5, "noise", &[]);
        let out = add_gaussian_noise(&img, 0.0, false, &mut rng);
        assert!(out.max_abs_diff(&img) < 1e-15);
        let gray = add_gaussian_noise(&img, 10.0, true, &mut rng);
        let diff = gray.sub(&img);
        let plane = 256;
        for i in 0..plane {
            let d0 = diff.data()[i];
            let d1 = diff.data()[plane + i];
            let d2 = diff.data()[2 * plane + i];
            // identical unless a channel clipped
            let clipped = |ch: usize| {
                let v = gray.data()[ch * plane + i];
                v == 0.0 || v == 1.0
            };
            if !clipped(0) && !clipped(1) && !clipped(2) {
                assert!((d0 - d1).abs() < 1e-12);
                assert!((d0 - d2).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gaussian_noise_std_in_band() {
        let img = Tensor::full(&[3, 256, 256], 0.5);
        let mut rng = stream(6, "noise", &[]);
        let out = add_gaussian_noise(&img, 30.0, false, &mut rng);
        let std = out.variance().sqrt();
        assert!((0.105..=0.130).contains(&std), "std {std}");
    }

    #[test]
    fn poisson_zero_image_stays_zero() {
        let img = Tensor::zeros(&[3, 8, 8]);
        let mut rng = stream(7, "noise", &[]);
        let out = add_poisson_noise(&img, 1.0, false, &mut rng);
        assert_eq!(out.max_abs(), 0.0);
    }

    #[test]
    fn poisson_variance_decreases_with_scale() {
        let img = Tensor::full(&[3, 64, 64], 0.5);
        let mut rng = stream(8, "noise", &[]);
        let low = add_poisson_noise(&img, 0.1, false, &mut rng);
        let high = add_poisson_noise(&img, 3.0, false, &mut rng);
        assert!(low.variance() > 4.0 * high.variance());
    }

    #[test]
    fn poisson_gray_increments_identical() {
        let img = test_image(12, 12, 9);
        let mut rng = stream(10, "noise", &[]);
        let out = add_poisson_noise(&img, 1.0, true, &mut rng);
        let diff = out.sub(&img);
        let plane = 144;
        for i in 0..plane {
            let d0 = diff.data()[i];
            let clipped = (0..3).any(|ch| {
                let v = out.data()[ch * plane + i];
                v == 0.0 || v == 1.0
            });
            if !clipped {
                assert!((diff.data()[plane + i] - d0).abs() < 1e-12);
                assert!((diff.data()[2 * plane + i] - d0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn jpeg_constant_image_close_and_dims_preserved() {
        let img = Tensor::full(&[3, 24, 24], 0.37);
        for q in [30u32, 60, 95] {
            let out = jpeg_compress(&img, q).unwrap();
            assert_eq!(out.shape(), img.shape());
            assert!(out.max_abs_diff(&img) < 2.0 / 255.0, "q={q}");
        }
        assert!(jpeg_compress(&img, 20).is_err());
    }

    #[test]
    fn jpeg_quality_ordering_on_textured_image() {
        let img = test_image(64, 64, 11);
        let psnr = |a: &Tensor, b: &Tensor| -> f64 {
            let mse = a.mse(b);
            -10.0 * (mse.max(1e-12)).log10()
        };
        let hi = jpeg_compress(&img, 95).unwrap();
        let lo = jpeg_compress(&img, 30).unwrap();
        assert!(psnr(&img, &hi) > psnr(&img, &lo));
    }
}
