//! Isotropic blur kernels: gaussian, generalized gaussian, plateau, and
//! circular sinc. All are normalized to unit sum; the sinc kernel carries
//! negative lobes.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    Gaussian,
    GeneralizedGaussian,
    Plateau,
    Sinc,
}

#[derive(Clone, Debug)]
pub struct BlurKernel {
    pub kind: KernelKind,
    pub size: usize,
    /// Standard deviation for the bell-shaped families; cutoff frequency for
    /// sinc.
    pub sigma: f64,
    /// Shape exponent (unused for gaussian and sinc).
    pub beta: f64,
    pub weights: Tensor,
}

pub const MIN_KERNEL_SIZE: usize = 7;
pub const MAX_KERNEL_SIZE: usize = 21;
pub const SINC_CUTOFF_MIN: f64 = std::f64::consts::PI / 3.0;
pub const SINC_CUTOFF_MAX: f64 = std::f64::consts::PI;

pub fn make_blur_kernel(kind: KernelKind, size: usize, sigma: f64, beta: f64) -> Result<BlurKernel> {
    if size % 2 == 0 || !(MIN_KERNEL_SIZE..=MAX_KERNEL_SIZE).contains(&size) {
        return Err(Error::parameter(format!(
            "kernel size {size} must be odd in {MIN_KERNEL_SIZE}..={MAX_KERNEL_SIZE}"
        )));
    }
    match kind {
        KernelKind::Sinc => {
            if !(SINC_CUTOFF_MIN..=SINC_CUTOFF_MAX).contains(&sigma) {
                return Err(Error::parameter(format!(
                    "sinc cutoff {sigma} outside [{SINC_CUTOFF_MIN}, {SINC_CUTOFF_MAX}]"
                )));
            }
        }
        _ => {
            if !(0.2..=3.0).contains(&sigma) {
                return Err(Error::parameter(format!("sigma {sigma} outside [0.2, 3]")));
            }
        }
    }
    match kind {
        KernelKind::GeneralizedGaussian if !(0.5..=4.0).contains(&beta) => {
            return Err(Error::parameter(format!(
                "generalized gaussian beta {beta} outside [0.5, 4]"
            )));
        }
        KernelKind::Plateau if !(1.0..=2.0).contains(&beta) => {
            return Err(Error::parameter(format!("plateau beta {beta} outside [1, 2]")));
        }
        _ => {}
    }

    let c = (size as f64 - 1.0) / 2.0;
    let mut weights = Tensor::zeros(&[size, size]);
    let mut sum = 0.0;
    for i in 0..size {
        for j in 0..size {
            let dy = i as f64 - c;
            let dx = j as f64 - c;
            let r2 = dy * dy + dx * dx;
            let v = match kind {
                KernelKind::Gaussian => (-r2 / (2.0 * sigma * sigma)).exp(),
                KernelKind::GeneralizedGaussian => (-(r2 / (2.0 * sigma * sigma)).powf(beta)).exp(),
                KernelKind::Plateau => 1.0 / (1.0 + (r2 / (2.0 * sigma * sigma)).powf(beta)),
                KernelKind::Sinc => {
                    let r = r2.sqrt();
                    let cutoff = sigma;
                    if r == 0.0 {
                        cutoff * cutoff / (4.0 * std::f64::consts::PI)
                    } else {
                        cutoff * bessel_j1(cutoff * r) / (2.0 * std::f64::consts::PI * r)
                    }
                }
            };
            weights.data_mut()[i * size + j] = v;
            sum += v;
        }
    }
    for v in weights.data_mut() {
        *v /= sum;
    }
    Ok(BlurKernel {
        kind,
        size,
        sigma,
        beta,
        weights,
    })
}

/// First-kind Bessel function of order one (rational approximations good to
/// about 1e-8, standard single-precision coefficients evaluated in f64).
pub fn bessel_j1(x: f64) -> f64 {
    let ax = x.abs();
    if ax < 8.0 {
        let y = x * x;
        let p1 = x
            * (72362614232.0
                + y * (-7895059235.0
                    + y * (242396853.1 + y * (-2972611.439 + y * (15704.48260 + y * -30.16036606)))));
        let p2 = 144725228442.0
            + y * (2300535178.0 + y * (18583304.74 + y * (99447.43394 + y * (376.9991397 + y))));
        p1 / p2
    } else {
        let z = 8.0 / ax;
        let y = z * z;
        let xx = ax - 2.356194491;
        let p1 = 1.0
            + y * (0.183105e-2
                + y * (-0.3516396496e-4 + y * (0.2457520174e-5 + y * -0.240337019e-6)));
        let p2 = 0.04687499995
            + y * (-0.2002690873e-3
                + y * (0.8449199096e-5 + y * (-0.88228987e-6 + y * 0.105787412e-6)));
        let ans = (0.636619772 / ax).sqrt() * (xx.cos() * p1 - z * xx.sin() * p2);
        if x < 0.0 {
            -ans
        } else {
            ans
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gaussian_center_max_and_rotational_symmetry() {
        let k = make_blur_kernel(KernelKind::Gaussian, 7, 1.0, 0.0).unwrap();
        let c = 3;
        let center = k.weights.data()[c * 7 + c];
        for &v in k.weights.data() {
            assert!(v <= center);
            assert!(v >= 0.0);
        }
        // 90-degree rotation invariance
        for i in 0..7 {
            for j in 0..7 {
                let a = k.weights.data()[i * 7 + j];
                let b = k.weights.data()[j * 7 + (6 - i)];
                assert!((a - b).abs() < 1e-12);
            }
        }
        assert!((k.weights.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn generalized_gaussian_beta_one_is_gaussian() {
        let g = make_blur_kernel(KernelKind::Gaussian, 9, 1.7, 0.0).unwrap();
        let gg = make_blur_kernel(KernelKind::GeneralizedGaussian, 9, 1.7, 1.0).unwrap();
        assert!(g.weights.max_abs_diff(&gg.weights) < 1e-12);
    }

    #[test]
    fn plateau_matches_direct_formula() {
        let (size, sigma, beta) = (9usize, 1.5f64, 1.5f64);
        let k = make_blur_kernel(KernelKind::Plateau, size, sigma, beta).unwrap();
        // independent evaluation of the profile per cell
        let c = (size as f64 - 1.0) / 2.0;
        let mut raw = vec![0.0; size * size];
        let mut sum = 0.0;
        for i in 0..size {
            for j in 0..size {
                let r2 = (i as f64 - c).powi(2) + (j as f64 - c).powi(2);
                let v = 1.0 / (1.0 + (r2 / (2.0 * sigma * sigma)).powf(beta));
                raw[i * size + j] = v;
                sum += v;
            }
        }
        for (a, b) in k.weights.data().iter().zip(raw.iter()) {
            assert!((a - b / sum).abs() < 1e-10);
        }
    }

    #[test]
    fn sinc_sums_to_one_with_negative_lobes() {
        let k = make_blur_kernel(KernelKind::Sinc, 21, 2.0, 0.0).unwrap();
        assert!((k.weights.sum() - 1.0).abs() < 1e-8);
        assert!(k.weights.data().iter().any(|&v| v < 0.0));
    }

    #[test]
    fn out_of_range_params_rejected() {
        assert!(make_blur_kernel(KernelKind::Gaussian, 8, 1.0, 0.0).is_err());
        assert!(make_blur_kernel(KernelKind::Gaussian, 23, 1.0, 0.0).is_err());
        assert!(make_blur_kernel(KernelKind::Gaussian, 7, 0.1, 0.0).is_err());
        assert!(make_blur_kernel(KernelKind::GeneralizedGaussian, 7, 1.0, 5.0).is_err());
        assert!(make_blur_kernel(KernelKind::Plateau, 7, 1.0, 0.5).is_err());
        assert!(make_blur_kernel(KernelKind::Sinc, 7, 0.5, 0.0).is_err());
    }

    #[test]
    fn bessel_j1_reference_values() {
        // J1(1) = 0.4400505857, J1(5) = -0.3275791376 (tabulated)
        assert!((bessel_j1(1.0) - 0.4400505857).abs() < 1e-7);
        assert!((bessel_j1(5.0) - -0.3275791376).abs() < 1e-7);
        assert!((bessel_j1(10.0) - 0.0434727462).abs() < 1e-7);
    }
}
