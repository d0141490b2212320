//! Dense row-major f64 tensors plus the small set of neural-net kernels
//! (convolutions, matrix products, normalization) the models are built from.
//!
//! Everything is double precision: the tensors are tiny at this scale and the
//! accuracy headroom keeps gradient checks and checkpoint diffs clean.

use crate::error::{Error, Result};
use rand::Rng;
use rand_distr::StandardNormal;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} expects {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..numel).map(|i| f(i)).collect(),
        }
    }

    pub fn randn(shape: &[usize], std: f64, rng: &mut impl Rng) -> Self {
        Self::from_fn(shape, |_| {
            let z: f64 = rng.sample(StandardNormal);
            z * std
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        assert_eq!(self.shape, other.shape, "zip_map shape mismatch");
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|v| v * c)
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.numel() as f64
    }

    pub fn variance(&self) -> f64 {
        let mu = self.mean();
        self.data.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / self.numel() as f64
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, &v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(other.data.iter())
            .fold(0.0, |m, (&a, &b)| m.max((a - b).abs()))
    }

    /// Mean squared difference, accumulated in place (both tensors are f64).
    pub fn mse(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "mse shape mismatch");
        let n = self.numel() as f64;
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum::<f64>()
            / n
    }
}

// ---------------------------------------------------------------------------
// Matrix products. Layout: [rows, cols], row-major.
// ---------------------------------------------------------------------------

/// y = a[m,k] . b[k,n]
pub fn matmul_nn(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.shape[0], a.shape[1]);
    let (k2, n) = (b.shape[0], b.shape[1]);
    assert_eq!(k, k2, "matmul_nn inner dim mismatch");
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a.data[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    Tensor {
        shape: vec![m, n],
        data: out,
    }
}

/// y = a[m,k] . b[n,k]^T
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.shape[0], a.shape[1]);
    let (n, k2) = (b.shape[0], b.shape[1]);
    assert_eq!(k, k2, "matmul_nt inner dim mismatch");
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b.data[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for p in 0..k {
                acc += arow[p] * brow[p];
            }
            out[i * n + j] = acc;
        }
    }
    Tensor {
        shape: vec![m, n],
        data: out,
    }
}

/// y = a[k,m]^T . b[k,n]
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    let (k, m) = (a.shape[0], a.shape[1]);
    let (k2, n) = (b.shape[0], b.shape[1]);
    assert_eq!(k, k2, "matmul_tn inner dim mismatch");
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let arow = &a.data[p * m..(p + 1) * m];
        let brow = &b.data[p * n..(p + 1) * n];
        for i in 0..m {
            let av = arow[i];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    Tensor {
        shape: vec![m, n],
        data: out,
    }
}

// ---------------------------------------------------------------------------
// 2-D convolution kernels. Activations are [C, H, W]; filters [O, C, kh, kw].
// Zero padding, square stride.
// ---------------------------------------------------------------------------

pub fn conv2d_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

pub fn conv2d_fwd(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (ci, h, wd) = (x.shape[0], x.shape[1], x.shape[2]);
    let (co, ci2, kh, kw) = (w.shape[0], w.shape[1], w.shape[2], w.shape[3]);
    assert_eq!(ci, ci2, "conv2d channel mismatch");
    let oh = conv2d_out_dim(h, kh, stride, pad);
    let ow = conv2d_out_dim(wd, kw, stride, pad);
    let mut out = vec![0.0; co * oh * ow];
    for o in 0..co {
        for c in 0..ci {
            let wbase = ((o * ci + c) * kh) * kw;
            let xbase = c * h * wd;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    let iy0 = (oy * stride) as isize - pad as isize;
                    let ix0 = (ox * stride) as isize - pad as isize;
                    for ky in 0..kh {
                        let iy = iy0 + ky as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let xrow = xbase + iy as usize * wd;
                        let wrow = wbase + ky * kw;
                        for kx in 0..kw {
                            let ix = ix0 + kx as isize;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            acc += x.data[xrow + ix as usize] * w.data[wrow + kx];
                        }
                    }
                    out[(o * oh + oy) * ow + ox] += acc;
                }
            }
        }
    }
    Tensor {
        shape: vec![co, oh, ow],
        data: out,
    }
}

pub fn conv2d_bwd_x(gy: &Tensor, w: &Tensor, x_shape: &[usize], stride: usize, pad: usize) -> Tensor {
    let (ci, h, wd) = (x_shape[0], x_shape[1], x_shape[2]);
    let (co, _ci, kh, kw) = (w.shape[0], w.shape[1], w.shape[2], w.shape[3]);
    let (oh, ow) = (gy.shape[1], gy.shape[2]);
    let mut gx = vec![0.0; ci * h * wd];
    for o in 0..co {
        for c in 0..ci {
            let wbase = ((o * ci + c) * kh) * kw;
            let xbase = c * h * wd;
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = gy.data[(o * oh + oy) * ow + ox];
                    if g == 0.0 {
                        continue;
                    }
                    let iy0 = (oy * stride) as isize - pad as isize;
                    let ix0 = (ox * stride) as isize - pad as isize;
                    for ky in 0..kh {
                        let iy = iy0 + ky as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let xrow = xbase + iy as usize * wd;
                        let wrow = wbase + ky * kw;
                        for kx in 0..kw {
                            let ix = ix0 + kx as isize;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            gx[xrow + ix as usize] += g * w.data[wrow + kx];
                        }
                    }
                }
            }
        }
    }
    Tensor {
        shape: x_shape.to_vec(),
        data: gx,
    }
}

pub fn conv2d_bwd_w(gy: &Tensor, x: &Tensor, w_shape: &[usize], stride: usize, pad: usize) -> Tensor {
    let (ci, h, wd) = (x.shape[0], x.shape[1], x.shape[2]);
    let (co, _ci, kh, kw) = (w_shape[0], w_shape[1], w_shape[2], w_shape[3]);
    let (oh, ow) = (gy.shape[1], gy.shape[2]);
    let mut gw = vec![0.0; co * ci * kh * kw];
    for o in 0..co {
        for c in 0..ci {
            let wbase = ((o * ci + c) * kh) * kw;
            let xbase = c * h * wd;
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = gy.data[(o * oh + oy) * ow + ox];
                    if g == 0.0 {
                        continue;
                    }
                    let iy0 = (oy * stride) as isize - pad as isize;
                    let ix0 = (ox * stride) as isize - pad as isize;
                    for ky in 0..kh {
                        let iy = iy0 + ky as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let xrow = xbase + iy as usize * wd;
                        let wrow = wbase + ky * kw;
                        for kx in 0..kw {
                            let ix = ix0 + kx as isize;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            gw[wrow + kx] += g * x.data[xrow + ix as usize];
                        }
                    }
                }
            }
        }
    }
    Tensor {
        shape: w_shape.to_vec(),
        data: gw,
    }
}

// ---------------------------------------------------------------------------
// Block transposed convolution with kernel == stride: each input pixel paints
// a disjoint k x k output block. Filters are [Ci, Co, k, k].
// ---------------------------------------------------------------------------

pub fn convt_block_fwd(x: &Tensor, w: &Tensor, k: usize) -> Tensor {
    let (ci, h, wd) = (x.shape[0], x.shape[1], x.shape[2]);
    let (ci2, co) = (w.shape[0], w.shape[1]);
    assert_eq!(ci, ci2, "convt channel mismatch");
    assert_eq!(w.shape[2], k);
    assert_eq!(w.shape[3], k);
    let (oh, ow) = (h * k, wd * k);
    let mut out = vec![0.0; co * oh * ow];
    for c in 0..ci {
        for o in 0..co {
            let wbase = ((c * co + o) * k) * k;
            for y in 0..h {
                for xp in 0..wd {
                    let v = x.data[(c * h + y) * wd + xp];
                    if v == 0.0 {
                        continue;
                    }
                    for ky in 0..k {
                        let orow = (o * oh + y * k + ky) * ow + xp * k;
                        for kx in 0..k {
                            out[orow + kx] += v * w.data[wbase + ky * k + kx];
                        }
                    }
                }
            }
        }
    }
    Tensor {
        shape: vec![co, oh, ow],
        data: out,
    }
}

pub fn convt_block_bwd_x(gy: &Tensor, w: &Tensor, x_shape: &[usize], k: usize) -> Tensor {
    let (ci, h, wd) = (x_shape[0], x_shape[1], x_shape[2]);
    let co = w.shape[1];
    let (oh, ow) = (gy.shape[1], gy.shape[2]);
    let mut gx = vec![0.0; ci * h * wd];
    for c in 0..ci {
        for o in 0..co {
            let wbase = ((c * co + o) * k) * k;
            for y in 0..h {
                for xp in 0..wd {
                    let mut acc = 0.0;
                    for ky in 0..k {
                        let grow = (o * oh + y * k + ky) * ow + xp * k;
                        for kx in 0..k {
                            acc += gy.data[grow + kx] * w.data[wbase + ky * k + kx];
                        }
                    }
                    gx[(c * h + y) * wd + xp] += acc;
                }
            }
        }
    }
    Tensor {
        shape: x_shape.to_vec(),
        data: gx,
    }
}

pub fn convt_block_bwd_w(gy: &Tensor, x: &Tensor, w_shape: &[usize], k: usize) -> Tensor {
    let (ci, h, wd) = (x.shape[0], x.shape[1], x.shape[2]);
    let co = w_shape[1];
    let (oh, ow) = (gy.shape[1], gy.shape[2]);
    let mut gw = vec![0.0; ci * co * k * k];
    for c in 0..ci {
        for o in 0..co {
            let wbase = ((c * co + o) * k) * k;
            for y in 0..h {
                for xp in 0..wd {
                    let v = x.data[(c * h + y) * wd + xp];
                    if v == 0.0 {
                        continue;
                    }
                    for ky in 0..k {
                        let grow = (o * oh + y * k + ky) * ow + xp * k;
                        for kx in 0..k {
                            gw[wbase + ky * k + kx] += v * gy.data[grow + kx];
                        }
                    }
                }
            }
        }
    }
    Tensor {
        shape: w_shape.to_vec(),
        data: gw,
    }
}

// ---------------------------------------------------------------------------
// Nearest-neighbour 2x upsampling.
// ---------------------------------------------------------------------------

pub fn upsample2_fwd(x: &Tensor) -> Tensor {
    let (c, h, w) = (x.shape[0], x.shape[1], x.shape[2]);
    let (oh, ow) = (h * 2, w * 2);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for y in 0..h {
            for xp in 0..w {
                let v = x.data[(ch * h + y) * w + xp];
                let base = (ch * oh + 2 * y) * ow + 2 * xp;
                out[base] = v;
                out[base + 1] = v;
                out[base + ow] = v;
                out[base + ow + 1] = v;
            }
        }
    }
    Tensor {
        shape: vec![c, oh, ow],
        data: out,
    }
}

pub fn upsample2_bwd(gy: &Tensor) -> Tensor {
    let (c, oh, ow) = (gy.shape[0], gy.shape[1], gy.shape[2]);
    let (h, w) = (oh / 2, ow / 2);
    let mut gx = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for xp in 0..w {
                let base = (ch * oh + 2 * y) * ow + 2 * xp;
                gx[(ch * h + y) * w + xp] =
                    gy.data[base] + gy.data[base + 1] + gy.data[base + ow] + gy.data[base + ow + 1];
            }
        }
    }
    Tensor {
        shape: vec![c, h, w],
        data: gx,
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn matmul_agree() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let a = Tensor::randn(&[3, 5], 1.0, &mut rng);
        let b = Tensor::randn(&[5, 4], 1.0, &mut rng);
        let y = matmul_nn(&a, &b);
        // transpose b and go through the nt path
        let mut bt = Tensor::zeros(&[4, 5]);
        for i in 0..5 {
            for j in 0..4 {
                bt.data_mut()[j * 5 + i] = b.data()[i * 4 + j];
            }
        }
        let y2 = matmul_nt(&a, &bt);
        assert!(y.max_abs_diff(&y2) < 1e-12);
    }

    #[test]
    fn conv2d_identity_kernel() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let x = Tensor::randn(&[2, 5, 5], 1.0, &mut rng);
        // 1x1 identity over two channels
        let w = Tensor::new(&[2, 2, 1, 1], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let y = conv2d_fwd(&x, &w, 1, 0);
        assert!(y.max_abs_diff(&x) < 1e-15);
    }

    #[test]
    fn conv2d_matches_naive_stride2() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let x = Tensor::randn(&[3, 6, 6], 1.0, &mut rng);
        let w = Tensor::randn(&[4, 3, 3, 3], 0.5, &mut rng);
        let y = conv2d_fwd(&x, &w, 2, 1);
        assert_eq!(y.shape(), &[4, 3, 3]);
        // naive re-evaluation
        for o in 0..4 {
            for oy in 0..3 {
                for ox in 0..3 {
                    let mut acc = 0.0;
                    for c in 0..3 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * 2 + ky) as isize - 1;
                                let ix = (ox * 2 + kx) as isize - 1;
                                if iy < 0 || iy >= 6 || ix < 0 || ix >= 6 {
                                    continue;
                                }
                                acc += x.data()[(c * 6 + iy as usize) * 6 + ix as usize]
                                    * w.data()[((o * 3 + c) * 3 + ky) * 3 + kx];
                            }
                        }
                    }
                    let got = y.data()[(o * 3 + oy) * 3 + ox];
                    assert!((acc - got).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn convt_block_shapes_and_adjoint() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let x = Tensor::randn(&[3, 2, 2], 1.0, &mut rng);
        let w = Tensor::randn(&[3, 5, 2, 2], 1.0, &mut rng);
        let y = convt_block_fwd(&x, &w, 2);
        assert_eq!(y.shape(), &[5, 4, 4]);
        // <y, g> == <x, bwd_x(g)> (adjoint identity)
        let g = Tensor::randn(y.shape(), 1.0, &mut rng);
        let gx = convt_block_bwd_x(&g, &w, x.shape(), 2);
        let lhs: f64 = y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(gx.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn upsample_round_trip_adjoint() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let x = Tensor::randn(&[2, 3, 3], 1.0, &mut rng);
        let y = upsample2_fwd(&x);
        let g = Tensor::randn(y.shape(), 1.0, &mut rng);
        let gx = upsample2_bwd(&g);
        let lhs: f64 = y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(gx.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
