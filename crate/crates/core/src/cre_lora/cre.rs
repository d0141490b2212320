//! Channel replicate-and-expansion for head/tail convolutions.
//!
//! A head trained for `c_pre` input channels is widened to `c_target` by
//! tiling the kernel along the input-channel axis and dividing by the
//! replication factor, so a tiled input reproduces the original activations
//! exactly. A tail is widened by tiling kernel and bias along the
//! output-channel axis, so every output group equals the original output.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct ConvWeight {
    /// [out_channels, in_channels, k, k]
    pub kernel: Tensor,
    /// [out_channels], optional
    pub bias: Option<Tensor>,
}

impl ConvWeight {
    pub fn new(kernel: Tensor, bias: Option<Tensor>) -> Result<Self> {
        if kernel.shape().len() != 4 {
            return Err(Error::shape(format!(
                "conv kernel must be 4-D, got {:?}",
                kernel.shape()
            )));
        }
        let k = kernel.shape()[2];
        if kernel.shape()[3] != k || k % 2 == 0 {
            return Err(Error::parameter(format!(
                "kernel must be square with odd size, got {}x{}",
                k,
                kernel.shape()[3]
            )));
        }
        if !kernel.all_finite() {
            return Err(Error::numeric("conv kernel contains non-finite values"));
        }
        if let Some(b) = &bias {
            if b.shape() != [kernel.shape()[0]] {
                return Err(Error::shape(format!(
                    "bias shape {:?} does not match out_channels {}",
                    b.shape(),
                    kernel.shape()[0]
                )));
            }
        }
        Ok(ConvWeight { kernel, bias })
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.kernel.shape()[1]
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel.shape()[2]
    }
}

/// Widen the input-channel axis from `c_pre` to `c_target` (tile f times,
/// divide by f). The bias is untouched.
pub fn cre_expand_head(w_pre: &ConvWeight, c_target: usize) -> Result<ConvWeight> {
    let c_pre = w_pre.in_channels();
    if c_target == 0 || c_target % c_pre != 0 {
        return Err(Error::parameter(format!(
            "target channels {c_target} not divisible by pretrained channels {c_pre}"
        )));
    }
    let f = c_target / c_pre;
    let (o, k) = (w_pre.out_channels(), w_pre.kernel_size());
    let scale = 1.0 / f as f64;
    let mut kernel = Tensor::zeros(&[o, c_target, k, k]);
    let plane = k * k;
    for oc in 0..o {
        for rep in 0..f {
            for ic in 0..c_pre {
                let src = ((oc * c_pre + ic) * plane)..((oc * c_pre + ic + 1) * plane);
                let dst_c = rep * c_pre + ic;
                let dst = ((oc * c_target + dst_c) * plane)..((oc * c_target + dst_c + 1) * plane);
                for (d, s) in dst.zip(src) {
                    kernel.data_mut()[d] = w_pre.kernel.data()[s] * scale;
                }
            }
        }
    }
    ConvWeight::new(kernel, w_pre.bias.clone())
}

/// Widen the output-channel axis from `c_pre` to `c_target` (tile kernel and
/// bias f times, no rescaling).
pub fn cre_expand_tail(w_pre: &ConvWeight, c_target: usize) -> Result<ConvWeight> {
    let c_pre = w_pre.out_channels();
    if c_target == 0 || c_target % c_pre != 0 {
        return Err(Error::parameter(format!(
            "target channels {c_target} not divisible by pretrained channels {c_pre}"
        )));
    }
    let f = c_target / c_pre;
    let (i, k) = (w_pre.in_channels(), w_pre.kernel_size());
    let block = i * k * k;
    let mut kernel = Tensor::zeros(&[c_target, i, k, k]);
    for rep in 0..f {
        for oc in 0..c_pre {
            let src = oc * block..(oc + 1) * block;
            let dst_start = (rep * c_pre + oc) * block;
            kernel.data_mut()[dst_start..dst_start + block]
                .copy_from_slice(&w_pre.kernel.data()[src]);
        }
    }
    let bias = match &w_pre.bias {
        Some(b) => {
            let mut out = Tensor::zeros(&[c_target]);
            for rep in 0..f {
                out.data_mut()[rep * c_pre..(rep + 1) * c_pre].copy_from_slice(b.data());
            }
            Some(out)
        }
        None => None,
    };
    ConvWeight::new(kernel, bias)
}

/// Tile a [C,H,W] tensor f times along the channel axis.
pub fn tile_channels(x: &Tensor, f: usize) -> Tensor {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = Tensor::zeros(&[c * f, h, w]);
    for rep in 0..f {
        out.data_mut()[rep * c * h * w..(rep + 1) * c * h * w].copy_from_slice(x.data());
    }
    out
}
