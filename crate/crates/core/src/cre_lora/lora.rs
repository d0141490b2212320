//! Low-rank adapters: delta = (alpha/rank) B A with B zero-initialized, so a
//! freshly installed adapter is exactly transparent.

use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};
use crate::tensor::{matmul_nn, matmul_nt, Tensor};
use rand::Rng;

#[derive(Clone, Debug)]
pub struct LoraAdapter {
    /// [rank, in_features]
    pub a: Tensor,
    /// [out_features, rank]
    pub b: Tensor,
    pub rank: usize,
    pub alpha: f64,
}

impl LoraAdapter {
    /// A ~ N(0, 1/rank), B = 0, alpha = rank (unit effective scale).
    pub fn init(out_features: usize, in_features: usize, rank: usize, rng: &mut impl Rng) -> Result<Self> {
        if rank == 0 {
            return Err(Error::parameter("lora rank must be positive"));
        }
        Ok(LoraAdapter {
            a: Tensor::randn(&[rank, in_features], 1.0 / rank as f64, rng),
            b: Tensor::zeros(&[out_features, rank]),
            rank,
            alpha: rank as f64,
        })
    }

    pub fn from_parts(a: Tensor, b: Tensor, alpha: f64) -> Result<Self> {
        if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[0] != b.shape()[1] {
            return Err(Error::shape(format!(
                "incompatible lora factors A {:?}, B {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let rank = a.shape()[0];
        if rank == 0 {
            return Err(Error::parameter("lora rank must be positive"));
        }
        Ok(LoraAdapter { a, b, rank, alpha })
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// Merged delta (alpha/rank) B.A, shape [out_features, in_features].
    /// Kept as a test oracle; the forward path never materializes it.
    pub fn delta(&self) -> Tensor {
        matmul_nn(&self.b, &self.a).scale(self.scaling())
    }
}

/// y = x (base + (alpha/rank) B A)^T computed as the base product plus the
/// low-rank path (two small matmuls).
pub fn lora_apply(base: &Tensor, adapter: &LoraAdapter, x: &Tensor) -> Result<Tensor> {
    let (out_f, in_f) = (base.shape()[0], base.shape()[1]);
    if adapter.a.shape()[1] != in_f || adapter.b.shape()[0] != out_f {
        return Err(Error::shape(format!(
            "adapter ({:?}, {:?}) does not fit base {:?}",
            adapter.a.shape(),
            adapter.b.shape(),
            base.shape()
        )));
    }
    if x.shape().len() != 2 || x.shape()[1] != in_f {
        return Err(Error::shape(format!(
            "input {:?} does not match in_features {in_f}",
            x.shape()
        )));
    }
    let base_out = matmul_nt(x, base);
    let low = matmul_nt(x, &adapter.a); // [n, rank]
    let low_out = matmul_nt(&low, &adapter.b); // [n, out]
    Ok(base_out.zip_map(&low_out, |b, l| b + adapter.scaling() * l))
}

/// Tape version: base and factors are tape nodes so gradients reach A and B.
pub fn lora_apply_on_tape(
    tape: &mut Tape,
    x: NodeId,
    base: NodeId,
    a: NodeId,
    b: NodeId,
    scaling: f64,
) -> NodeId {
    let base_out = tape.matmul_nt(x, base);
    let low = tape.matmul_nt(x, a);
    let low_out = tape.matmul_nt(low, b);
    let scaled = tape.scale(low_out, scaling);
    tape.add(base_out, scaled)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn zero_init_is_transparent() {
        let mut rng = stream(1, "lora", &[]);
        let base = Tensor::randn(&[6, 5], 1.0, &mut rng);
        let x = Tensor::randn(&[3, 5], 1.0, &mut rng);
        let adapter = LoraAdapter::init(6, 5, 8, &mut rng).unwrap();
        let with = lora_apply(&base, &adapter, &x).unwrap();
        let without = matmul_nt(&x, &base);
        // bitwise: the low-rank path contributes exact zeros
        for (a, b) in with.data().iter().zip(without.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn two_path_matches_merged_weight() {
        let mut rng = stream(2, "lora", &[]);
        let base = Tensor::randn(&[6, 5], 1.0, &mut rng);
        let x = Tensor::randn(&[4, 5], 1.0, &mut rng);
        let mut adapter = LoraAdapter::init(6, 5, 3, &mut rng).unwrap();
        adapter.b = Tensor::randn(&[6, 3], 0.5, &mut rng);
        let merged = base.add(&adapter.delta());
        let expect = matmul_nt(&x, &merged);
        let got = lora_apply(&base, &adapter, &x).unwrap();
        assert!(got.max_abs_diff(&expect) < 1e-6 * expect.max_abs().max(1.0));
    }

    #[test]
    fn zero_rank_rejected() {
        let a = Tensor::zeros(&[0, 5]);
        let b = Tensor::zeros(&[6, 0]);
        assert!(LoraAdapter::from_parts(a, b, 1.0).is_err());
    }
}
