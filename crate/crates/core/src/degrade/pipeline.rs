//! Two-round degradation synthesis with a replayable parameter ledger.
//!
//! Each round applies blur -> resize -> noise -> jpeg with freshly sampled
//! parameters; a final resize restores the source resolution so masks stay
//! aligned. Sampling writes every parameter into the recipe and application
//! is a pure function of (image, recipe), so `degrade_image` simply samples a
//! recipe and replays it.

use crate::degrade::kernel::{make_blur_kernel, KernelKind, SINC_CUTOFF_MAX, SINC_CUTOFF_MIN};
use crate::degrade::ops::{
    add_gaussian_noise, add_poisson_noise, apply_blur, jpeg_compress, resize, ResizeAlgo,
};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, stream_from};
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

pub const SINC_PROB: f64 = 0.1;
pub const SKIP_SECOND_BLUR_PROB: f64 = 0.2;
pub const GRAY_NOISE_PROB: f64 = 0.4;
pub const GAUSSIAN_NOISE_PROB: f64 = 0.5;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Level {
    #[serde(rename = "LQ1")]
    Lq1,
    #[serde(rename = "LQ2")]
    Lq2,
    #[serde(rename = "LQ3")]
    Lq3,
}

impl Level {
    pub const ALL: [Level; 3] = [Level::Lq1, Level::Lq2, Level::Lq3];

    /// Internal downsample factor the level is defined by.
    pub fn factor(self) -> usize {
        match self {
            Level::Lq1 => 1,
            Level::Lq2 => 2,
            Level::Lq3 => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Level::Lq1 => "LQ1",
            Level::Lq2 => "LQ2",
            Level::Lq3 => "LQ3",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "LQ1" | "lq1" => Ok(Level::Lq1),
            "LQ2" | "lq2" => Ok(Level::Lq2),
            "LQ3" | "lq3" => Ok(Level::Lq3),
            other => Err(Error::parameter(format!("unknown degradation level {other}"))),
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Blur,
    Sinc,
    Resize,
    GaussianNoise,
    PoissonNoise,
    Jpeg,
    Skip,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpRecord {
    pub op: OpKind,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
}

impl OpRecord {
    fn new(op: OpKind) -> Self {
        OpRecord {
            op,
            params: BTreeMap::new(),
        }
    }

    fn with(mut self, key: &str, value: f64) -> Self {
        self.params.insert(key.to_string(), value);
        self
    }

    fn param(&self, key: &str) -> Result<f64> {
        self.params
            .get(key)
            .copied()
            .ok_or_else(|| Error::data(format!("recipe op {:?} missing param {key}", self.op)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradationRecipe {
    pub level: Level,
    pub seed: u64,
    pub ops: Vec<OpRecord>,
}

/// Kernel size choices are capped by the current image so the blur operator's
/// size contract always holds after a downscaling round.
fn sample_blur_op(rng: &mut impl Rng, h: usize, w: usize) -> OpRecord {
    let max_size = h.min(w).min(21);
    if max_size < 7 {
        return OpRecord::new(OpKind::Skip);
    }
    let choices = (max_size - 7) / 2 + 1; // odd sizes in {7, ..., max_size}
    let size = 7 + 2 * rng.gen_range(0..choices);
    if rng.gen_bool(SINC_PROB) {
        let cutoff = rng.gen_range(SINC_CUTOFF_MIN..SINC_CUTOFF_MAX);
        OpRecord::new(OpKind::Sinc)
            .with("size", size as f64)
            .with("cutoff", cutoff)
    } else {
        let family = rng.gen_range(0..3u32);
        let sigma = rng.gen_range(0.2..3.0);
        let beta = match family {
            1 => rng.gen_range(0.5..4.0),
            2 => rng.gen_range(1.0..2.0),
            _ => 0.0,
        };
        OpRecord::new(OpKind::Blur)
            .with("family", family as f64)
            .with("size", size as f64)
            .with("sigma", sigma)
            .with("beta", beta)
    }
}

fn sample_resize_op(rng: &mut impl Rng, h: usize, w: usize) -> OpRecord {
    let algo = match rng.gen_range(0..3u32) {
        0 => ResizeAlgo::Area,
        1 => ResizeAlgo::Bilinear,
        _ => ResizeAlgo::Bicubic,
    };
    OpRecord::new(OpKind::Resize)
        .with("h", h as f64)
        .with("w", w as f64)
        .with("algo", algo.code())
}

fn sample_noise_op(rng: &mut impl Rng) -> OpRecord {
    let gaussian = rng.gen_bool(GAUSSIAN_NOISE_PROB);
    let gray = rng.gen_bool(GRAY_NOISE_PROB);
    if gaussian {
        let sigma = rng.gen_range(1.0..30.0);
        OpRecord::new(OpKind::GaussianNoise)
            .with("sigma", sigma)
            .with("gray", if gray { 1.0 } else { 0.0 })
    } else {
        let scale = rng.gen_range(0.05..3.0);
        OpRecord::new(OpKind::PoissonNoise)
            .with("scale", scale)
            .with("gray", if gray { 1.0 } else { 0.0 })
    }
}

fn sample_jpeg_op(rng: &mut impl Rng) -> OpRecord {
    let q = rng.gen_range(30..=95u32);
    OpRecord::new(OpKind::Jpeg).with("quality", q as f64)
}

/// Sample the full parameter ledger for one image. Application order is the
/// op order in the returned vector.
pub fn sample_recipe(height: usize, width: usize, level: Level, seed: u64) -> DegradationRecipe {
    let mut rng = stream_from(derive_seed(seed, "sample", &[]));
    let d = level.factor();
    let mut ops = Vec::with_capacity(9);

    // round 1
    ops.push(sample_blur_op(&mut rng, height, width));
    let s1 = if d == 1 {
        1.0
    } else {
        rng.gen_range(1.0 / d as f64..1.0)
    };
    let h1 = ((height as f64 * s1).round() as usize).max(1);
    let w1 = ((width as f64 * s1).round() as usize).max(1);
    ops.push(sample_resize_op(&mut rng, h1, w1));
    ops.push(sample_noise_op(&mut rng));
    ops.push(sample_jpeg_op(&mut rng));

    // round 2: blur may drop out; resize lands exactly at the level factor
    if rng.gen_bool(SKIP_SECOND_BLUR_PROB) {
        ops.push(OpRecord::new(OpKind::Skip));
    } else {
        ops.push(sample_blur_op(&mut rng, h1, w1));
    }
    let h2 = ((height as f64 / d as f64).round() as usize).max(1);
    let w2 = ((width as f64 / d as f64).round() as usize).max(1);
    ops.push(sample_resize_op(&mut rng, h2, w2).with("factor", d as f64));
    ops.push(sample_noise_op(&mut rng));
    ops.push(sample_jpeg_op(&mut rng));

    // restore source resolution
    ops.push(sample_resize_op(&mut rng, height, width));

    DegradationRecipe { level, seed, ops }
}

/// Replay a recipe op-by-op. Stochastic ops re-derive their stream from
/// (recipe seed, op index), so the result is bit-identical to the original
/// synthesis.
pub fn apply_recipe(img: &Tensor, recipe: &DegradationRecipe) -> Result<Tensor> {
    let mut cur = img.clone();
    for (index, op) in recipe.ops.iter().enumerate() {
        cur = apply_op(&cur, op, index, recipe.seed)?;
    }
    Ok(cur)
}

fn apply_op(img: &Tensor, op: &OpRecord, index: usize, seed: u64) -> Result<Tensor> {
    match op.op {
        OpKind::Skip => Ok(img.clone()),
        OpKind::Blur => {
            let family = match op.param("family")? as i64 {
                0 => KernelKind::Gaussian,
                1 => KernelKind::GeneralizedGaussian,
                2 => KernelKind::Plateau,
                other => {
                    return Err(Error::data(format!("unknown blur family {other}")));
                }
            };
            let kernel = make_blur_kernel(
                family,
                op.param("size")? as usize,
                op.param("sigma")?,
                op.param("beta")?,
            )?;
            apply_blur(img, &kernel)
        }
        OpKind::Sinc => {
            let kernel = make_blur_kernel(
                KernelKind::Sinc,
                op.param("size")? as usize,
                op.param("cutoff")?,
                0.0,
            )?;
            apply_blur(img, &kernel)
        }
        OpKind::Resize => resize(
            img,
            op.param("h")? as usize,
            op.param("w")? as usize,
            ResizeAlgo::from_code(op.param("algo")?)?,
        ),
        OpKind::GaussianNoise => {
            let mut rng = stream_from(derive_seed(seed, "op", &[index as u64]));
            Ok(add_gaussian_noise(
                img,
                op.param("sigma")?,
                op.param("gray")? != 0.0,
                &mut rng,
            ))
        }
        OpKind::PoissonNoise => {
            let mut rng = stream_from(derive_seed(seed, "op", &[index as u64]));
            Ok(add_poisson_noise(
                img,
                op.param("scale")?,
                op.param("gray")? != 0.0,
                &mut rng,
            ))
        }
        OpKind::Jpeg => jpeg_compress(img, op.param("quality")? as u32),
    }
}

/// Degrade a [0,1] RGB image at the given level, returning the result and
/// the complete recipe that reproduces it.
pub fn degrade_image(img: &Tensor, level: Level, seed: u64) -> Result<(Tensor, DegradationRecipe)> {
    if img.shape().len() != 3 || img.shape()[0] != 3 {
        return Err(Error::shape(format!(
            "expected 3 x H x W image, got {:?}",
            img.shape()
        )));
    }
    if img.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::parameter("image values must lie in [0,1]"));
    }
    let recipe = sample_recipe(img.shape()[1], img.shape()[2], level, seed);
    let out = apply_recipe(img, &recipe)?;
    Ok((out, recipe))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn test_image(seed: u64) -> Tensor {
        let mut rng = stream(seed, "pipe-img", &[]);
        Tensor::from_fn(&[3, 32, 32], |_| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn determinism_and_replay_bit_exact() {
        let img = test_image(1);
        let (out1, rec1) = degrade_image(&img, Level::Lq2, 42).unwrap();
        let (out2, rec2) = degrade_image(&img, Level::Lq2, 42).unwrap();
        assert_eq!(rec1, rec2);
        assert_eq!(out1.data(), out2.data());

        let replayed = apply_recipe(&img, &rec1).unwrap();
        for (a, b) in out1.data().iter().zip(replayed.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn output_shape_and_range() {
        let img = test_image(2);
        for (i, level) in Level::ALL.iter().enumerate() {
            let (out, _) = degrade_image(&img, *level, 100 + i as u64).unwrap();
            assert_eq!(out.shape(), img.shape());
            assert!(out.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn lq3_recipe_records_factor_four() {
        let img = test_image(3);
        let (_, rec) = degrade_image(&img, Level::Lq3, 7).unwrap();
        assert_eq!(rec.level, Level::Lq3);
        let round2 = &rec.ops[5];
        assert_eq!(round2.op, OpKind::Resize);
        assert_eq!(round2.params["factor"], 4.0);
        assert_eq!(round2.params["h"], 8.0);
        assert_eq!(round2.params["w"], 8.0);
    }

    #[test]
    fn recipe_serde_round_trip() {
        let rec = sample_recipe(64, 64, Level::Lq1, 9);
        let json = serde_json::to_string(&rec).unwrap();
        let back: DegradationRecipe = serde_json::from_str(&json).unwrap();
        assert_eq!(rec, back);
    }

    #[test]
    fn seeds_change_recipes() {
        let a = sample_recipe(64, 64, Level::Lq2, 1);
        let b = sample_recipe(64, 64, Level::Lq2, 2);
        assert_ne!(a, b);
    }
}
