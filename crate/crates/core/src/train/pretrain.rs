//! Stand-in construction for the pretrained components the pipeline adapts:
//! a segmentation model trained on the clear synthetic corpus, and a
//! 4-channel denoising U-Net trained on procedural latent fields (noise
//! prediction mixed with one-step restoration at the enhancement timestep).
//! Both are frozen afterwards; the fine-tuning stages only ever touch
//! adapters or the decoder.

use crate::cre_lora::{Denoiser, UNetConfig};
use crate::dataset::{sample_point_prompt, Split, DEFAULT_POINTS};
use crate::diffusion::DiffusionSchedule;
use crate::error::{Error, Result};
use crate::optim::AdamW;
use crate::params::ParamLeaves;
use crate::rng::{derive_seed, stream, stream_from};
use crate::seg_model::{SegConfig, SegModel};
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::train::common::{sample_batch, BatchItem, CorpusView};
use crate::train::losses::{loss_rec_grad, loss_seg_grad, SegLossParams};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub seg_iters: usize,
    pub seg_lr: f64,
    pub denoiser_iters: usize,
    pub denoiser_lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Timestep the restoration half of denoiser pretraining targets (the
    /// same step the enhancement runs at).
    pub gle_timestep: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            seg_iters: 1500,
            seg_lr: 1e-3,
            denoiser_iters: 2500,
            denoiser_lr: 1e-3,
            batch_size: 4,
            seed: 0,
            gle_timestep: 1000,
        }
    }
}

/// Batch items paired with per-item derived seeds. Seeds are precomputed in
/// a plain loop; deriving them inside worker closures sends the current
/// compiler's codegen into the weeds.
pub(crate) fn seeded_batch(
    n_records: usize,
    levels: &[crate::degrade::Level],
    batch_size: usize,
    seed: u64,
    tag: &str,
    iteration: usize,
) -> Vec<(BatchItem, u64)> {
    let batch = sample_batch(n_records, levels, batch_size, seed, iteration);
    let mut out = Vec::with_capacity(batch.len());
    for (j, item) in batch.into_iter().enumerate() {
        let s = derive_seed(seed, tag, &[iteration as u64, j as u64]);
        out.push((item, s));
    }
    out
}

/// Train every segmentation parameter on clear images with point prompts.
pub fn pretrain_seg(
    cfg: &PretrainConfig,
    seg_cfg: SegConfig,
    corpus: &CorpusView,
) -> Result<(SegModel, Vec<(usize, f64)>)> {
    let mut rng = stream(cfg.seed, "pretrain-seg-init", &[]);
    let mut model = SegModel::init(seg_cfg, &mut rng);
    model.store.set_trainable_prefix("seg.", true);

    let records = corpus.split(Split::Train);
    if records.is_empty() {
        return Err(Error::data("corpus has no training records"));
    }
    let loss_params = SegLossParams::default();
    let mut opt = AdamW::new(cfg.seg_lr, 0.01);
    let mut trace = Vec::with_capacity(cfg.seg_iters);

    for it in 0..cfg.seg_iters {
        let jobs = seeded_batch(
            records.len(),
            &crate::degrade::Level::ALL,
            cfg.batch_size,
            cfg.seed,
            "pretrain-prompt",
            it,
        );
        let model_ref = &model;
        let results: Vec<Result<(f64, BTreeMap<String, Tensor>)>> = jobs
            .par_iter()
            .map(|(item, prompt_seed)| {
                let rec = records[item.record_index];
                let img = rec.load_hq(&corpus.root)?;
                let mask = rec.load_mask(&corpus.root)?;
                let prompt = sample_point_prompt(&mask, DEFAULT_POINTS, *prompt_seed)?;

                let mut tape = Tape::new();
                let mut leaves = ParamLeaves::new();
                let x = tape.leaf(img);
                let z = model_ref.encode_image_tape(&mut tape, &mut leaves, x);
                let emb = model_ref.encode_prompt_tape(
                    &mut tape,
                    &mut leaves,
                    &prompt,
                    (mask.height, mask.width),
                )?;
                let logits = model_ref.decode_mask_tape(&mut tape, &mut leaves, z, emb);
                let (loss, grad) = loss_seg_grad(tape.value(logits), &mask, &loss_params)?;
                let grads = tape.backward(logits, grad.scale(1.0 / cfg.batch_size as f64));
                Ok((loss, leaves.grads_by_name(&grads)))
            })
            .collect();

        let mut total = 0.0;
        let mut accum: BTreeMap<String, Tensor> = BTreeMap::new();
        for r in results {
            let (loss, grads) = r?;
            total += loss / cfg.batch_size as f64;
            merge_grads(&mut accum, grads);
        }
        if !total.is_finite() {
            return Err(Error::numeric(format!(
                "segmentation pretraining diverged at iteration {it}"
            )));
        }
        opt.step(&mut model.store, &accum);
        trace.push((it, total));
    }
    model.store.freeze_all();
    Ok((model, trace))
}

/// Smooth structured field with roughly unit variance: a few random
/// sinusoidal components per channel, jointly normalized.
pub fn sample_field(channels: usize, h: usize, w: usize, rng: &mut impl Rng) -> Tensor {
    let mut t = Tensor::zeros(&[channels, h, w]);
    for c in 0..channels {
        let n_comp = rng.gen_range(2..=4usize);
        let mut comps: Vec<(f64, f64, f64, f64)> = Vec::with_capacity(n_comp);
        for _ in 0..n_comp {
            comps.push((
                rng.gen_range(0.5..1.5),
                rng.gen_range(0.5..4.0),
                rng.gen_range(0.5..4.0),
                rng.gen_range(0.0..std::f64::consts::TAU),
            ));
        }
        for y in 0..h {
            for x in 0..w {
                let mut v = 0.0;
                for &(a, fy, fx, ph) in &comps {
                    v += a
                        * (std::f64::consts::TAU
                            * (fy * y as f64 / h as f64 + fx * x as f64 / w as f64)
                            + ph)
                            .sin();
                }
                t.data_mut()[(c * h + y) * w + x] = v;
            }
        }
        let lo = c * h * w;
        let hi = lo + h * w;
        let mean = t.data()[lo..hi].iter().sum::<f64>() / (h * w) as f64;
        let var = t.data()[lo..hi]
            .iter()
            .map(|&v| (v - mean) * (v - mean))
            .sum::<f64>()
            / (h * w) as f64;
        let inv = 1.0 / var.sqrt().max(1e-6);
        let dc = 0.3 * rng.sample::<f64, _>(rand_distr::StandardNormal);
        for v in &mut t.data_mut()[lo..hi] {
            *v = (*v - mean) * inv + dc;
        }
    }
    t
}

/// Degraded view of a field: small gaussian blur, additive noise, gain jitter.
pub fn corrupt_field(x: &Tensor, rng: &mut impl Rng) -> Tensor {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let sigma = rng.gen_range(0.3..1.5);
    let gain = rng.gen_range(0.7..1.1);
    let noise_std = rng.gen_range(0.05..0.5);
    // 5-tap separable gaussian, mirror padding
    let mut taps = [0.0f64; 5];
    let mut s = 0.0;
    for (i, t) in taps.iter_mut().enumerate() {
        let d = i as f64 - 2.0;
        *t = (-d * d / (2.0 * sigma * sigma)).exp();
        s += *t;
    }
    for t in &mut taps {
        *t /= s;
    }
    let mirror = |i: isize, n: usize| -> usize {
        if i < 0 {
            (-i - 1) as usize
        } else if i >= n as isize {
            2 * n - 1 - i as usize
        } else {
            i as usize
        }
    };
    let mut blurred = Tensor::zeros(x.shape());
    for ch in 0..c {
        let src = &x.data()[ch * h * w..(ch + 1) * h * w];
        let mut tmp = vec![0.0; h * w];
        for y in 0..h {
            for xx in 0..w {
                let mut acc = 0.0;
                for (i, t) in taps.iter().enumerate() {
                    acc += t * src[y * w + mirror(xx as isize + i as isize - 2, w)];
                }
                tmp[y * w + xx] = acc;
            }
        }
        for y in 0..h {
            for xx in 0..w {
                let mut acc = 0.0;
                for (i, t) in taps.iter().enumerate() {
                    acc += t * tmp[mirror(y as isize + i as isize - 2, h) * w + xx];
                }
                blurred.data_mut()[(ch * h + y) * w + xx] = acc;
            }
        }
    }
    let noise = Tensor::randn(x.shape(), noise_std, rng);
    blurred.zip_map(&noise, |v, n| v * gain + n)
}

/// Train the narrow base denoiser. Half the batch items are standard noise
/// prediction at a random timestep; the other half ask the net to invert the
/// one-step process for a corrupted field at the enhancement timestep.
pub fn pretrain_denoiser_base(
    cfg: &PretrainConfig,
    unet_cfg: UNetConfig,
    schedule: &DiffusionSchedule,
    field_size: (usize, usize),
    field_std: f64,
) -> Result<(Denoiser, Vec<(usize, f64)>)> {
    if !(field_std > 0.0) {
        return Err(Error::parameter(format!(
            "field std {field_std} must be positive"
        )));
    }
    if cfg.gle_timestep < 1 || cfg.gle_timestep > schedule.len() {
        return Err(Error::parameter(format!(
            "pretrain timestep {} outside schedule 1..={}",
            cfg.gle_timestep,
            schedule.len()
        )));
    }
    let mut rng = stream(cfg.seed, "pretrain-unet-init", &[]);
    let mut denoiser = Denoiser::init(unet_cfg, &mut rng);
    denoiser.store.set_trainable_prefix("unet.", true);

    let (h, w) = field_size;
    let channels = unet_cfg.channels;
    let mut opt = AdamW::new(cfg.denoiser_lr, 0.01);
    let mut trace = Vec::with_capacity(cfg.denoiser_iters);

    for it in 0..cfg.denoiser_iters {
        let mut seeds: Vec<u64> = Vec::with_capacity(cfg.batch_size);
        for j in 0..cfg.batch_size {
            seeds.push(derive_seed(cfg.seed, "pretrain-field", &[it as u64, j as u64]));
        }
        let denoiser_ref = &denoiser;
        let results: Vec<Result<(f64, BTreeMap<String, Tensor>)>> = seeds
            .par_iter()
            .map(|&s| {
                let mut rng = stream_from(s);
                let field = sample_field(channels, h, w, &mut rng).scale(field_std);
                let (input, target, t) = if rng.gen_bool(0.5) {
                    let t = rng.gen_range(1..=schedule.len());
                    let ab = schedule.alpha_bar(t);
                    let eps = Tensor::randn(field.shape(), field_std, &mut rng);
                    let z_t = field.zip_map(&eps, |z, e| ab.sqrt() * z + (1.0 - ab).sqrt() * e);
                    (z_t, eps, t)
                } else {
                    let t = cfg.gle_timestep;
                    let ab = schedule.alpha_bar(t);
                    let corrupted = corrupt_field(&field, &mut rng);
                    let target = corrupted
                        .zip_map(&field, |xc, z| (xc - ab.sqrt() * z) / (1.0 - ab).sqrt());
                    (corrupted, target, t)
                };
                let mut tape = Tape::new();
                let mut leaves = ParamLeaves::new();
                let xid = tape.leaf(input);
                let out = denoiser_ref.forward_tape(&mut tape, &mut leaves, xid, t);
                let loss = tape.value(out).mse(&target);
                let seed_grad =
                    loss_rec_grad(tape.value(out), &target).scale(1.0 / cfg.batch_size as f64);
                let grads = tape.backward(out, seed_grad);
                Ok((loss, leaves.grads_by_name(&grads)))
            })
            .collect();

        let mut total = 0.0;
        let mut accum: BTreeMap<String, Tensor> = BTreeMap::new();
        for r in results {
            let (loss, grads) = r?;
            total += loss / cfg.batch_size as f64;
            merge_grads(&mut accum, grads);
        }
        if !total.is_finite() {
            return Err(Error::numeric(format!(
                "denoiser pretraining diverged at iteration {it}"
            )));
        }
        opt.step(&mut denoiser.store, &accum);
        trace.push((it, total));
    }
    denoiser.store.freeze_all();
    Ok((denoiser, trace))
}

pub(crate) fn merge_grads(into: &mut BTreeMap<String, Tensor>, from: BTreeMap<String, Tensor>) {
    for (name, g) in from {
        match into.get_mut(&name) {
            Some(existing) => existing.add_assign(&g),
            None => {
                into.insert(name, g);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{build_schedule, ScheduleKind};

    #[test]
    fn fields_are_standardized() {
        let mut rng = stream(1, "field", &[]);
        let f = sample_field(4, 8, 8, &mut rng);
        assert_eq!(f.shape(), &[4, 8, 8]);
        for c in 0..4 {
            let plane = &f.data()[c * 64..(c + 1) * 64];
            let mean: f64 = plane.iter().sum::<f64>() / 64.0;
            let var: f64 = plane.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / 64.0;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn denoiser_pretraining_reduces_loss() {
        let cfg = PretrainConfig {
            denoiser_iters: 60,
            seed: 3,
            gle_timestep: 100,
            ..PretrainConfig::default()
        };
        let schedule = build_schedule(100, 8.5e-4, 1.2e-2, ScheduleKind::ScaledLinear).unwrap();
        let unet_cfg = UNetConfig {
            channels: 4,
            ..UNetConfig::default()
        };
        let (_, trace) = pretrain_denoiser_base(&cfg, unet_cfg, &schedule, (8, 8), 1.0).unwrap();
        let first: f64 = trace[..10].iter().map(|(_, l)| l).sum::<f64>() / 10.0;
        let last: f64 = trace[trace.len() - 10..].iter().map(|(_, l)| l).sum::<f64>() / 10.0;
        assert!(last < first, "first {first} last {last}");
    }
}
