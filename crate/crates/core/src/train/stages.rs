//! The two fine-tuning stages: adapter-only denoiser training against the
//! reconstruction loss, then decoder (or mask-token) training against the
//! segmentation loss on enhanced latents. Everything outside the stage's
//! trainable set stays bitwise frozen.

use crate::bundle::ModelBundle;
use crate::dataset::{sample_point_prompt, Split, DEFAULT_POINTS};
use crate::diffusion::{gle_enhance_on_tape, GleConfig};
use crate::error::{Error, Result};
use crate::optim::AdamW;
use crate::params::{ParamLeaves, ParameterStore};
use crate::rng::stream;
use crate::seg_model::set_trainability;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::train::common::{
    sample_batch, BatchItem, CorpusView, LossTraceWriter, Stage, StageReport, TrainConfig,
};
use crate::train::losses::{loss_rec, loss_rec_grad, loss_seg_grad, SegLossParams};
use crate::train::pretrain::merge_grads;
use rayon::prelude::*;
use std::collections::BTreeMap;
use std::path::Path;

fn batch_ids(items: &[BatchItem], records: &[&crate::dataset::SampleRecord]) -> String {
    items
        .iter()
        .map(|b| format!("{}:{}", records[b.record_index].id, b.level.name()))
        .collect::<Vec<_>>()
        .join(", ")
}

/// Stage 1: adapter-only U-Net fine-tuning. Low-quality latents are enhanced
/// on the tape and pulled toward the matching high-quality latents.
pub fn train_stage1(
    cfg: &TrainConfig,
    bundle: &mut ModelBundle,
    corpus: &CorpusView,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<StageReport> {
    cfg.validate()?;
    if cfg.stage != Stage::Unet {
        return Err(Error::parameter("train_stage1 requires stage = unet"));
    }
    bundle.gle = GleConfig {
        gamma: cfg.gamma,
        timestep: cfg.timestep,
    };
    bundle.gle.validate(&bundle.schedule)?;
    if !bundle.denoiser.has_lora() {
        let mut rng = stream(cfg.seed, "lora-install", &[]);
        bundle.denoiser.install_lora(&mut rng)?;
    }

    // freeze contract: only adapter factors are trainable
    bundle.seg.store.freeze_all();
    bundle.denoiser.store.freeze_all();
    bundle.denoiser.store.set_trainable_prefix("lora.", true);

    let records = corpus.split(Split::Train);
    if records.is_empty() {
        return Err(Error::data("corpus has no training records"));
    }

    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay);
    let mut start_iter = 0usize;
    if let Some(path) = resume {
        let loaded = crate::checkpoint::load(path)?;
        opt.load_state(&loaded.store);
        if let Some(it) = loaded.meta.get("iteration") {
            start_iter = it.parse().map_err(|_| {
                Error::Checkpoint(format!("bad iteration metadata in {}", path.display()))
            })?;
        }
    }

    let mut writer = LossTraceWriter::create(&out_dir.join("loss_unet.csv"))?;
    let gle = bundle.gle;
    for it in start_iter..cfg.iters {
        let batch = sample_batch(records.len(), &cfg.levels, cfg.batch_size, cfg.seed, it);
        let seg = &bundle.seg;
        let denoiser = &bundle.denoiser;
        let schedule = &bundle.schedule;
        let results: Vec<Result<(f64, BTreeMap<String, Tensor>)>> = batch
            .par_iter()
            .map(|item| {
                let rec = records[item.record_index];
                let x_h = rec.load_hq(&corpus.root)?;
                let x_l = rec.load_lq(&corpus.root, item.level)?;
                let z_h = seg.encode_image(&x_h)?;
                let z_l = seg.encode_image(&x_l)?;

                let mut tape = Tape::new();
                let mut leaves = ParamLeaves::new();
                let z_l_id = tape.leaf(z_l.into_data());
                let z_hat = gle_enhance_on_tape(&mut tape, z_l_id, &gle, schedule, |t, x, ts| {
                    denoiser.forward_tape(t, &mut leaves, x, ts)
                });
                let loss = loss_rec(tape.value(z_hat), z_h.data())?;
                let seed_grad =
                    loss_rec_grad(tape.value(z_hat), z_h.data()).scale(1.0 / cfg.batch_size as f64);
                let grads = tape.backward(z_hat, seed_grad);
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
                "reconstruction loss became non-finite at iteration {it} (batch {})",
                batch_ids(&batch, &records)
            )));
        }
        opt.step(&mut bundle.denoiser.store, &accum);
        writer.log(it, total, cfg.lr)?;

        if cfg.checkpoint_every > 0 && (it + 1) % cfg.checkpoint_every == 0 && it + 1 < cfg.iters {
            save_stage_checkpoint(bundle, &opt, out_dir, "unet", it + 1)?;
        }
    }

    let checkpoint = save_stage_checkpoint(bundle, &opt, out_dir, "unet", cfg.iters)?;
    crate::train::common::write_resolved_config(&out_dir.join("train_unet.toml"), cfg)?;
    Ok(StageReport {
        loss_trace: writer.finish()?,
        checkpoint,
    })
}

/// Stage 2: decoder (or mask-token) fine-tuning on enhanced latents with the
/// denoiser and its adapters frozen.
pub fn train_stage2(
    cfg: &TrainConfig,
    bundle: &mut ModelBundle,
    corpus: &CorpusView,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<StageReport> {
    cfg.validate()?;
    if cfg.stage != Stage::Decoder {
        return Err(Error::parameter("train_stage2 requires stage = decoder"));
    }
    if !bundle.denoiser.has_lora() {
        return Err(Error::parameter(
            "decoder stage requires a checkpoint from the unet stage (no adapters found)",
        ));
    }

    bundle.denoiser.store.freeze_all();
    set_trainability(&mut bundle.seg.store, cfg.decoder_mode.trainability());

    let records = corpus.split(Split::Train);
    if records.is_empty() {
        return Err(Error::data("corpus has no training records"));
    }
    let loss_params = SegLossParams {
        focal_alpha: cfg.focal_alpha,
        focal_gamma: cfg.focal_gamma,
        dice_smooth: cfg.dice_smooth,
    };

    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay);
    let mut start_iter = 0usize;
    if let Some(path) = resume {
        let loaded = crate::checkpoint::load(path)?;
        opt.load_state(&loaded.store);
        if let Some(it) = loaded.meta.get("iteration") {
            start_iter = it.parse().map_err(|_| {
                Error::Checkpoint(format!("bad iteration metadata in {}", path.display()))
            })?;
        }
    }

    let mut writer = LossTraceWriter::create(&out_dir.join("loss_decoder.csv"))?;
    for it in start_iter..cfg.iters {
        let jobs = crate::train::pretrain::seeded_batch(
            records.len(),
            &cfg.levels,
            cfg.batch_size,
            cfg.seed,
            "stage2-prompt",
            it,
        );
        let seg = &bundle.seg;
        let enhancer = &*bundle;
        let results: Vec<Result<(f64, BTreeMap<String, Tensor>)>> = jobs
            .par_iter()
            .map(|(item, prompt_seed)| {
                let rec = records[item.record_index];
                let x_l = rec.load_lq(&corpus.root, item.level)?;
                let mask = rec.load_mask(&corpus.root)?;
                let z_l = seg.encode_image(&x_l)?;
                let z_hat = enhancer.enhance(&z_l)?;

                let prompt = sample_point_prompt(&mask, DEFAULT_POINTS, *prompt_seed)?;

                let mut tape = Tape::new();
                let mut leaves = ParamLeaves::new();
                let z_id = tape.leaf(z_hat.into_data());
                let emb = seg.encode_prompt_tape(
                    &mut tape,
                    &mut leaves,
                    &prompt,
                    (mask.height, mask.width),
                )?;
                let logits = seg.decode_mask_tape(&mut tape, &mut leaves, z_id, emb);
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
            let items: Vec<_> = jobs.iter().map(|(b, _)| b.clone()).collect();
            return Err(Error::numeric(format!(
                "segmentation loss became non-finite at iteration {it} (batch {})",
                batch_ids(&items, &records)
            )));
        }
        opt.step(&mut bundle.seg.store, &accum);
        writer.log(it, total, cfg.lr)?;

        if cfg.checkpoint_every > 0 && (it + 1) % cfg.checkpoint_every == 0 && it + 1 < cfg.iters {
            save_stage_checkpoint(bundle, &opt, out_dir, "decoder", it + 1)?;
        }
    }

    let checkpoint = save_stage_checkpoint(bundle, &opt, out_dir, "decoder", cfg.iters)?;
    crate::train::common::write_resolved_config(&out_dir.join("train_decoder.toml"), cfg)?;
    Ok(StageReport {
        loss_trace: writer.finish()?,
        checkpoint,
    })
}

fn save_stage_checkpoint(
    bundle: &ModelBundle,
    opt: &AdamW,
    out_dir: &Path,
    stage: &str,
    iteration: usize,
) -> Result<std::path::PathBuf> {
    let path = out_dir.join(format!("{stage}.ckpt"));
    let mut meta = BTreeMap::new();
    meta.insert("stage".to_string(), stage.to_string());
    meta.insert("iteration".to_string(), iteration.to_string());
    // stash optimizer state alongside the weights so runs can resume exactly
    let mut with_state = bundle.clone();
    let mut opt_store = ParameterStore::new();
    opt.save_state(&mut opt_store);
    for (name, p) in opt_store.iter() {
        with_state
            .denoiser
            .store
            .insert(name.clone(), p.value.clone(), false);
    }
    with_state.save(&path, &meta)?;
    Ok(path)
}
