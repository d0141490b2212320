//! Two-stage fine-tuning, its losses, and the pretraining that produces the
//! frozen components the stages adapt.

mod common;
mod losses;
mod pretrain;
mod stages;

pub use common::{
    sample_batch, BatchItem, CorpusView, DecoderMode, LossTraceWriter, Stage, StageReport,
    TrainConfig,
};
pub use losses::{loss_rec, loss_rec_grad, loss_seg, loss_seg_grad, SegLossParams};
pub use pretrain::{
    corrupt_field, pretrain_denoiser_base, pretrain_seg, sample_field, PretrainConfig,
};
pub use stages::{train_stage1, train_stage2};

use crate::bundle::ModelBundle;
use crate::cre_lora::{expand_denoiser, Denoiser};
use crate::dataset::Split;
use crate::diffusion::{DiffusionSchedule, GleConfig};
use crate::error::{Error, Result};
use crate::rng::stream;
use crate::seg_model::SegModel;

/// Root-mean-square of encoder latents over up to `max_images` training
/// images. The denoiser stand-in is pretrained at gamma times this scale so
/// the alignment weight lands scaled latents in its native input range.
pub fn measure_latent_rms(seg: &SegModel, corpus: &CorpusView, max_images: usize) -> Result<f64> {
    let records = corpus.split(Split::Train);
    if records.is_empty() {
        return Err(Error::data("corpus has no training records"));
    }
    let mut sum_sq = 0.0;
    let mut count = 0usize;
    for rec in records.iter().take(max_images.max(1)) {
        let img = rec.load_hq(&corpus.root)?;
        let z = seg.encode_image(&img)?;
        sum_sq += z.data().data().iter().map(|&v| v * v).sum::<f64>();
        count += z.data().numel();
    }
    Ok((sum_sq / count as f64).sqrt())
}

/// Assemble a complete bundle from a pretrained segmentation model and a
/// narrow pretrained denoiser: expand the denoiser's head/tail to the
/// segmentation latent width and install fresh zero-delta adapters.
pub fn assemble_bundle(
    seg: SegModel,
    base_denoiser: &Denoiser,
    schedule: DiffusionSchedule,
    gle: GleConfig,
    seed: u64,
) -> Result<ModelBundle> {
    let mut denoiser = expand_denoiser(base_denoiser, seg.cfg.latent_channels)?;
    let mut rng = stream(seed, "lora-install", &[]);
    denoiser.install_lora(&mut rng)?;
    denoiser.store.freeze_all();
    denoiser.store.set_trainable_prefix("lora.", true);
    Ok(ModelBundle {
        seg,
        denoiser,
        schedule,
        gle,
    })
}
