//! Per-image evaluation over a manifest split: encode, optionally enhance,
//! decode with a sampled prompt, score against the ground truth, and
//! aggregate per-level means.

use crate::bundle::ModelBundle;
use crate::dataset::{
    gt_box_prompt, noise_box_prompt, sample_point_prompt, Manifest, SampleRecord, Split,
};
use crate::degrade::Level;
use crate::error::{Error, Result};
use crate::eval_report::metrics::{dice, iou, pixel_accuracy};
use crate::eval_report::quality::quality_score;
use crate::mask::BitMask;
use crate::rng::derive_seed;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EvalLevel {
    #[serde(rename = "clear")]
    Clear,
    #[serde(rename = "LQ1")]
    Lq1,
    #[serde(rename = "LQ2")]
    Lq2,
    #[serde(rename = "LQ3")]
    Lq3,
}

impl EvalLevel {
    pub const ALL: [EvalLevel; 4] = [
        EvalLevel::Clear,
        EvalLevel::Lq1,
        EvalLevel::Lq2,
        EvalLevel::Lq3,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EvalLevel::Clear => "clear",
            EvalLevel::Lq1 => "LQ1",
            EvalLevel::Lq2 => "LQ2",
            EvalLevel::Lq3 => "LQ3",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "clear" => Ok(EvalLevel::Clear),
            "lq1" => Ok(EvalLevel::Lq1),
            "lq2" => Ok(EvalLevel::Lq2),
            "lq3" => Ok(EvalLevel::Lq3),
            other => Err(Error::parameter(format!("unknown eval level {other}"))),
        }
    }

    pub fn as_degradation(self) -> Option<Level> {
        match self {
            EvalLevel::Clear => None,
            EvalLevel::Lq1 => Some(Level::Lq1),
            EvalLevel::Lq2 => Some(Level::Lq2),
            EvalLevel::Lq3 => Some(Level::Lq3),
        }
    }

    fn lane(self) -> u64 {
        match self {
            EvalLevel::Clear => 0,
            EvalLevel::Lq1 => 1,
            EvalLevel::Lq2 => 2,
            EvalLevel::Lq3 => 3,
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    Points,
    GtBox,
    NoiseBox,
}

impl PromptKind {
    pub fn name(self) -> &'static str {
        match self {
            PromptKind::Points => "points",
            PromptKind::GtBox => "gt_box",
            PromptKind::NoiseBox => "noise_box",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "points" | "point" => Ok(PromptKind::Points),
            "gt_box" | "box" => Ok(PromptKind::GtBox),
            "noise_box" => Ok(PromptKind::NoiseBox),
            other => Err(Error::parameter(format!("unknown prompt kind {other}"))),
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnhanceMode {
    /// Full one-step latent enhancement.
    Gle,
    /// Pass the latent through untouched (plumbing check arm).
    Identity,
    /// Baseline: decode the raw latent.
    Off,
}

impl EnhanceMode {
    pub fn name(self) -> &'static str {
        match self {
            EnhanceMode::Gle => "gle",
            EnhanceMode::Identity => "identity",
            EnhanceMode::Off => "off",
        }
    }
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub levels: Vec<EvalLevel>,
    pub prompt: PromptKind,
    pub enhance: EnhanceMode,
    pub seed: u64,
    pub points_per_prompt: usize,
    pub box_noise: f64,
    pub threshold: f64,
    pub split: Split,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            levels: EvalLevel::ALL.to_vec(),
            prompt: PromptKind::Points,
            enhance: EnhanceMode::Gle,
            seed: 0,
            points_per_prompt: crate::dataset::DEFAULT_POINTS,
            box_noise: crate::dataset::DEFAULT_BOX_NOISE,
            threshold: 0.5,
            split: Split::Test,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalRecord {
    pub sample_id: String,
    pub level: EvalLevel,
    pub prompt_kind: PromptKind,
    pub iou: f64,
    pub dice: f64,
    pub pa: f64,
    pub quality: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LevelSummary {
    pub level: EvalLevel,
    pub n: usize,
    pub iou: f64,
    pub dice: f64,
    pub pa: f64,
    pub quality: f64,
}

#[derive(Clone, Debug)]
pub struct EvalOutput {
    pub records: Vec<EvalRecord>,
    pub summary: Vec<LevelSummary>,
}

fn eval_one(
    bundle: &ModelBundle,
    root: &Path,
    rec: &SampleRecord,
    level: EvalLevel,
    opts: &EvalOptions,
) -> Result<EvalRecord> {
    let img = match level.as_degradation() {
        None => rec.load_hq(root)?,
        Some(l) => rec.load_lq(root, l)?,
    };
    let gt = rec.load_mask(root)?;
    let quality = quality_score(&img);

    let z = bundle.seg.encode_image(&img)?;
    let z = match opts.enhance {
        EnhanceMode::Off | EnhanceMode::Identity => z,
        EnhanceMode::Gle => bundle.enhance(&z)?,
    };

    let prompt_seed = derive_seed(opts.seed, &rec.id, &[level.lane()]);
    let prompt = match opts.prompt {
        PromptKind::Points => sample_point_prompt(&gt, opts.points_per_prompt, prompt_seed)?,
        PromptKind::GtBox => gt_box_prompt(&gt)?,
        PromptKind::NoiseBox => noise_box_prompt(&gt, opts.box_noise, prompt_seed)?,
    };
    let emb = bundle
        .seg
        .encode_prompt(&prompt, (img.shape()[1], img.shape()[2]))?;
    let logits = bundle.seg.decode_mask(&z, &emb)?;
    let pred = BitMask::new(
        gt.height,
        gt.width,
        logits.binary(opts.threshold),
    )?;

    Ok(EvalRecord {
        sample_id: rec.id.clone(),
        level,
        prompt_kind: opts.prompt,
        iou: iou(&pred, &gt)?,
        dice: dice(&pred, &gt)?,
        pa: pixel_accuracy(&pred, &gt)?,
        quality,
    })
}

/// Evaluate every (sample, level) pair in the chosen split. Records come
/// back in manifest x level order regardless of worker scheduling.
pub fn evaluate_run(
    bundle: &ModelBundle,
    manifest: &Manifest,
    root: &Path,
    opts: &EvalOptions,
) -> Result<EvalOutput> {
    if opts.levels.is_empty() {
        return Err(Error::parameter("no evaluation levels requested"));
    }
    let records: Vec<&SampleRecord> = manifest.split(opts.split);
    if records.is_empty() {
        return Err(Error::data(format!(
            "manifest has no {} records",
            opts.split.name()
        )));
    }
    let jobs: Vec<(usize, EvalLevel)> = records
        .iter()
        .enumerate()
        .flat_map(|(i, _)| opts.levels.iter().map(move |&l| (i, l)))
        .collect();
    let results: Vec<Result<EvalRecord>> = jobs
        .par_iter()
        .map(|&(i, level)| eval_one(bundle, root, records[i], level, opts))
        .collect();
    let mut out = Vec::with_capacity(results.len());
    for r in results {
        out.push(r?);
    }
    let summary = summarize(&out, &opts.levels);
    Ok(EvalOutput {
        records: out,
        summary,
    })
}

/// Per-level means in canonical clear -> LQ3 order.
pub fn summarize(records: &[EvalRecord], levels: &[EvalLevel]) -> Vec<LevelSummary> {
    let mut out = Vec::new();
    for &level in EvalLevel::ALL.iter().filter(|l| levels.contains(l)) {
        let rows: Vec<&EvalRecord> = records.iter().filter(|r| r.level == level).collect();
        if rows.is_empty() {
            continue;
        }
        let n = rows.len() as f64;
        out.push(LevelSummary {
            level,
            n: rows.len(),
            iou: rows.iter().map(|r| r.iou).sum::<f64>() / n,
            dice: rows.iter().map(|r| r.dice).sum::<f64>() / n,
            pa: rows.iter().map(|r| r.pa).sum::<f64>() / n,
            quality: rows.iter().map(|r| r.quality).sum::<f64>() / n,
        });
    }
    out
}
