//! Subcommand implementations.

use anyhow::{anyhow, bail, Context, Result};
use latseg_core::bundle::ModelBundle;
use latseg_core::config::RunConfig;
use latseg_core::dataset::{self, read_recipes, Split};
use latseg_core::degrade::{apply_recipe, Level};
use latseg_core::eval_report::{
    evaluate_run, EnhanceMode, EvalLevel, PromptKind,
};
use latseg_core::image_io::{load_png, quantize_u8, tensor_to_rgb8};
use latseg_core::seg_model::{PointPrompt, Prompt};
use latseg_core::train::{
    assemble_bundle, pretrain_denoiser_base, pretrain_seg, train_stage1, train_stage2, CorpusView,
};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

pub fn synth(cfg: RunConfig, out: &Path, n: Option<usize>, seed: Option<u64>) -> Result<()> {
    let mut corpus_cfg = cfg.corpus.clone();
    if let Some(n) = n {
        corpus_cfg.n = n;
    }
    if let Some(seed) = seed {
        corpus_cfg.seed = seed;
    }
    let manifest = dataset::build_synthetic_corpus(&corpus_cfg, out)
        .with_context(|| format!("building corpus in {}", out.display()))?;
    let mut resolved = cfg.clone();
    resolved.corpus = corpus_cfg;
    std::fs::write(out.join("resolved_config.toml"), resolved.to_toml()?)?;
    println!(
        "corpus: {} samples ({} train / {} val / {} test) in {}",
        manifest.records.len(),
        manifest.split(Split::Train).len(),
        manifest.split(Split::Val).len(),
        manifest.split(Split::Test).len(),
        out.display()
    );
    Ok(())
}

fn write_trace(path: &Path, trace: &[(usize, f64)]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "iteration,loss")?;
    for (it, loss) in trace {
        writeln!(f, "{it},{loss}")?;
    }
    f.flush()?;
    Ok(())
}

pub fn pretrain(cfg: RunConfig, data: &Path, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let corpus = CorpusView::load(data)
        .with_context(|| format!("loading corpus manifest from {}", data.display()))?;
    let schedule = cfg.schedule.build()?;

    println!(
        "pretraining segmentation model ({} iters)...",
        cfg.pretrain.seg_iters
    );
    let (seg, seg_trace) = pretrain_seg(&cfg.pretrain, cfg.seg, &corpus)?;
    write_trace(&out.join("pretrain_seg_loss.csv"), &seg_trace)?;

    let latent_rms = latseg_core::train::measure_latent_rms(&seg, &corpus, 16)?;
    let field_std = cfg.gle.gamma * latent_rms;
    println!(
        "pretraining base denoiser ({} iters, latent rms {:.4}, field std {:.4})...",
        cfg.pretrain.denoiser_iters, latent_rms, field_std
    );
    let field_hw = (cfg.corpus.height / 8, cfg.corpus.width / 8);
    let (base, unet_trace) =
        pretrain_denoiser_base(&cfg.pretrain, cfg.unet, &schedule, field_hw, field_std)?;
    write_trace(&out.join("pretrain_unet_loss.csv"), &unet_trace)?;

    let bundle = assemble_bundle(seg, &base, schedule, cfg.gle, cfg.pretrain.seed)?;
    let ckpt = out.join("pretrain.ckpt");
    let mut meta = BTreeMap::new();
    meta.insert("stage".to_string(), "pretrain".to_string());
    meta.insert("latent_rms".to_string(), format!("{latent_rms}"));
    bundle.save(&ckpt, &meta)?;
    std::fs::write(out.join("resolved_config.toml"), cfg.to_toml()?)?;
    println!("pretrained bundle written to {}", ckpt.display());
    Ok(())
}

fn load_bundle_checked(cfg: &RunConfig, path: &Path) -> Result<(ModelBundle, BTreeMap<String, String>)> {
    let expected = cfg.schedule.build()?;
    let (bundle, meta) = ModelBundle::load_checked(path, &expected)
        .with_context(|| format!("loading checkpoint {}", path.display()))?;
    Ok((bundle, meta))
}

pub fn train_unet(
    cfg: RunConfig,
    data: &Path,
    base: &Path,
    out: &Path,
    resume: Option<&Path>,
) -> Result<()> {
    let corpus = CorpusView::load(data)?;
    let (mut bundle, meta) = load_bundle_checked(&cfg, base)?;
    match meta.get("stage").map(String::as_str) {
        Some("pretrain") | Some("unet") => {}
        other => bail!(
            "{} is a {:?} checkpoint; train-unet needs the pretrain bundle",
            base.display(),
            other.unwrap_or("unknown")
        ),
    }
    let report = train_stage1(&cfg.train_unet, &mut bundle, &corpus, out, resume)?;
    println!(
        "unet stage finished: {} iterations, final loss {:.6}, checkpoint {}",
        report.loss_trace.len(),
        report.loss_trace.last().map(|(_, l)| *l).unwrap_or(f64::NAN),
        report.checkpoint.display()
    );
    Ok(())
}

pub fn train_decoder(
    cfg: RunConfig,
    data: &Path,
    unet_ckpt: &Path,
    out: &Path,
    resume: Option<&Path>,
) -> Result<()> {
    if !unet_ckpt.exists() {
        bail!(
            "missing prerequisite: stage-1 checkpoint {} (run train-unet first)",
            unet_ckpt.display()
        );
    }
    let corpus = CorpusView::load(data)?;
    let (mut bundle, meta) = load_bundle_checked(&cfg, unet_ckpt)?;
    if meta.get("stage").map(String::as_str) != Some("unet") {
        bail!(
            "{} is not a stage-1 (unet) checkpoint; train-decoder requires one",
            unet_ckpt.display()
        );
    }
    let report = train_stage2(&cfg.train_decoder, &mut bundle, &corpus, out, resume)?;
    println!(
        "decoder stage finished: {} iterations, final loss {:.6}, checkpoint {}",
        report.loss_trace.len(),
        report.loss_trace.last().map(|(_, l)| *l).unwrap_or(f64::NAN),
        report.checkpoint.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn eval(
    cfg: RunConfig,
    ckpt: &Path,
    data: &Path,
    out: &Path,
    no_gle: bool,
    levels: Option<&str>,
    prompt: Option<&str>,
    split: Option<&str>,
    seed: Option<u64>,
    density_png: bool,
) -> Result<()> {
    let corpus = CorpusView::load(data)?;
    let (bundle, _) = load_bundle_checked(&cfg, ckpt)?;

    let split = match split {
        Some("train") => Split::Train,
        Some("val") => Split::Val,
        Some("test") | None => Split::Test,
        Some(other) => bail!("unknown split {other}"),
    };
    let enhance = if no_gle { EnhanceMode::Off } else { EnhanceMode::Gle };
    let mut opts = cfg.eval.to_options(enhance, split);
    if let Some(levels) = levels {
        opts.levels = levels
            .split(',')
            .map(|s| EvalLevel::parse(s.trim()))
            .collect::<latseg_core::error::Result<Vec<_>>>()?;
    }
    if let Some(p) = prompt {
        opts.prompt = PromptKind::parse(p)?;
    }
    if let Some(s) = seed {
        opts.seed = s;
    }

    let output = evaluate_run(&bundle, &corpus.manifest, &corpus.root, &opts)?;

    std::fs::create_dir_all(out)?;
    latseg_core::eval_report::write_records_csv(&out.join("records.csv"), &output.records)?;
    latseg_core::eval_report::write_density_csv(&out.join("density.csv"), &output.records)?;
    latseg_core::eval_report::write_summary_md(&out.join("summary.md"), &output.summary)?;
    let meta = vec![
        ("checkpoint".to_string(), ckpt.display().to_string()),
        ("split".to_string(), split.name().to_string()),
        ("prompt".to_string(), opts.prompt.name().to_string()),
        ("enhance".to_string(), opts.enhance.name().to_string()),
        ("seed".to_string(), opts.seed.to_string()),
    ];
    latseg_core::eval_report::write_summary_json(&out.join("summary.json"), &output, &meta)?;
    if density_png || cfg.eval.density_png {
        latseg_core::eval_report::write_density_png(&out.join("density.png"), &output.records)?;
    }
    std::fs::write(out.join("resolved_config.toml"), cfg.to_toml()?)?;

    for s in &output.summary {
        println!(
            "{:>5}: n={:<4} IoU {:.4}  Dice {:.4}  PA {:.4}  quality {:.4}",
            s.level.name(),
            s.n,
            s.iou,
            s.dice,
            s.pa,
            s.quality
        );
    }
    println!("reports written to {}", out.display());
    Ok(())
}

fn parse_floats(s: &str, n: usize) -> Result<Vec<f64>> {
    let vals: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| anyhow!("bad coordinate list `{s}`: {e}"))?;
    if vals.len() != n {
        bail!("expected {n} comma-separated numbers, got {}", vals.len());
    }
    Ok(vals)
}

pub fn enhance(
    cfg: RunConfig,
    ckpt: &Path,
    image: &Path,
    points: &[String],
    box_prompt: Option<&str>,
    out: &Path,
    no_gle: bool,
) -> Result<()> {
    let (bundle, _) = load_bundle_checked(&cfg, ckpt)?;
    let img = load_png(image)?;
    let (h, w) = (img.shape()[1], img.shape()[2]);

    let prompt = if let Some(b) = box_prompt {
        let v = parse_floats(b, 4)?;
        Prompt::Box {
            r0: v[0],
            c0: v[1],
            r1: v[2],
            c1: v[3],
        }
    } else if !points.is_empty() {
        let mut pts = Vec::new();
        for p in points {
            let v = parse_floats(p, 2)?;
            pts.push(PointPrompt {
                row: v[0],
                col: v[1],
                positive: true,
            });
        }
        Prompt::Points { points: pts }
    } else {
        // default to a single click at the image center
        Prompt::Points {
            points: vec![PointPrompt {
                row: (h / 2) as f64,
                col: (w / 2) as f64,
                positive: true,
            }],
        }
    };

    let z = bundle.seg.encode_image(&img)?;
    let z = if no_gle { z } else { bundle.enhance(&z)? };
    let emb = bundle.seg.encode_prompt(&prompt, (h, w))?;
    let logits = bundle.seg.decode_mask(&z, &emb)?;

    std::fs::create_dir_all(out)?;
    // latent as raw little-endian f64 plus a shape sidecar
    let mut latent_bytes = Vec::with_capacity(z.data().numel() * 8);
    for v in z.data().data() {
        latent_bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(out.join("latent.bin"), latent_bytes)?;
    std::fs::write(
        out.join("latent.json"),
        serde_json::to_string_pretty(&serde_json::json!({
            "shape": z.data().shape(),
            "dtype": "f64",
            "enhanced": !no_gle,
        }))?,
    )?;

    let mask: Vec<bool> = logits.binary(0.5);
    let mask_img = latseg_core::mask::BitMask::new(h, w, mask)?;
    latseg_core::image_io::save_mask_png(&out.join("mask.png"), &mask_img)?;

    // red-tinted overlay
    let mut overlay = tensor_to_rgb8(&img);
    for y in 0..h {
        for x in 0..w {
            if mask_img.get(y, x) {
                let p = overlay.get_pixel_mut(x as u32, y as u32);
                p.0[0] = quantize_u8(p.0[0] as f64 / 255.0 * 0.5 + 0.5);
                p.0[1] = (p.0[1] as f64 * 0.6) as u8;
                p.0[2] = (p.0[2] as f64 * 0.6) as u8;
            }
        }
    }
    overlay.save(out.join("overlay.png"))?;
    println!(
        "enhanced latent, mask, and overlay written to {}",
        out.display()
    );
    Ok(())
}

pub fn replay(data: &Path, only_id: Option<&str>) -> Result<()> {
    let corpus = CorpusView::load(data)?;
    let mut checked = 0usize;
    let mut failures = Vec::new();
    for split in [Split::Train, Split::Val, Split::Test] {
        let records = corpus.split(split);
        if records.is_empty() {
            continue;
        }
        let recipes = read_recipes(&corpus.root.join(format!("recipes_{}.jsonl", split.name())))?;
        for rec in records {
            if let Some(id) = only_id {
                if rec.id != id {
                    continue;
                }
            }
            let hq = rec.load_hq(&corpus.root)?;
            for level in Level::ALL {
                let line = recipes
                    .iter()
                    .find(|l| l.id == rec.id && l.level == level)
                    .ok_or_else(|| anyhow!("no recipe for {} {}", rec.id, level.name()))?;
                let replayed = apply_recipe(&hq, &line.recipe)?;
                let stored = rec.load_lq(&corpus.root, level)?;
                let replay_px = tensor_to_rgb8(&replayed);
                let stored_px = tensor_to_rgb8(&stored);
                if replay_px.as_raw() != stored_px.as_raw() {
                    failures.push(format!("{} {}", rec.id, level.name()));
                }
                checked += 1;
            }
        }
    }
    if checked == 0 {
        bail!("no samples matched");
    }
    if failures.is_empty() {
        println!("replay verified: {checked} degraded images reproduced bit-exactly");
        Ok(())
    } else {
        bail!("replay mismatches: {}", failures.join(", "));
    }
}
