//! Report serialization: records CSV, ordered summary JSON, density-map CSV,
//! a markdown table, and an optional rendered density scatter.

use crate::error::Result;
use crate::eval_report::runner::{EvalOutput, EvalRecord, LevelSummary};
use serde_json::{json, Map, Value};
use std::io::Write;
use std::path::Path;

/// Shortest-round-trip float formatting (serde_json's), used everywhere so
/// byte output is reproducible.
fn fmt_f64(v: f64) -> String {
    serde_json::to_string(&v).expect("finite float")
}

pub fn write_records_csv(path: &Path, records: &[EvalRecord]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "sample_id,level,prompt_kind,iou,dice,pa,quality")?;
    for r in records {
        writeln!(
            f,
            "{},{},{},{},{},{},{}",
            r.sample_id,
            r.level.name(),
            r.prompt_kind.name(),
            fmt_f64(r.iou),
            fmt_f64(r.dice),
            fmt_f64(r.pa),
            fmt_f64(r.quality)
        )?;
    }
    f.flush()?;
    Ok(())
}

pub fn summary_json(output: &EvalOutput, meta: &[(String, String)]) -> Value {
    let mut meta_map = Map::new();
    for (k, v) in meta {
        meta_map.insert(k.clone(), Value::String(v.clone()));
    }
    let mut levels = Map::new();
    for s in &output.summary {
        levels.insert(
            s.level.name().to_string(),
            json!({
                "n": s.n,
                "iou": s.iou,
                "dice": s.dice,
                "pa": s.pa,
                "quality": s.quality,
            }),
        );
    }
    let mut root = Map::new();
    root.insert("meta".to_string(), Value::Object(meta_map));
    root.insert("levels".to_string(), Value::Object(levels));
    Value::Object(root)
}

pub fn write_summary_json(path: &Path, output: &EvalOutput, meta: &[(String, String)]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let value = summary_json(output, meta);
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer_pretty(&mut f, &value)?;
    f.write_all(b"\n")?;
    f.flush()?;
    Ok(())
}

pub fn write_density_csv(path: &Path, records: &[EvalRecord]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "sample_id,level,quality,iou")?;
    for r in records {
        writeln!(
            f,
            "{},{},{},{}",
            r.sample_id,
            r.level.name(),
            fmt_f64(r.quality),
            fmt_f64(r.iou)
        )?;
    }
    f.flush()?;
    Ok(())
}

pub fn write_summary_md(path: &Path, summary: &[LevelSummary]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "| Level | n | IoU | Dice | PA | Quality |")?;
    writeln!(f, "|---|---|---|---|---|---|")?;
    for s in summary {
        writeln!(
            f,
            "| {} | {} | {:.4} | {:.4} | {:.4} | {:.4} |",
            s.level.name(),
            s.n,
            s.iou,
            s.dice,
            s.pa,
            s.quality
        )?;
    }
    f.flush()?;
    Ok(())
}

/// Minimal (quality, IoU) scatter, one color per level, log-scaled x.
pub fn write_density_png(path: &Path, records: &[EvalRecord]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    const S: u32 = 480;
    const MARGIN: u32 = 40;
    let mut img = image::RgbImage::from_pixel(S, S, image::Rgb([255, 255, 255]));
    // axes
    for x in MARGIN..S - MARGIN / 2 {
        img.put_pixel(x, S - MARGIN, image::Rgb([0, 0, 0]));
    }
    for y in MARGIN / 2..=S - MARGIN {
        img.put_pixel(MARGIN, y, image::Rgb([0, 0, 0]));
    }
    let qmax = records
        .iter()
        .map(|r| r.quality)
        .fold(f64::MIN_POSITIVE, f64::max);
    let qmin = records
        .iter()
        .map(|r| r.quality.max(1e-9))
        .fold(f64::MAX, f64::min);
    let span = (qmax.ln() - qmin.ln()).max(1e-9);
    for r in records {
        let fx = ((r.quality.max(1e-9).ln() - qmin.ln()) / span).clamp(0.0, 1.0);
        let fy = r.iou.clamp(0.0, 1.0);
        let px = MARGIN + (fx * (S - MARGIN - MARGIN / 2) as f64) as u32;
        let py = S - MARGIN - (fy * (S - MARGIN - MARGIN / 2) as f64) as u32;
        let color = match r.level.name() {
            "clear" => image::Rgb([40, 120, 40]),
            "LQ1" => image::Rgb([60, 90, 200]),
            "LQ2" => image::Rgb([220, 150, 30]),
            _ => image::Rgb([200, 40, 40]),
        };
        for dy in -1i32..=1 {
            for dx in -1i32..=1 {
                let (nx, ny) = (px as i32 + dx, py as i32 + dy);
                if nx >= 0 && ny >= 0 && (nx as u32) < S && (ny as u32) < S {
                    img.put_pixel(nx as u32, ny as u32, color);
                }
            }
        }
    }
    img.save(path)?;
    Ok(())
}
