//! Shared training plumbing: config, corpus access, batch sampling, loss
//! traces, and checkpoint cadence.

use crate::dataset::{Manifest, SampleRecord, Split};
use crate::degrade::Level;
use crate::error::{Error, Result};
use crate::rng::stream;
use crate::seg_model::TrainabilityMode;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Unet,
    Decoder,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderMode {
    DecoderOnly,
    MaskTokenOnly,
}

impl DecoderMode {
    pub fn trainability(self) -> TrainabilityMode {
        match self {
            DecoderMode::DecoderOnly => TrainabilityMode::DecoderOnly,
            DecoderMode::MaskTokenOnly => TrainabilityMode::MaskTokenOnly,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: Stage,
    pub lr: f64,
    pub batch_size: usize,
    pub iters: usize,
    pub seed: u64,
    /// Alignment weight and timestep the enhancement trains against.
    pub gamma: f64,
    pub timestep: usize,
    pub decoder_mode: DecoderMode,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub dice_smooth: f64,
    pub weight_decay: f64,
    /// 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
    /// Degradation levels mixed uniformly into batches.
    pub levels: Vec<Level>,
}

impl TrainConfig {
    pub fn stage_defaults(stage: Stage) -> Self {
        TrainConfig {
            stage,
            lr: 1e-4,
            batch_size: 4,
            iters: match stage {
                Stage::Unet => 2000,
                Stage::Decoder => 500,
            },
            seed: 0,
            gamma: 5.0,
            timestep: 1000,
            decoder_mode: DecoderMode::DecoderOnly,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            dice_smooth: 1.0,
            weight_decay: 0.01,
            checkpoint_every: 0,
            levels: Level::ALL.to_vec(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        // lr == 0 is allowed as a no-op diagnostic run
        if !(self.lr >= 0.0) {
            return Err(Error::parameter("learning rate must be non-negative"));
        }
        if self.iters < 1 {
            return Err(Error::parameter("iteration count must be at least 1"));
        }
        if self.batch_size < 1 {
            return Err(Error::parameter("batch size must be at least 1"));
        }
        if self.levels.is_empty() {
            return Err(Error::parameter("training needs at least one level"));
        }
        Ok(())
    }
}

/// A manifest bound to its corpus root.
#[derive(Clone, Debug)]
pub struct CorpusView {
    pub manifest: Manifest,
    pub root: PathBuf,
}

impl CorpusView {
    pub fn load(root: &Path) -> Result<Self> {
        let manifest = Manifest::read(&root.join("manifest.jsonl"))?;
        Ok(CorpusView {
            manifest,
            root: root.to_path_buf(),
        })
    }

    pub fn split(&self, split: Split) -> Vec<&SampleRecord> {
        self.manifest.split(split)
    }
}

/// One training example reference: record index plus the degradation level
/// its low-quality view comes from.
#[derive(Clone, Debug)]
pub struct BatchItem {
    pub record_index: usize,
    pub level: Level,
}

/// Batch composition is a pure function of (seed, iteration).
pub fn sample_batch(
    n_records: usize,
    levels: &[Level],
    batch_size: usize,
    seed: u64,
    iteration: usize,
) -> Vec<BatchItem> {
    let mut rng = stream(seed, "batch", &[iteration as u64]);
    (0..batch_size)
        .map(|_| BatchItem {
            record_index: rng.gen_range(0..n_records),
            level: levels[rng.gen_range(0..levels.len())],
        })
        .collect()
}

/// Appends `iteration,loss,lr,wall_time` rows.
pub struct LossTraceWriter {
    file: std::io::BufWriter<std::fs::File>,
    start: std::time::Instant,
    pub trace: Vec<(usize, f64)>,
}

impl LossTraceWriter {
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(file, "iteration,loss,lr,wall_time")?;
        Ok(LossTraceWriter {
            file,
            start: std::time::Instant::now(),
            trace: Vec::new(),
        })
    }

    pub fn log(&mut self, iteration: usize, loss: f64, lr: f64) -> Result<()> {
        writeln!(
            self.file,
            "{iteration},{loss},{lr},{:.3}",
            self.start.elapsed().as_secs_f64()
        )?;
        self.trace.push((iteration, loss));
        Ok(())
    }

    pub fn finish(mut self) -> Result<Vec<(usize, f64)>> {
        self.file.flush()?;
        Ok(self.trace)
    }
}

/// Write the fully resolved config next to a checkpoint.
pub fn write_resolved_config<T: Serialize>(path: &Path, cfg: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let text = toml::to_string_pretty(cfg)
        .map_err(|e| Error::Parameter(format!("config serialization: {e}")))?;
    std::fs::write(path, text)?;
    Ok(())
}

#[derive(Clone, Debug)]
pub struct StageReport {
    pub loss_trace: Vec<(usize, f64)>,
    pub checkpoint: PathBuf,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_are_deterministic() {
        let a = sample_batch(100, &Level::ALL, 4, 7, 13);
        let b = sample_batch(100, &Level::ALL, 4, 7, 13);
        assert_eq!(a.len(), 4);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.record_index, y.record_index);
            assert_eq!(x.level, y.level);
        }
        let c = sample_batch(100, &Level::ALL, 4, 7, 14);
        assert!(a
            .iter()
            .zip(&c)
            .any(|(x, y)| x.record_index != y.record_index || x.level != y.level));
    }
}
