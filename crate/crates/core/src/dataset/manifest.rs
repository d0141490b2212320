//! Corpus manifest: one JSON line per sample, with paths relative to the
//! corpus root, plus a per-split recipe ledger for the degraded variants.

use crate::degrade::{degrade_image, DegradationRecipe, Level};
use crate::error::{Error, Result};
use crate::image_io::{load_mask_png, load_png, quantize_round_trip, save_mask_png, save_png};
use crate::mask::BitMask;
use crate::rng::{derive_seed, stream_from};
use crate::tensor::Tensor;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub split: Split,
    pub hq_path: String,
    pub lq_paths: BTreeMap<String, String>,
    pub mask_path: String,
    pub recipe_path: String,
}

impl SampleRecord {
    pub fn load_hq(&self, root: &Path) -> Result<Tensor> {
        load_png(&root.join(&self.hq_path))
    }

    pub fn load_lq(&self, root: &Path, level: Level) -> Result<Tensor> {
        let rel = self.lq_paths.get(level.name()).ok_or_else(|| {
            Error::data(format!("sample {} has no {} variant", self.id, level.name()))
        })?;
        load_png(&root.join(rel))
    }

    pub fn load_mask(&self, root: &Path) -> Result<BitMask> {
        load_mask_png(&root.join(&self.mask_path))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RecipeLine {
    pub id: String,
    pub level: Level,
    pub recipe: DegradationRecipe,
}

#[derive(Clone, Debug, Default)]
pub struct Manifest {
    pub records: Vec<SampleRecord>,
}

impl Manifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for rec in &self.records {
            serde_json::to_writer(&mut f, rec)?;
            f.write_all(b"\n")?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut records = Vec::new();
        for line in f.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(&line)?);
        }
        Ok(Manifest { records })
    }

    pub fn split(&self, split: Split) -> Vec<&SampleRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    /// Pairing integrity: every referenced file exists, HQ/LQ/mask dimensions
    /// agree, masks are binary by construction of the PNG format.
    pub fn verify(&self, root: &Path) -> Result<()> {
        for rec in &self.records {
            let hq = rec.load_hq(root)?;
            let mask = rec.load_mask(root)?;
            if (mask.height, mask.width) != (hq.shape()[1], hq.shape()[2]) {
                return Err(Error::data(format!(
                    "sample {}: mask {}x{} vs image {}x{}",
                    rec.id, mask.height, mask.width, hq.shape()[1], hq.shape()[2]
                )));
            }
            for level in Level::ALL {
                let lq = rec.load_lq(root, level)?;
                if lq.shape() != hq.shape() {
                    return Err(Error::data(format!(
                        "sample {}: {} shape {:?} vs hq {:?}",
                        rec.id,
                        level.name(),
                        lq.shape(),
                        hq.shape()
                    )));
                }
            }
        }
        Ok(())
    }
}

pub fn write_recipes(path: &Path, lines: &[RecipeLine]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for line in lines {
        serde_json::to_writer(&mut f, line)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_recipes(path: &Path) -> Result<Vec<RecipeLine>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub n: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    pub train_frac: f64,
    pub val_frac: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            n: 640,
            height: 64,
            width: 64,
            seed: 0,
            train_frac: 0.8,
            val_frac: 0.1,
        }
    }
}

impl CorpusConfig {
    fn split_for(&self, idx: usize) -> Split {
        let n_train = (self.n as f64 * self.train_frac).round() as usize;
        let n_val = (self.n as f64 * self.val_frac).round() as usize;
        if idx < n_train {
            Split::Train
        } else if idx < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        }
    }
}

/// Render `n` samples, degrade each at all three levels, write images, masks,
/// per-split recipe ledgers, and the manifest. Fully deterministic in
/// (config, seed); image synthesis is parallel per sample.
pub fn build_synthetic_corpus(cfg: &CorpusConfig, out_dir: &Path) -> Result<Manifest> {
    if cfg.n < 1 {
        return Err(Error::parameter("corpus needs at least one image"));
    }
    std::fs::create_dir_all(out_dir)?;

    let results: Vec<Result<(SampleRecord, Vec<RecipeLine>)>> = (0..cfg.n)
        .into_par_iter()
        .map(|idx| build_one(cfg, out_dir, idx))
        .collect();

    let mut records = Vec::with_capacity(cfg.n);
    let mut recipes: BTreeMap<Split, Vec<RecipeLine>> = BTreeMap::new();
    for res in results {
        let (rec, lines) = res?;
        recipes.entry(rec.split).or_default().extend(lines);
        records.push(rec);
    }
    for (split, lines) in &recipes {
        write_recipes(&out_dir.join(format!("recipes_{}.jsonl", split.name())), lines)?;
    }
    let manifest = Manifest { records };
    manifest.write(&out_dir.join("manifest.jsonl"))?;
    Ok(manifest)
}

fn build_one(cfg: &CorpusConfig, out_dir: &Path, idx: usize) -> Result<(SampleRecord, Vec<RecipeLine>)> {
    let id = format!("img_{idx:05}");
    let split = cfg.split_for(idx);
    let mut rng = stream_from(derive_seed(cfg.seed, "synth", &[idx as u64]));
    let (rendered, mask) = super::synth::render_sample(cfg.height, cfg.width, &mut rng);
    // pin the pipeline input to the 8-bit image that lands on disk
    let hq = quantize_round_trip(&rendered);

    let hq_rel = format!("hq/{id}.png");
    let mask_rel = format!("masks/{id}.png");
    save_png(&out_dir.join(&hq_rel), &hq)?;
    save_mask_png(&out_dir.join(&mask_rel), &mask)?;

    let mut lq_paths = BTreeMap::new();
    let mut lines = Vec::with_capacity(3);
    for level in Level::ALL {
        let seed = derive_seed(cfg.seed, "degrade", &[idx as u64, level.factor() as u64]);
        let (lq, recipe) = degrade_image(&hq, level, seed)?;
        let rel = format!("{}/{id}.png", level.name().to_lowercase());
        save_png(&out_dir.join(&rel), &lq)?;
        lq_paths.insert(level.name().to_string(), rel);
        lines.push(RecipeLine {
            id: id.clone(),
            level,
            recipe,
        });
    }

    Ok((
        SampleRecord {
            id,
            split,
            hq_path: hq_rel,
            lq_paths,
            mask_path: mask_rel,
            recipe_path: format!("recipes_{}.jsonl", split.name()),
        },
        lines,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> CorpusConfig {
        CorpusConfig {
            n: 10,
            height: 32,
            width: 32,
            seed: 11,
            ..CorpusConfig::default()
        }
    }

    #[test]
    fn corpus_builds_verifies_and_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = build_synthetic_corpus(&tiny_cfg(), dir.path()).unwrap();
        assert_eq!(manifest.records.len(), 10);
        assert_eq!(manifest.split(Split::Train).len(), 8);
        assert_eq!(manifest.split(Split::Val).len(), 1);
        assert_eq!(manifest.split(Split::Test).len(), 1);
        manifest.verify(dir.path()).unwrap();

        let back = Manifest::read(&dir.path().join("manifest.jsonl")).unwrap();
        assert_eq!(back.records, manifest.records);

        let recipes = read_recipes(&dir.path().join("recipes_train.jsonl")).unwrap();
        assert_eq!(recipes.len(), 8 * 3);
    }

    #[test]
    fn same_seed_identical_tree() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        build_synthetic_corpus(&tiny_cfg(), d1.path()).unwrap();
        build_synthetic_corpus(&tiny_cfg(), d2.path()).unwrap();
        let mut paths: Vec<_> = walk(d1.path());
        paths.sort();
        assert!(!paths.is_empty());
        for rel in paths {
            let a = std::fs::read(d1.path().join(&rel)).unwrap();
            let b = std::fs::read(d2.path().join(&rel)).unwrap();
            assert_eq!(a, b, "{rel} differs");
        }
    }

    fn walk(root: &Path) -> Vec<String> {
        let mut out = Vec::new();
        let mut stack = vec![root.to_path_buf()];
        while let Some(dir) = stack.pop() {
            for entry in std::fs::read_dir(&dir).unwrap() {
                let entry = entry.unwrap();
                let p = entry.path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    out.push(p.strip_prefix(root).unwrap().to_string_lossy().into_owned());
                }
            }
        }
        out
    }
}
