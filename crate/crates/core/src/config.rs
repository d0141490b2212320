//! Run configuration: one TOML file covering every subsystem, merged over
//! built-in defaults, with dotted-key overrides on top
//! (precedence: override > file > default).

use crate::cre_lora::UNetConfig;
use crate::dataset::CorpusConfig;
use crate::diffusion::{GleConfig, ScheduleKind};
use crate::error::{Error, Result};
use crate::eval_report::{EnhanceMode, EvalLevel, EvalOptions, PromptKind};
use crate::seg_model::SegConfig;
use crate::train::{PretrainConfig, Stage, TrainConfig};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub t_max: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub kind: ScheduleKind,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            t_max: 1000,
            beta_start: 8.5e-4,
            beta_end: 1.2e-2,
            kind: ScheduleKind::ScaledLinear,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<crate::diffusion::DiffusionSchedule> {
        crate::diffusion::build_schedule(self.t_max, self.beta_start, self.beta_end, self.kind)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalConfig {
    pub levels: Vec<EvalLevel>,
    pub prompt: PromptKind,
    pub seed: u64,
    pub points_per_prompt: usize,
    pub box_noise: f64,
    pub threshold: f64,
    pub density_png: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            levels: EvalLevel::ALL.to_vec(),
            prompt: PromptKind::Points,
            seed: 0,
            points_per_prompt: 3,
            box_noise: 0.2,
            threshold: 0.5,
            density_png: false,
        }
    }
}

impl EvalConfig {
    pub fn to_options(&self, enhance: EnhanceMode, split: crate::dataset::Split) -> EvalOptions {
        EvalOptions {
            levels: self.levels.clone(),
            prompt: self.prompt,
            enhance,
            seed: self.seed,
            points_per_prompt: self.points_per_prompt,
            box_noise: self.box_noise,
            threshold: self.threshold,
            split,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker cap for parallel sections; 0 uses the runtime default.
    pub jobs: usize,
    pub schedule: ScheduleConfig,
    pub gle: GleConfig,
    pub seg: SegConfig,
    /// The narrow pretrained denoiser; its head/tail are expanded to the
    /// segmentation latent width at assembly.
    pub unet: UNetConfig,
    pub corpus: CorpusConfig,
    pub pretrain: PretrainConfig,
    pub train_unet: TrainConfig,
    pub train_decoder: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            jobs: 0,
            schedule: ScheduleConfig::default(),
            gle: GleConfig::default(),
            seg: SegConfig::default(),
            unet: UNetConfig {
                channels: 4,
                ..UNetConfig::default()
            },
            corpus: CorpusConfig::default(),
            pretrain: PretrainConfig::default(),
            train_unet: TrainConfig::stage_defaults(Stage::Unet),
            train_decoder: TrainConfig::stage_defaults(Stage::Decoder),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    /// Load from an optional file and apply `key.path=value` overrides.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut base = toml::Value::try_from(RunConfig::default())
            .map_err(|e| Error::Parameter(format!("default config: {e}")))?;
        if let Some(p) = path {
            let text = std::fs::read_to_string(p)?;
            let user: toml::Value = toml::from_str(&text)
                .map_err(|e| Error::Parameter(format!("{}: {e}", p.display())))?;
            deep_merge(&mut base, user);
        }
        for (key, value) in overrides {
            apply_override(&mut base, key, value)?;
        }
        base.try_into()
            .map_err(|e| Error::Parameter(format!("config: {e}")))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Parameter(format!("config: {e}")))
    }
}

fn deep_merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(bv) => deep_merge(bv, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

fn apply_override(root: &mut toml::Value, key: &str, raw: &str) -> Result<()> {
    // parse the value through the TOML grammar; fall back to a plain string
    let parsed: toml::Value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(t) => t["v"].clone(),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let table = cur
            .as_table_mut()
            .ok_or_else(|| Error::parameter(format!("override {key}: {part} is not a table")))?;
        if i + 1 == parts.len() {
            table.insert(part.to_string(), parsed);
            return Ok(());
        }
        cur = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    unreachable!()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_survive_round_trip() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.schedule.t_max, 1000);
        assert_eq!(cfg.gle.gamma, 5.0);
        assert_eq!(cfg.train_unet.iters, 2000);
        assert_eq!(cfg.train_decoder.iters, 500);
        let text = cfg.to_toml().unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back.corpus.n, cfg.corpus.n);
    }

    #[test]
    fn file_and_overrides_precedence() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "seed = 9\n[gle]\ngamma = 3.0\n").unwrap();
        let cfg = RunConfig::load(
            Some(&path),
            &[
                ("gle.gamma".to_string(), "7.5".to_string()),
                ("corpus.n".to_string(), "32".to_string()),
            ],
        )
        .unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.gle.gamma, 7.5);
        assert_eq!(cfg.corpus.n, 32);
        // untouched sections keep defaults
        assert_eq!(cfg.schedule.t_max, 1000);
    }

    #[test]
    fn bad_override_path_rejected() {
        assert!(RunConfig::load(None, &[("seed.x".to_string(), "1".to_string())]).is_err());
    }
}
