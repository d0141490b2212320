//! A complete model bundle: segmentation model, denoiser (base plus
//! adapters), noise schedule, and enhancement config, saved as one archive.
//! The archive embeds the realized schedule tables and their fingerprint;
//! loading verifies the fingerprint so a silently drifted table cannot be
//! evaluated.

use crate::checkpoint;
use crate::cre_lora::{Denoiser, UNetConfig};
use crate::diffusion::{gle_enhance, DiffusionSchedule, GleConfig, LatentFeature};
use crate::error::{Error, Result};
use crate::params::ParameterStore;
use crate::seg_model::{SegConfig, SegModel};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Clone, Debug)]
pub struct ModelBundle {
    pub seg: SegModel,
    pub denoiser: Denoiser,
    pub schedule: DiffusionSchedule,
    pub gle: GleConfig,
}

impl ModelBundle {
    pub fn enhance(&self, z_l: &LatentFeature) -> Result<LatentFeature> {
        gle_enhance(z_l, &self.denoiser, &self.gle, &self.schedule)
    }

    pub fn save(&self, path: &Path, extra_meta: &BTreeMap<String, String>) -> Result<()> {
        let mut store = ParameterStore::new();
        for (name, p) in self.seg.store.iter() {
            store.insert(name.clone(), p.value.clone(), p.trainable);
        }
        for (name, p) in self.denoiser.store.iter() {
            store.insert(name.clone(), p.value.clone(), p.trainable);
        }
        self.schedule.write_to_store(&mut store);

        let mut meta = extra_meta.clone();
        meta.insert("seg_config".into(), serde_json::to_string(&self.seg.cfg)?);
        meta.insert("unet_config".into(), serde_json::to_string(&self.denoiser.cfg)?);
        meta.insert("gle_config".into(), serde_json::to_string(&self.gle)?);
        checkpoint::save(path, &store, &self.schedule.fingerprint(), &meta)
    }

    pub fn load(path: &Path) -> Result<(Self, BTreeMap<String, String>)> {
        let loaded = checkpoint::load(path)?;
        let schedule = DiffusionSchedule::from_store(&loaded.store)?;
        if schedule.fingerprint() != loaded.schedule_fingerprint {
            return Err(Error::Checkpoint(format!(
                "schedule fingerprint mismatch in {}: manifest {} vs realized {}",
                path.display(),
                loaded.schedule_fingerprint,
                schedule.fingerprint()
            )));
        }
        let meta = loaded.meta;
        let seg_cfg: SegConfig = serde_json::from_str(
            meta.get("seg_config")
                .ok_or_else(|| Error::Checkpoint("missing seg_config".into()))?,
        )?;
        let unet_cfg: UNetConfig = serde_json::from_str(
            meta.get("unet_config")
                .ok_or_else(|| Error::Checkpoint("missing unet_config".into()))?,
        )?;
        let gle: GleConfig = serde_json::from_str(
            meta.get("gle_config")
                .ok_or_else(|| Error::Checkpoint("missing gle_config".into()))?,
        )?;

        let mut seg_store = ParameterStore::new();
        let mut unet_store = ParameterStore::new();
        for (name, p) in loaded.store.iter() {
            if name.starts_with("seg.") {
                seg_store.insert(name.clone(), p.value.clone(), p.trainable);
            } else if name.starts_with("unet.") || name.starts_with("lora.") {
                unet_store.insert(name.clone(), p.value.clone(), p.trainable);
            }
        }
        Ok((
            ModelBundle {
                seg: SegModel {
                    cfg: seg_cfg,
                    store: seg_store,
                },
                denoiser: Denoiser {
                    cfg: unet_cfg,
                    store: unet_store,
                },
                schedule,
                gle,
            },
            meta,
        ))
    }

    /// Load and require the archive's schedule to match `expected` exactly.
    pub fn load_checked(path: &Path, expected: &DiffusionSchedule) -> Result<(Self, BTreeMap<String, String>)> {
        let (bundle, meta) = Self::load(path)?;
        if bundle.schedule.fingerprint() != expected.fingerprint() {
            return Err(Error::Checkpoint(format!(
                "checkpoint {} was produced with a different noise schedule (fingerprint {} vs configured {})",
                path.display(),
                bundle.schedule.fingerprint(),
                expected.fingerprint()
            )));
        }
        Ok((bundle, meta))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{build_schedule, ScheduleKind};
    use crate::rng::stream;

    fn tiny_bundle() -> ModelBundle {
        let mut rng = stream(1, "bundle", &[]);
        let seg = SegModel::init(SegConfig::default(), &mut rng);
        let mut denoiser = Denoiser::init(
            UNetConfig {
                channels: 16,
                ..UNetConfig::default()
            },
            &mut rng,
        );
        denoiser.install_lora(&mut rng).unwrap();
        let schedule = build_schedule(100, 8.5e-4, 1.2e-2, ScheduleKind::ScaledLinear).unwrap();
        ModelBundle {
            seg,
            denoiser,
            schedule,
            gle: GleConfig {
                gamma: 5.0,
                timestep: 100,
            },
        }
    }

    #[test]
    fn bundle_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bundle.ckpt");
        let b = tiny_bundle();
        b.save(&path, &BTreeMap::new()).unwrap();
        let (loaded, _) = ModelBundle::load(&path).unwrap();
        assert!(b.seg.store.diff_names(&loaded.seg.store).is_empty());
        assert!(b.denoiser.store.diff_names(&loaded.denoiser.store).is_empty());
        assert_eq!(b.schedule.fingerprint(), loaded.schedule.fingerprint());
        assert_eq!(loaded.gle.gamma, 5.0);
    }

    #[test]
    fn schedule_mismatch_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bundle.ckpt");
        let b = tiny_bundle();
        b.save(&path, &BTreeMap::new()).unwrap();
        let other = build_schedule(200, 8.5e-4, 1.2e-2, ScheduleKind::ScaledLinear).unwrap();
        assert!(ModelBundle::load_checked(&path, &other).is_err());
        assert!(ModelBundle::load_checked(&path, &b.schedule).is_ok());
    }
}
