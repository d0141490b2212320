//! Toy promptable segmentation model: a strided conv image encoder, a
//! sinusoidal point/box prompt encoder, and a mask decoder that cross-attends
//! prompt tokens to the latent and reads the mask out through a learned mask
//! token.

use crate::diffusion::LatentFeature;
use crate::error::{Error, Result};
use crate::params::{ParamLeaves, ParameterStore};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub const ENCODER_STRIDE: usize = 8;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SegConfig {
    pub latent_channels: usize,
    pub enc_width0: usize,
    pub enc_width1: usize,
    /// Token width shared by prompt embeddings and the mask token.
    pub token_dim: usize,
    /// Per-pixel feature channels after upsampling.
    pub up_channels: usize,
    /// Octaves in the fixed sinusoidal coordinate map.
    pub pos_freqs: usize,
    /// Fixed output gain on the encoder so latents sit at a scale the
    /// enhancement's alignment weight expects.
    pub latent_gain: f64,
}

impl Default for SegConfig {
    fn default() -> Self {
        SegConfig {
            latent_channels: 16,
            enc_width0: 16,
            enc_width1: 32,
            token_dim: 64,
            up_channels: 8,
            pos_freqs: 8,
            latent_gain: 0.2,
        }
    }
}

impl SegConfig {
    pub fn pos_dim(&self) -> usize {
        4 * self.pos_freqs
    }
}

// ---------------------------------------------------------------------------
// Prompts
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Prompt {
    Points { points: Vec<PointPrompt> },
    Box { r0: f64, c0: f64, r1: f64, c1: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointPrompt {
    pub row: f64,
    pub col: f64,
    pub positive: bool,
}

impl Prompt {
    pub fn validate(&self, image_size: (usize, usize)) -> Result<()> {
        let (h, w) = (image_size.0 as f64, image_size.1 as f64);
        match self {
            Prompt::Points { points } => {
                if points.is_empty() {
                    return Err(Error::parameter("prompt has no points"));
                }
                for p in points {
                    if p.row < 0.0 || p.row > h - 1.0 || p.col < 0.0 || p.col > w - 1.0 {
                        return Err(Error::parameter(format!(
                            "point ({}, {}) outside image {}x{}",
                            p.row, p.col, h, w
                        )));
                    }
                }
                Ok(())
            }
            Prompt::Box { r0, c0, r1, c1 } => {
                if r0 > r1 || c0 > c1 {
                    return Err(Error::parameter("box corners out of order"));
                }
                if *r0 < 0.0 || *r1 > h - 1.0 || *c0 < 0.0 || *c1 > w - 1.0 {
                    return Err(Error::parameter(format!(
                        "box ({r0}, {c0}, {r1}, {c1}) outside image {h}x{w}"
                    )));
                }
                Ok(())
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct MaskLogits {
    /// Pre-sigmoid scores, same spatial size as the input image.
    pub data: Tensor,
}

impl MaskLogits {
    pub fn probabilities(&self) -> Tensor {
        self.data.map(crate::tensor::sigmoid)
    }

    pub fn binary(&self, threshold: f64) -> Vec<bool> {
        self.probabilities()
            .data()
            .iter()
            .map(|&p| p > threshold)
            .collect()
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainabilityMode {
    FreezeAll,
    DecoderOnly,
    MaskTokenOnly,
}

/// Set trainable flags for a fine-tuning mode. The image and prompt encoders
/// stay frozen in every mode; the store is fully frozen first so the mode's
/// selection is exact.
pub fn set_trainability(store: &mut ParameterStore, mode: TrainabilityMode) {
    store.freeze_all();
    match mode {
        TrainabilityMode::FreezeAll => {}
        TrainabilityMode::DecoderOnly => store.set_trainable_prefix("seg.decoder.", true),
        TrainabilityMode::MaskTokenOnly => store.set_trainable("seg.decoder.mask_token", true),
    }
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct SegModel {
    pub cfg: SegConfig,
    pub store: ParameterStore,
}

impl SegModel {
    pub fn init(cfg: SegConfig, rng: &mut impl Rng) -> Self {
        let mut store = ParameterStore::new();
        let he = |fan_in: usize| (2.0 / fan_in as f64).sqrt();
        let d = cfg.token_dim;
        let (w0, w1, cl) = (cfg.enc_width0, cfg.enc_width1, cfg.latent_channels);

        store.insert("seg.encoder.conv1.w", Tensor::randn(&[w0, 3, 3, 3], he(27), rng), false);
        store.insert("seg.encoder.conv1.b", Tensor::zeros(&[w0]), false);
        store.insert(
            "seg.encoder.conv2.w",
            Tensor::randn(&[w1, w0, 3, 3], he(w0 * 9), rng),
            false,
        );
        store.insert("seg.encoder.conv2.b", Tensor::zeros(&[w1]), false);
        store.insert(
            "seg.encoder.conv3.w",
            Tensor::randn(&[cl, w1, 3, 3], he(w1 * 9), rng),
            false,
        );
        store.insert("seg.encoder.conv3.b", Tensor::zeros(&[cl]), false);

        let pd = cfg.pos_dim();
        store.insert(
            "seg.prompt.proj.w",
            Tensor::randn(&[d, pd], (1.0 / pd as f64).sqrt(), rng),
            false,
        );
        store.insert("seg.prompt.proj.b", Tensor::zeros(&[d]), false);
        for label in ["pos", "neg", "corner0", "corner1"] {
            store.insert(
                format!("seg.prompt.label.{label}"),
                Tensor::randn(&[d], 0.5, rng),
                false,
            );
        }

        store.insert("seg.decoder.mask_token", Tensor::randn(&[d], 0.5, rng), false);
        store.insert(
            "seg.decoder.inproj.w",
            Tensor::randn(&[d, cl, 1, 1], (2.0 / cl as f64).sqrt(), rng),
            false,
        );
        store.insert("seg.decoder.inproj.b", Tensor::zeros(&[d]), false);
        for block in ["t2l", "l2t"] {
            for proj in ["q", "k", "v", "o"] {
                store.insert(
                    format!("seg.decoder.{block}.{proj}.w"),
                    Tensor::randn(&[d, d], (1.0 / d as f64).sqrt(), rng),
                    false,
                );
            }
        }
        for l in ["l1", "l2"] {
            store.insert(
                format!("seg.decoder.mlp.{l}.w"),
                Tensor::randn(&[d, d], (1.0 / d as f64).sqrt(), rng),
                false,
            );
            store.insert(format!("seg.decoder.mlp.{l}.b"), Tensor::zeros(&[d]), false);
        }

        let d2 = cfg.enc_width1;
        store.insert(
            "seg.decoder.up1.w",
            Tensor::randn(&[d, d2, 4, 4], (2.0 / d as f64).sqrt() / 4.0, rng),
            false,
        );
        store.insert("seg.decoder.up1.b", Tensor::zeros(&[d2]), false);
        store.insert(
            "seg.decoder.mix1.w",
            Tensor::randn(&[d2, d2, 3, 3], he(d2 * 9), rng),
            false,
        );
        store.insert("seg.decoder.mix1.b", Tensor::zeros(&[d2]), false);
        store.insert(
            "seg.decoder.up2.w",
            Tensor::randn(&[d2, cfg.up_channels, 2, 2], (2.0 / d2 as f64).sqrt() / 2.0, rng),
            false,
        );
        store.insert("seg.decoder.up2.b", Tensor::zeros(&[cfg.up_channels]), false);
        store.insert(
            "seg.decoder.mix2.w",
            Tensor::randn(
                &[cfg.up_channels, cfg.up_channels, 3, 3],
                he(cfg.up_channels * 9),
                rng,
            ),
            false,
        );
        store.insert("seg.decoder.mix2.b", Tensor::zeros(&[cfg.up_channels]), false);
        store.insert(
            "seg.decoder.outproj.w",
            Tensor::randn(&[cfg.up_channels, d], (1.0 / d as f64).sqrt(), rng),
            false,
        );
        store.insert("seg.decoder.outproj.b", Tensor::zeros(&[cfg.up_channels]), false);
        store.insert("seg.decoder.out_bias", Tensor::zeros(&[1]), false);

        SegModel { cfg, store }
    }

    // -- encoder ------------------------------------------------------------

    pub fn validate_image(&self, x: &Tensor) -> Result<()> {
        if x.shape().len() != 3 || x.shape()[0] != 3 {
            return Err(Error::shape(format!(
                "expected 3 x H x W image, got {:?}",
                x.shape()
            )));
        }
        let (h, w) = (x.shape()[1], x.shape()[2]);
        if h % ENCODER_STRIDE != 0 || w % ENCODER_STRIDE != 0 {
            return Err(Error::shape(format!(
                "image dims ({h}, {w}) must be divisible by encoder stride {ENCODER_STRIDE}"
            )));
        }
        Ok(())
    }

    pub fn encode_image_tape(
        &self,
        tape: &mut Tape,
        leaves: &mut ParamLeaves,
        x: NodeId,
    ) -> NodeId {
        let conv = |tape: &mut Tape, leaves: &mut ParamLeaves, x, name: &str| {
            let w = leaves.get(tape, &self.store, &format!("{name}.w"));
            let b = leaves.get(tape, &self.store, &format!("{name}.b"));
            let y = tape.conv2d(x, w, 2, 1);
            tape.bias_ch(y, b)
        };
        let h = conv(tape, leaves, x, "seg.encoder.conv1");
        let h = tape.silu(h);
        let h = conv(tape, leaves, h, "seg.encoder.conv2");
        let h = tape.silu(h);
        let h = conv(tape, leaves, h, "seg.encoder.conv3");
        tape.scale(h, self.cfg.latent_gain)
    }

    pub fn encode_image(&self, x: &Tensor) -> Result<LatentFeature> {
        self.validate_image(x)?;
        let mut tape = Tape::new();
        let mut leaves = ParamLeaves::new();
        let xid = tape.leaf(x.clone());
        let z = self.encode_image_tape(&mut tape, &mut leaves, xid);
        LatentFeature::new(tape.value(z).clone())
    }

    // -- prompt encoder -----------------------------------------------------

    fn coord_features(&self, row: f64, col: f64, image_size: (usize, usize)) -> Tensor {
        let (h, w) = image_size;
        let u = if h > 1 { row / (h - 1) as f64 } else { 0.0 };
        let v = if w > 1 { col / (w - 1) as f64 } else { 0.0 };
        let f = self.cfg.pos_freqs;
        let mut data = Vec::with_capacity(4 * f);
        for i in 0..f {
            let freq = (1u64 << i) as f64;
            data.push((std::f64::consts::PI * freq * u).sin());
            data.push((std::f64::consts::PI * freq * u).cos());
            data.push((std::f64::consts::PI * freq * v).sin());
            data.push((std::f64::consts::PI * freq * v).cos());
        }
        Tensor::new(&[1, 4 * f], data).unwrap()
    }

    fn embed_one(
        &self,
        tape: &mut Tape,
        leaves: &mut ParamLeaves,
        row: f64,
        col: f64,
        label: &str,
        image_size: (usize, usize),
    ) -> NodeId {
        let feat = tape.leaf(self.coord_features(row, col, image_size));
        let w = leaves.get(tape, &self.store, "seg.prompt.proj.w");
        let b = leaves.get(tape, &self.store, "seg.prompt.proj.b");
        let e = tape.linear(feat, w, Some(b));
        let lv = leaves.get(tape, &self.store, &format!("seg.prompt.label.{label}"));
        tape.bias_row(e, lv)
    }

    /// One embedding row per point; boxes contribute their two corners.
    pub fn encode_prompt_tape(
        &self,
        tape: &mut Tape,
        leaves: &mut ParamLeaves,
        prompt: &Prompt,
        image_size: (usize, usize),
    ) -> Result<NodeId> {
        prompt.validate(image_size)?;
        match prompt {
            Prompt::Points { points } => {
                let mut acc: Option<NodeId> = None;
                for p in points {
                    let label = if p.positive { "pos" } else { "neg" };
                    let e = self.embed_one(tape, leaves, p.row, p.col, label, image_size);
                    acc = Some(match acc {
                        Some(prev) => tape.concat_rows(prev, e),
                        None => e,
                    });
                }
                Ok(acc.expect("validated non-empty"))
            }
            Prompt::Box { r0, c0, r1, c1 } => {
                let e0 = self.embed_one(tape, leaves, *r0, *c0, "corner0", image_size);
                let e1 = self.embed_one(tape, leaves, *r1, *c1, "corner1", image_size);
                Ok(tape.concat_rows(e0, e1))
            }
        }
    }

    pub fn encode_prompt(&self, prompt: &Prompt, image_size: (usize, usize)) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut leaves = ParamLeaves::new();
        let id = self.encode_prompt_tape(&mut tape, &mut leaves, prompt, image_size)?;
        Ok(tape.value(id).clone())
    }

    // -- mask decoder ---------------------------------------------------------

    fn attn(
        &self,
        tape: &mut Tape,
        leaves: &mut ParamLeaves,
        queries: NodeId,
        keys_values: NodeId,
        block: &str,
    ) -> NodeId {
        let d = self.cfg.token_dim as f64;
        let get = |tape: &mut Tape, leaves: &mut ParamLeaves, p: &str| {
            leaves.get(tape, &self.store, &format!("seg.decoder.{block}.{p}.w"))
        };
        let wq = get(tape, leaves, "q");
        let wk = get(tape, leaves, "k");
        let wv = get(tape, leaves, "v");
        let wo = get(tape, leaves, "o");
        let q = tape.matmul_nt(queries, wq);
        let k = tape.matmul_nt(keys_values, wk);
        let v = tape.matmul_nt(keys_values, wv);
        let scores = tape.matmul_nt(q, k);
        let scores = tape.scale(scores, 1.0 / d.sqrt());
        let a = tape.softmax_rows(scores);
        let mixed = tape.matmul(a, v);
        let out = tape.matmul_nt(mixed, wo);
        tape.add(queries, out)
    }

    /// Cross-attend prompt tokens and the mask token to the latent, upsample
    /// back to image resolution, read logits out via the mask token.
    pub fn decode_mask_tape(
        &self,
        tape: &mut Tape,
        leaves: &mut ParamLeaves,
        z: NodeId,
        prompt_emb: NodeId,
    ) -> NodeId {
        let (c, h, w) = {
            let s = tape.value(z).shape();
            (s[0], s[1], s[2])
        };
        assert_eq!(c, self.cfg.latent_channels, "latent channel mismatch");
        let d = self.cfg.token_dim;

        let win = leaves.get(tape, &self.store, "seg.decoder.inproj.w");
        let bin = leaves.get(tape, &self.store, "seg.decoder.inproj.b");
        let f = tape.conv2d(z, win, 1, 0);
        let f = tape.bias_ch(f, bin);
        let flat = tape.reshape(f, &[d, h * w]);
        let lat = tape.transpose(flat);

        let mt = leaves.get(tape, &self.store, "seg.decoder.mask_token");
        let mt = tape.reshape(mt, &[1, d]);
        let tokens = tape.concat_rows(mt, prompt_emb);

        let tokens = self.attn(tape, leaves, tokens, lat, "t2l");
        let w1 = leaves.get(tape, &self.store, "seg.decoder.mlp.l1.w");
        let b1 = leaves.get(tape, &self.store, "seg.decoder.mlp.l1.b");
        let w2 = leaves.get(tape, &self.store, "seg.decoder.mlp.l2.w");
        let b2 = leaves.get(tape, &self.store, "seg.decoder.mlp.l2.b");
        let m = tape.linear(tokens, w1, Some(b1));
        let m = tape.silu(m);
        let m = tape.linear(m, w2, Some(b2));
        let tokens = tape.add(tokens, m);

        let lat = self.attn(tape, leaves, lat, tokens, "l2t");

        let lat_t = tape.transpose(lat);
        let fmap = tape.reshape(lat_t, &[d, h, w]);
        let up1w = leaves.get(tape, &self.store, "seg.decoder.up1.w");
        let up1b = leaves.get(tape, &self.store, "seg.decoder.up1.b");
        let u = tape.convt_block(fmap, up1w, 4);
        let u = tape.bias_ch(u, up1b);
        let u = tape.silu(u);
        let mix1w = leaves.get(tape, &self.store, "seg.decoder.mix1.w");
        let mix1b = leaves.get(tape, &self.store, "seg.decoder.mix1.b");
        let u = tape.conv2d(u, mix1w, 1, 1);
        let u = tape.bias_ch(u, mix1b);
        let u = tape.silu(u);
        let up2w = leaves.get(tape, &self.store, "seg.decoder.up2.w");
        let up2b = leaves.get(tape, &self.store, "seg.decoder.up2.b");
        let u = tape.convt_block(u, up2w, 2);
        let u = tape.bias_ch(u, up2b);
        let u = tape.silu(u);
        let mix2w = leaves.get(tape, &self.store, "seg.decoder.mix2.w");
        let mix2b = leaves.get(tape, &self.store, "seg.decoder.mix2.b");
        let u = tape.conv2d(u, mix2w, 1, 1);
        let u = tape.bias_ch(u, mix2b);

        let mask_tok = tape.slice_rows(tokens, 0, 1);
        let wout = leaves.get(tape, &self.store, "seg.decoder.outproj.w");
        let bout = leaves.get(tape, &self.store, "seg.decoder.outproj.b");
        let read = tape.linear(mask_tok, wout, Some(bout));
        let read = tape.reshape(read, &[1, self.cfg.up_channels, 1, 1]);
        let logits = tape.conv2d(u, read, 1, 0);
        let ob = leaves.get(tape, &self.store, "seg.decoder.out_bias");
        let logits = tape.bias_ch(logits, ob);
        tape.reshape(logits, &[h * ENCODER_STRIDE, w * ENCODER_STRIDE])
    }

    pub fn decode_mask(&self, z: &LatentFeature, prompt_emb: &Tensor) -> Result<MaskLogits> {
        if z.data().shape()[0] != self.cfg.latent_channels {
            return Err(Error::shape(format!(
                "latent has {} channels, model expects {}",
                z.data().shape()[0],
                self.cfg.latent_channels
            )));
        }
        if prompt_emb.shape().len() != 2 || prompt_emb.shape()[1] != self.cfg.token_dim {
            return Err(Error::shape(format!(
                "prompt embeddings {:?} do not match token dim {}",
                prompt_emb.shape(),
                self.cfg.token_dim
            )));
        }
        let mut tape = Tape::new();
        let mut leaves = ParamLeaves::new();
        let zid = tape.leaf(z.data().clone());
        let pid = tape.leaf(prompt_emb.clone());
        let out = self.decode_mask_tape(&mut tape, &mut leaves, zid, pid);
        let data = tape.value(out).clone();
        if !data.all_finite() {
            return Err(Error::numeric("mask logits are not finite"));
        }
        Ok(MaskLogits { data })
    }

    /// Full promptable forward pass used at evaluation time.
    pub fn segment(&self, image: &Tensor, prompt: &Prompt) -> Result<MaskLogits> {
        let z = self.encode_image(image)?;
        let emb = self.encode_prompt(prompt, (image.shape()[1], image.shape()[2]))?;
        self.decode_mask(&z, &emb)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn model(seed: u64) -> SegModel {
        let mut rng = stream(seed, "seg-test", &[]);
        SegModel::init(SegConfig::default(), &mut rng)
    }

    #[test]
    fn encoder_stride_contract() {
        let m = model(1);
        let mut rng = stream(2, "img", &[]);
        let x = Tensor::randn(&[3, 64, 64], 0.3, &mut rng).map(|v| (v + 0.5).clamp(0.0, 1.0));
        let z = m.encode_image(&x).unwrap();
        assert_eq!(z.data().shape(), &[16, 8, 8]);
        let z2 = m.encode_image(&x).unwrap();
        assert_eq!(z.data().data(), z2.data().data());
        assert!(m.encode_image(&Tensor::zeros(&[3, 60, 64])).is_err());
    }

    #[test]
    fn prompt_embeddings_contract() {
        let m = model(3);
        let p = Prompt::Points {
            points: vec![
                PointPrompt { row: 5.0, col: 9.0, positive: true },
                PointPrompt { row: 5.0, col: 9.0, positive: true },
            ],
        };
        let emb = m.encode_prompt(&p, (64, 64)).unwrap();
        assert_eq!(emb.shape(), &[2, 64]);
        let (r0, r1) = (emb.data()[..64].to_vec(), emb.data()[64..].to_vec());
        assert_eq!(r0, r1);

        let corner_a = m
            .encode_prompt(
                &Prompt::Points { points: vec![PointPrompt { row: 0.0, col: 0.0, positive: true }] },
                (64, 64),
            )
            .unwrap();
        let corner_b = m
            .encode_prompt(
                &Prompt::Points { points: vec![PointPrompt { row: 63.0, col: 63.0, positive: true }] },
                (64, 64),
            )
            .unwrap();
        assert!(corner_a.max_abs_diff(&corner_b) > 1e-6);

        let b = m
            .encode_prompt(&Prompt::Box { r0: 3.0, c0: 4.0, r1: 20.0, c1: 30.0 }, (64, 64))
            .unwrap();
        assert_eq!(b.shape(), &[2, 64]);

        assert!(m
            .encode_prompt(&Prompt::Points { points: vec![] }, (64, 64))
            .is_err());
    }

    #[test]
    fn decode_shape_and_determinism() {
        let m = model(4);
        let mut rng = stream(5, "img", &[]);
        let x = Tensor::randn(&[3, 64, 64], 0.3, &mut rng).map(|v| (v + 0.5).clamp(0.0, 1.0));
        let p = Prompt::Points {
            points: vec![PointPrompt { row: 30.0, col: 30.0, positive: true }],
        };
        let a = m.segment(&x, &p).unwrap();
        assert_eq!(a.data.shape(), &[64, 64]);
        let b = m.segment(&x, &p).unwrap();
        assert_eq!(a.data.data(), b.data.data());
    }

    #[test]
    fn point_order_does_not_matter() {
        let m = model(6);
        let mut rng = stream(7, "img", &[]);
        let x = Tensor::randn(&[3, 64, 64], 0.3, &mut rng).map(|v| (v + 0.5).clamp(0.0, 1.0));
        let pts = vec![
            PointPrompt { row: 10.0, col: 12.0, positive: true },
            PointPrompt { row: 40.0, col: 50.0, positive: true },
            PointPrompt { row: 25.0, col: 33.0, positive: false },
        ];
        let mut rev = pts.clone();
        rev.reverse();
        let a = m.segment(&x, &Prompt::Points { points: pts }).unwrap();
        let b = m.segment(&x, &Prompt::Points { points: rev }).unwrap();
        assert!(a.data.max_abs_diff(&b.data) < 1e-9);
    }

    #[test]
    fn latent_channel_mismatch_rejected() {
        let m = model(8);
        let z = LatentFeature::new(Tensor::zeros(&[12, 8, 8])).unwrap();
        let emb = Tensor::zeros(&[1, 64]);
        assert!(m.decode_mask(&z, &emb).is_err());
    }

    #[test]
    fn trainability_modes() {
        let mut m = model(9);
        set_trainability(&mut m.store, TrainabilityMode::FreezeAll);
        assert_eq!(m.store.trainable_count(), 0);

        set_trainability(&mut m.store, TrainabilityMode::DecoderOnly);
        let names = m.store.trainable_names();
        assert!(!names.is_empty());
        assert!(names.iter().all(|n| n.starts_with("seg.decoder.")));
        let all_decoder: Vec<String> = m
            .store
            .names()
            .filter(|n| n.starts_with("seg.decoder."))
            .cloned()
            .collect();
        assert_eq!(names, all_decoder);

        set_trainability(&mut m.store, TrainabilityMode::MaskTokenOnly);
        assert_eq!(m.store.trainable_names(), vec!["seg.decoder.mask_token".to_string()]);
        assert_eq!(m.store.trainable_count(), m.cfg.token_dim);
    }
}
