//! Timestep-conditioned denoising U-Net: two downsampling stages (total
//! factor 4), one self-attention block at the bottleneck, sinusoidal
//! timestep embedding. Head and tail convolutions are the expansion points
//! for pretrained 4-channel weights; low-rank adapters attach to the
//! attention projections.

use crate::cre_lora::cre::{cre_expand_head, cre_expand_tail, ConvWeight};
use crate::cre_lora::lora::{lora_apply_on_tape, LoraAdapter};
use crate::diffusion::NoisePredictor;
use crate::error::{Error, Result};
use crate::params::{ParamLeaves, ParameterStore};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct UNetConfig {
    /// Input/output channel count.
    pub channels: usize,
    /// Stage widths.
    pub width0: usize,
    pub width1: usize,
    /// Sinusoidal timestep embedding size.
    pub temb_dim: usize,
    pub groups: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    /// Also adapt the (frozen, expanded) head/tail convolutions.
    pub lora_on_head_tail: bool,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            channels: 16,
            width0: 32,
            width1: 64,
            temb_dim: 64,
            groups: 8,
            lora_rank: 8,
            lora_alpha: 8.0,
            lora_on_head_tail: true,
        }
    }
}

impl UNetConfig {
    pub fn lora_scaling(&self) -> f64 {
        self.lora_alpha / self.lora_rank as f64
    }
}

/// The denoiser: an immutable architecture description plus a parameter
/// store holding `unet.*` base weights and optional `lora.*` factors.
#[derive(Clone, Debug)]
pub struct Denoiser {
    pub cfg: UNetConfig,
    pub store: ParameterStore,
}

const ATTN_PROJS: [&str; 4] = ["q", "k", "v", "o"];

struct RbDims {
    tag: &'static str,
    cin: usize,
    cout: usize,
}

fn resblock_dims(cfg: &UNetConfig) -> [RbDims; 6] {
    let (w0, w1) = (cfg.width0, cfg.width1);
    [
        RbDims { tag: "d1", cin: w0, cout: w0 },
        RbDims { tag: "d2", cin: w1, cout: w1 },
        RbDims { tag: "m1", cin: w1, cout: w1 },
        RbDims { tag: "m2", cin: w1, cout: w1 },
        RbDims { tag: "u1", cin: 2 * w1, cout: w1 },
        RbDims { tag: "u2", cin: w1 + w0, cout: w0 },
    ]
}

impl Denoiser {
    /// Fresh base network, no adapters installed.
    pub fn init(cfg: UNetConfig, rng: &mut impl Rng) -> Self {
        let mut store = ParameterStore::new();
        let he = |fan_in: usize| (2.0 / fan_in as f64).sqrt();
        let d = cfg.temb_dim;

        store.insert(
            "unet.head.w",
            Tensor::randn(&[cfg.width0, cfg.channels, 3, 3], he(cfg.channels * 9), rng),
            false,
        );
        store.insert("unet.head.b", Tensor::zeros(&[cfg.width0]), false);

        for l in ["l1", "l2"] {
            store.insert(
                format!("unet.temb.{l}.w"),
                Tensor::randn(&[d, d], (1.0 / d as f64).sqrt(), rng),
                false,
            );
            store.insert(format!("unet.temb.{l}.b"), Tensor::zeros(&[d]), false);
        }

        for rb in resblock_dims(&cfg) {
            let p = format!("unet.rb.{}", rb.tag);
            store.insert(format!("{p}.gn1.g"), Tensor::full(&[rb.cin], 1.0), false);
            store.insert(format!("{p}.gn1.b"), Tensor::zeros(&[rb.cin]), false);
            store.insert(
                format!("{p}.conv1.w"),
                Tensor::randn(&[rb.cout, rb.cin, 3, 3], he(rb.cin * 9), rng),
                false,
            );
            store.insert(format!("{p}.conv1.b"), Tensor::zeros(&[rb.cout]), false);
            store.insert(
                format!("{p}.emb.w"),
                Tensor::randn(&[rb.cout, d], (1.0 / d as f64).sqrt(), rng),
                false,
            );
            store.insert(format!("{p}.emb.b"), Tensor::zeros(&[rb.cout]), false);
            store.insert(format!("{p}.gn2.g"), Tensor::full(&[rb.cout], 1.0), false);
            store.insert(format!("{p}.gn2.b"), Tensor::zeros(&[rb.cout]), false);
            // second conv starts small so blocks begin near identity
            store.insert(
                format!("{p}.conv2.w"),
                Tensor::randn(&[rb.cout, rb.cout, 3, 3], 0.2 * he(rb.cout * 9), rng),
                false,
            );
            store.insert(format!("{p}.conv2.b"), Tensor::zeros(&[rb.cout]), false);
            if rb.cin != rb.cout {
                store.insert(
                    format!("{p}.skip.w"),
                    Tensor::randn(&[rb.cout, rb.cin, 1, 1], (1.0 / rb.cin as f64).sqrt(), rng),
                    false,
                );
                store.insert(format!("{p}.skip.b"), Tensor::zeros(&[rb.cout]), false);
            }
        }

        store.insert(
            "unet.down1.w",
            Tensor::randn(&[cfg.width1, cfg.width0, 3, 3], he(cfg.width0 * 9), rng),
            false,
        );
        store.insert("unet.down1.b", Tensor::zeros(&[cfg.width1]), false);
        store.insert(
            "unet.down2.w",
            Tensor::randn(&[cfg.width1, cfg.width1, 3, 3], he(cfg.width1 * 9), rng),
            false,
        );
        store.insert("unet.down2.b", Tensor::zeros(&[cfg.width1]), false);

        store.insert("unet.attn.gn.g", Tensor::full(&[cfg.width1], 1.0), false);
        store.insert("unet.attn.gn.b", Tensor::zeros(&[cfg.width1]), false);
        for p in ATTN_PROJS {
            store.insert(
                format!("unet.attn.{p}.w"),
                Tensor::randn(
                    &[cfg.width1, cfg.width1],
                    (1.0 / cfg.width1 as f64).sqrt(),
                    rng,
                ),
                false,
            );
        }

        store.insert("unet.out.gn.g", Tensor::full(&[cfg.width0], 1.0), false);
        store.insert("unet.out.gn.b", Tensor::zeros(&[cfg.width0]), false);
        store.insert(
            "unet.tail.w",
            Tensor::randn(&[cfg.channels, cfg.width0, 3, 3], he(cfg.width0 * 9), rng),
            false,
        );
        store.insert("unet.tail.b", Tensor::zeros(&[cfg.channels]), false);

        Denoiser { cfg, store }
    }

    /// Install zero-delta adapters on the attention projections (and on the
    /// head/tail convolutions when configured). Adapter tensors are the only
    /// trainable ones afterwards.
    pub fn install_lora(&mut self, rng: &mut impl Rng) -> Result<()> {
        let r = self.cfg.lora_rank;
        if r == 0 {
            return Err(Error::parameter("lora rank must be positive"));
        }
        let w1 = self.cfg.width1;
        for p in ATTN_PROJS {
            let adapter = LoraAdapter::init(w1, w1, r, rng)?;
            self.store.insert(format!("lora.attn.{p}.A"), adapter.a, true);
            self.store.insert(format!("lora.attn.{p}.B"), adapter.b, true);
        }
        if self.cfg.lora_on_head_tail {
            let head = LoraAdapter::init(self.cfg.width0, self.cfg.channels * 9, r, rng)?;
            self.store.insert("lora.head.A", head.a, true);
            self.store.insert("lora.head.B", head.b, true);
            let tail = LoraAdapter::init(self.cfg.channels, self.cfg.width0 * 9, r, rng)?;
            self.store.insert("lora.tail.A", tail.a, true);
            self.store.insert("lora.tail.B", tail.b, true);
        }
        Ok(())
    }

    pub fn has_lora(&self) -> bool {
        self.store.contains("lora.attn.q.A")
    }

    pub fn validate_input(&self, x: &Tensor) -> Result<()> {
        if x.shape().len() != 3 || x.shape()[0] != self.cfg.channels {
            return Err(Error::shape(format!(
                "expected {} x H x W input, got {:?}",
                self.cfg.channels,
                x.shape()
            )));
        }
        let (h, w) = (x.shape()[1], x.shape()[2]);
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::shape(format!(
                "spatial dims ({h}, {w}) must be divisible by 4"
            )));
        }
        Ok(())
    }

    fn conv(
        &self,
        tape: &mut Tape,
        leaves: &mut ParamLeaves,
        x: NodeId,
        name: &str,
        stride: usize,
        pad: usize,
    ) -> NodeId {
        let w = leaves.get(tape, &self.store, &format!("{name}.w"));
        let b = leaves.get(tape, &self.store, &format!("{name}.b"));
        let y = tape.conv2d(x, w, stride, pad);
        tape.bias_ch(y, b)
    }

    /// Head/tail conv with an optional low-rank kernel delta.
    fn edge_conv(
        &self,
        tape: &mut Tape,
        leaves: &mut ParamLeaves,
        x: NodeId,
        name: &str,
        lora_name: &str,
    ) -> NodeId {
        let w = leaves.get(tape, &self.store, &format!("{name}.w"));
        let b = leaves.get(tape, &self.store, &format!("{name}.b"));
        let a_name = format!("{lora_name}.A");
        let w = if self.cfg.lora_on_head_tail && self.store.contains(&a_name) {
            let a = leaves.get(tape, &self.store, &a_name);
            let bb = leaves.get(tape, &self.store, &format!("{lora_name}.B"));
            let delta = tape.matmul(bb, a);
            let delta = tape.scale(delta, self.cfg.lora_scaling());
            let shape = self.store.tensor(&format!("{name}.w")).shape().to_vec();
            let delta = tape.reshape(delta, &shape);
            tape.add(w, delta)
        } else {
            w
        };
        let y = tape.conv2d(x, w, 1, 1);
        tape.bias_ch(y, b)
    }

    fn resblock(
        &self,
        tape: &mut Tape,
        leaves: &mut ParamLeaves,
        x: NodeId,
        tag: &str,
        cin: usize,
        cout: usize,
        emb: NodeId,
    ) -> NodeId {
        let p = format!("unet.rb.{tag}");
        let g1 = leaves.get(tape, &self.store, &format!("{p}.gn1.g"));
        let b1 = leaves.get(tape, &self.store, &format!("{p}.gn1.b"));
        let mut h = tape.group_norm(x, g1, b1, self.cfg.groups, 1e-5);
        h = tape.silu(h);
        h = self.conv(tape, leaves, h, &format!("{p}.conv1"), 1, 1);

        let ew = leaves.get(tape, &self.store, &format!("{p}.emb.w"));
        let eb = leaves.get(tape, &self.store, &format!("{p}.emb.b"));
        let ev = tape.linear(emb, ew, Some(eb));
        let ev = tape.reshape(ev, &[cout]);
        h = tape.bias_ch(h, ev);

        let g2 = leaves.get(tape, &self.store, &format!("{p}.gn2.g"));
        let b2 = leaves.get(tape, &self.store, &format!("{p}.gn2.b"));
        h = tape.group_norm(h, g2, b2, self.cfg.groups, 1e-5);
        h = tape.silu(h);
        h = self.conv(tape, leaves, h, &format!("{p}.conv2"), 1, 1);

        let skip = if cin != cout {
            self.conv(tape, leaves, x, &format!("{p}.skip"), 1, 0)
        } else {
            x
        };
        tape.add(skip, h)
    }

    fn attn_linear(
        &self,
        tape: &mut Tape,
        leaves: &mut ParamLeaves,
        x: NodeId,
        proj: &str,
    ) -> NodeId {
        let w = leaves.get(tape, &self.store, &format!("unet.attn.{proj}.w"));
        let a_name = format!("lora.attn.{proj}.A");
        if self.store.contains(&a_name) {
            let a = leaves.get(tape, &self.store, &a_name);
            let b = leaves.get(tape, &self.store, &format!("lora.attn.{proj}.B"));
            lora_apply_on_tape(tape, x, w, a, b, self.cfg.lora_scaling())
        } else {
            tape.matmul_nt(x, w)
        }
    }

    fn attention(&self, tape: &mut Tape, leaves: &mut ParamLeaves, x: NodeId) -> NodeId {
        let (c, h, w) = {
            let s = tape.value(x).shape();
            (s[0], s[1], s[2])
        };
        let g = leaves.get(tape, &self.store, "unet.attn.gn.g");
        let b = leaves.get(tape, &self.store, "unet.attn.gn.b");
        let normed = tape.group_norm(x, g, b, self.cfg.groups, 1e-5);
        let flat = tape.reshape(normed, &[c, h * w]);
        let tokens = tape.transpose(flat);
        let q = self.attn_linear(tape, leaves, tokens, "q");
        let k = self.attn_linear(tape, leaves, tokens, "k");
        let v = self.attn_linear(tape, leaves, tokens, "v");
        let scores = tape.matmul_nt(q, k);
        let scores = tape.scale(scores, 1.0 / (c as f64).sqrt());
        let attn = tape.softmax_rows(scores);
        let mixed = tape.matmul(attn, v);
        let out = self.attn_linear(tape, leaves, mixed, "o");
        let out_t = tape.transpose(out);
        let out_sp = tape.reshape(out_t, &[c, h, w]);
        tape.add(x, out_sp)
    }

    /// Record the full forward pass on `tape`. `x` must already satisfy
    /// `validate_input`.
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        leaves: &mut ParamLeaves,
        x: NodeId,
        t: usize,
    ) -> NodeId {
        let emb0 = tape.leaf(timestep_embedding(t, self.cfg.temb_dim));
        let w1l = leaves.get(tape, &self.store, "unet.temb.l1.w");
        let b1l = leaves.get(tape, &self.store, "unet.temb.l1.b");
        let e = tape.linear(emb0, w1l, Some(b1l));
        let e = tape.silu(e);
        let w2l = leaves.get(tape, &self.store, "unet.temb.l2.w");
        let b2l = leaves.get(tape, &self.store, "unet.temb.l2.b");
        let emb = tape.linear(e, w2l, Some(b2l));

        let (w0, w1) = (self.cfg.width0, self.cfg.width1);
        let h0 = self.edge_conv(tape, leaves, x, "unet.head", "lora.head");
        let s1 = self.resblock(tape, leaves, h0, "d1", w0, w0, emb);
        let d1 = self.conv(tape, leaves, s1, "unet.down1", 2, 1);
        let s2 = self.resblock(tape, leaves, d1, "d2", w1, w1, emb);
        let d2 = self.conv(tape, leaves, s2, "unet.down2", 2, 1);

        let m = self.resblock(tape, leaves, d2, "m1", w1, w1, emb);
        let m = self.attention(tape, leaves, m);
        let m = self.resblock(tape, leaves, m, "m2", w1, w1, emb);

        let u1 = tape.upsample2(m);
        let u1 = tape.concat_ch(u1, s2);
        let u1 = self.resblock(tape, leaves, u1, "u1", 2 * w1, w1, emb);
        let u2 = tape.upsample2(u1);
        let u2 = tape.concat_ch(u2, s1);
        let u2 = self.resblock(tape, leaves, u2, "u2", w1 + w0, w0, emb);

        let og = leaves.get(tape, &self.store, "unet.out.gn.g");
        let ob = leaves.get(tape, &self.store, "unet.out.gn.b");
        let out = tape.group_norm(u2, og, ob, self.cfg.groups, 1e-5);
        let out = tape.silu(out);
        self.edge_conv(tape, leaves, out, "unet.tail", "lora.tail")
    }

    pub fn forward(&self, x: &Tensor, t: usize) -> Result<Tensor> {
        self.validate_input(x)?;
        let mut tape = Tape::new();
        let mut leaves = ParamLeaves::new();
        let xid = tape.leaf(x.clone());
        let out = self.forward_tape(&mut tape, &mut leaves, xid, t);
        Ok(tape.value(out).clone())
    }
}

impl NoisePredictor for Denoiser {
    fn predict(&self, x: &Tensor, t: usize) -> Result<Tensor> {
        self.forward(x, t)
    }
}

/// Standard sinusoidal embedding, returned as a [1, dim] row.
pub fn timestep_embedding(t: usize, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / (half - 1) as f64).exp();
        data[i] = (t as f64 * freq).sin();
        data[half + i] = (t as f64 * freq).cos();
    }
    Tensor::new(&[1, dim], data).unwrap()
}

/// Build a wide denoiser from a pretrained narrow one by channel
/// replication: head kernels tile along the input axis (scaled by 1/f), tail
/// kernels and bias tile along the output axis. Body weights are shared;
/// adapters are not carried over.
pub fn expand_denoiser(pre: &Denoiser, c_target: usize) -> Result<Denoiser> {
    let head = ConvWeight::new(
        pre.store.tensor("unet.head.w").clone(),
        Some(pre.store.tensor("unet.head.b").clone()),
    )?;
    let tail = ConvWeight::new(
        pre.store.tensor("unet.tail.w").clone(),
        Some(pre.store.tensor("unet.tail.b").clone()),
    )?;
    let head_x = cre_expand_head(&head, c_target)?;
    let tail_x = cre_expand_tail(&tail, c_target)?;

    let mut store = ParameterStore::new();
    for (name, p) in pre.store.iter() {
        if name.starts_with("lora.") {
            continue;
        }
        store.insert(name.clone(), p.value.clone(), false);
    }
    store.insert("unet.head.w", head_x.kernel, false);
    store.insert("unet.tail.w", tail_x.kernel, false);
    store.insert("unet.tail.b", tail_x.bias.unwrap(), false);

    let mut cfg = pre.cfg;
    cfg.channels = c_target;
    Ok(Denoiser { cfg, store })
}
