//! Channel replicate-and-expansion weight surgery, low-rank adapters, and
//! the timestep-conditioned denoising U-Net that consumes them.

mod cre;
mod lora;
mod unet;

pub use cre::{cre_expand_head, cre_expand_tail, tile_channels, ConvWeight};
pub use lora::{lora_apply, lora_apply_on_tape, LoraAdapter};
pub use unet::{expand_denoiser, Denoiser, UNetConfig};
