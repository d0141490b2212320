//! Synthetic corpus construction, manifests, and prompt sampling.

mod manifest;
mod prompts;
mod synth;

pub use manifest::{
    build_synthetic_corpus, read_recipes, write_recipes, CorpusConfig, Manifest, RecipeLine,
    SampleRecord, Split,
};
pub use prompts::{
    gt_box_prompt, noise_box_prompt, sample_point_prompt, DEFAULT_BOX_NOISE, DEFAULT_POINTS,
};
pub use synth::render_sample;
