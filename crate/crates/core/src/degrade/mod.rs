//! Multi-level second-order image degradation synthesis.

mod kernel;
mod ops;
mod pipeline;

pub use kernel::{bessel_j1, make_blur_kernel, BlurKernel, KernelKind};
pub use ops::{
    add_gaussian_noise, add_poisson_noise, apply_blur, jpeg_compress, luma, random_resize, resize,
    ResizeAlgo,
};
pub use pipeline::{
    apply_recipe, degrade_image, sample_recipe, DegradationRecipe, Level, OpKind, OpRecord,
    GAUSSIAN_NOISE_PROB, GRAY_NOISE_PROB, SINC_PROB, SKIP_SECOND_BLUR_PROB,
};
