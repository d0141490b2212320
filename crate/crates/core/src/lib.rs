pub mod bundle;
pub mod checkpoint;
pub mod config;
pub mod cre_lora;
pub mod dataset;
pub mod degrade;
pub mod diffusion;
pub mod error;
pub mod eval_report;
pub mod image_io;
pub mod mask;
pub mod optim;
pub mod params;
pub mod seg_model;
pub mod rng;
pub mod tape;
pub mod train;
pub mod tensor;
