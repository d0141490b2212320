//! Metrics, image-quality scoring, evaluation runs, and report files.

mod metrics;
mod quality;
mod runner;
mod writers;

pub use metrics::{dice, iou, pixel_accuracy};
pub use quality::quality_score;
pub use runner::{
    evaluate_run, summarize, EnhanceMode, EvalLevel, EvalOptions, EvalOutput, EvalRecord,
    LevelSummary, PromptKind,
};
pub use writers::{
    summary_json, write_density_csv, write_density_png, write_records_csv, write_summary_json,
    write_summary_md,
};
