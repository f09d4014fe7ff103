//! Data loading, degradation, metrics, cost accounting and reports.

mod eval;
mod flops;
mod image;
mod metrics;
mod resample;
mod synth;

pub use eval::{
    degrade, evaluate, evaluate_dir, EvalMode, EvalReport, EvalRow, EvalSettings, EVAL_COLUMNS,
};
pub use flops::{
    conv_flops, flops, flops_breakdown, flops_report, format_flops, subnet_params, FlopsBreakdown,
    FlopsReport, FlopsRow, FLOPS_CONVENTION,
};
pub use image::{load_png, load_png_dir, save_png, Image};
pub use metrics::{format_db, psnr, PsnrMode};
pub use resample::{bicubic_kernel, bicubic_resize};
pub use synth::{synthetic_dataset, synthetic_image, write_synthetic_dataset};
