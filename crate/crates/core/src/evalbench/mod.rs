//! Metrics, robustness tables and the localization and capacity studies.

pub mod metrics;
pub mod report;
pub mod studies;

pub use metrics::{acc, acc_bits, pesq_hook, snr, snr_clips, SNR_CAP_DB};
pub use report::{clip_message, robustness_table, robustness_table_with, EvalReport, ReportMeta, ReportRow};
pub use studies::{
    capacity_sweep, crop_position_study, detect, efficiency_report, localization_trace,
    sliding_extract, window_count, CapacityRow, CropRow, EfficiencyReport, LocalizationTrace,
    WindowResult,
};
