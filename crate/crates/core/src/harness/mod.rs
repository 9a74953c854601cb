//! Campaign orchestration behind the CLI: configuration, runs and output.

pub mod campaign;
pub mod config;
pub mod report;

pub use campaign::{
    ablation_alpha, linear_fit, localization_report, run_campaign, scalability_sweep, AblationTable, CampaignReport,
    LinearFit, ScalabilityReport, Timing,
};
pub use config::{prepare, CampaignConfig, Prepared};
pub use report::{emit_ablation, emit_report, emit_scalability, emit_timing, Format};
