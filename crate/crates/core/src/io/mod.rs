//! Files in and out: run configuration, datasets, membership priors,
//! snapshots and reports.

mod config;
mod data;
mod report;
mod snapshot;

pub use config::{load_run_config, IoBlock, ModelBlock, PriorBlock, ReportBlock, RunConfig};
pub use data::{
    assemble_batches, read_dataset, read_membership_priors, read_profiles, read_stm_hyper, write_dataset, write_membership_priors,
    MembershipPriorFile, PosteriorRecord, ProfileRecord, StmHyperFile,
};
pub use report::{
    hash_files, period_report, read_pmf_csv, write_pmf_csv, write_report, write_report_at, Manifest, PeriodTiming, RelativeRiskRow,
    Report, RiskRow,
};
pub use snapshot::{read_snapshot, write_snapshot, Snapshot, SNAPSHOT_VERSION};
