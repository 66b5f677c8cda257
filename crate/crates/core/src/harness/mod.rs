//! Pretraining, online runs, hyper-parameter sweeps and report rendering.

pub mod cache;
mod pretrain;
pub mod report;
mod run;
mod sweep;

pub use pretrain::{pretrain, PretrainConfig, Pretrained};
pub use report::{report, SummaryRow, Table};
pub use run::{
    build_learner, checkpoint_archive, drive, run, Driven, MethodConfig, RunConfig, RunRecord, RunStatus, StreamKind,
    TaskColumn, Workspace,
};
pub use sweep::{aos_grid, sweep, LeaderboardEntry, SweepResult, SELECTION_WEIGHT};
