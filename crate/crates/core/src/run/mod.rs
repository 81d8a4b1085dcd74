//! Experiment orchestration: configuration, training runs with periodic
//! greedy evaluation, sweeps, checkpoints and the invariant checker.

mod check;
mod config;
mod rollout;
mod sweep;
mod train;

pub use check::{layer_gradient_error, run_checks, CheckReport, CheckResult, Faults};
pub use config::{
    AgentSection, CommSection, Dtype, ExplorationSection, ExploreScheme, RunConfig, OUT_ROOT_ENV,
};
pub use rollout::{run_episode, ActSettings, EpisodeSummary};
pub use sweep::{cmd_sweep, mean_curve, trapezoid_auc, CellSummary, SweepGrid, SUMMARY_FILE};
pub use train::{
    cmd_eval, cmd_train, read_rows, seed_dir, train_seed, write_rows, EvalReport, MetricRow, SeedRun,
    TrainReport, CHECKPOINT_DIR, CONFIG_FILE, METRICS_FILE,
};
