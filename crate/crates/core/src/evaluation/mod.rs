//! Rollouts on unseen tasks, success and instruction metrics, and the
//! experiment grid.

mod grid;
mod metrics;
mod report;
mod rollout;

pub use grid::{
    cell_config, corpus_fingerprint, evaluate_language, evaluate_success, report_row, run_cell, run_grid, Cell,
    CellOutcome, EvalConfig, ExperimentConfig, Grid, LanguageEval, PlanSource, CODE_VERSION, EVAL_KEYS,
};
pub use metrics::{bleu, difficulty_breakdown, success_rate, token_accuracy, DifficultyRow, EpisodeResult};
pub use report::{render_svg, write_svg, EvalReport, ReportRow, REPORT_HEADER};
pub use rollout::{decode_plan, Environment, ModelPolicy, Policy, ReplayPolicy};
