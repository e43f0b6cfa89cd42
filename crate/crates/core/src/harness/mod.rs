//! End-to-end experiments: training, calibration, trials and reporting.
//!
//! A marginal run trains quantile predictors on training tasks, builds a
//! pool of evaluation tasks, and in every trial draws one target and `l`
//! calibration tasks from the pool. A conditional run repeatedly redraws the
//! calibration tasks and measures coverage of each fixed calibration on fresh
//! target tasks.

mod baselines;
mod config;
mod experiment;
mod results;

pub use baselines::{naive_baseline, top_k_baseline};
pub use config::{ExperimentConfig, FullCpVariant, MethodSet, RunMode};
pub use experiment::{
    run, run_conditional, run_marginal, simulate, train_and_save, train_quantile_predictors, ConditionalOutcome,
    MarginalOutcome, RunReport, CONDITIONAL_FILE, EPISODES_FILE, RESULTS_FILE, SUMMARY_FILE,
};
pub use results::{
    format_sig6, read_results, summarize, write_conditional, write_results, write_summary, ConditionalResult, Method,
    SummaryRow, TrialResult, CONDITIONAL_HEADER, INFEASIBLE, RESULTS_HEADER, SUMMARY_HEADER,
};
