//! Out-of-sample evaluation and the multi-trial comparison protocol.

mod eval;
mod experiment;

pub use eval::{empirical_quantile, evaluate_solution, recourse_costs, EvalReport};
pub use experiment::{
    run_experiment, sample_generated, trial_seed, write_improvements_csv, BoxStats,
    ExperimentConfig, ExperimentReport, ExperimentResults, Improvement, Method, MethodOutcome,
    MethodSummary, MethodTiming, TrialResult, TrialTiming,
};
