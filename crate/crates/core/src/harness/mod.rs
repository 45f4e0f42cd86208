//! The experiment driver: configuration, search, retraining, sweeps and the
//! oracle suites, as used by the `lease` binary.

pub mod config;
pub mod gradcheck;
pub mod metrics;
pub mod run;

pub use config::RunConfig;
pub use metrics::{EvalRow, MetricsRow, SweepRow};
pub use run::{
    compare_with_random, eval_on, gamma_sweep, random_genotype, run_eval, run_search, search_on, ComparisonRow,
    EvalOutcome, SearchOutcome,
};
