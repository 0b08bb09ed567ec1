//! Hyperparameter optimization under grid-search-relative time budgets, with
//! overfitting detection against the grid baseline and a troubleshooting
//! procedure that reduces the search space or raises the budget until a
//! terminal verdict is reached.

pub mod engine;
pub mod procedure;
pub mod protocol;
pub mod sampler;
pub mod scheduler;
pub mod space;
pub mod surrogate;
pub mod verdict;

pub use engine::{
    checkpoint_plan, run_grid_search, run_hpo, select_best, Algorithm, BudgetSpec, Evaluator,
    GridBaseline, HpoOptions, HpoRun, HpoRunScores, TaskSize, TrialRecord, TrialStatus,
};
pub use space::{Domain, GridSpec, Scalar, SearchSpace, TrialConfig};
pub use verdict::{classify_round, classify_run, RoundVerdict, RunScores, Verdict};
