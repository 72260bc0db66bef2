//! Config-driven experiment runner for the depth-induced tangent kernel.
//!
//! A run reads one JSON spec, executes the named experiment with
//! `trials` repetitions and writes `results.csv`, `summary.json` and
//! `spec_echo.json` into the spec's `output_dir`.

pub mod experiments;
pub mod run;
pub mod spec;

pub use experiments::{Outcome, RunError};
pub use run::{run_spec_file, RunOptions, RunReport};
pub use spec::{ExperimentKind, ExperimentSpec};
