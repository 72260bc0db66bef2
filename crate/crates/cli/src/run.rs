use std::fs;
use std::path::{Path, PathBuf};

use serde_json::json;

use crate::experiments::{self, RunError};
use crate::spec::ExperimentSpec;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunOptions {
    /// Worker threads; `None` uses the rayon default.
    pub jobs: Option<usize>,
    /// Overrides the spec's base seed.
    pub seed: Option<u64>,
    /// Overrides the spec's output directory.
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub output_dir: PathBuf,
    pub warnings: Vec<String>,
    /// Set when results were written but some group has no usable trial.
    pub numeric_failure: Option<String>,
}

impl RunReport {
    pub fn exit_code(&self) -> u8 {
        if self.numeric_failure.is_some() {
            3
        } else {
            0
        }
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> RunError {
    RunError::Io(format!("{}: {e}", path.display()))
}

fn write(path: PathBuf, contents: &str) -> Result<(), RunError> {
    fs::write(&path, contents).map_err(|e| io_err(&path, e))
}

/// Parses, resolves and validates a spec file, applying `opts` overrides.
pub fn load_spec(path: &Path, opts: &RunOptions) -> Result<ExperimentSpec, RunError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut spec = ExperimentSpec::from_json(&text).map_err(|e| RunError::Validation(e.0))?;
    if let Some(s) = opts.seed {
        spec.seed = s;
    }
    if let Some(d) = &opts.output_dir {
        spec.output_dir = d.clone();
    }
    let spec = spec.resolve();
    spec.validate().map_err(|e| RunError::Validation(e.0))?;
    Ok(spec)
}

/// Runs a validated spec and writes its artifacts.
pub fn run_spec(spec: &ExperimentSpec, jobs: Option<usize>) -> Result<RunReport, RunError> {
    if jobs == Some(0) {
        return Err(RunError::Validation("--jobs must be >= 1".into()));
    }
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = jobs {
        pool = pool.num_threads(n);
    }
    let pool = pool.build().map_err(|e| RunError::Io(e.to_string()))?;
    let outcome = pool.install(|| experiments::run(spec))?;

    let dir = &spec.output_dir;
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    write(dir.join("results.csv"), &outcome.csv)?;
    for (name, body) in &outcome.extra {
        write(dir.join(name), body)?;
    }
    let mut summary = outcome.summary.clone();
    if let Some(obj) = summary.as_object_mut() {
        obj.insert("seed".into(), json!(spec.seed));
        obj.insert("warnings".into(), json!(outcome.warnings));
        obj.insert("numeric_failure".into(), json!(outcome.numeric_failure));
    }
    let pretty = |v: &serde_json::Value| serde_json::to_string_pretty(v).expect("json value serializes");
    write(dir.join("summary.json"), &(pretty(&summary) + "\n"))?;
    let echo = serde_json::to_value(spec).map_err(|e| RunError::Io(e.to_string()))?;
    write(dir.join("spec_echo.json"), &(pretty(&echo) + "\n"))?;
    Ok(RunReport {
        output_dir: dir.clone(),
        warnings: outcome.warnings,
        numeric_failure: outcome.numeric_failure,
    })
}

pub fn run_spec_file(path: &Path, opts: &RunOptions) -> Result<RunReport, RunError> {
    let spec = load_spec(path, opts)?;
    run_spec(&spec, opts.jobs)
}
