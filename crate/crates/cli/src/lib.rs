//! Command implementations behind the `gccd` binary.
//!
//! Each command returns a [`CliError`] whose [`CliError::exit_code`] is the
//! process exit status: 0 success, 1 runtime failure, 2 configuration or usage
//! error.

pub mod config;
pub mod sweep;
pub mod table;

use std::fmt;
use std::path::{Path, PathBuf};

use gccd_core::datagen;
use gccd_core::engine::run_scenario;
use gccd_core::eval::{self, MetricsReport, ReportFormat};
use gccd_core::losses::gradient_checks;

pub use config::RunConfig;

/// Where a runtime failure happened.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Scenario,
    Training,
    Output,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Scenario => "scenario",
            Phase::Training => "training",
            Phase::Output => "output",
        })
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{phase} phase failed: {source}")]
    Runtime {
        phase: Phase,
        #[source]
        source: gccd_core::Error,
    },
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime { .. } | CliError::Failed(_) => 1,
        }
    }

    fn output(source: gccd_core::Error) -> Self {
        CliError::Runtime {
            phase: Phase::Output,
            source,
        }
    }
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::output(gccd_core::Error::Io {
        path: dir.to_path_buf(),
        source: e,
    }))
}

/// File name written by [`cmd_make_data`] inside the output directory.
pub const DATASET_FILE: &str = "features.gccd";

/// Write the configured synthetic scenario as a `gccd-features v1` file.
pub fn cmd_make_data(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    if cfg.scenario.dataset.is_some() {
        return Err(CliError::Config("make-data needs a synthetic scenario, not a dataset path".into()));
    }
    let text = datagen::synthetic_feature_table(&cfg.scenario.synthetic, cfg.scenario.n_tasks, cfg.seed).map_err(
        |source| CliError::Runtime {
            phase: Phase::Scenario,
            source,
        },
    )?;
    create_dir(&cfg.output.dir)?;
    let path = cfg.output.dir.join(DATASET_FILE);
    std::fs::write(&path, text).map_err(|e| CliError::output(gccd_core::Error::Io {
        path: path.clone(),
        source: e,
    }))?;
    Ok(path)
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: MetricsReport,
    pub files: Vec<PathBuf>,
}

/// Train over the scenario and write the report in every configured format.
pub fn cmd_run(cfg: &RunConfig) -> Result<RunOutput, CliError> {
    let scenario = cfg.build_scenario()?;
    let report = run_scenario(&scenario, &cfg.method, cfg.seed).map_err(|source| CliError::Runtime {
        phase: Phase::Training,
        source,
    })?;
    let files = write_report(&report, &cfg.output.dir, "report", &cfg.output.formats)?;
    Ok(RunOutput { report, files })
}

pub fn write_report(
    report: &MetricsReport,
    dir: &Path,
    stem: &str,
    formats: &[ReportFormat],
) -> Result<Vec<PathBuf>, CliError> {
    create_dir(dir)?;
    formats
        .iter()
        .map(|&f| {
            let path = dir.join(format!("{stem}.{}", f.extension()));
            eval::serialize_report(report, &path, f).map_err(CliError::output)?;
            Ok(path)
        })
        .collect()
}

/// Relative error threshold of [`cmd_gradcheck`].
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// Max relative error of every loss at width 8 and batch 6.
pub fn cmd_gradcheck(seed: u64, corrupt: bool) -> Vec<(&'static str, f64)> {
    gradient_checks(8, 6, seed, corrupt)
}

pub fn gradcheck_passed(results: &[(&'static str, f64)]) -> bool {
    results.iter().all(|&(_, e)| e < GRADCHECK_TOLERANCE)
}

pub fn cmd_report(path: &Path) -> Result<MetricsReport, CliError> {
    eval::load_report(path).map_err(|e| match e {
        gccd_core::Error::Io { .. } => CliError::Config(e.to_string()),
        other => CliError::Runtime {
            phase: Phase::Output,
            source: other,
        },
    })
}
