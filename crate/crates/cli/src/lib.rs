//! Config-driven experiment runner: TOML in, CSV, JSON and SVG out.

pub mod config;
pub mod error;
pub mod run;
pub mod svg;

use std::path::{Path, PathBuf};

pub use config::{ExperimentConfig, ExperimentKind, LoadedConfig};
pub use error::{CliError, CliResult};
pub use run::{run_experiment, Outcome, ParabolicMode, RunOptions, RunReport, Task};

/// Files produced by one run.
#[derive(Clone, Debug)]
pub struct Written {
    pub csv: PathBuf,
    pub report: PathBuf,
    pub svg: Option<PathBuf>,
}

/// Writes the outcome's CSV to `csv`, the report next to it with a `.json`
/// extension and, when asked, the plot with `.svg`.
pub fn write_outcome(outcome: &Outcome, csv: &Path, svg: bool) -> CliResult<Written> {
    if let Some(dir) = csv.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    let report = csv.with_extension("json");
    let svg_path = svg.then(|| csv.with_extension("svg"));
    let svg_text = svg.then(|| outcome.svg());
    let put = |path: &Path, text: &str| std::fs::write(path, text).map_err(|e| CliError::io(path, e));
    put(csv, &outcome.csv)?;
    put(&report, &outcome.report.to_json())?;
    if let (Some(p), Some(t)) = (&svg_path, &svg_text) {
        put(p, t)?;
    }
    Ok(Written { csv: csv.to_path_buf(), report, svg: svg_path })
}

/// Worker count from `MARTINLAB_THREADS`, if set.
pub fn thread_cap() -> CliResult<Option<usize>> {
    match std::env::var("MARTINLAB_THREADS") {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(CliError::Config(format!("MARTINLAB_THREADS must be a positive integer, got {v:?}"))),
        },
    }
}
