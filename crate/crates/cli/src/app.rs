//! Run a command end to end: pipeline, report and artifacts.

use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::output::{self, OutputError};
use crate::pipeline::{self, Command, RunOutput, StageError};
use crate::report::Report;

pub struct Outcome {
    pub report: Report,
    pub exit_code: i32,
    pub files: Vec<PathBuf>,
}

fn cli_error(operation: &str, e: impl std::fmt::Display) -> StageError {
    StageError {
        module: "cli".into(),
        operation: operation.into(),
        message: e.to_string(),
    }
}

fn emit(dir: &Path, config: &RunConfig, out: &RunOutput) -> Result<Vec<PathBuf>, OutputError> {
    output::ensure_dir(dir)?;
    let mut files = vec![output::write_extremal_csv(dir, &out.extremal)?];
    if let (Some(sheet), true) = (&out.sheet, config.outputs.sheet_csv) {
        files.push(output::write_sheet_csv(dir, &sheet.rows())?);
    }
    if matches!(out.command, Command::Verify | Command::Mintime) {
        files.push(output::write_margins_csv(dir, &out.margins)?);
    }
    if config.outputs.plots {
        files.extend(output::write_plots(dir, out.sheet.as_ref(), &out.margins)?);
    }
    Ok(files)
}

/// Execute `command` and write everything into `config.outputs.dir`. A
/// failed stage still produces `report.json`, with exit code 1.
pub fn execute(command: Command, config: &RunConfig) -> Outcome {
    let dir = &config.outputs.dir;
    let result = pipeline::run(command, config).and_then(|out| {
        let files = emit(dir, config, &out).map_err(|e| cli_error("emit_outputs", e))?;
        Ok((Report::from_output(&out, config), files))
    });
    let (mut report, mut files) = match result {
        Ok(done) => done,
        Err(e) => (Report::from_error(command, config, e), Vec::new()),
    };
    let written = output::ensure_dir(dir).and_then(|_| output::write_report(dir, &report.to_json()));
    match written {
        Ok(path) => files.insert(0, path),
        Err(e) => {
            report.status = "error".into();
            report.exit_code = 1;
            report.error.get_or_insert_with(|| cli_error("write_report", e));
        }
    }
    Outcome {
        exit_code: report.exit_code,
        report,
        files,
    }
}

/// Run with a configuration-level failure (bad file, bad `--param`) reported
/// the same way as a stage failure.
pub fn config_failure(command: Command, config: &RunConfig, operation: &str, e: impl std::fmt::Display) -> Outcome {
    let report = Report::from_error(command, config, cli_error(operation, e));
    let dir = &config.outputs.dir;
    let files = output::ensure_dir(dir)
        .and_then(|_| output::write_report(dir, &report.to_json()))
        .map(|p| vec![p])
        .unwrap_or_default();
    Outcome {
        exit_code: 1,
        report,
        files,
    }
}
