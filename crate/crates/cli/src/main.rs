//! `dnpsi`: run a configured experiment and write its report and tables.
//!
//! Exit status: 0 pass, 1 check failed, 2 input error, 3 numerical error.

mod config;
mod pipelines;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use serde_json::{json, Value};

use config::ExperimentConfig;
use pipelines::{Outcome, Output};

pub const REPORT_SCHEMA: &str = "dnpsi-report/1";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Numerical(String),
    #[error("{0}")]
    Io(String),
}

impl From<dnpsi::DnError> for CliError {
    fn from(e: dnpsi::DnError) -> Self {
        if e.is_input() {
            CliError::Input(e.to_string())
        } else {
            CliError::Numerical(e.to_string())
        }
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Input(_) | CliError::Io(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }

    fn status(&self) -> &'static str {
        match self {
            CliError::Input(_) | CliError::Io(_) => "input_error",
            CliError::Numerical(_) => "numerical_error",
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "dnpsi",
    version,
    about = "Run a dnpsi experiment from a JSON config"
)]
struct Args {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output_dir` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// RNG seed; overrides `seed` in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Add a generation timestamp to the report and CSV files.
    #[arg(long)]
    stamp: bool,
}

fn main() -> ExitCode {
    let args = Args::parse();
    let stamp = args.stamp.then(|| chrono::Utc::now().to_rfc3339());
    let cfg = std::fs::read_to_string(&args.config)
        .map_err(|e| CliError::Input(format!("{}: {e}", args.config.display())))
        .and_then(|t| ExperimentConfig::parse(&t));
    let dir = args
        .out
        .clone()
        .or_else(|| cfg.as_ref().ok().and_then(|c| c.output_dir.clone()))
        .unwrap_or_else(|| PathBuf::from("."));
    let mut out = match Output::new(&dir, stamp.clone()) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("dnpsi: {e}");
            return ExitCode::from(e.exit_code());
        }
    };
    let seed = args
        .seed
        .or_else(|| cfg.as_ref().ok().and_then(|c| c.seed))
        .unwrap_or(0);
    let command = cfg.as_ref().ok().map(|c| c.command.name());
    let outcome = cfg.and_then(|c| pipelines::run(&c, seed, &mut out));

    let (code, status, result, diagnostic) = match outcome {
        Ok(Outcome {
            passed,
            result,
            diagnostic,
        }) => {
            let (code, status) = if passed {
                (0, "pass")
            } else {
                (1, "check_failed")
            };
            (code, status, result, diagnostic)
        }
        Err(e) => (e.exit_code(), e.status(), Value::Null, Some(e.to_string())),
    };
    let mut report = json!({
        "schema": REPORT_SCHEMA,
        "command": command,
        "status": status,
        "exit_code": code,
        "seed": seed,
        "result": result,
        "diagnostic": diagnostic,
        "files": out.files,
    });
    if let Some(s) = &stamp {
        report["generated_at"] = json!(s);
    }
    let path = out.dir.join("report.json");
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    if let Err(e) = std::fs::write(&path, text + "\n") {
        eprintln!("dnpsi: {}: {e}", path.display());
        return ExitCode::from(2);
    }
    if let Some(d) = &diagnostic {
        eprintln!("dnpsi: {status}: {d}");
    }
    ExitCode::from(code)
}
