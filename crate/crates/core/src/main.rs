use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use clustersim::experiments::{
    app_rows, compare, compare_rows, emit_csv, model, model_rows, node_rows, run_with, sweep,
    write_csv, Axis, ExperimentError, Row, RunOptions, SimConfig, APP_COLUMNS, COMPARE_COLUMNS,
    MODEL_COLUMNS, NODE_COLUMNS, RESULT_COLUMNS,
};

#[derive(Parser)]
#[command(name = "clustersim", version, about = "Clustered many-core run-time management simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// `key = value` config file.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override one key; repeatable, applied after the file.
    #[arg(short = 's', long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output CSV (stdout when omitted).
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate a single configuration.
    Run {
        #[command(flatten)]
        common: Common,
        /// Per-application records.
        #[arg(long)]
        apps_out: Option<PathBuf>,
        /// Per-node counters.
        #[arg(long)]
        nodes_out: Option<PathBuf>,
        /// One line per delivered message.
        #[arg(long)]
        trace_out: Option<PathBuf>,
    },
    /// Simulate the Cartesian product of the given axes.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// `key=v1,v2,...`; repeatable.
        #[arg(short, long = "axis", value_name = "KEY=V1,V2")]
        axis: Vec<String>,
    },
    /// Evaluate the analytic speedup model.
    Model {
        #[command(flatten)]
        common: Common,
        /// Comma-separated k values (default: powers of two up to m).
        #[arg(long, value_delimiter = ',')]
        ks: Option<Vec<u32>>,
    },
    /// Independent-task benchmark simulated next to the model.
    Compare {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        ks: Option<Vec<u32>>,
    },
}

enum Failure {
    Config(String),
    Breach(String),
    Suppressed,
}

impl From<ExperimentError> for Failure {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::Config(_) => Failure::Config(e.to_string()),
            _ => Failure::Breach(e.to_string()),
        }
    }
}

fn load(common: &Common) -> Result<SimConfig, Failure> {
    let text = match &common.config {
        Some(p) => std::fs::read_to_string(p)
            .map_err(|e| Failure::Config(format!("{}: {e}", p.display())))?,
        None => String::new(),
    };
    let overrides = common
        .set
        .iter()
        .map(|kv| {
            kv.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| Failure::Config(format!("--set {kv:?}: expected KEY=VALUE")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(SimConfig::load(&text, &overrides)?)
}

fn output(path: Option<&Path>, header: &[&str], rows: &[Row]) -> Result<(), Failure> {
    match path {
        Some(p) => emit_csv(p, header, rows)?,
        None => write_csv(std::io::stdout().lock(), header, rows)?,
    }
    Ok(())
}

fn execute(cmd: Cmd) -> Result<(), Failure> {
    match cmd {
        Cmd::Run {
            common,
            apps_out,
            nodes_out,
            trace_out,
        } => {
            let cfg = load(&common)?;
            cfg.validate()?;
            let opts = RunOptions {
                audit: false,
                log_messages: trace_out.is_some(),
            };
            let (result, chip) = run_with(&cfg, opts)?;
            output(common.out.as_deref(), &RESULT_COLUMNS, &[Row::from_result(&result)])?;
            if let Some(p) = apps_out {
                emit_csv(&p, &APP_COLUMNS, &app_rows(&result))?;
            }
            if let Some(p) = nodes_out {
                emit_csv(&p, &NODE_COLUMNS, &node_rows(&chip))?;
            }
            if let Some(p) = trace_out {
                let mut text = result.message_log.join("\n");
                text.push('\n');
                std::fs::write(&p, text).map_err(ExperimentError::from)?;
            }
            if !result.is_valid() {
                return Err(Failure::Suppressed);
            }
        }
        Cmd::Sweep { common, axis } => {
            let cfg = load(&common)?;
            let axes = axis
                .iter()
                .map(|a| a.parse::<Axis>())
                .collect::<Result<Vec<_>, _>>()?;
            let out = sweep(&cfg, &axes)?;
            output(common.out.as_deref(), &RESULT_COLUMNS, &out.rows)?;
            if out.all_suppressed() {
                return Err(Failure::Suppressed);
            }
        }
        Cmd::Model { common, ks } => {
            let cfg = load(&common)?;
            let pts = model(&cfg, ks.as_deref())?;
            output(common.out.as_deref(), &MODEL_COLUMNS, &model_rows(&pts))?;
        }
        Cmd::Compare { common, ks } => {
            let cfg = load(&common)?;
            let pts = compare(&cfg, ks.as_deref())?;
            output(common.out.as_deref(), &COMPARE_COLUMNS, &compare_rows(&cfg, &pts))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Breach(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Suppressed) => {
            eprintln!("error: every run lost applications; metrics suppressed");
            ExitCode::from(3)
        }
    }
}
