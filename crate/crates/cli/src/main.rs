//! `pah`: train, sweep, gradient-check and evaluate from config files.
//!
//! Exit codes: 0 success, 1 internal error, 2 bad configuration or
//! arguments, 3 training divergence, 4 I/O or data-format error,
//! 5 gradient check failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use pah::autodiff::Primitive;
use pah::battery::{first_failure, run_battery};
use pah::config::{RunConfig, SweepAxis};
use pah::harness::{eval_checkpoint, resolve_output, sweep, train_run};
use pah::Error;

#[derive(Parser)]
#[command(
    name = "pah",
    version,
    about = "Train, sweep, gradient-check and evaluate prototype-conditioned hypernetworks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the full task sequence described by a config file.
    Train {
        config: PathBuf,
        /// Run directory; defaults to `output.dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Do not echo per-epoch records to stderr.
        #[arg(long)]
        quiet: bool,
    },
    /// One run per value of an ablation axis.
    Sweep {
        config: PathBuf,
        /// proto_shape, stability, lsp_weight or init.
        #[arg(long)]
        axis: String,
        /// Comma-separated values; defaults to the axis' reference set.
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<String>>,
        /// Sweep directory; defaults to `output.dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every primitive, loss and training step.
    Gradcheck {
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Score a checkpoint on the test splits of a config's tasks.
    Eval {
        checkpoint: PathBuf,
        config: PathBuf,
    },
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config { .. } => 2,
        Error::Divergence { .. } => 3,
        Error::Io { .. }
        | Error::Parse { .. }
        | Error::Version { .. }
        | Error::Dataset(_)
        | Error::Label { .. } => 4,
        Error::GradCheck { .. } => 5,
        _ => 1,
    }
}

fn config_error(detail: String) -> Error {
    Error::Config { line: 0, detail }
}

fn load_config(path: &Path) -> pah::Result<RunConfig> {
    RunConfig::load(path)
}

fn train(config: &Path, out: Option<PathBuf>, quiet: bool) -> pah::Result<()> {
    let cfg = load_config(config)?;
    let dir = resolve_output(out.as_deref().unwrap_or(&cfg.output_dir));
    let record = train_run(&cfg, &dir, !quiet)?;
    println!("run directory: {}", dir.display());
    println!("{}", record.matrix.to_csv().trim_end());
    println!("AA = {:.2}%", 100.0 * record.average_accuracy);
    if record.forgetting_defined {
        println!("FM = {:.2}%", 100.0 * record.forgetting);
    } else {
        println!("FM = 0.00% (undefined for a single task)");
    }
    println!("wallclock = {:.2}s", record.wallclock_s);
    Ok(())
}

fn run_sweep(
    config: &Path,
    axis: &str,
    values: Option<Vec<String>>,
    out: Option<PathBuf>,
) -> pah::Result<()> {
    let axis = SweepAxis::parse(axis).ok_or_else(|| {
        let known: Vec<&str> = SweepAxis::ALL.iter().map(|a| a.name()).collect();
        config_error(format!(
            "unknown sweep axis `{axis}`; expected one of {}",
            known.join(", ")
        ))
    })?;
    let cfg = load_config(config)?;
    let values = values.unwrap_or_else(|| {
        axis.reference_values()
            .iter()
            .map(|v| v.to_string())
            .collect()
    });
    let root = resolve_output(out.as_deref().unwrap_or(&cfg.output_dir));
    let table = sweep(&cfg, axis, &values, &root)?;
    print!("{}", table.to_csv());
    println!("written: {}", root.join(table.file_name()).display());
    Ok(())
}

fn gradcheck(inject_fault: Option<String>) -> pah::Result<()> {
    let fault = inject_fault
        .map(|name| {
            Primitive::from_name(&name)
                .ok_or_else(|| config_error(format!("unknown primitive `{name}`")))
        })
        .transpose()?;
    let results = run_battery(fault)?;
    for r in &results {
        println!(
            "{:<32} {:>12.3e}  < {:.0e}  {}",
            r.name,
            r.max_error,
            r.threshold,
            if r.passed() { "ok" } else { "FAIL" }
        );
    }
    first_failure(&results)
}

fn eval(checkpoint: &Path, config: &Path) -> pah::Result<()> {
    let cfg = load_config(config)?;
    let report = eval_checkpoint(checkpoint, &cfg)?;
    for (task, acc) in &report.accuracies {
        println!("task {task}: {:.2}%", 100.0 * acc);
    }
    println!("AA = {:.2}%", 100.0 * report.average_accuracy);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { config, out, quiet } => train(&config, out, quiet),
        Command::Sweep {
            config,
            axis,
            values,
            out,
        } => run_sweep(&config, &axis, values, out),
        Command::Gradcheck { inject_fault } => gradcheck(inject_fault),
        Command::Eval { checkpoint, config } => eval(&checkpoint, &config),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
