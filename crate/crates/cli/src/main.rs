use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use fusillade_cli::commands::{self, SweepParam};
use fusillade_cli::config::{ConfigDocument, Format};
use fusillade_cli::{CliError, CliResult};

#[derive(Parser)]
#[command(name = "fusillade", version, about = "Plan and simulate fusillade repeater chains")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum TableFormat {
    Text,
    Csv,
}

#[derive(Clone, Copy, ValueEnum)]
enum RowFormat {
    Csv,
    Json,
}

#[derive(Subcommand)]
enum Command {
    /// Fusiliers needed per fusiland count for a target failure probability.
    Plan {
        #[arg(long, value_delimiter = ',', default_value = "1,2,10,100")]
        m: Vec<u32>,
        #[arg(long, default_value_t = 0.25, allow_negative_numbers = true)]
        p: f64,
        #[arg(long, default_value_t = 0.01, allow_negative_numbers = true)]
        target: f64,
        #[arg(long, value_enum, default_value = "text")]
        format: TableFormat,
    },
    /// Run one configuration and write its summary.
    Simulate {
        config: PathBuf,
        /// Summary destination; overrides `output.path`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write the event trace here (JSON lines).
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Run a configuration once per value of one parameter.
    Sweep {
        config: PathBuf,
        /// One of length_km, p, n, m, F, strategy.
        #[arg(long)]
        param: String,
        #[arg(long, value_delimiter = ',', num_args = 0.., allow_negative_numbers = true)]
        values: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "csv")]
        format: RowFormat,
    },
}

fn write_or_print(path: Option<&Path>, text: &str) -> CliResult<()> {
    match path {
        Some(path) => std::fs::write(path, text)
            .map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Plan { m, p, target, format } => {
            let lines = commands::plan(&m, p, target)?;
            print!("{}", commands::render_plan(&lines, matches!(format, TableFormat::Csv)));
        }
        Command::Simulate { config, out, trace } => {
            let doc = ConfigDocument::load(&config)?;
            let summary_path = out.or_else(|| doc.output.path.clone());
            let trace_path = match (trace, doc.output.trace) {
                (Some(path), _) => Some(path),
                (None, true) => Some(
                    summary_path
                        .as_ref()
                        .map(|p| p.with_extension("trace.jsonl"))
                        .ok_or_else(|| CliError::Config("output.trace: tracing needs --trace or output.path".into()))?,
                ),
                (None, false) => None,
            };
            for warning in &doc.check()?.warnings {
                eprintln!("warning: {warning}");
            }
            let sim = commands::simulate(&doc, trace_path.is_some())?;
            write_or_print(summary_path.as_deref(), &commands::render_summary(&sim.document, doc.output.format))?;
            if let (Some(path), Some(lines)) = (trace_path, sim.trace) {
                write_or_print(Some(&path), &lines)?;
            }
        }
        Command::Sweep { config, param, values, out, format } => {
            let param: SweepParam = param.parse()?;
            let doc = ConfigDocument::load(&config)?;
            let values: Vec<String> = values.into_iter().filter(|v| !v.trim().is_empty()).collect();
            let rows = commands::sweep(&doc, param, &values)?;
            let format = match format {
                RowFormat::Csv => Format::Csv,
                RowFormat::Json => Format::Json,
            };
            write_or_print(out.as_deref(), &commands::render_sweep(&rows, format))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let first = e.to_string();
            let first = first.lines().next().unwrap_or_default().trim_start_matches("error: ");
            eprintln!("error[usage]: {first}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.line());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
