//! `gccd`: generate scenarios, run and sweep experiments, check gradients and
//! inspect reports.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gccd_cli::sweep::cmd_sweep;
use gccd_cli::{cmd_gradcheck, cmd_make_data, cmd_report, cmd_run, gradcheck_passed, table, CliError, RunConfig};
use gccd_core::eval::ReportFormat;

#[derive(Parser)]
#[command(name = "gccd", version, about = "Generalized continual category discovery experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct RunArgs {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic scenario as a gccd-features v1 file.
    MakeData(RunArgs),
    /// Train over every task and write the report.
    Run {
        #[command(flatten)]
        args: RunArgs,
        /// Write only this format instead of the configured ones.
        #[arg(long, value_enum)]
        format: Option<Format>,
    },
    /// Run the cross product of the `[sweep]` axes.
    Sweep {
        #[command(flatten)]
        args: RunArgs,
        /// Concurrent cells.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Finite-difference check of every loss.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Perturb the analytic gradients; every check should then fail.
        #[arg(long)]
        corrupt: bool,
    },
    /// Pretty-print a JSON report.
    Report {
        path: PathBuf,
        /// Re-emit the report in this format instead of the summary tables.
        #[arg(long, value_enum)]
        format: Option<Format>,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Format {
    Json,
    Csv,
    Tsv,
}

impl From<Format> for ReportFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Json => ReportFormat::Json,
            Format::Csv => ReportFormat::Csv,
            Format::Tsv => ReportFormat::Tsv,
        }
    }
}

fn load(args: &RunArgs) -> Result<RunConfig, CliError> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::parse("", Path::new("."))?,
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(o) = &args.out {
        cfg.output.dir = o.clone();
    }
    Ok(cfg)
}

fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::MakeData(args) => {
            let path = cmd_make_data(&load(&args)?)?;
            println!("wrote {}", path.display());
        }
        Command::Run { args, format } => {
            let mut cfg = load(&args)?;
            if let Some(f) = format {
                cfg.output.formats = vec![f.into()];
            }
            let out = cmd_run(&cfg)?;
            print!("{}", table::summary(&out.report));
            for f in &out.files {
                println!("wrote {}", f.display());
            }
        }
        Command::Sweep { args, jobs } => {
            if jobs == 0 {
                return Err(CliError::Config("--jobs must be at least 1".into()));
            }
            let out = cmd_sweep(&load(&args)?, jobs)?;
            print!("{}", out.table());
            for row in &out.rows {
                for (seed, msg) in &row.failures {
                    println!("failed: {} seed {seed}: {msg}", row.cell);
                }
            }
            let failed = out.failed_runs();
            if failed > 0 {
                return Err(CliError::Failed(format!("{failed} sweep run(s) failed")));
            }
        }
        Command::Gradcheck { seed, corrupt } => {
            let results = cmd_gradcheck(seed, corrupt);
            let mut t = table::Table::new(["loss", "max_rel_error", "status"]);
            for &(name, err) in &results {
                let ok = err < gccd_cli::GRADCHECK_TOLERANCE;
                t.row([name.to_string(), format!("{err:.3e}"), if ok { "ok" } else { "FAIL" }.to_string()]);
            }
            print!("{}", t.render());
            if !gradcheck_passed(&results) {
                return Err(CliError::Failed("gradient check failed".into()));
            }
        }
        Command::Report { path, format } => {
            let report = cmd_report(&path)?;
            match format.map(ReportFormat::from) {
                Some(ReportFormat::Json) => print!("{}", report.to_json().map_err(|e| CliError::Failed(e.to_string()))?),
                Some(ReportFormat::Csv) => print!("{}", report.to_csv()),
                Some(ReportFormat::Tsv) => print!("{}", report.to_tsv()),
                None => {
                    println!("method {}", report.config.method.name());
                    print!("{}", table::summary(&report));
                    println!();
                    print!("{}", table::acc_matrix(&report));
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("GCCD_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("gccd: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
