use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use flexblock::mpc::ForecastMode;
use flexblock_cli::{cmd_check, cmd_run, cmd_sweep, parse_ratios, CliError, RunOptions, EXIT_OK, EXIT_VALIDATION};

#[derive(Parser)]
#[command(
    name = "flexblock",
    version,
    about = "Energy-block dispatch and flexibility assessment"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write its trace, envelope, indices and plots.
    Run {
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        no_plots: bool,
        #[arg(long, value_parser = parse_forecast)]
        forecast: Option<ForecastMode>,
    },
    /// Run a scenario once per renewable penetration ratio.
    Sweep {
        scenario: PathBuf,
        /// Comma-separated ratios, e.g. 0,0.1,0.2.
        #[arg(long)]
        ratios: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Validate a scenario without running it.
    Check { scenario: PathBuf },
}

fn parse_forecast(s: &str) -> Result<ForecastMode, String> {
    s.parse()
}

fn run(cli: Cli) -> Result<i32, CliError> {
    match cli.command {
        Command::Run {
            scenario,
            out,
            seed,
            no_plots,
            forecast,
        } => {
            let report = cmd_run(
                &scenario,
                &out,
                &RunOptions {
                    seed,
                    no_plots,
                    forecast,
                },
            )?;
            println!("{}", report.summary());
            Ok(EXIT_OK)
        }
        Command::Sweep {
            scenario,
            ratios,
            out,
            jobs,
            seed,
        } => {
            let ratios = parse_ratios(&ratios)?;
            let opts = RunOptions {
                seed,
                ..RunOptions::default()
            };
            let report = cmd_sweep(&scenario, &ratios, &out, jobs, &opts)?;
            println!(
                "{:>8} {:>12} {:>12} {:>12} {:>12}",
                "ratio", "E_IR", "E_IO", "E_IC", "abandonment"
            );
            for row in &report.rows {
                match (&row.indices, &row.error) {
                    (Some(i), _) => println!(
                        "{:>8.3} {:>12.6} {:>12.6} {:>12.6} {:>12.6}",
                        row.ratio, i.e_ir, i.e_io, i.e_ic, i.abandonment
                    ),
                    (None, e) => println!("{:>8.3} failed: {}", row.ratio, e.as_deref().unwrap_or("")),
                }
            }
            Ok(report.exit_code())
        }
        Command::Check { scenario } => {
            let report = cmd_check(&scenario)?;
            print!("{}", report.render());
            Ok(if report.passed() { EXIT_OK } else { EXIT_VALIDATION })
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("FLEXBLOCK_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() {
                flexblock_cli::EXIT_USAGE
            } else {
                EXIT_OK
            };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
