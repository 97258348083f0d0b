use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use stochastic_cbf::scenario::io::{
    write_report_csv, write_series_csv, write_summary_json, write_trajectory_csv,
};
use stochastic_cbf::scenario::{prepare, run_campaign, ScenarioConfig};
use stochastic_cbf::verify::run_checks;
use stochastic_cbf::Error;

#[derive(Parser)]
#[command(name = "scbf", version, about = "Stochastic CBF safety filters: simulation and Monte Carlo campaigns")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one replicate and write its trajectory CSV.
    Simulate {
        /// Scenario configuration (JSON); defaults apply to missing keys.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Replicate index, which selects the random streams.
        #[arg(long, default_value_t = 0)]
        replicate: usize,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Run every replicate and write the report CSV and summary JSON.
    Campaign {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, short = 'd')]
        out_dir: PathBuf,
        /// Also write the per-step minimum-distance series of every replicate.
        #[arg(long)]
        series: bool,
        /// Record elapsed time in the summary (makes outputs run-dependent).
        #[arg(long)]
        wallclock: bool,
    },
    /// Run the oracle and derivative suites; exits with 3 on any failure.
    Check {
        /// Multiplier on the default instance counts.
        #[arg(long, default_value_t = 1.0)]
        scale: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load_config(path: Option<&Path>) -> stochastic_cbf::Result<ScenarioConfig> {
    match path {
        Some(p) => ScenarioConfig::load(p).map_err(|e| match e {
            Error::Io(msg) => Error::Config(format!("{}: {msg}", p.display())),
            other => other,
        }),
        None => {
            let cfg = ScenarioConfig::default();
            cfg.validate()?;
            Ok(cfg)
        }
    }
}

fn create(path: &Path) -> stochastic_cbf::Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn run(cli: Cli) -> stochastic_cbf::Result<bool> {
    match cli.command {
        Command::Simulate {
            config,
            replicate,
            out,
        } => {
            let cfg = load_config(config.as_deref())?;
            let prep = prepare(&cfg)?;
            let mut file = create(&out)?;
            let outcome = write_trajectory_csv(&prep, replicate, &mut file)?;
            file.flush()?;
            eprintln!(
                "replicate {replicate}: {} steps, min margin {}, {}",
                outcome.steps_run,
                outcome.min_margin,
                if outcome.violated { "VIOLATED" } else { "safe" }
            );
            Ok(true)
        }
        Command::Campaign {
            config,
            out_dir,
            series,
            wallclock,
        } => {
            let cfg = load_config(config.as_deref())?;
            let report = run_campaign(&cfg)?;
            std::fs::create_dir_all(&out_dir)?;
            let mut csv = create(&out_dir.join("report.csv"))?;
            write_report_csv(&report, &mut csv)?;
            csv.flush()?;
            let mut json = create(&out_dir.join("summary.json"))?;
            write_summary_json(&report, wallclock, &mut json)?;
            json.flush()?;
            if series {
                let mut s = create(&out_dir.join("series.csv"))?;
                write_series_csv(&report, &mut s)?;
                s.flush()?;
            }
            eprintln!(
                "{}: {} of {} replicates violated, safety fraction {} [{}, {}], mean deviation {}",
                cfg.mode.label(),
                report.violation_count,
                report.replicates.len(),
                report.safety.fraction,
                report.safety.wilson_lo,
                report.safety.wilson_hi,
                report.mean_dev
            );
            Ok(true)
        }
        Command::Check { scale, seed } => {
            if !(scale > 0.0 && scale.is_finite()) {
                return Err(Error::Config(format!("scale must be positive, got {scale}")));
            }
            let outcomes = run_checks(scale, seed)?;
            for o in &outcomes {
                println!("{} {}: {}", if o.passed { "PASS" } else { "FAIL" }, o.name, o.detail);
            }
            Ok(outcomes.iter().all(|o| o.passed))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(3),
        Err(err @ (Error::Config(_) | Error::EstimatorConfig(_))) => {
            eprintln!("configuration error: {err}");
            ExitCode::from(2)
        }
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(1)
        }
    }
}
