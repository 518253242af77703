use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dmlrc::calibration::MeatRows;
use dmlrc::error::{Error, Result};
use dmlrc::pipeline::{self, AnalysisOptions, ColumnSchema};
use dmlrc::simulation::{run_replicates, RunMeta, RunOptions, ScenarioConfig};

#[derive(Parser)]
#[command(name = "dmlrc", version, about = "DML with regression calibration for mismeasured exposures")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Monte-Carlo replicates of a simulation scenario; writes one CSV row per estimator.
    Simulate {
        /// Scenario 1-8.
        #[arg(long)]
        scenario: Option<u8>,
        /// Minimum true-surrogate correlation.
        #[arg(long)]
        rho: Option<f64>,
        #[arg(long)]
        replicates: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// TOML scenario file; the flags above override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Worker threads (results do not depend on this).
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Fits the calibration model on a validation-study CSV.
    Calibrate {
        #[arg(long)]
        validation: PathBuf,
        #[arg(long)]
        schema: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Use pairwise-complete rows in the sandwich meat.
        #[arg(long)]
        pairwise_meat: bool,
    },
    /// Multi-pollutant analysis of a main study with a validation study.
    Analyze {
        #[arg(long)]
        main: PathBuf,
        #[arg(long)]
        validation: PathBuf,
        #[arg(long)]
        schema: PathBuf,
        /// Comma-separated `slr`/`dml`, optionally `:corrected` or `:uncorrected`.
        #[arg(long, default_value = "slr,dml")]
        methods: String,
        /// Add DML with all pairwise interactions among confounders.
        #[arg(long)]
        interactions: bool,
        /// Add single-pollutant models adjusted for total mass and covariates.
        #[arg(long)]
        single_pollutant: bool,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(command: Command) -> Result<i32> {
    match command {
        Command::Simulate {
            scenario,
            rho,
            replicates,
            seed,
            config,
            out,
            threads,
        } => {
            let base = match &config {
                Some(path) => ScenarioConfig::from_toml_file(path)?,
                None => {
                    let s = scenario.ok_or_else(|| Error::Config("--scenario is required without --config".into()))?;
                    let r = rho.ok_or_else(|| Error::Config("--rho is required without --config".into()))?;
                    ScenarioConfig::new(s, r)?
                }
            };
            let cfg = base.with_overrides(scenario, rho)?;
            let r = replicates.unwrap_or(cfg.replicates);
            let seed = seed.unwrap_or(cfg.seed);
            let opts = RunOptions {
                threads,
                ..RunOptions::default()
            };
            let summary = run_replicates(&cfg, r, seed, &opts)?;
            summary.write_csv(create(&out)?)?;
            let meta = RunMeta::new(&cfg, r, seed)?;
            std::fs::write(sidecar(&out), serde_json::to_string_pretty(&meta)?)?;
            Ok(0)
        }
        Command::Calibrate {
            validation,
            schema,
            out,
            pairwise_meat,
        } => {
            let schema = ColumnSchema::from_file(&schema)?;
            let meat = if pairwise_meat {
                MeatRows::PairwiseComplete
            } else {
                MeatRows::CompleteCase
            };
            let model = pipeline::calibrate_file(&validation, &schema, meat)?;
            std::fs::write(&out, model.to_json()?)?;
            Ok(0)
        }
        Command::Analyze {
            main,
            validation,
            schema,
            methods,
            interactions,
            single_pollutant,
            seed,
            out,
        } => {
            let schema = ColumnSchema::from_file(&schema)?;
            let options = AnalysisOptions {
                methods: pipeline::parse_methods(&methods)?,
                interactions,
                single_pollutant,
                seed,
                ..AnalysisOptions::default()
            };
            let report = pipeline::analyze_files(&main, &validation, &schema, &options)?;
            std::fs::write(&out, report.to_json()?)?;
            for f in &report.failures {
                eprintln!("failed: {} {}: {}", f.constituent, f.column, f.error);
            }
            Ok(report.exit_code())
        }
    }
}

fn create(path: &Path) -> Result<std::fs::File> {
    Ok(std::fs::File::create(path)?)
}

/// `results.csv` -> `results.meta.json`.
fn sidecar(out: &Path) -> PathBuf {
    out.with_extension("meta.json")
}
