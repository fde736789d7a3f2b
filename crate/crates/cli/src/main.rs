//! Command-line interface: price a single configuration or run a suite of
//! configuration files, writing CSV reports.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use gpr_pricer::harness::{
    config_echo, rows_to_csv, run, run_suite, HarnessError, PricingConfig, SuiteRow, CSV_HEADER,
};

/// Environment variable bounding the worker thread count (default: available
/// parallelism).
const THREADS_ENV: &str = "GPR_PRICER_THREADS";

#[derive(Parser)]
#[command(name = "gpr-pricer", about = "American option pricing with GPR surrogates")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Price a single configuration file.
    Price {
        /// Flat key=value configuration file.
        #[arg(long)]
        config: PathBuf,
        /// key=value overrides applied after the file.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Output CSV path (stdout if omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Price every *.cfg configuration in a directory.
    Suite {
        /// Directory of flat key=value configuration files.
        #[arg(long = "config-dir")]
        config_dir: PathBuf,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
        /// Repetitions per configuration.
        #[arg(long, default_value_t = 1)]
        repeat: usize,
    },
}

fn init_threads() {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        if let Ok(n) = v.parse::<usize>() {
            if n >= 1 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
}

fn load_config(path: &PathBuf, overrides: &[String]) -> Result<PricingConfig, HarnessError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| HarnessError::ConfigInvalid(format!("{}: {e}", path.display())))?;
    let mut cfg = PricingConfig::from_key_values(&text)?;
    for o in overrides {
        let (key, value) = o.split_once('=').ok_or_else(|| {
            HarnessError::ConfigInvalid(format!("override {o:?}: expected key=value"))
        })?;
        cfg.apply(key.trim(), value.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_csv(path: Option<&PathBuf>, body: &str) -> Result<(), String> {
    match path {
        Some(p) => std::fs::write(p, body).map_err(|e| format!("{}: {e}", p.display())),
        None => {
            print!("{body}");
            Ok(())
        }
    }
}

fn exit_for(err: &HarnessError) -> ExitCode {
    match err {
        HarnessError::ConfigInvalid(_) => ExitCode::from(1),
        HarnessError::Pricing(_) => ExitCode::from(2),
    }
}

fn main() -> ExitCode {
    init_threads();
    let cli = Cli::parse();
    match cli.command {
        Command::Price {
            config,
            overrides,
            out,
        } => {
            let cfg = match load_config(&config, &overrides) {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("error: {e}");
                    return exit_for(&e);
                }
            };
            eprintln!("pricing {}", config_echo(&cfg));
            match run(&cfg) {
                Ok(report) => {
                    eprintln!("price {:.4} in {:.1} s", report.price, report.wall_time);
                    let row = SuiteRow {
                        config: cfg,
                        repetition: 0,
                        price: Some(report.price),
                        seconds: report.wall_time,
                        error: String::new(),
                    };
                    let body = format!("{CSV_HEADER}\n{}\n", row.to_csv());
                    if let Err(e) = write_csv(out.as_ref(), &body) {
                        eprintln!("error: {e}");
                        return ExitCode::from(1);
                    }
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    exit_for(&e)
                }
            }
        }
        Command::Suite {
            config_dir,
            out,
            repeat,
        } => {
            let mut paths: Vec<PathBuf> = match std::fs::read_dir(&config_dir) {
                Ok(rd) => rd
                    .filter_map(|e| e.ok().map(|e| e.path()))
                    .filter(|p| p.extension().is_some_and(|x| x == "cfg"))
                    .collect(),
                Err(e) => {
                    eprintln!("error: {}: {e}", config_dir.display());
                    return ExitCode::from(1);
                }
            };
            paths.sort();
            let mut configs = Vec::with_capacity(paths.len());
            for p in &paths {
                match load_config(p, &[]) {
                    Ok(c) => configs.push(c),
                    Err(e) => {
                        eprintln!("error: {}: {e}", p.display());
                        return exit_for(&e);
                    }
                }
            }
            match run_suite(&configs, repeat) {
                Ok(rows) => {
                    let had_failures = rows.iter().any(|r| !r.error.is_empty());
                    if let Err(e) = write_csv(Some(&out), &rows_to_csv(&rows)) {
                        eprintln!("error: {e}");
                        return ExitCode::from(1);
                    }
                    eprintln!("wrote {} rows to {}", rows.len(), out.display());
                    if had_failures {
                        ExitCode::from(2)
                    } else {
                        ExitCode::SUCCESS
                    }
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    exit_for(&e)
                }
            }
        }
    }
}
