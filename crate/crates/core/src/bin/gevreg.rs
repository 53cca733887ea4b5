use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use gevreg::io::RunConfig;
use gevreg::model::Family;
use gevreg::run;
use gevreg::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "gevreg", version, about = "Bayesian GEV regression for regional flood frequency analysis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML or JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every randomized step.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Directory holding maxima.csv and covariates.csv.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    #[arg(long, global = true)]
    model: Option<Family>,
    #[arg(long, global = true)]
    folds: Option<usize>,
    /// Comma-separated return periods in years.
    #[arg(long, global = true, value_delimiter = ',')]
    return_periods: Option<Vec<f64>>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic basin.
    Simulate,
    /// Fit the full data and write a run directory.
    Fit,
    /// Predict ungauged sites from a fitted run.
    Predict {
        /// Run directory written by `fit`.
        #[arg(long)]
        run: PathBuf,
        /// Covariate file with one row per site.
        #[arg(long)]
        sites: PathBuf,
    },
    /// Station-holdout cross-validation.
    Cv,
    /// Recompute station tables and diagnostics from stored draws.
    Diagnose {
        #[arg(long)]
        run: PathBuf,
    },
}

fn config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.sampler.seed = s;
        cfg.station_sampler.seed = s;
        cfg.cv.seed = s;
        cfg.simulate.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.output.clone_from(o);
    }
    if let Some(d) = &cli.data {
        cfg.data.maxima = Some(d.join("maxima.csv"));
        cfg.data.covariates = Some(d.join("covariates.csv"));
    }
    if let Some(m) = cli.model {
        cfg.model = m;
    }
    if let Some(g) = cli.folds {
        cfg.cv.folds = Some(g);
    }
    if let Some(r) = &cli.return_periods {
        cfg.return_periods.clone_from(r);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn execute(cli: &Cli) -> Result<ExitCode> {
    let cfg = config(cli)?;
    match &cli.command {
        Command::Simulate => {
            let dir = run::simulate_command(&cfg)?;
            println!("{}", dir.display());
        }
        Command::Fit => {
            let out = run::fit_command(&cfg)?;
            let div = out.draws.divergences();
            if div > 0 {
                eprintln!("warning: {div} divergent transitions after warmup");
            }
            println!("{}", cfg.output.display());
        }
        Command::Predict { run: dir, sites } => {
            let out = cli.out.clone().unwrap_or_else(|| dir.clone());
            let preds = run::predict_command(dir, sites, &out, cli.seed, cli.return_periods.as_deref())?;
            for p in preds.iter().filter(|p| p.clamped) {
                eprintln!("warning: covariates of '{}' clamped into the training span", p.station);
            }
            println!("{}", out.join("predictions.csv").display());
        }
        Command::Cv => {
            let res = run::cv_command(&cfg)?;
            println!("{}", cfg.output.display());
            if res.partial {
                for f in res.folds.iter().filter(|f| !f.failures.is_empty()) {
                    for (family, msg) in &f.failures {
                        eprintln!("fold {} ({family}) failed: {msg}", f.fold);
                    }
                }
                return Ok(ExitCode::from(3));
            }
        }
        Command::Diagnose { run: dir } => {
            let out = cli.out.clone().unwrap_or_else(|| dir.clone());
            run::diagnose_command(dir, &out, cli.seed)?;
            println!("{}", out.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    e.exit_code() as u8
}
