//! Run-directory commands behind the `gevreg` binary.

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Serialize};

use crate::cv::{partition_folds, relative_metrics, run_cv, write_cv, CvConfig, CvResult};
use crate::diagnostics::{loo_ic, score_station, DiagnosticsReport};
use crate::io::{load_dataset, simulate_basin, CovariateFile, IngestionReport, RunConfig};
use crate::model::{Dataset, Model, ModelSpec, PriorScales};
use crate::posterior::{
    all_station_params, calibrate_from_data, fit_model, predict_ungauged, return_level_posterior, summarize_draws,
    CalibrationReport, CoordSummary, StationPosterior, Summary,
};
use crate::sampler::PosteriorDraws;
use crate::{Error, Result};

pub const CONFIG_FILE: &str = "config.toml";
pub const CALIBRATION_FILE: &str = "calibration.json";
pub const DRAWS_FILE: &str = "draws.csv";

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = File::create(path)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    writeln!(f)?;
    Ok(())
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        line: e.line() as u64,
        message: e.to_string(),
    })
}

pub fn write_config(path: &Path, cfg: &RunConfig) -> Result<()> {
    let text = toml::to_string(cfg).map_err(|e| Error::Config {
        field: "config".into(),
        message: e.to_string(),
    })?;
    std::fs::write(path, text)?;
    Ok(())
}

/// Loads the dataset named by `cfg.data`.
pub fn load_configured_data(cfg: &RunConfig) -> Result<(Dataset, IngestionReport)> {
    let need = |p: &Option<PathBuf>, field: &str| {
        p.clone().ok_or_else(|| Error::Config {
            field: format!("data.{field}"),
            message: "path required".into(),
        })
    };
    let maxima = need(&cfg.data.maxima, "maxima")?;
    let covariates = need(&cfg.data.covariates, "covariates")?;
    load_dataset(&maxima, &covariates, &cfg.data.transforms)
}

/// Writes draws as `chain,draw,log_density,<coordinates...>`.
pub fn write_draws(path: &Path, names: &[String], draws: &PosteriorDraws) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["chain".to_string(), "draw".into(), "log_density".into()];
    header.extend(names.iter().cloned());
    w.write_record(&header)?;
    let lp = draws.log_density();
    for c in 0..draws.n_chains {
        for i in 0..draws.n_draws {
            let mut rec = vec![c.to_string(), i.to_string(), lp[c * draws.n_draws + i].to_string()];
            rec.extend(draws.draw(c, i).iter().map(f64::to_string));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_draws(path: &Path, names: &[String]) -> Result<PosteriorDraws> {
    let parse_err = |line: u64, message: String| Error::Parse {
        path: path.display().to_string(),
        line,
        message,
    };
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.clone();
    if header.len() != names.len() + 3 || header.iter().skip(3).zip(names).any(|(h, n)| h != n) {
        return Err(parse_err(1, "draw columns do not match the model layout".into()));
    }
    let mut chains: Vec<usize> = Vec::new();
    let mut values = Vec::new();
    let mut lp = Vec::new();
    for (row, rec) in r.records().enumerate() {
        let rec = rec?;
        let line = row as u64 + 2;
        let num = |k: usize| -> Result<f64> {
            rec[k]
                .parse::<f64>()
                .map_err(|e| parse_err(line, format!("column '{}': {e}", &header[k])))
        };
        let c: usize = rec[0].parse().map_err(|e| parse_err(line, format!("chain: {e}")))?;
        match chains.last() {
            Some(&last) if last == c => {}
            _ if chains.contains(&c) => return Err(parse_err(line, "chains must be contiguous".into())),
            _ => chains.push(c),
        }
        lp.push(num(2)?);
        for k in 3..rec.len() {
            values.push(num(k)?);
        }
    }
    let n_chains = chains.len();
    if n_chains == 0 || lp.len() % n_chains != 0 {
        return Err(parse_err(1, "chains must hold equal numbers of draws".into()));
    }
    PosteriorDraws::from_parts(n_chains, lp.len() / n_chains, names.len(), values, lp)
}

pub fn write_coord_summary(path: &Path, summary: &[CoordSummary]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["name", "mean", "sd", "q05", "q50", "q95", "rhat", "ess"])?;
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    for c in summary {
        w.write_record([
            c.name.clone(),
            c.mean.to_string(),
            c.sd.to_string(),
            c.q05.to_string(),
            c.q50.to_string(),
            c.q95.to_string(),
            opt(c.rhat),
            opt(c.ess),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Long table `station,gauged,clamped,quantity,mean,sd,q05,q50,q95` with GEV
/// parameters and return levels.
fn write_station_table(path: &Path, stations: &[StationPosterior], periods: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["station", "gauged", "clamped", "quantity", "mean", "sd", "q05", "q50", "q95"])?;
    for sp in stations {
        let mut rows: Vec<(String, Summary)> = Vec::new();
        let take = |f: fn(&crate::gev::GevParams) -> f64| sp.draws.iter().map(f).collect::<Vec<_>>();
        rows.push(("mu".into(), Summary::of(&take(|p| p.mu))?));
        rows.push(("sigma".into(), Summary::of(&take(|p| p.sigma))?));
        rows.push(("xi".into(), Summary::of(&take(|p| p.xi))?));
        let rl = return_level_posterior(sp, periods)?;
        for (r, s) in periods.iter().zip(rl.summaries) {
            rows.push((format!("return_level_{r}"), s));
        }
        for (q, s) in rows {
            w.write_record([
                sp.station.clone(),
                sp.gauged.to_string(),
                sp.clamped.to_string(),
                q,
                s.mean.to_string(),
                s.sd.to_string(),
                s.q05.to_string(),
                s.q50.to_string(),
                s.q95.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn build_model(cfg: &RunConfig, data: Dataset, calibration: &CalibrationReport) -> Result<Model> {
    let spec = ModelSpec {
        family: cfg.model,
        basis_size: cfg.basis_size,
        calibration: calibration.calibration.clone(),
        priors: PriorScales::default(),
        link: Default::default(),
    };
    Model::new(spec, data)
}

/// Station tables and in-sample diagnostics; a pure function of the model,
/// the draws and the configured seed.
fn write_reports(dir: &Path, cfg: &RunConfig, model: &Model, draws: &PosteriorDraws) -> Result<DiagnosticsReport> {
    let stations = all_station_params(model, draws)?;
    write_station_table(&dir.join("stations.csv"), &stations, &cfg.return_periods)?;
    let scores = stations
        .iter()
        .enumerate()
        .map(|(s, sp)| {
            let seed = cfg.sampler.seed.wrapping_add(1_000_003 * (s as u64 + 1));
            score_station(sp, model.data().station_maxima(s), &cfg.return_periods, seed)
        })
        .collect::<Result<Vec<_>>>()?;
    let loglik = draws.iter().map(|d| model.pointwise_log_lik(d)).collect::<Result<Vec<_>>>()?;
    let loo = loo_ic(&loglik).ok();
    let report = DiagnosticsReport::new(cfg.model.as_str(), &cfg.return_periods, scores, loo)?;
    report.write_json(&dir.join("diagnostics.json"))?;
    report.write_long_csv(&dir.join("diagnostics.csv"))?;
    Ok(report)
}

pub fn simulate_command(cfg: &RunConfig) -> Result<PathBuf> {
    let basin = simulate_basin(&cfg.simulate)?;
    basin.write(&cfg.output)?;
    Ok(cfg.output.clone())
}

pub struct FitOutput {
    pub model: Model,
    pub draws: PosteriorDraws,
    pub report: DiagnosticsReport,
}

/// Calibrates, fits the full data and writes the run directory.
pub fn fit_command(cfg: &RunConfig) -> Result<FitOutput> {
    let (data, ingestion) = load_configured_data(cfg)?;
    let calibration = calibrate_from_data(&data, &cfg.station_sampler, &Default::default())?;
    let model = build_model(cfg, data, &calibration)?;
    let draws = fit_model(&model, &cfg.sampler)?;
    let dir = &cfg.output;
    std::fs::create_dir_all(dir)?;
    write_config(&dir.join(CONFIG_FILE), cfg)?;
    write_json(&dir.join("ingestion.json"), &ingestion)?;
    write_json(&dir.join(CALIBRATION_FILE), &calibration)?;
    let names = model.layout().coordinate_names();
    if cfg.save_draws {
        write_draws(&dir.join(DRAWS_FILE), &names, &draws)?;
    }
    write_coord_summary(&dir.join("draws_summary.csv"), &summarize_draws(&draws, &names)?)?;
    write_json(&dir.join("sampler.json"), &draws.stats)?;
    let report = write_reports(dir, cfg, &model, &draws)?;
    Ok(FitOutput { model, draws, report })
}

/// A fitted run read back from its directory.
pub struct StoredRun {
    pub config: RunConfig,
    pub model: Model,
    pub draws: PosteriorDraws,
}

pub fn load_run(dir: &Path) -> Result<StoredRun> {
    let config = RunConfig::from_file(&dir.join(CONFIG_FILE))?;
    let calibration: CalibrationReport = read_json(&dir.join(CALIBRATION_FILE))?;
    let (data, _) = load_configured_data(&config)?;
    let model = build_model(&config, data, &calibration)?;
    let path = dir.join(DRAWS_FILE);
    if !path.exists() {
        return Err(Error::invalid(format!("{} missing; refit with save_draws = true", path.display())));
    }
    let draws = read_draws(&path, &model.layout().coordinate_names())?;
    Ok(StoredRun { config, model, draws })
}

/// Recomputes station tables and diagnostics of a stored run into `out`.
pub fn diagnose_command(run_dir: &Path, out: &Path, seed: Option<u64>) -> Result<DiagnosticsReport> {
    let mut run = load_run(run_dir)?;
    if let Some(s) = seed {
        run.config.sampler.seed = s;
    }
    std::fs::create_dir_all(out)?;
    write_reports(out, &run.config, &run.model, &run.draws)
}

/// Ungauged predictions for every row of `sites`, written to `out/predictions.csv`.
pub fn predict_command(run_dir: &Path, sites: &Path, out: &Path, seed: Option<u64>, periods: Option<&[f64]>) -> Result<Vec<StationPosterior>> {
    let run = load_run(run_dir)?;
    let file = CovariateFile::read(sites)?;
    let expected = run.model.data().covariate_names();
    let order = expected
        .iter()
        .map(|n| {
            file.names.iter().position(|f| f == n).ok_or_else(|| Error::MissingCovariates(format!("column '{n}' in {}", sites.display())))
        })
        .collect::<Result<Vec<_>>>()?;
    let seed = seed.unwrap_or(run.config.sampler.seed);
    let periods = periods.unwrap_or(&run.config.return_periods);
    let preds = file
        .rows
        .iter()
        .enumerate()
        .map(|(i, (id, vals))| {
            let raw: Vec<f64> = order.iter().map(|&k| vals[k]).collect();
            predict_ungauged(&run.model, &run.draws, id, &raw, seed.wrapping_add(i as u64))
        })
        .collect::<Result<Vec<_>>>()?;
    std::fs::create_dir_all(out)?;
    write_station_table(&out.join("predictions.csv"), &preds, periods)?;
    Ok(preds)
}

/// Station-holdout cross-validation of the configured families.
pub fn cv_command(cfg: &RunConfig) -> Result<CvResult> {
    let (data, _) = load_configured_data(cfg)?;
    let s = data.n_stations();
    let folds = cfg.cv.folds.unwrap_or(s / 2);
    let plan = partition_folds(s, folds, cfg.cv.seed)?;
    let cv_cfg = CvConfig {
        families: cfg.cv.families.clone(),
        basis_size: cfg.basis_size,
        sampler: cfg.sampler.clone(),
        station_sampler: cfg.station_sampler.clone(),
        periods: cfg.return_periods.clone(),
        priors: PriorScales::default(),
        link: Default::default(),
    };
    let result = run_cv(&data, &plan, &cv_cfg, None)?;
    std::fs::create_dir_all(&cfg.output)?;
    write_config(&cfg.output.join(CONFIG_FILE), cfg)?;
    let rel = relative_metrics(&result, cfg.cv.benchmark).ok();
    write_cv(&cfg.output, &result, rel.as_ref())?;
    Ok(result)
}
