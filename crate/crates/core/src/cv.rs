//! Station-holdout cross-validation: fold plans, per-fold refits of every
//! model family, and scoring of the held-out stations as ungauged sites.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{ks_uniform, relative, score_station, DiagnosticsReport, KsResult};
use crate::model::{Dataset, Family, Model, ModelSpec, PriorScales};
use crate::posterior::{calibrate_from_data, fit_model, predict_ungauged, summarize_draws, CoordSummary};
use crate::run::write_coord_summary;
use crate::sampler::SamplerConfig;
use crate::stats::{mean, median};
use crate::gev::ShapeLinkConstants;
use crate::{Error, Result};

/// Smallest training set a fold may leave.
pub const MIN_TRAINING_STATIONS: usize = 10;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    /// Station indices held out in each fold, ascending.
    pub folds: Vec<Vec<usize>>,
    pub seed: u64,
}

/// Seeded random partition of `n_stations` into `n_folds` folds whose sizes
/// differ by at most one.
pub fn partition_folds(n_stations: usize, n_folds: usize, seed: u64) -> Result<FoldPlan> {
    if n_folds == 0 || n_folds > n_stations {
        return Err(Error::Config {
            field: "cv.folds".into(),
            message: format!("need 1 <= folds <= stations, got {n_folds} folds for {n_stations} stations"),
        });
    }
    let mut order: Vec<usize> = (0..n_stations).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut folds = vec![Vec::new(); n_folds];
    for (i, s) in order.into_iter().enumerate() {
        folds[i % n_folds].push(s);
    }
    folds.iter_mut().for_each(|f| f.sort_unstable());
    Ok(FoldPlan { folds, seed })
}

/// Receives the ids of every station whose data a training step touches.
pub trait AccessHook: Sync {
    fn record(&self, fold: usize, stage: &str, stations: &[String]);
}

/// An [`AccessHook`] that keeps everything it is told.
#[derive(Debug, Default)]
pub struct AccessLog {
    entries: Mutex<Vec<(usize, String, Vec<String>)>>,
}

impl AccessLog {
    pub fn entries(&self) -> Vec<(usize, String, Vec<String>)> {
        let mut e = self.entries.lock().map(|e| e.clone()).unwrap_or_default();
        e.sort();
        e
    }
}

impl AccessHook for AccessLog {
    fn record(&self, fold: usize, stage: &str, stations: &[String]) {
        if let Ok(mut e) = self.entries.lock() {
            e.push((fold, stage.to_string(), stations.to_vec()));
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvConfig {
    pub families: Vec<Family>,
    pub basis_size: usize,
    pub sampler: SamplerConfig,
    pub station_sampler: SamplerConfig,
    pub periods: Vec<f64>,
    pub priors: PriorScales,
    pub link: ShapeLinkConstants,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyFold {
    pub family: Family,
    pub report: DiagnosticsReport,
    /// Posterior means of the three intercepts.
    pub intercept_means: [f64; 3],
    pub kappa_means: [f64; 3],
    pub divergences: usize,
    pub summary: Vec<CoordSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldOutcome {
    pub fold: usize,
    pub holdout: Vec<String>,
    pub results: Vec<FamilyFold>,
    pub failures: Vec<(Family, String)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub plan: FoldPlan,
    pub folds: Vec<FoldOutcome>,
    pub partial: bool,
}

impl CvResult {
    fn family_folds(&self, family: Family) -> impl Iterator<Item = &FamilyFold> {
        self.folds
            .iter()
            .flat_map(move |f| f.results.iter().filter(move |r| r.family == family))
    }

    pub fn pooled_pit(&self, family: Family) -> Vec<f64> {
        self.family_folds(family).flat_map(|r| r.report.pooled_pit()).collect()
    }

    pub fn pit_ks(&self, family: Family) -> Result<KsResult> {
        ks_uniform(&self.pooled_pit(family))
    }

    /// Per held-out station ACRPS.
    pub fn acrps(&self, family: Family) -> BTreeMap<String, f64> {
        self.family_folds(family)
            .flat_map(|r| r.report.stations.iter().map(|s| (s.station.clone(), s.acrps)))
            .collect()
    }

    /// Per held-out station 90% interval width of the return level at period index `r`.
    pub fn ciw(&self, family: Family, r: usize) -> BTreeMap<String, f64> {
        self.family_folds(family)
            .flat_map(|f| f.report.stations.iter().map(move |s| (s.station.clone(), s.ciw[r])))
            .collect()
    }

    pub fn intercept_means(&self, family: Family) -> Vec<[f64; 3]> {
        self.family_folds(family).map(|r| r.intercept_means).collect()
    }
}

fn names_of(data: &Dataset, idx: &[usize]) -> Vec<String> {
    idx.iter().map(|&i| data.station_ids()[i].clone()).collect()
}

/// Refits every family on each fold's training stations and scores the
/// held-out stations. Folds whose sampler fails are recorded and the result
/// is flagged partial; other errors abort.
pub fn run_cv(data: &Dataset, plan: &FoldPlan, cfg: &CvConfig, hook: Option<&dyn AccessHook>) -> Result<CvResult> {
    let s = data.n_stations();
    let mut seen = vec![0usize; s];
    for &i in plan.folds.iter().flatten() {
        if i >= s {
            return Err(Error::invalid(format!("fold plan names station index {i}, dataset has {s}")));
        }
        seen[i] += 1;
    }
    if seen.iter().any(|&c| c != 1) {
        return Err(Error::invalid("fold plan does not partition the stations"));
    }
    for (g, f) in plan.folds.iter().enumerate() {
        if f.is_empty() {
            return Err(Error::invalid(format!("fold {g} holds out no stations")));
        }
        if s - f.len() < MIN_TRAINING_STATIONS {
            return Err(Error::invalid(format!(
                "fold {g} leaves {} training stations, need at least {MIN_TRAINING_STATIONS}",
                s - f.len()
            )));
        }
    }
    if cfg.families.is_empty() {
        return Err(Error::invalid("no model families to cross-validate"));
    }
    let folds = (0..plan.folds.len())
        .into_par_iter()
        .map(|g| run_fold(data, plan, g, cfg, hook))
        .collect::<Result<Vec<_>>>()?;
    let partial = folds.iter().any(|f| !f.failures.is_empty());
    Ok(CvResult {
        plan: plan.clone(),
        folds,
        partial,
    })
}

fn fold_seed(base: u64, fold: usize, family: usize) -> u64 {
    base.wrapping_add(10_007 * fold as u64).wrapping_add(101 * family as u64)
}

/// One fold of [`run_cv`]; depends only on the fold index, not on execution order.
pub fn run_fold(data: &Dataset, plan: &FoldPlan, g: usize, cfg: &CvConfig, hook: Option<&dyn AccessHook>) -> Result<FoldOutcome> {
    let holdout = plan
        .folds
        .get(g)
        .ok_or_else(|| Error::invalid(format!("fold {g} not in plan")))?;
    let train_idx: Vec<usize> = (0..data.n_stations()).filter(|i| !holdout.contains(i)).collect();
    let record = |stage: &str, used: &Dataset| {
        if let Some(h) = hook {
            h.record(g, stage, used.station_ids());
        }
    };
    // subset() recomputes the covariate standardization on the training stations
    let train = data.subset(&train_idx)?;
    record("standardize", &train);
    let station_cfg = SamplerConfig {
        seed: fold_seed(cfg.station_sampler.seed, g, 0),
        ..cfg.station_sampler.clone()
    };
    let mut outcome = FoldOutcome {
        fold: g,
        holdout: names_of(data, holdout),
        results: Vec::new(),
        failures: Vec::new(),
    };
    let calibration = match calibrate_from_data(&train, &station_cfg, &cfg.link) {
        Ok(c) => c.calibration,
        Err(Error::Sampler(msg)) => {
            outcome.failures = cfg.families.iter().map(|&f| (f, format!("calibration: {msg}"))).collect();
            return Ok(outcome);
        }
        Err(e) => return Err(e),
    };
    record("calibrate", &train);
    for (k, &family) in cfg.families.iter().enumerate() {
        let spec = ModelSpec {
            family,
            basis_size: cfg.basis_size,
            calibration: calibration.clone(),
            priors: cfg.priors,
            link: cfg.link,
        };
        let model = Model::new(spec, train.clone())?;
        record("knots", model.data());
        let sampler = SamplerConfig {
            seed: fold_seed(cfg.sampler.seed, g, k + 1),
            ..cfg.sampler.clone()
        };
        record("fit", model.data());
        let draws = match fit_model(&model, &sampler) {
            Ok(d) => d,
            Err(Error::Sampler(msg)) => {
                outcome.failures.push((family, msg));
                continue;
            }
            Err(e) => return Err(e),
        };
        let mut scores = Vec::with_capacity(holdout.len());
        for &h in holdout {
            let id = &data.station_ids()[h];
            let seed = fold_seed(sampler.seed, h, 7);
            let sp = predict_ungauged(&model, &draws, id, data.raw_covariates(h), seed)?;
            scores.push(score_station(&sp, data.station_maxima(h), &cfg.periods, seed.wrapping_add(1))?);
        }
        let report = DiagnosticsReport::new(family.as_str(), &cfg.periods, scores, None)?;
        let m = draws.mean();
        let layout = model.layout();
        let kappa_draws: Vec<[f64; 3]> = draws.iter().map(|d| model.kappa(d)).collect();
        outcome.results.push(FamilyFold {
            family,
            report,
            intercept_means: std::array::from_fn(|j| m[layout.intercept(j)]),
            kappa_means: std::array::from_fn(|j| mean(&kappa_draws.iter().map(|k| k[j]).collect::<Vec<_>>())),
            divergences: draws.divergences(),
            summary: summarize_draws(&draws, &layout.coordinate_names())?,
        });
    }
    Ok(outcome)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyRelative {
    pub family: Family,
    pub acrps_ratio: BTreeMap<String, f64>,
    pub median_acrps_ratio: f64,
    /// Share of stations scoring worse than the benchmark.
    pub share_acrps_above_one: f64,
    /// Per return period: station ratios of 90% interval widths.
    pub ciw_ratio: Vec<BTreeMap<String, f64>>,
    pub median_ciw_ratio: Vec<f64>,
    /// Per return period: share of stations with narrower intervals than the benchmark.
    pub share_ciw_below_one: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelativeMetrics {
    pub benchmark: Family,
    pub families: Vec<FamilyRelative>,
}

impl RelativeMetrics {
    pub fn get(&self, family: Family) -> Option<&FamilyRelative> {
        self.families.iter().find(|f| f.family == family)
    }
}

fn ratio_map(values: &BTreeMap<String, f64>, bench: &BTreeMap<String, f64>) -> Result<BTreeMap<String, f64>> {
    let keys: Vec<&String> = bench.keys().filter(|k| values.contains_key(*k)).collect();
    let v: Vec<f64> = keys.iter().map(|k| values[*k]).collect();
    let b: Vec<f64> = keys.iter().map(|k| bench[*k]).collect();
    Ok(keys.into_iter().cloned().zip(relative(&v, &b)?).collect())
}

/// Per-station ratios of ACRPS and interval widths against `benchmark`.
pub fn relative_metrics(cv: &CvResult, benchmark: Family) -> Result<RelativeMetrics> {
    if cv.folds.iter().any(|f| !f.results.iter().any(|r| r.family == benchmark)) {
        return Err(Error::invalid(format!("benchmark '{benchmark}' missing from some folds")));
    }
    let n_periods = cv
        .folds
        .iter()
        .flat_map(|f| f.results.first())
        .map(|r| r.report.periods.len())
        .next()
        .unwrap_or(0);
    let bench_acrps = cv.acrps(benchmark);
    let mut families: Vec<Family> = cv.folds.iter().flat_map(|f| f.results.iter().map(|r| r.family)).collect();
    families.sort_by_key(|f| Family::ALL.iter().position(|a| a == f));
    families.dedup();
    let mut out = Vec::new();
    for family in families {
        let acrps_ratio = ratio_map(&cv.acrps(family), &bench_acrps)?;
        let vals: Vec<f64> = acrps_ratio.values().copied().collect();
        if vals.is_empty() {
            continue;
        }
        let mut ciw_ratio = Vec::new();
        let mut median_ciw_ratio = Vec::new();
        let mut share_ciw_below_one = Vec::new();
        for r in 0..n_periods {
            let m = ratio_map(&cv.ciw(family, r), &cv.ciw(benchmark, r))?;
            let v: Vec<f64> = m.values().copied().collect();
            median_ciw_ratio.push(median(&v)?);
            share_ciw_below_one.push(v.iter().filter(|&&x| x < 1.0).count() as f64 / v.len() as f64);
            ciw_ratio.push(m);
        }
        out.push(FamilyRelative {
            family,
            median_acrps_ratio: median(&vals)?,
            share_acrps_above_one: vals.iter().filter(|&&x| x > 1.0).count() as f64 / vals.len() as f64,
            acrps_ratio,
            ciw_ratio,
            median_ciw_ratio,
            share_ciw_below_one,
        });
    }
    Ok(RelativeMetrics {
        benchmark,
        families: out,
    })
}

/// One directory per fold plus aggregate files under `dir`.
pub fn write_cv(dir: &Path, cv: &CvResult, relative: Option<&RelativeMetrics>) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for f in &cv.folds {
        let fd = dir.join(format!("fold_{:03}", f.fold));
        std::fs::create_dir_all(&fd)?;
        let meta = serde_json::json!({
            "fold": f.fold,
            "holdout": f.holdout,
            "failures": f.failures,
            "intercept_means": f.results.iter().map(|r| (r.family.as_str(), r.intercept_means)).collect::<BTreeMap<_, _>>(),
            "kappa_means": f.results.iter().map(|r| (r.family.as_str(), r.kappa_means)).collect::<BTreeMap<_, _>>(),
        });
        std::fs::write(fd.join("fold.json"), serde_json::to_string_pretty(&meta)? + "\n")?;
        for r in &f.results {
            r.report.write_long_csv(&fd.join(format!("diagnostics_{}.csv", r.family)))?;
            write_coord_summary(&fd.join(format!("draws_summary_{}.csv", r.family)), &r.summary)?;
        }
    }
    let mut families: Vec<Family> = cv.folds.iter().flat_map(|f| f.results.iter().map(|r| r.family)).collect();
    families.sort_by_key(|f| Family::ALL.iter().position(|a| a == f));
    families.dedup();
    let pit: BTreeMap<&str, Option<KsResult>> =
        families.iter().map(|&f| (f.as_str(), cv.pit_ks(f).ok())).collect();
    let aggregate = serde_json::json!({
        "partial": cv.partial,
        "n_folds": cv.plan.folds.len(),
        "seed": cv.plan.seed,
        "pit_ks": pit,
        "relative": relative,
    });
    std::fs::write(dir.join("cv_report.json"), serde_json::to_string_pretty(&aggregate)? + "\n")?;
    if let Some(rel) = relative {
        let mut w = csv::Writer::from_path(dir.join("relative.csv"))?;
        w.write_record(["metric", "model", "station", "index", "value"])?;
        for f in &rel.families {
            for (st, v) in &f.acrps_ratio {
                w.write_record(["acrps_ratio", f.family.as_str(), st, "", &v.to_string()])?;
            }
            for (r, m) in f.ciw_ratio.iter().enumerate() {
                for (st, v) in m {
                    w.write_record(["ciw_ratio", f.family.as_str(), st, &r.to_string(), &v.to_string()])?;
                }
            }
        }
        w.flush()?;
    }
    Ok(())
}
