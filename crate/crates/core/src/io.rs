//! Delimited-text ingestion, synthetic basins and run configuration.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::gev::{gev_draw, inverse_link_params, shape_link, LinkedParams, ShapeLinkConstants};
use crate::model::{Dataset, Family, Transform};
use crate::posterior::normal_draw;
use crate::sampler::SamplerConfig;
use crate::{Error, Result};

/// Covariate names of the first eight columns of a simulated basin.
pub const DEFAULT_COVARIATE_NAMES: [&str; 8] =
    ["latitude", "longitude", "area", "elevation", "slope", "aspect", "cover", "rainfall"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaximaRow {
    pub station_id: String,
    pub year: i64,
    pub maximum: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MaximaFile {
    pub rows: Vec<MaximaRow>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CovariateFile {
    pub names: Vec<String>,
    pub rows: Vec<(String, Vec<f64>)>,
}

impl MaximaFile {
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["station_id", "year", "maximum"])?;
        for r in &self.rows {
            w.write_record([r.station_id.clone(), r.year.to_string(), r.maximum.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads every row; validation happens in [`ingest`].
    pub fn read(path: &Path) -> Result<Self> {
        let mut rdr = reader(path)?;
        let headers = rdr.headers()?.clone();
        let col = |name: &str| {
            headers.iter().position(|h| h.trim().eq_ignore_ascii_case(name)).ok_or_else(|| Error::Parse {
                path: path.display().to_string(),
                line: 1,
                message: format!("missing column '{name}'"),
            })
        };
        let (ci, cy, cm) = (col("station_id")?, col("year")?, col("maximum")?);
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let line = rec.position().map_or(0, |p| p.line());
            let field = |i: usize| rec.get(i).unwrap_or("").trim();
            let parse_err = |what: &str, v: &str| Error::Parse {
                path: path.display().to_string(),
                line,
                message: format!("cannot parse {what} '{v}'"),
            };
            rows.push(MaximaRow {
                station_id: field(ci).to_string(),
                year: field(cy).parse().map_err(|_| parse_err("year", field(cy)))?,
                maximum: field(cm).parse().map_err(|_| parse_err("maximum", field(cm)))?,
            });
        }
        Ok(Self { rows })
    }
}

impl CovariateFile {
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["station_id".to_string()];
        header.extend(self.names.iter().cloned());
        w.write_record(&header)?;
        for (id, vals) in &self.rows {
            let mut rec = vec![id.clone()];
            rec.extend(vals.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut rdr = reader(path)?;
        let headers = rdr.headers()?.clone();
        let id_col = headers
            .iter()
            .position(|h| h.trim().eq_ignore_ascii_case("station_id"))
            .ok_or_else(|| Error::Parse {
                path: path.display().to_string(),
                line: 1,
                message: "missing column 'station_id'".into(),
            })?;
        let value_cols: Vec<usize> = (0..headers.len()).filter(|&i| i != id_col).collect();
        let names = value_cols.iter().map(|&i| headers[i].trim().to_string()).collect();
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let line = rec.position().map_or(0, |p| p.line());
            let vals = value_cols
                .iter()
                .map(|&i| {
                    let v = rec.get(i).unwrap_or("").trim();
                    v.parse::<f64>().map_err(|_| Error::Parse {
                        path: path.display().to_string(),
                        line,
                        message: format!("cannot parse covariate '{}' value '{v}'", &headers[i]),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push((rec.get(id_col).unwrap_or("").trim().to_string(), vals));
        }
        Ok(Self { names, rows })
    }
}

fn reader(path: &Path) -> Result<csv::Reader<File>> {
    Ok(csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DroppedRow {
    pub source: String,
    pub station_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct IngestionReport {
    pub n_stations: usize,
    pub n_maxima: usize,
    pub blocks_per_station: BTreeMap<String, usize>,
    pub dropped: Vec<DroppedRow>,
}

/// Joins maxima and covariates into a [`Dataset`]. Stations are ordered by
/// first appearance in the maxima file, maxima by year. Covariate rows for
/// stations without maxima are dropped and reported; every other defect
/// is an error.
pub fn ingest(
    maxima: &MaximaFile,
    covariates: &CovariateFile,
    transforms: &BTreeMap<String, Transform>,
) -> Result<(Dataset, IngestionReport)> {
    if let Some(unknown) = transforms.keys().find(|k| !covariates.names.contains(k)) {
        return Err(Error::Config {
            field: format!("data.transforms.{unknown}"),
            message: "no such covariate column".into(),
        });
    }
    let mut order: Vec<String> = Vec::new();
    let mut by_station: HashMap<String, Vec<(i64, f64)>> = HashMap::new();
    let mut seen = BTreeSet::new();
    for r in &maxima.rows {
        if !seen.insert((r.station_id.clone(), r.year)) {
            return Err(Error::DuplicateKey {
                station: r.station_id.clone(),
                year: r.year,
            });
        }
        if !(r.maximum.is_finite() && r.maximum > 0.0) {
            return Err(Error::NonPositiveMaximum {
                station: r.station_id.clone(),
                year: r.year,
                value: r.maximum,
            });
        }
        by_station
            .entry(r.station_id.clone())
            .or_insert_with(|| {
                order.push(r.station_id.clone());
                Vec::new()
            })
            .push((r.year, r.maximum));
    }
    let mut cov_by_station: HashMap<&str, &[f64]> = HashMap::new();
    let mut report = IngestionReport::default();
    for (id, vals) in &covariates.rows {
        if cov_by_station.insert(id, vals).is_some() {
            return Err(Error::invalid(format!("duplicate covariate row for station '{id}'")));
        }
        if !by_station.contains_key(id) {
            report.dropped.push(DroppedRow {
                source: "covariates".into(),
                station_id: id.clone(),
                reason: "station has no maxima".into(),
            });
        }
    }
    let mut ys = Vec::with_capacity(order.len());
    let mut raw = Vec::with_capacity(order.len());
    for id in &order {
        let cov = cov_by_station.get(id.as_str()).ok_or_else(|| Error::MissingCovariates(id.clone()))?;
        let mut obs = by_station.remove(id).unwrap_or_default();
        obs.sort_by_key(|o| o.0);
        report.blocks_per_station.insert(id.clone(), obs.len());
        ys.push(obs.into_iter().map(|o| o.1).collect::<Vec<_>>());
        raw.push(cov.to_vec());
    }
    let tr = covariates
        .names
        .iter()
        .map(|n| transforms.get(n).copied().unwrap_or_default())
        .collect();
    let data = Dataset::new(order, ys, covariates.names.clone(), tr, raw)?;
    report.n_stations = data.n_stations();
    report.n_maxima = data.n_obs();
    Ok((data, report))
}

pub fn load_dataset(
    maxima_path: &Path,
    covariates_path: &Path,
    transforms: &BTreeMap<String, Transform>,
) -> Result<(Dataset, IngestionReport)> {
    ingest(&MaximaFile::read(maxima_path)?, &CovariateFile::read(covariates_path)?, transforms)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EffectShape {
    Linear,
    Nonlinear,
}

/// Synthetic basin description. Raw covariates are uniform on (0, 1);
/// effects act on the standardized value `z = (x - 1/2) sqrt(12)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BasinConfig {
    pub n_stations: usize,
    pub n_years: usize,
    pub n_covariates: usize,
    pub n_active: usize,
    pub effects: EffectShape,
    /// Intercepts of `(psi, tau)` and the intercept shape.
    pub psi0: f64,
    pub tau0: f64,
    pub xi0: f64,
    /// Effect amplitudes on `psi` and `tau`.
    pub psi_amplitude: f64,
    pub tau_amplitude: f64,
    /// Random-effect sds per linked parameter.
    pub kappa: [f64; 3],
    pub first_year: i64,
    pub seed: u64,
}

impl Default for BasinConfig {
    fn default() -> Self {
        Self {
            n_stations: 40,
            n_years: 50,
            n_covariates: 8,
            n_active: 2,
            effects: EffectShape::Nonlinear,
            psi0: 100f64.ln(),
            tau0: 0.3f64.ln(),
            xi0: 0.1,
            psi_amplitude: 0.5,
            tau_amplitude: 0.25,
            kappa: [0.05, 0.05, 0.05],
            first_year: 1970,
            seed: 1,
        }
    }
}

impl BasinConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: &str| {
            Err(Error::Config {
                field: format!("simulate.{field}"),
                message: message.into(),
            })
        };
        if self.n_stations < 4 {
            return bad("n_stations", "must be at least 4");
        }
        if self.n_years < 5 {
            return bad("n_years", "must be at least 5");
        }
        if self.n_active > self.n_covariates {
            return bad("n_active", "cannot exceed n_covariates");
        }
        if !(self.xi0 > -0.5 && self.xi0 < 0.5) {
            return bad("xi0", "must lie in (-0.5, 0.5)");
        }
        if self.kappa.iter().any(|k| !(*k >= 0.0 && k.is_finite())) {
            return bad("kappa", "must be finite and non-negative");
        }
        Ok(())
    }
}

/// True effect of active covariate `m` on `psi` and `tau` at standardized `z`.
pub fn true_effect(cfg: &BasinConfig, m: usize, z: f64) -> (f64, f64) {
    if m >= cfg.n_active {
        return (0.0, 0.0);
    }
    let (fp, ft) = match (cfg.effects, m % 2) {
        (EffectShape::Linear, 0) => (z, z),
        (EffectShape::Linear, _) => (-z, 0.5 * z),
        // zero-mean curves over the standardized uniform range
        (EffectShape::Nonlinear, 0) => ((1.5 * z).sin(), (z * z - 1.0) / 1.2),
        (EffectShape::Nonlinear, _) => ((z * z - 1.0) / 1.2, (1.5 * z).cos() - 0.343),
    };
    (cfg.psi_amplitude * fp, cfg.tau_amplitude * ft)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub config: BasinConfig,
    pub station_ids: Vec<String>,
    pub linked: Vec<[f64; 3]>,
    pub random_effects: Vec<[f64; 3]>,
    pub active: Vec<usize>,
    /// `effects[m][s] = (psi, tau)` contribution of covariate `m` at station `s`.
    pub effects: Vec<Vec<(f64, f64)>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedBasin {
    pub maxima: MaximaFile,
    pub covariates: CovariateFile,
    pub truth: GroundTruth,
}

impl SimulatedBasin {
    pub fn dataset(&self) -> Result<Dataset> {
        Ok(ingest(&self.maxima, &self.covariates, &BTreeMap::new())?.0)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.maxima.write(&dir.join("maxima.csv"))?;
        self.covariates.write(&dir.join("covariates.csv"))?;
        std::fs::write(dir.join("truth.json"), serde_json::to_string_pretty(&self.truth)?)?;
        Ok(())
    }
}

pub fn covariate_names(m: usize) -> Vec<String> {
    (0..m)
        .map(|i| match DEFAULT_COVARIATE_NAMES.get(i) {
            Some(n) => n.to_string(),
            None => format!("x{}", i + 1),
        })
        .collect()
}

pub fn simulate_basin(cfg: &BasinConfig) -> Result<SimulatedBasin> {
    cfg.validate()?;
    let link = ShapeLinkConstants::default();
    let phi0 = shape_link(cfg.xi0, &link)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (s_n, m_n) = (cfg.n_stations, cfg.n_covariates);
    let ids: Vec<String> = (0..s_n).map(|s| format!("S{:03}", s + 1)).collect();
    let raw: Vec<Vec<f64>> = (0..s_n).map(|_| (0..m_n).map(|_| rng.random::<f64>()).collect()).collect();
    let sqrt12 = 12f64.sqrt();
    let effects: Vec<Vec<(f64, f64)>> = (0..m_n)
        .map(|m| (0..s_n).map(|s| true_effect(cfg, m, (raw[s][m] - 0.5) * sqrt12)).collect())
        .collect();
    let mut linked = Vec::with_capacity(s_n);
    let mut random_effects = Vec::with_capacity(s_n);
    for s in 0..s_n {
        let u: [f64; 3] = std::array::from_fn(|j| normal_draw(&mut rng, 0.0, cfg.kappa[j]));
        let (ep, et) = effects.iter().fold((0.0, 0.0), |acc, e| (acc.0 + e[s].0, acc.1 + e[s].1));
        linked.push([cfg.psi0 + ep + u[0], cfg.tau0 + et + u[1], phi0 + u[2]]);
        random_effects.push(u);
    }
    let mut rows = Vec::with_capacity(s_n * cfg.n_years);
    for (s, l) in linked.iter().enumerate() {
        let p = inverse_link_params(
            &LinkedParams {
                psi: l[0],
                tau: l[1],
                phi: l[2],
            },
            &link,
        );
        for t in 0..cfg.n_years {
            rows.push(MaximaRow {
                station_id: ids[s].clone(),
                year: cfg.first_year + t as i64,
                maximum: gev_draw(&p, &mut rng),
            });
        }
    }
    let names = covariate_names(m_n);
    Ok(SimulatedBasin {
        maxima: MaximaFile { rows },
        covariates: CovariateFile {
            names,
            rows: ids.iter().cloned().zip(raw).collect(),
        },
        truth: GroundTruth {
            config: cfg.clone(),
            station_ids: ids,
            linked,
            random_effects,
            active: (0..cfg.n_active).collect(),
            effects,
        },
    })
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataPaths {
    pub maxima: Option<PathBuf>,
    pub covariates: Option<PathBuf>,
    pub transforms: BTreeMap<String, Transform>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CvSettings {
    /// Number of folds; `None` means half the number of stations.
    pub folds: Option<usize>,
    pub seed: u64,
    pub benchmark: Family,
    pub families: Vec<Family>,
}

impl Default for CvSettings {
    fn default() -> Self {
        Self {
            folds: None,
            seed: 1,
            benchmark: Family::SplinesHs,
            families: Family::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: Family,
    pub basis_size: usize,
    pub sampler: SamplerConfig,
    /// Sampler settings for the single-station calibration fits.
    pub station_sampler: SamplerConfig,
    pub return_periods: Vec<f64>,
    pub cv: CvSettings,
    pub data: DataPaths,
    pub simulate: BasinConfig,
    pub output: PathBuf,
    /// Whether `fit` also writes every raw draw.
    pub save_draws: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: Family::SplinesHs,
            basis_size: crate::splines::DEFAULT_BASIS_SIZE,
            sampler: SamplerConfig::default(),
            station_sampler: SamplerConfig {
                n_chains: 2,
                n_warmup: 500,
                n_draws: 500,
                ..SamplerConfig::default()
            },
            return_periods: vec![50.0, 100.0],
            cv: CvSettings::default(),
            data: DataPaths::default(),
            simulate: BasinConfig::default(),
            output: PathBuf::from("run"),
            save_draws: true,
        }
    }
}

impl RunConfig {
    /// Parses TOML or JSON (chosen by extension) and validates.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
        let cfg: RunConfig = if is_json {
            serde_json::from_str(&text).map_err(|e| Error::Parse {
                path: path.display().to_string(),
                line: e.line() as u64,
                message: e.to_string(),
            })?
        } else {
            toml::from_str(&text).map_err(|e| {
                let line = e
                    .span()
                    .map_or(0, |s| text[..s.start.min(text.len())].matches('\n').count() as u64 + 1);
                Error::Parse {
                    path: path.display().to_string(),
                    line,
                    message: e.message().to_string(),
                }
            })?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.sampler.validate()?;
        self.station_sampler.validate().map_err(|e| match e {
            Error::Config { field, message } => Error::Config {
                field: field.replacen("sampler", "station_sampler", 1),
                message,
            },
            other => other,
        })?;
        if self.basis_size < 5 {
            return Err(Error::Config {
                field: "basis_size".into(),
                message: "must be at least 5".into(),
            });
        }
        if self.return_periods.is_empty() || self.return_periods.iter().any(|r| !(*r > 1.0 && r.is_finite())) {
            return Err(Error::Config {
                field: "return_periods".into(),
                message: "need at least one finite period above 1".into(),
            });
        }
        if self.cv.folds == Some(0) {
            return Err(Error::Config {
                field: "cv.folds".into(),
                message: "must be at least 1".into(),
            });
        }
        if self.cv.families.is_empty() || !self.cv.families.contains(&self.cv.benchmark) {
            return Err(Error::Config {
                field: "cv.benchmark".into(),
                message: "benchmark must be one of cv.families".into(),
            });
        }
        self.simulate.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_files() -> (MaximaFile, CovariateFile) {
        let rows = ["a", "b"]
            .iter()
            .flat_map(|id| {
                (0..3).map(move |t| MaximaRow {
                    station_id: id.to_string(),
                    year: 2000 + t,
                    maximum: 10.0 + t as f64,
                })
            })
            .collect();
        let cov = CovariateFile {
            names: vec!["area".into()],
            rows: vec![("a".into(), vec![1.0]), ("b".into(), vec![3.0]), ("c".into(), vec![5.0])],
        };
        (MaximaFile { rows }, cov)
    }

    #[test]
    fn well_formed_files_ingest() {
        let dir = tempfile::tempdir().unwrap();
        let (m, c) = small_files();
        m.write(&dir.path().join("m.csv")).unwrap();
        c.write(&dir.path().join("c.csv")).unwrap();
        let (d, rep) = load_dataset(&dir.path().join("m.csv"), &dir.path().join("c.csv"), &BTreeMap::new()).unwrap();
        assert_eq!((d.n_stations(), d.n_obs()), (2, 6));
        assert_eq!(rep.dropped.len(), 1);
        assert_eq!(rep.dropped[0].station_id, "c");
    }

    #[test]
    fn distinct_ingestion_errors() {
        let (mut m, c) = small_files();
        m.rows.push(m.rows[0].clone());
        match ingest(&m, &c, &BTreeMap::new()) {
            Err(Error::DuplicateKey { station, year }) => assert_eq!((station.as_str(), year), ("a", 2000)),
            other => panic!("{other:?}"),
        }
        let (mut m, c) = small_files();
        m.rows[2].maximum = 0.0;
        assert!(matches!(ingest(&m, &c, &BTreeMap::new()), Err(Error::NonPositiveMaximum { .. })));
        let (m, mut c) = small_files();
        c.rows.remove(1);
        assert!(matches!(ingest(&m, &c, &BTreeMap::new()), Err(Error::MissingCovariates(id)) if id == "b"));
        let (m, mut c) = small_files();
        c.rows[0].1[0] = -1.0;
        let tr = BTreeMap::from([("area".to_string(), Transform::Log)]);
        assert!(matches!(ingest(&m, &c, &tr), Err(Error::LogOfNonPositive { .. })));
    }

    #[test]
    fn simulation_is_seeded_and_sparse() {
        let cfg = BasinConfig {
            n_stations: 12,
            n_years: 6,
            ..Default::default()
        };
        let a = simulate_basin(&cfg).unwrap();
        assert_eq!(a, simulate_basin(&cfg).unwrap());
        for m in 2..8 {
            assert!(a.truth.effects[m].iter().all(|&(p, t)| p == 0.0 && t == 0.0));
        }
        assert_eq!(a.maxima.rows.len(), 72);
    }

    #[test]
    fn config_errors_name_fields() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "model = \"linear\"\n[sampler]\nn_draws = 0\n").unwrap();
        match RunConfig::from_file(&p) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "sampler.n_draws"),
            other => panic!("{other:?}"),
        }
        std::fs::write(&p, "model = \"linear\"\nbogus = 1\n").unwrap();
        assert!(matches!(RunConfig::from_file(&p), Err(Error::Parse { line: 2, .. })));
    }
}
