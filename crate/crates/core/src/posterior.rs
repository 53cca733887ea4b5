//! Single-station exploratory fits, prior calibration, and the station-level,
//! ungauged and return-level summaries derived from posterior draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::density::normal_lpdf;
use crate::gev::{
    gev_draw, link_params, logpdf_grad_raw, return_level, shape_link, shape_link_inverse_with_deriv, GevParams,
    ReturnPeriod, ShapeLinkConstants, LOG_ZERO,
};
use crate::model::{Dataset, Model, PriorCalibration};
use crate::sampler::{sample, Init, LogDensity, PosteriorDraws, SamplerConfig};
use crate::stats::{mean, quantile_sorted, sd, sorted};
use crate::{Error, Result};

pub const MIN_STATION_LENGTH: usize = 5;
/// Shape estimates outside (-0.5, 0.5) are pulled to this magnitude before linking.
pub const SHAPE_CLAMP: f64 = 0.499;

const STATION_LOC_SD: f64 = 1e4;
const STATION_LOG_SCALE_SD: f64 = 1e4;
const STATION_SHAPE_SD: f64 = 1.0;

/// Single-station GEV with weak priors on `(mu, log sigma, xi)`.
struct StationGev<'a> {
    y: &'a [f64],
}

impl LogDensity for StationGev<'_> {
    fn dim(&self) -> usize {
        3
    }

    fn log_density_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        let (mu, log_sigma, xi) = (x[0], x[1], x[2]);
        let sigma = log_sigma.exp();
        let mut lp = normal_lpdf(mu, 0.0, STATION_LOC_SD)
            + normal_lpdf(log_sigma, 0.0, STATION_LOG_SCALE_SD)
            + normal_lpdf(xi, 0.0, STATION_SHAPE_SD);
        let mut g = [
            -mu / STATION_LOC_SD.powi(2),
            -log_sigma / STATION_LOG_SCALE_SD.powi(2),
            -xi / STATION_SHAPE_SD.powi(2),
        ];
        if !(sigma.is_finite() && sigma > 0.0) {
            grad.iter_mut().for_each(|v| *v = 0.0);
            return LOG_ZERO;
        }
        for &y in self.y {
            match logpdf_grad_raw(y, mu, sigma, xi) {
                Some((v, d)) => {
                    lp += v;
                    g[0] += d[0];
                    g[1] += sigma * d[1];
                    g[2] += d[2];
                }
                None => {
                    grad.iter_mut().for_each(|v| *v = 0.0);
                    return LOG_ZERO;
                }
            }
        }
        if !lp.is_finite() {
            grad.iter_mut().for_each(|v| *v = 0.0);
            return LOG_ZERO;
        }
        grad.copy_from_slice(&g);
        lp
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationFit {
    pub draws: Vec<GevParams>,
    pub mean: GevParams,
    pub divergences: usize,
}

impl StationFit {
    /// Equal-tailed interval of one parameter (0 = mu, 1 = sigma, 2 = xi).
    pub fn interval(&self, which: usize, level: f64) -> Result<(f64, f64)> {
        let vals: Vec<f64> = self.draws.iter().map(|p| [p.mu, p.sigma, p.xi][which]).collect();
        let s = sorted(&vals);
        let a = 0.5 * (1.0 - level);
        Ok((quantile_sorted(&s, a)?, quantile_sorted(&s, 1.0 - a)?))
    }

    pub fn sd(&self) -> [f64; 3] {
        let col = |f: fn(&GevParams) -> f64| sd(&self.draws.iter().map(f).collect::<Vec<_>>());
        [col(|p| p.mu), col(|p| p.sigma), col(|p| p.xi)]
    }
}

/// Bayesian GEV fit to one station's maxima.
pub fn fit_station_gev(y: &[f64], cfg: &SamplerConfig) -> Result<StationFit> {
    if y.len() < MIN_STATION_LENGTH {
        return Err(Error::invalid(format!(
            "station fit needs at least {MIN_STATION_LENGTH} maxima, got {}",
            y.len()
        )));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("maxima"));
    }
    // Gumbel moment estimates as the starting point
    let s = sd(y).max(1e-8 * mean(y).abs()).max(1e-300);
    let sigma0 = s * 6f64.sqrt() / std::f64::consts::PI;
    let mu0 = mean(y) - 0.577_215_664_901_532_9 * sigma0;
    let init = Init {
        center: vec![mu0, sigma0.ln(), 0.0],
        jitter_mask: vec![sigma0, 1.0, 0.2],
    };
    let target = StationGev { y };
    let draws = sample(&target, &init, cfg)?;
    let params: Vec<GevParams> = draws
        .iter()
        .map(|d| GevParams {
            mu: d[0],
            sigma: d[1].exp(),
            xi: d[2],
        })
        .collect();
    let m = |f: fn(&GevParams) -> f64| mean(&params.iter().map(f).collect::<Vec<_>>());
    let mean_params = GevParams {
        mu: m(|p| p.mu),
        sigma: m(|p| p.sigma),
        xi: m(|p| p.xi),
    };
    Ok(StationFit {
        draws: params,
        mean: mean_params,
        divergences: draws.divergences(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationFlag {
    /// Shape estimate outside (-0.5, 0.5), clamped before linking.
    ShapeClamped,
    /// Non-positive location estimate; the station is left out.
    NonPositiveLocation,
    /// Too few maxima for a station fit; the station is left out.
    TooShort,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub calibration: PriorCalibration,
    /// Linked estimates `(psi, tau, phi)` of the stations used.
    pub linked: Vec<[f64; 3]>,
    pub flags: Vec<(usize, CalibrationFlag)>,
}

/// Mean and sd of the linked station estimates, per linked parameter.
pub fn calibrate_priors(estimates: &[GevParams], link: &ShapeLinkConstants) -> Result<CalibrationReport> {
    if estimates.len() < 2 {
        return Err(Error::invalid("prior calibration needs at least two stations"));
    }
    let mut flags = Vec::new();
    let mut linked = Vec::new();
    for (s, p) in estimates.iter().enumerate() {
        if !(p.mu > 0.0) {
            flags.push((s, CalibrationFlag::NonPositiveLocation));
            continue;
        }
        let mut q = *p;
        if !(q.xi > -0.5 && q.xi < 0.5) {
            q.xi = q.xi.clamp(-SHAPE_CLAMP, SHAPE_CLAMP);
            flags.push((s, CalibrationFlag::ShapeClamped));
        }
        let l = link_params(&q, link)?;
        linked.push([l.psi, l.tau, l.phi]);
    }
    calibration_from_linked(linked, flags)
}

fn calibration_from_linked(linked: Vec<[f64; 3]>, flags: Vec<(usize, CalibrationFlag)>) -> Result<CalibrationReport> {
    if linked.len() < 2 {
        return Err(Error::Degenerate("fewer than two stations usable for calibration".into()));
    }
    let mut m_hat = [0.0; 3];
    let mut s_hat = [0.0; 3];
    for j in 0..3 {
        let col: Vec<f64> = linked.iter().map(|l| l[j]).collect();
        m_hat[j] = mean(&col);
        s_hat[j] = sd(&col);
    }
    let calibration = PriorCalibration { m_hat, s_hat };
    calibration.validate()?;
    Ok(CalibrationReport {
        calibration,
        linked,
        flags,
    })
}

/// Fits every station of `data` separately (in parallel) and calibrates.
/// Chains of station `s` are seeded from `cfg.seed` offset by `1000 * s`.
pub fn calibrate_from_data(data: &Dataset, cfg: &SamplerConfig, link: &ShapeLinkConstants) -> Result<CalibrationReport> {
    let fits: Vec<Result<Option<GevParams>>> = (0..data.n_stations())
        .into_par_iter()
        .map(|s| {
            let y = data.station_maxima(s);
            if y.len() < MIN_STATION_LENGTH {
                return Ok(None);
            }
            let cfg = SamplerConfig {
                seed: cfg.seed.wrapping_add(1000 * s as u64),
                ..cfg.clone()
            };
            Ok(Some(fit_station_gev(y, &cfg)?.mean))
        })
        .collect();
    let mut estimates = Vec::new();
    let mut short = Vec::new();
    let mut index = Vec::new();
    for (s, f) in fits.into_iter().enumerate() {
        match f? {
            Some(p) => {
                estimates.push(p);
                index.push(s);
            }
            None => short.push((s, CalibrationFlag::TooShort)),
        }
    }
    let mut report = calibrate_priors(&estimates, link)?;
    for f in &mut report.flags {
        f.0 = index[f.0];
    }
    report.flags.extend(short);
    report.flags.sort_by_key(|f| f.0);
    Ok(report)
}

/// Runs the sampler on a model from its calibrated starting point.
pub fn fit_model(model: &Model, cfg: &SamplerConfig) -> Result<PosteriorDraws> {
    let (center, jitter_mask) = model.initial_center();
    sample(model, &Init { center, jitter_mask }, cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationPosterior {
    pub station: String,
    pub gauged: bool,
    pub draws: Vec<GevParams>,
    /// Simulated random effects per draw (ungauged only).
    pub simulated_effects: Option<Vec<[f64; 3]>>,
    /// Whether a covariate was clamped into the training span.
    pub clamped: bool,
}

fn linked_to_gev(theta: [f64; 3], link: &ShapeLinkConstants) -> GevParams {
    GevParams {
        mu: theta[0].exp(),
        sigma: (theta[0] + theta[1]).exp(),
        xi: shape_link_inverse_with_deriv(theta[2], link).0,
    }
}

/// Posterior of a training station's GEV parameters.
pub fn station_params(model: &Model, draws: &PosteriorDraws, s: usize) -> Result<StationPosterior> {
    if s >= model.data().n_stations() {
        return Err(Error::invalid(format!("station index {s} out of range")));
    }
    let out = draws
        .iter()
        .map(|d| model.assemble_predictor(d).map(|p| linked_to_gev([p[0][s], p[1][s], p[2][s]], &model.spec().link)))
        .collect::<Result<Vec<_>>>()?;
    Ok(StationPosterior {
        station: model.data().station_ids()[s].clone(),
        gauged: true,
        draws: out,
        simulated_effects: None,
        clamped: false,
    })
}

/// Posteriors of all training stations in one pass over the draws.
pub fn all_station_params(model: &Model, draws: &PosteriorDraws) -> Result<Vec<StationPosterior>> {
    let n = model.data().n_stations();
    let mut per_station = vec![Vec::with_capacity(draws.n_total()); n];
    for d in draws.iter() {
        let p = model.assemble_predictor(d)?;
        for (s, out) in per_station.iter_mut().enumerate() {
            out.push(linked_to_gev([p[0][s], p[1][s], p[2][s]], &model.spec().link));
        }
    }
    Ok(per_station
        .into_iter()
        .enumerate()
        .map(|(s, draws)| StationPosterior {
            station: model.data().station_ids()[s].clone(),
            gauged: true,
            draws,
            simulated_effects: None,
            clamped: false,
        })
        .collect())
}

/// Intercept plus covariate effects at a new raw covariate row, per draw.
/// Returns the linked fixed parts and whether clamping happened.
pub fn ungauged_fixed_effects(model: &Model, draws: &PosteriorDraws, raw_x: &[f64]) -> Result<(Vec<[f64; 3]>, bool)> {
    let x_std = model.data().standardization().apply(raw_x, "new station")?;
    let (rows, clamped) = model.design_row(&x_std)?;
    let fixed = draws.iter().map(|d| model.fixed_part(d, &rows)).collect::<Result<Vec<_>>>()?;
    Ok((fixed, clamped))
}

/// Predictive GEV parameters at an ungauged site: fixed effects plus a fresh
/// random effect drawn from N(0, kappa^2) for every posterior draw.
pub fn predict_ungauged(
    model: &Model,
    draws: &PosteriorDraws,
    station: &str,
    raw_x: &[f64],
    seed: u64,
) -> Result<StationPosterior> {
    let (fixed, clamped) = ungauged_fixed_effects(model, draws, raw_x)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut effects = Vec::with_capacity(fixed.len());
    let mut out = Vec::with_capacity(fixed.len());
    for (d, f) in draws.iter().zip(&fixed) {
        let kappa = model.kappa(d);
        let u: [f64; 3] = std::array::from_fn(|j| {
            let z: f64 = StandardNormal.sample(&mut rng);
            kappa[j] * z
        });
        out.push(linked_to_gev(std::array::from_fn(|j| f[j] + u[j]), &model.spec().link));
        effects.push(u);
    }
    Ok(StationPosterior {
        station: station.to_string(),
        gauged: false,
        draws: out,
        simulated_effects: Some(effects),
        clamped,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub sd: f64,
    pub q05: f64,
    pub q50: f64,
    pub q95: f64,
    pub width90: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Result<Summary> {
        if values.is_empty() {
            return Err(Error::invalid("summary of no draws"));
        }
        let s = sorted(values);
        let q05 = quantile_sorted(&s, 0.05)?;
        let q95 = quantile_sorted(&s, 0.95)?;
        Ok(Summary {
            mean: mean(values),
            sd: sd(values),
            q05,
            q50: quantile_sorted(&s, 0.5)?,
            q95,
            width90: q95 - q05,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReturnLevelPosterior {
    pub station: String,
    pub periods: Vec<f64>,
    /// `draws[r][b]`: return level for period `r` at posterior draw `b`.
    pub draws: Vec<Vec<f64>>,
    pub summaries: Vec<Summary>,
}

pub fn return_level_posterior(sp: &StationPosterior, periods: &[f64]) -> Result<ReturnLevelPosterior> {
    let rps = periods.iter().map(|&r| ReturnPeriod::new(r)).collect::<Result<Vec<_>>>()?;
    let draws: Vec<Vec<f64>> = rps
        .iter()
        .map(|&rp| sp.draws.iter().map(|p| return_level(rp, p)).collect())
        .collect();
    let summaries = draws.iter().map(|d| Summary::of(d)).collect::<Result<Vec<_>>>()?;
    Ok(ReturnLevelPosterior {
        station: sp.station.clone(),
        periods: periods.to_vec(),
        draws,
        summaries,
    })
}

/// `t` replicate maxima per posterior draw: `out[b][t]`.
pub fn posterior_predictive(sp: &StationPosterior, t: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    if t == 0 {
        return Err(Error::invalid("replicate length must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(sp
        .draws
        .iter()
        .map(|p| (0..t).map(|_| gev_draw(p, &mut rng)).collect())
        .collect())
}

/// Per-coordinate posterior summary with convergence statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoordSummary {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    pub q05: f64,
    pub q50: f64,
    pub q95: f64,
    pub rhat: Option<f64>,
    pub ess: Option<f64>,
}

pub fn summarize_draws(draws: &PosteriorDraws, names: &[String]) -> Result<Vec<CoordSummary>> {
    if names.len() != draws.dim {
        return Err(Error::Shape("one name per coordinate required".into()));
    }
    names
        .iter()
        .enumerate()
        .map(|(k, name)| {
            let chains = draws.coordinate(k);
            let all: Vec<f64> = chains.iter().flatten().copied().collect();
            let s = Summary::of(&all)?;
            Ok(CoordSummary {
                name: name.clone(),
                mean: s.mean,
                sd: s.sd,
                q05: s.q05,
                q50: s.q50,
                q95: s.q95,
                rhat: crate::sampler::rhat(&chains).ok(),
                ess: crate::sampler::ess(&chains).ok(),
            })
        })
        .collect()
}

/// Random draws from N(mean, sd^2) used by the simulators.
pub(crate) fn normal_draw<R: rand::Rng>(rng: &mut R, mean: f64, sd: f64) -> f64 {
    Normal::new(mean, sd).map(|n| n.sample(rng)).unwrap_or(mean)
}

/// Linked shape of a station estimate, clamped as in calibration.
pub fn clamped_shape_link(xi: f64, link: &ShapeLinkConstants) -> Result<f64> {
    shape_link(xi.clamp(-SHAPE_CLAMP, SHAPE_CLAMP), link)
}
