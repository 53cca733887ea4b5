//! Predictive checks: PIT, return-level p-values, CRPS, interval widths and
//! an importance-sampling leave-one-out criterion.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::posterior::{posterior_predictive, return_level_posterior, StationPosterior};
use crate::stats::{mean, quantile_sorted, sorted};
use crate::{Error, Result};

/// Fraction of replicates strictly below `y`.
pub fn pit(replicates: &[f64], y: f64) -> Result<f64> {
    if replicates.is_empty() {
        return Err(Error::invalid("PIT needs at least one replicate"));
    }
    if !y.is_finite() {
        return Err(Error::NonFinite("observation"));
    }
    Ok(replicates.iter().filter(|&&r| r < y).count() as f64 / replicates.len() as f64)
}

/// Fraction of return-level draws below the type-7 sample quantile of
/// `sample` at level `1 - 1/period`.
pub fn bayes_pval(rl_draws: &[f64], sample: &[f64], period: f64) -> Result<f64> {
    if sample.is_empty() || rl_draws.is_empty() {
        return Err(Error::invalid("p-value needs return-level draws and a nonempty sample"));
    }
    let level = 1.0 - 1.0 / period;
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::invalid(format!("return period {period} gives quantile level outside (0, 1)")));
    }
    let q = quantile_sorted(&sorted(sample), level)?;
    Ok(rl_draws.iter().filter(|&&d| d < q).count() as f64 / rl_draws.len() as f64)
}

/// Share of stations whose p-value lies in the open band (0.05, 0.95).
pub fn pval_band_share(pvals: &[f64]) -> Result<f64> {
    if pvals.is_empty() {
        return Err(Error::invalid("no p-values"));
    }
    Ok(pvals.iter().filter(|&&p| p > 0.05 && p < 0.95).count() as f64 / pvals.len() as f64)
}

/// Energy-form CRPS of the empirical replicate distribution:
/// mean|X - y| - mean|X - X'| / 2 over all ordered pairs, evaluated exactly
/// in O(B log B) through the sorted replicates.
pub fn crps_sample(replicates: &[f64], y: f64) -> Result<f64> {
    if replicates.is_empty() {
        return Err(Error::invalid("CRPS needs at least one replicate"));
    }
    if !y.is_finite() || replicates.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("CRPS input"));
    }
    let x = sorted(replicates);
    let b = x.len() as f64;
    let abs_dev = x.iter().map(|v| (v - y).abs()).sum::<f64>() / b;
    // sum_{i,j} |x_i - x_j| = 2 sum_i (2i - B - 1) x_(i), i = 1..B
    let spread: f64 = x
        .iter()
        .enumerate()
        .map(|(i, v)| (2.0 * (i as f64 + 1.0) - b - 1.0) * v)
        .sum::<f64>()
        * 2.0
        / (b * b);
    Ok((abs_dev - 0.5 * spread).max(0.0))
}

pub fn acrps(scores: &[f64]) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::invalid("ACRPS needs at least one scored block"));
    }
    Ok(mean(scores))
}

/// Elementwise ratio of a model's per-station values to a benchmark's.
pub fn relative(values: &[f64], benchmark: &[f64]) -> Result<Vec<f64>> {
    if values.len() != benchmark.len() {
        return Err(Error::Shape("relative metrics need matching stations".into()));
    }
    Ok(values.iter().zip(benchmark).map(|(a, b)| a / b).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LooResult {
    pub looic: f64,
    pub elpd: f64,
    pub pointwise_elpd: Vec<f64>,
    /// Observations whose raw importance weights put more than half the
    /// mass on one draw.
    pub flagged: Vec<usize>,
}

fn log_sum_exp(v: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = v.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Truncated importance-sampling LOO from a `draws x N` log-likelihood
/// matrix given as one row per draw. Weights `1/p` are capped at
/// `mean weight * sqrt(draws)`.
pub fn loo_ic(loglik: &[Vec<f64>]) -> Result<LooResult> {
    let b = loglik.len();
    if b < 2 {
        return Err(Error::invalid("LOO needs at least two draws"));
    }
    let n = loglik[0].len();
    if n == 0 || loglik.iter().any(|r| r.len() != n) {
        return Err(Error::Shape("log-likelihood rows must share a nonzero length".into()));
    }
    if loglik.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("pointwise log-likelihood"));
    }
    let ln_b = (b as f64).ln();
    let mut pointwise = Vec::with_capacity(n);
    let mut flagged = Vec::new();
    for i in 0..n {
        let raw: Vec<f64> = loglik.iter().map(|r| -r[i]).collect();
        let lse_raw = log_sum_exp(raw.iter().copied());
        let max_raw = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if (max_raw - lse_raw).exp() > 0.5 {
            flagged.push(i);
        }
        let cap = lse_raw - ln_b + 0.5 * ln_b;
        let lw: Vec<f64> = raw.iter().map(|w| w.min(cap)).collect();
        let num = log_sum_exp(lw.iter().zip(loglik).map(|(w, r)| w + r[i]));
        let den = log_sum_exp(lw.iter().copied());
        pointwise.push(num - den);
    }
    let elpd: f64 = pointwise.iter().sum();
    Ok(LooResult {
        looic: -2.0 * elpd,
        elpd,
        pointwise_elpd: pointwise,
        flagged,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
    pub critical_1pct: f64,
    pub pass_1pct: bool,
}

/// One-sample Kolmogorov-Smirnov test against a continuous cdf.
pub fn ks_test(values: &[f64], cdf: impl Fn(f64) -> f64) -> Result<KsResult> {
    if values.is_empty() {
        return Err(Error::invalid("KS test of an empty sample"));
    }
    let x = sorted(values);
    let n = x.len() as f64;
    let mut d: f64 = 0.0;
    for (i, v) in x.iter().enumerate() {
        let f = cdf(*v);
        d = d.max(f - i as f64 / n).max((i as f64 + 1.0) / n - f);
    }
    let critical = 1.627_61 / n.sqrt();
    Ok(KsResult {
        statistic: d,
        p_value: kolmogorov_sf(d * n.sqrt()),
        critical_1pct: critical,
        pass_1pct: d < critical,
    })
}

pub fn ks_uniform(values: &[f64]) -> Result<KsResult> {
    ks_test(values, |v| v.clamp(0.0, 1.0))
}

/// Asymptotic Kolmogorov survival function P(K > x).
fn kolmogorov_sf(x: f64) -> f64 {
    if x < 0.2 {
        return 1.0;
    }
    let mut s = 0.0;
    for k in 1..200 {
        let kf = f64::from(k);
        let term = (-2.0 * kf * kf * x * x).exp();
        s += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * s).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationScores {
    pub station: String,
    pub pit: Vec<f64>,
    pub crps: Vec<f64>,
    pub acrps: f64,
    /// Per return period.
    pub pval: Vec<f64>,
    pub ciw: Vec<f64>,
    pub rl_mean: Vec<f64>,
}

/// Scores a station's predictive posterior against its observed maxima; one
/// posterior-predictive replicate per draw and block, seeded.
pub fn score_station(sp: &StationPosterior, y: &[f64], periods: &[f64], seed: u64) -> Result<StationScores> {
    if y.is_empty() {
        return Err(Error::invalid(format!("station '{}' has no maxima to score", sp.station)));
    }
    let reps = posterior_predictive(sp, y.len(), seed)?;
    let mut pits = Vec::with_capacity(y.len());
    let mut crps = Vec::with_capacity(y.len());
    for (t, &yt) in y.iter().enumerate() {
        let col: Vec<f64> = reps.iter().map(|r| r[t]).collect();
        pits.push(pit(&col, yt)?);
        crps.push(crps_sample(&col, yt)?);
    }
    let rl = return_level_posterior(sp, periods)?;
    let pval = rl
        .draws
        .iter()
        .zip(periods)
        .map(|(d, &r)| bayes_pval(d, y, r))
        .collect::<Result<Vec<_>>>()?;
    Ok(StationScores {
        station: sp.station.clone(),
        acrps: acrps(&crps)?,
        pit: pits,
        crps,
        pval,
        ciw: rl.summaries.iter().map(|s| s.width90).collect(),
        rl_mean: rl.summaries.iter().map(|s| s.mean).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub model: String,
    pub periods: Vec<f64>,
    pub stations: Vec<StationScores>,
    /// Per period, share of stations with p-value inside (0.05, 0.95).
    pub pval_band_share: Vec<f64>,
    pub pit_ks: Option<KsResult>,
    pub loo: Option<LooResult>,
}

impl DiagnosticsReport {
    pub fn new(model: &str, periods: &[f64], stations: Vec<StationScores>, loo: Option<LooResult>) -> Result<Self> {
        let pval_band_share = (0..periods.len())
            .map(|r| pval_band_share(&stations.iter().map(|s| s.pval[r]).collect::<Vec<_>>()))
            .collect::<Result<Vec<_>>>()?;
        let pits: Vec<f64> = stations.iter().flat_map(|s| s.pit.iter().copied()).collect();
        let pit_ks = if pits.is_empty() { None } else { Some(ks_uniform(&pits)?) };
        Ok(Self {
            model: model.to_string(),
            periods: periods.to_vec(),
            stations,
            pval_band_share,
            pit_ks,
            loo,
        })
    }

    pub fn pooled_pit(&self) -> Vec<f64> {
        self.stations.iter().flat_map(|s| s.pit.iter().copied()).collect()
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(&mut f, self)?;
        writeln!(f)?;
        Ok(())
    }

    /// Long-format rows `metric,model,station,index,value`.
    pub fn write_long_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["metric", "model", "station", "index", "value"])?;
        for s in &self.stations {
            for (t, v) in s.pit.iter().enumerate() {
                w.write_record(["pit", &self.model, &s.station, &t.to_string(), &v.to_string()])?;
            }
            for (t, v) in s.crps.iter().enumerate() {
                w.write_record(["crps", &self.model, &s.station, &t.to_string(), &v.to_string()])?;
            }
            w.write_record(["acrps", &self.model, &s.station, "", &s.acrps.to_string()])?;
            for (r, period) in self.periods.iter().enumerate() {
                let idx = period.to_string();
                w.write_record(["pval", &self.model, &s.station, &idx, &s.pval[r].to_string()])?;
                w.write_record(["ciw", &self.model, &s.station, &idx, &s.ciw[r].to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}
