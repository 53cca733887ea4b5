//! Datasets, model families and the log joint density over the flat
//! unconstrained parameter vector.
//!
//! All hierarchical coefficients are stored non-centered: the vector holds
//! standard-normal `z` values and the predictor multiplies them by their
//! scales. Every positive scale is stored as its logarithm, with the log
//! Jacobian added to the prior term.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::density::{log_half_cauchy_on_log, log_half_normal_on_log, normal_lpdf, std_normal_lpdf};
use crate::gev::{logpdf_raw, sum_logpdf_grad, shape_link_inverse_with_deriv, GevParams, ShapeLinkConstants, LOG_ZERO};
use crate::sampler::LogDensity;
use crate::splines::{CovariateSmooth, DEFAULT_BASIS_SIZE};
use crate::{Error, Result};

pub const THETA_NAMES: [&str; 3] = ["psi", "tau", "phi"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Transform {
    #[default]
    Identity,
    #[serde(alias = "logarithm")]
    Log,
}

impl FromStr for Transform {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "identity" | "id" | "none" => Ok(Transform::Identity),
            "log" | "logarithm" => Ok(Transform::Log),
            other => Err(Error::invalid(format!("unknown transform '{other}'"))),
        }
    }
}

/// Per-covariate transform, mean and sd learned on a training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub names: Vec<String>,
    pub transforms: Vec<Transform>,
    pub means: Vec<f64>,
    pub sds: Vec<f64>,
}

impl Standardization {
    /// Transform and scale one raw covariate row.
    pub fn apply(&self, raw: &[f64], station: &str) -> Result<Vec<f64>> {
        if raw.len() != self.names.len() {
            return Err(Error::Shape(format!(
                "covariate row has {} values, expected {}",
                raw.len(),
                self.names.len()
            )));
        }
        (0..raw.len())
            .map(|m| {
                let v = transform_value(raw[m], self.transforms[m], &self.names[m], station)?;
                Ok((v - self.means[m]) / self.sds[m])
            })
            .collect()
    }
}

fn transform_value(v: f64, t: Transform, name: &str, station: &str) -> Result<f64> {
    if !v.is_finite() {
        return Err(Error::NonFinite("covariate"));
    }
    match t {
        Transform::Identity => Ok(v),
        Transform::Log if v > 0.0 => Ok(v.ln()),
        Transform::Log => Err(Error::LogOfNonPositive {
            covariate: name.to_string(),
            station: station.to_string(),
            value: v,
        }),
    }
}

/// Transforms each column, then centers and scales it to unit sample sd.
/// `raw` holds one row per station.
pub fn standardize_covariates(
    raw: &[Vec<f64>],
    names: &[String],
    transforms: &[Transform],
    station_ids: &[String],
) -> Result<(DMatrix<f64>, Standardization)> {
    let m = names.len();
    if transforms.len() != m {
        return Err(Error::Shape(format!("{} transforms for {m} covariates", transforms.len())));
    }
    if station_ids.len() != raw.len() {
        return Err(Error::Shape("one station id per covariate row required".into()));
    }
    let s = raw.len();
    if m > 0 && s < 2 {
        return Err(Error::Degenerate("standardization needs at least two stations".into()));
    }
    let mut x = DMatrix::zeros(s, m);
    for (i, row) in raw.iter().enumerate() {
        if row.len() != m {
            return Err(Error::Shape(format!(
                "station '{}' has {} covariates, expected {m}",
                station_ids[i],
                row.len()
            )));
        }
        for j in 0..m {
            x[(i, j)] = transform_value(row[j], transforms[j], &names[j], &station_ids[i])?;
        }
    }
    let mut means = Vec::with_capacity(m);
    let mut sds = Vec::with_capacity(m);
    for j in 0..m {
        let mut col = x.column_mut(j);
        let mean = col.iter().sum::<f64>() / s as f64;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (s - 1) as f64;
        let sd = var.sqrt();
        if !(sd > 1e-12 * mean.abs().max(1.0)) {
            return Err(Error::Degenerate(format!("covariate '{}' has zero variance", names[j])));
        }
        col.iter_mut().for_each(|v| *v = (*v - mean) / sd);
        means.push(mean);
        sds.push(sd);
    }
    Ok((
        x,
        Standardization {
            names: names.to_vec(),
            transforms: transforms.to_vec(),
            means,
            sds,
        },
    ))
}

/// Ragged annual maxima with standardized station covariates.
#[derive(Debug, Clone)]
pub struct Dataset {
    station_ids: Vec<String>,
    maxima: Vec<f64>,
    offsets: Vec<usize>,
    raw_covariates: Vec<Vec<f64>>,
    x: DMatrix<f64>,
    standardization: Standardization,
}

impl Dataset {
    pub fn new(
        station_ids: Vec<String>,
        maxima: Vec<Vec<f64>>,
        covariate_names: Vec<String>,
        transforms: Vec<Transform>,
        raw_covariates: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let s = station_ids.len();
        if s == 0 {
            return Err(Error::invalid("dataset has no stations"));
        }
        if maxima.len() != s || raw_covariates.len() != s {
            return Err(Error::Shape("maxima and covariates need one entry per station".into()));
        }
        let mut flat = Vec::new();
        let mut offsets = vec![0];
        for (id, ys) in station_ids.iter().zip(&maxima) {
            if ys.is_empty() {
                return Err(Error::invalid(format!("station '{id}' has no maxima")));
            }
            if let Some(&bad) = ys.iter().find(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("station '{id}' has non-finite maximum {bad}")));
            }
            flat.extend_from_slice(ys);
            offsets.push(flat.len());
        }
        let (x, standardization) = standardize_covariates(&raw_covariates, &covariate_names, &transforms, &station_ids)?;
        Ok(Self {
            station_ids,
            maxima: flat,
            offsets,
            raw_covariates,
            x,
            standardization,
        })
    }

    /// Intercept-only dataset without covariates.
    pub fn without_covariates(station_ids: Vec<String>, maxima: Vec<Vec<f64>>) -> Result<Self> {
        let s = station_ids.len();
        Self::new(station_ids, maxima, Vec::new(), Vec::new(), vec![Vec::new(); s])
    }

    pub fn n_stations(&self) -> usize {
        self.station_ids.len()
    }

    pub fn n_covariates(&self) -> usize {
        self.x.ncols()
    }

    pub fn n_obs(&self) -> usize {
        self.maxima.len()
    }

    pub fn station_ids(&self) -> &[String] {
        &self.station_ids
    }

    pub fn station_index(&self, id: &str) -> Option<usize> {
        self.station_ids.iter().position(|s| s == id)
    }

    pub fn station_maxima(&self, s: usize) -> &[f64] {
        &self.maxima[self.offsets[s]..self.offsets[s + 1]]
    }

    /// All maxima, station-major.
    pub fn all_maxima(&self) -> &[f64] {
        &self.maxima
    }

    /// Station of each entry of [`Dataset::all_maxima`].
    pub fn obs_station(&self) -> Vec<usize> {
        (0..self.n_stations())
            .flat_map(|s| std::iter::repeat_n(s, self.offsets[s + 1] - self.offsets[s]))
            .collect()
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn raw_covariates(&self, s: usize) -> &[f64] {
        &self.raw_covariates[s]
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.standardization.names
    }

    pub fn transforms(&self) -> &[Transform] {
        &self.standardization.transforms
    }

    pub fn standardization(&self) -> &Standardization {
        &self.standardization
    }

    /// Stations at `indices`, with standardization recomputed on them alone.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.n_stations()) {
            return Err(Error::invalid(format!("station index {bad} out of range")));
        }
        Dataset::new(
            indices.iter().map(|&i| self.station_ids[i].clone()).collect(),
            indices.iter().map(|&i| self.station_maxima(i).to_vec()).collect(),
            self.standardization.names.clone(),
            self.standardization.transforms.clone(),
            indices.iter().map(|&i| self.raw_covariates[i].clone()).collect(),
        )
    }

    /// Same stations and covariates with replaced maxima.
    pub fn with_maxima(&self, maxima: Vec<Vec<f64>>) -> Result<Dataset> {
        Dataset::new(
            self.station_ids.clone(),
            maxima,
            self.standardization.names.clone(),
            self.standardization.transforms.clone(),
            self.raw_covariates.clone(),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Family {
    #[serde(rename = "linear")]
    Linear,
    #[serde(rename = "splines")]
    Splines,
    #[serde(rename = "splines-hs")]
    SplinesHs,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::Linear, Family::Splines, Family::SplinesHs];

    pub fn as_str(&self) -> &'static str {
        match self {
            Family::Linear => "linear",
            Family::Splines => "splines",
            Family::SplinesHs => "splines-hs",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "linear" => Ok(Family::Linear),
            "splines" => Ok(Family::Splines),
            "splines-hs" | "splines_hs" | "splineshs" => Ok(Family::SplinesHs),
            other => Err(Error::invalid(format!("unknown model family '{other}'"))),
        }
    }
}

/// Per-parameter mean and sd of the linked single-station estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorCalibration {
    pub m_hat: [f64; 3],
    pub s_hat: [f64; 3],
}

impl PriorCalibration {
    pub fn validate(&self) -> Result<()> {
        for j in 0..3 {
            if !self.m_hat[j].is_finite() || !self.s_hat[j].is_finite() {
                return Err(Error::NonFinite("prior calibration"));
            }
            if self.s_hat[j] <= 0.0 {
                return Err(Error::Degenerate(format!("prior scale for {} is not positive", THETA_NAMES[j])));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorScales {
    /// Sd of the unpenalized coefficients.
    pub coef_sd: f64,
    /// Intercept sd as a multiple of `s_hat`.
    pub intercept_factor: f64,
    /// Half-normal scale of the random-effect sd.
    pub kappa_sd: f64,
    /// Half-normal scale of the smoothing sd.
    pub omega_sd: f64,
}

impl Default for PriorScales {
    fn default() -> Self {
        Self {
            coef_sd: 2.0,
            intercept_factor: 2.0,
            kappa_sd: 2.0,
            omega_sd: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub family: Family,
    pub basis_size: usize,
    pub calibration: PriorCalibration,
    #[serde(default)]
    pub priors: PriorScales,
    #[serde(default)]
    pub link: ShapeLinkConstants,
}

impl ModelSpec {
    pub fn new(family: Family, calibration: PriorCalibration) -> Self {
        Self {
            family,
            basis_size: DEFAULT_BASIS_SIZE,
            calibration,
            priors: PriorScales::default(),
            link: ShapeLinkConstants::default(),
        }
    }

    pub fn with_basis_size(mut self, k: usize) -> Self {
        self.basis_size = k;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    Intercept,
    Beta,
    GammaStd,
    LogOmega,
    AlphaStd,
    LogDelta,
    LogLambda,
    LogEta,
    RandomEffectStd,
    LogKappa,
}

impl BlockKind {
    fn label(&self) -> &'static str {
        match self {
            BlockKind::Intercept => "intercept",
            BlockKind::Beta => "beta",
            BlockKind::GammaStd => "z_gamma",
            BlockKind::LogOmega => "log_omega",
            BlockKind::AlphaStd => "z_alpha",
            BlockKind::LogDelta => "log_delta",
            BlockKind::LogLambda => "log_lambda",
            BlockKind::LogEta => "log_eta",
            BlockKind::RandomEffectStd => "z_u",
            BlockKind::LogKappa => "log_kappa",
        }
    }
}

/// A contiguous run of coordinates. `covariate` is set for per-covariate
/// blocks whose entries index basis functions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub kind: BlockKind,
    pub theta: usize,
    pub covariate: Option<usize>,
    pub start: usize,
    pub len: usize,
}

impl Block {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.len
    }
}

/// Start offsets of one linked parameter's blocks.
#[derive(Debug, Clone, Copy, PartialEq)]
struct ThetaOffsets {
    intercept: usize,
    beta: usize,
    gamma: usize,
    log_omega: usize,
    alpha: usize,
    log_delta: usize,
    log_lambda: usize,
    log_eta: usize,
    u: usize,
    log_kappa: usize,
}

/// Maps the flat parameter vector onto named blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    family: Family,
    n_stations: usize,
    n_covariates: usize,
    basis_size: usize,
    blocks: Vec<Block>,
    offsets: [ThetaOffsets; 3],
    dim: usize,
}

impl Layout {
    pub fn new(family: Family, n_stations: usize, n_covariates: usize, basis_size: usize) -> Self {
        let (s, m, k) = (n_stations, n_covariates, basis_size);
        let mut blocks = Vec::new();
        let mut pos = 0;
        let push = |blocks: &mut Vec<Block>, pos: &mut usize, kind, theta, covariate, len: usize| {
            let start = *pos;
            if len > 0 {
                blocks.push(Block { kind, theta, covariate, start, len });
            }
            *pos += len;
            start
        };
        let mut offsets = [None; 3];
        for (j, slot) in offsets.iter_mut().enumerate() {
            let intercept = push(&mut blocks, &mut pos, BlockKind::Intercept, j, None, 1);
            let mut off = ThetaOffsets {
                intercept,
                beta: usize::MAX,
                gamma: usize::MAX,
                log_omega: usize::MAX,
                alpha: usize::MAX,
                log_delta: usize::MAX,
                log_lambda: usize::MAX,
                log_eta: usize::MAX,
                u: 0,
                log_kappa: 0,
            };
            match family {
                Family::Linear => {
                    off.beta = push(&mut blocks, &mut pos, BlockKind::Beta, j, None, m);
                }
                Family::Splines => {
                    off.beta = push(&mut blocks, &mut pos, BlockKind::Beta, j, None, m);
                    off.gamma = pos;
                    for c in 0..m {
                        push(&mut blocks, &mut pos, BlockKind::GammaStd, j, Some(c), k - 2);
                    }
                    off.log_omega = push(&mut blocks, &mut pos, BlockKind::LogOmega, j, None, m);
                }
                Family::SplinesHs => {
                    off.alpha = pos;
                    for c in 0..m {
                        push(&mut blocks, &mut pos, BlockKind::AlphaStd, j, Some(c), k - 1);
                    }
                    off.log_delta = pos;
                    for c in 0..m {
                        push(&mut blocks, &mut pos, BlockKind::LogDelta, j, Some(c), k - 1);
                    }
                    off.log_lambda = push(&mut blocks, &mut pos, BlockKind::LogLambda, j, None, m);
                    off.log_eta = push(&mut blocks, &mut pos, BlockKind::LogEta, j, None, usize::from(m > 0));
                }
            }
            off.u = push(&mut blocks, &mut pos, BlockKind::RandomEffectStd, j, None, s);
            off.log_kappa = push(&mut blocks, &mut pos, BlockKind::LogKappa, j, None, 1);
            *slot = Some(off);
        }
        Self {
            family,
            n_stations: s,
            n_covariates: m,
            basis_size: k,
            blocks,
            offsets: offsets.map(|o| o.expect("all three offsets set")),
            dim: pos,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn n_stations(&self) -> usize {
        self.n_stations
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn find(&self, kind: BlockKind, theta: usize, covariate: Option<usize>) -> Option<&Block> {
        self.blocks
            .iter()
            .find(|b| b.kind == kind && b.theta == theta && b.covariate == covariate)
    }

    pub fn intercept(&self, theta: usize) -> usize {
        self.offsets[theta].intercept
    }

    pub fn log_kappa(&self, theta: usize) -> usize {
        self.offsets[theta].log_kappa
    }

    pub fn random_effects(&self, theta: usize) -> std::ops::Range<usize> {
        let u = self.offsets[theta].u;
        u..u + self.n_stations
    }

    /// One readable name per coordinate, in vector order.
    pub fn coordinate_names(&self) -> Vec<String> {
        let mut names = vec![String::new(); self.dim];
        for b in &self.blocks {
            for (i, name) in names[b.range()].iter_mut().enumerate() {
                let theta = THETA_NAMES[b.theta];
                let label = b.kind.label();
                *name = match (b.kind, b.covariate) {
                    (BlockKind::Intercept | BlockKind::LogEta | BlockKind::LogKappa, _) => format!("{theta}.{label}"),
                    (_, Some(c)) => format!("{theta}.{label}[{c}][{i}]"),
                    (_, None) => format!("{theta}.{label}[{i}]"),
                };
            }
        }
        names
    }
}

/// Number of design columns per covariate group.
fn group_width(family: Family, k: usize) -> usize {
    match family {
        Family::Linear => 1,
        Family::Splines | Family::SplinesHs => k - 1,
    }
}

/// A fitted model definition: data, designs and layout.
#[derive(Debug, Clone)]
pub struct Model {
    spec: ModelSpec,
    data: Dataset,
    layout: Layout,
    smooths: Vec<CovariateSmooth>,
    /// `columns[m][k]` is column k of the group design of covariate m,
    /// evaluated at the training stations.
    columns: Vec<Vec<Vec<f64>>>,
    obs_station: Vec<usize>,
}

/// Station-level linked parameters.
pub type Predictor = [Vec<f64>; 3];

impl Model {
    pub fn new(spec: ModelSpec, data: Dataset) -> Result<Self> {
        spec.calibration.validate()?;
        let (s, m, k) = (data.n_stations(), data.n_covariates(), spec.basis_size);
        let uses_splines = spec.family != Family::Linear && m > 0;
        if uses_splines && k < 5 {
            return Err(Error::invalid(format!("basis size must be at least 5, got {k}")));
        }
        if !(spec.priors.coef_sd > 0.0
            && spec.priors.intercept_factor > 0.0
            && spec.priors.kappa_sd > 0.0
            && spec.priors.omega_sd > 0.0)
        {
            return Err(Error::invalid("prior scales must be positive"));
        }
        let mut smooths = Vec::new();
        let mut columns = Vec::with_capacity(m);
        for c in 0..m {
            let x: Vec<f64> = data.x().column(c).iter().copied().collect();
            if uses_splines {
                let smooth = CovariateSmooth::new(&x, k, c)?;
                let z = &smooth.design.z;
                columns.push((0..z.ncols()).map(|j| z.column(j).iter().copied().collect()).collect());
                smooths.push(smooth);
            } else {
                columns.push(vec![x]);
            }
        }
        let layout = Layout::new(spec.family, s, m, k);
        let obs_station = data.obs_station();
        Ok(Self {
            spec,
            data,
            layout,
            smooths,
            columns,
            obs_station,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn smooths(&self) -> &[CovariateSmooth] {
        &self.smooths
    }

    pub fn dim(&self) -> usize {
        self.layout.dim
    }

    fn check_len(&self, params: &[f64]) -> Result<()> {
        if params.len() != self.layout.dim {
            return Err(Error::Shape(format!(
                "parameter vector has length {}, layout needs {}",
                params.len(),
                self.layout.dim
            )));
        }
        Ok(())
    }

    /// Effective coefficients of each covariate group on its design columns.
    fn group_coefficients(&self, params: &[f64], theta: usize) -> Vec<Vec<f64>> {
        let off = &self.layout.offsets[theta];
        let m = self.data.n_covariates();
        let w = group_width(self.spec.family, self.spec.basis_size);
        match self.spec.family {
            Family::Linear => (0..m).map(|c| vec![params[off.beta + c]]).collect(),
            Family::Splines => (0..m)
                .map(|c| {
                    let omega = params[off.log_omega + c].exp();
                    let z = &params[off.gamma + c * (w - 1)..off.gamma + (c + 1) * (w - 1)];
                    std::iter::once(params[off.beta + c]).chain(z.iter().map(|v| omega * v)).collect()
                })
                .collect(),
            Family::SplinesHs => {
                if m == 0 {
                    return Vec::new();
                }
                let eta = params[off.log_eta].exp();
                (0..m)
                    .map(|c| {
                        let lambda = params[off.log_lambda + c].exp();
                        (0..w)
                            .map(|i| {
                                let idx = c * w + i;
                                let sd = eta * lambda * (0.5 * params[off.log_delta + idx]).exp();
                                sd * params[off.alpha + idx]
                            })
                            .collect()
                    })
                    .collect()
            }
        }
    }

    fn predictor_unchecked(&self, params: &[f64]) -> Predictor {
        let s = self.data.n_stations();
        std::array::from_fn(|j| {
            let off = &self.layout.offsets[j];
            let kappa = params[off.log_kappa].exp();
            let mut eta: Vec<f64> = (0..s).map(|i| params[off.intercept] + kappa * params[off.u + i]).collect();
            for (cols, coefs) in self.columns.iter().zip(self.group_coefficients(params, j)) {
                for (col, a) in cols.iter().zip(coefs) {
                    eta.iter_mut().zip(col).for_each(|(e, z)| *e += a * z);
                }
            }
            eta
        })
    }

    /// Linked parameters `(psi, tau, phi)` at every station.
    pub fn assemble_predictor(&self, params: &[f64]) -> Result<Predictor> {
        self.check_len(params)?;
        Ok(self.predictor_unchecked(params))
    }

    /// Contribution of covariate `m` to the `theta` predictor at each station.
    pub fn covariate_effect(&self, params: &[f64], theta: usize, m: usize) -> Result<Vec<f64>> {
        self.check_len(params)?;
        if m >= self.data.n_covariates() || theta > 2 {
            return Err(Error::invalid(format!("no effect for theta {theta}, covariate {m}")));
        }
        let coefs = &self.group_coefficients(params, theta)[m];
        let mut out = vec![0.0; self.data.n_stations()];
        for (col, a) in self.columns[m].iter().zip(coefs) {
            out.iter_mut().zip(col).for_each(|(e, z)| *e += a * z);
        }
        Ok(out)
    }

    /// Design row of a new station, from its standardized covariates.
    /// The linear column extrapolates; spline bases are clamped to the
    /// training span, which the flag reports.
    pub fn design_row(&self, x_std: &[f64]) -> Result<(Vec<Vec<f64>>, bool)> {
        if x_std.len() != self.data.n_covariates() {
            return Err(Error::Shape(format!(
                "new covariate row has {} values, expected {}",
                x_std.len(),
                self.data.n_covariates()
            )));
        }
        let mut clamped = false;
        let mut rows = Vec::with_capacity(x_std.len());
        for (c, &x) in x_std.iter().enumerate() {
            if !x.is_finite() {
                return Err(Error::NonFinite("covariate"));
            }
            let mut row = vec![x];
            if let Some(smooth) = self.smooths.get(c) {
                let (pen, cl) = smooth.penalized_row(x)?;
                clamped |= cl;
                row.extend(pen);
            }
            rows.push(row);
        }
        Ok((rows, clamped))
    }

    /// Intercept plus covariate effects at a design row, without random effects.
    pub fn fixed_part(&self, params: &[f64], design_row: &[Vec<f64>]) -> Result<[f64; 3]> {
        self.check_len(params)?;
        if design_row.len() != self.data.n_covariates() {
            return Err(Error::Shape("design row does not match covariates".into()));
        }
        Ok(std::array::from_fn(|j| {
            let mut v = params[self.layout.offsets[j].intercept];
            for (row, coefs) in design_row.iter().zip(self.group_coefficients(params, j)) {
                v += row.iter().zip(&coefs).map(|(z, a)| z * a).sum::<f64>();
            }
            v
        }))
    }

    /// Random-effect scales `kappa` per linked parameter.
    pub fn kappa(&self, params: &[f64]) -> [f64; 3] {
        std::array::from_fn(|j| params[self.layout.offsets[j].log_kappa].exp())
    }

    /// GEV parameters at every station.
    pub fn station_params(&self, params: &[f64]) -> Result<Vec<GevParams>> {
        let pred = self.assemble_predictor(params)?;
        Ok(predictor_to_gev(&pred, &self.spec.link))
    }

    /// Log-likelihood of each observation, station-major; `-inf` outside the support.
    pub fn pointwise_log_lik(&self, params: &[f64]) -> Result<Vec<f64>> {
        let params_at = self.station_params(params)?;
        Ok(self
            .data
            .all_maxima()
            .iter()
            .zip(&self.obs_station)
            .map(|(&y, &s)| {
                let p = &params_at[s];
                logpdf_raw(y, p.mu, p.sigma, p.xi).unwrap_or(f64::NEG_INFINITY)
            })
            .collect())
    }

    /// Log prior density including log Jacobians of the log-scale coordinates.
    pub fn log_prior(&self, params: &[f64]) -> Result<f64> {
        self.check_len(params)?;
        Ok(self.prior_terms(params, None))
    }

    /// Log joint density; `-inf` when a maximum falls outside its station's support.
    pub fn log_joint(&self, params: &[f64]) -> Result<f64> {
        self.check_len(params)?;
        if let Some(&bad) = params.iter().find(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite parameter {bad}")));
        }
        Ok(self.evaluate(params, None).unwrap_or(f64::NEG_INFINITY))
    }

    /// Gradient of the log joint; zero outside the support.
    pub fn log_joint_grad(&self, params: &[f64]) -> Result<Vec<f64>> {
        self.check_len(params)?;
        let mut grad = vec![0.0; params.len()];
        if self.evaluate(params, Some(&mut grad)).is_none() {
            grad.iter_mut().for_each(|g| *g = 0.0);
        }
        Ok(grad)
    }

    /// Starting point: intercepts at the calibrated means, everything else at zero,
    /// and the per-coordinate jitter half-width multiplier (0 for intercepts).
    pub fn initial_center(&self) -> (Vec<f64>, Vec<f64>) {
        let mut center = vec![0.0; self.dim()];
        let mut jitter = vec![1.0; self.dim()];
        for j in 0..3 {
            let i = self.layout.offsets[j].intercept;
            center[i] = self.spec.calibration.m_hat[j];
            jitter[i] = 0.0;
        }
        (center, jitter)
    }

    /// Value of the log joint and, if requested, its gradient accumulated into `grad`
    /// (which must be zeroed). `None` when outside the support or not finite.
    fn evaluate(&self, params: &[f64], mut grad: Option<&mut [f64]>) -> Option<f64> {
        let pred = self.predictor_unchecked(params);
        let s = self.data.n_stations();
        let link = &self.spec.link;
        let mut loglik = 0.0;
        let mut g_eta: Predictor = std::array::from_fn(|_| vec![0.0; s]);
        for i in 0..s {
            let (psi, tau, phi) = (pred[0][i], pred[1][i], pred[2][i]);
            let mu = psi.exp();
            let sigma = (psi + tau).exp();
            if !(mu.is_finite() && sigma.is_finite() && sigma > 0.0 && phi.is_finite()) {
                return None;
            }
            let (xi, dxi) = shape_link_inverse_with_deriv(phi, link);
            let ys = self.data.station_maxima(i);
            let (d_mu, d_sigma, d_xi) = if grad.is_some() {
                let (v, d) = sum_logpdf_grad(ys, mu, sigma, xi)?;
                loglik += v;
                (d[0], d[1], d[2])
            } else {
                for &y in ys {
                    loglik += logpdf_raw(y, mu, sigma, xi)?;
                }
                (0.0, 0.0, 0.0)
            };
            g_eta[0][i] = mu * d_mu + sigma * d_sigma;
            g_eta[1][i] = sigma * d_sigma;
            g_eta[2][i] = if dxi.is_finite() { d_xi * dxi } else { 0.0 };
        }
        if let Some(g) = grad.as_deref_mut() {
            self.backprop(params, &g_eta, g);
        }
        let total = loglik + self.prior_terms(params, grad);
        total.is_finite().then_some(total)
    }

    /// Pushes station-level scores back onto the parameter coordinates.
    fn backprop(&self, params: &[f64], g_eta: &Predictor, grad: &mut [f64]) {
        let w = group_width(self.spec.family, self.spec.basis_size);
        for (j, g) in g_eta.iter().enumerate() {
            let off = &self.layout.offsets[j];
            grad[off.intercept] += g.iter().sum::<f64>();
            let kappa = params[off.log_kappa].exp();
            let mut dot_u = 0.0;
            for (i, gi) in g.iter().enumerate() {
                grad[off.u + i] += kappa * gi;
                dot_u += gi * params[off.u + i];
            }
            grad[off.log_kappa] += kappa * dot_u;

            let coefs = self.group_coefficients(params, j);
            for (c, cols) in self.columns.iter().enumerate() {
                let r: Vec<f64> = cols.iter().map(|col| col.iter().zip(g).map(|(z, gi)| z * gi).sum()).collect();
                match self.spec.family {
                    Family::Linear => grad[off.beta + c] += r[0],
                    Family::Splines => {
                        grad[off.beta + c] += r[0];
                        let omega = params[off.log_omega + c].exp();
                        let mut d_log_omega = 0.0;
                        for i in 1..w {
                            grad[off.gamma + c * (w - 1) + i - 1] += omega * r[i];
                            d_log_omega += coefs[c][i] * r[i];
                        }
                        grad[off.log_omega + c] += d_log_omega;
                    }
                    Family::SplinesHs => {
                        let group_sd = params[off.log_eta].exp() * params[off.log_lambda + c].exp();
                        let mut group = 0.0;
                        for i in 0..w {
                            let idx = c * w + i;
                            let a = coefs[c][i];
                            let sd = group_sd * (0.5 * params[off.log_delta + idx]).exp();
                            grad[off.alpha + idx] += sd * r[i];
                            grad[off.log_delta + idx] += 0.5 * a * r[i];
                            group += a * r[i];
                        }
                        grad[off.log_lambda + c] += group;
                        grad[off.log_eta] += group;
                    }
                }
            }
        }
    }

    /// Sum of prior log densities; gradients added into `grad` when given.
    fn prior_terms(&self, params: &[f64], mut grad: Option<&mut [f64]>) -> f64 {
        let pr = &self.spec.priors;
        let cal = &self.spec.calibration;
        let m = self.data.n_covariates();
        let w = group_width(self.spec.family, self.spec.basis_size);
        let mut total = 0.0;
        let mut add = |total: &mut f64, idx: usize, (v, d): (f64, f64)| {
            *total += v;
            if let Some(g) = grad.as_deref_mut() {
                g[idx] += d;
            }
        };
        let normal = |x: f64, mean: f64, sd: f64| (normal_lpdf(x, mean, sd), -(x - mean) / (sd * sd));
        let std_normal = |z: f64| (std_normal_lpdf(z), -z);
        for j in 0..3 {
            let off = &self.layout.offsets[j];
            let b0 = off.intercept;
            add(&mut total, b0, normal(params[b0], cal.m_hat[j], pr.intercept_factor * cal.s_hat[j]));
            if matches!(self.spec.family, Family::Linear | Family::Splines) {
                for c in 0..m {
                    add(&mut total, off.beta + c, normal(params[off.beta + c], 0.0, pr.coef_sd));
                }
            }
            match self.spec.family {
                Family::Linear => {}
                Family::Splines => {
                    for idx in off.gamma..off.gamma + m * (w - 1) {
                        add(&mut total, idx, std_normal(params[idx]));
                    }
                    for c in 0..m {
                        let idx = off.log_omega + c;
                        add(&mut total, idx, log_half_normal_on_log(params[idx], pr.omega_sd));
                    }
                }
                Family::SplinesHs if m > 0 => {
                    for idx in off.alpha..off.alpha + m * w {
                        add(&mut total, idx, std_normal(params[idx]));
                    }
                    for idx in off.log_delta..off.log_delta + m * w {
                        add(&mut total, idx, log_half_cauchy_on_log(params[idx], 1.0));
                    }
                    for c in 0..m {
                        let idx = off.log_lambda + c;
                        add(&mut total, idx, log_half_cauchy_on_log(params[idx], 1.0));
                    }
                    add(&mut total, off.log_eta, log_half_cauchy_on_log(params[off.log_eta], cal.s_hat[j]));
                }
                Family::SplinesHs => {}
            }
            for idx in off.u..off.u + self.data.n_stations() {
                add(&mut total, idx, std_normal(params[idx]));
            }
            add(&mut total, off.log_kappa, log_half_normal_on_log(params[off.log_kappa], pr.kappa_sd));
        }
        total
    }
}

/// Inverse link applied station by station.
pub fn predictor_to_gev(pred: &Predictor, link: &ShapeLinkConstants) -> Vec<GevParams> {
    (0..pred[0].len())
        .map(|i| {
            let xi = shape_link_inverse_with_deriv(pred[2][i], link).0;
            GevParams {
                mu: pred[0][i].exp(),
                sigma: (pred[0][i] + pred[1][i]).exp(),
                xi,
            }
        })
        .collect()
}

impl LogDensity for Model {
    fn dim(&self) -> usize {
        self.layout.dim
    }

    fn log_density_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        grad.iter_mut().for_each(|g| *g = 0.0);
        match self.evaluate(x, Some(grad)) {
            Some(v) => v,
            None => {
                grad.iter_mut().for_each(|g| *g = 0.0);
                LOG_ZERO
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn calib() -> PriorCalibration {
        PriorCalibration {
            m_hat: [4.6, -1.2, 0.2],
            s_hat: [0.5, 0.2, 0.3],
        }
    }

    fn toy_data(s: usize, t: usize, m: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids: Vec<String> = (0..s).map(|i| format!("st{i}")).collect();
        let cov: Vec<Vec<f64>> = (0..s).map(|_| (0..m).map(|_| rng.random_range(0.0..1.0)).collect()).collect();
        let maxima = (0..s)
            .map(|_| (0..t).map(|_| 100.0 * (1.0 + 0.3 * rng.random_range(-1.0..2.0f64))).collect())
            .collect();
        let names = (0..m).map(|c| format!("x{c}")).collect();
        Dataset::new(ids, maxima, names, vec![Transform::Identity; m], cov).unwrap()
    }

    fn model(family: Family, data: Dataset) -> Model {
        Model::new(ModelSpec::new(family, calib()).with_basis_size(8), data).unwrap()
    }

    /// Scales near e^-1.5 keep every maximum inside its support.
    fn random_point(model: &Model, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let (mut x, jitter) = model.initial_center();
        for b in model.layout().blocks() {
            if matches!(
                b.kind,
                BlockKind::LogOmega | BlockKind::LogDelta | BlockKind::LogLambda | BlockKind::LogEta | BlockKind::LogKappa
            ) {
                x[b.range()].iter_mut().for_each(|v| *v = -1.5);
            }
        }
        for (v, j) in x.iter_mut().zip(&jitter) {
            *v += j * rng.random_range(-0.3..0.3);
        }
        x
    }

    #[test]
    fn standardized_columns_have_unit_sd() {
        let d = toy_data(12, 3, 3, 1);
        for c in 0..3 {
            let col = d.x().column(c);
            let mean = col.iter().sum::<f64>() / 12.0;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 11.0;
            assert!(mean.abs() < 1e-12);
            assert!((var.sqrt() - 1.0).abs() < 1e-12);
        }
        // stored record reproduces the training matrix
        for s in 0..12 {
            let row = d.standardization().apply(d.raw_covariates(s), "x").unwrap();
            for c in 0..3 {
                assert!((row[c] - d.x()[(s, c)]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn constant_covariate_is_rejected() {
        let ids = vec!["a".to_string(), "b".to_string()];
        let r = standardize_covariates(&[vec![3.0], vec![3.0]], &["c".into()], &[Transform::Identity], &ids);
        assert!(matches!(r, Err(Error::Degenerate(_))));
        let r = standardize_covariates(&[vec![3.0], vec![-1.0]], &["c".into()], &[Transform::Log], &ids);
        assert!(matches!(r, Err(Error::LogOfNonPositive { .. })));
    }

    #[test]
    fn layout_partitions_vector() {
        for family in Family::ALL {
            let layout = Layout::new(family, 7, 3, 8);
            let mut seen = vec![0; layout.dim()];
            for b in layout.blocks() {
                for i in b.range() {
                    seen[i] += 1;
                }
            }
            assert!(seen.iter().all(|&c| c == 1), "{family}");
            assert_eq!(layout.coordinate_names().len(), layout.dim());
        }
        assert_eq!(Layout::new(Family::Linear, 7, 3, 8).dim(), 3 * (1 + 3 + 7 + 1));
        assert_eq!(Layout::new(Family::Splines, 7, 3, 8).dim(), 3 * (1 + 3 + 18 + 3 + 7 + 1));
        assert_eq!(Layout::new(Family::SplinesHs, 7, 3, 8).dim(), 3 * (1 + 21 + 21 + 3 + 1 + 7 + 1));
    }

    #[test]
    fn zero_effects_give_intercept_predictor() {
        let m = model(Family::SplinesHs, toy_data(6, 4, 2, 2));
        let mut p = vec![0.0; m.dim()];
        p[m.layout().intercept(0)] = 4.2;
        let pred = m.assemble_predictor(&p).unwrap();
        assert!(pred[0].iter().all(|&v| v == 4.2));
        assert!(m.assemble_predictor(&p[1..]).is_err());
    }

    #[test]
    fn hs_predictor_matches_splines_for_same_coefficients() {
        let data = toy_data(9, 3, 2, 3);
        let sp = model(Family::Splines, data.clone());
        let hs = model(Family::SplinesHs, data);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p_sp = random_point(&sp, &mut rng);
        let mut p_hs = vec![0.0; hs.dim()];
        // unit scales so the standardized draws are the coefficients themselves
        for j in 0..3 {
            let (lo, ho) = (&sp.layout().offsets[j], &hs.layout().offsets[j]);
            p_hs[ho.intercept] = p_sp[lo.intercept];
            p_hs[ho.log_kappa] = p_sp[lo.log_kappa];
            for i in 0..9 {
                p_hs[ho.u + i] = p_sp[lo.u + i];
            }
            let coefs = sp.group_coefficients(&p_sp, j);
            for (c, a) in coefs.iter().enumerate() {
                for (i, v) in a.iter().enumerate() {
                    p_hs[ho.alpha + c * 7 + i] = *v;
                }
            }
        }
        let a = sp.assemble_predictor(&p_sp).unwrap();
        let b = hs.assemble_predictor(&p_hs).unwrap();
        for j in 0..3 {
            for i in 0..9 {
                assert!((a[j][i] - b[j][i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn duplicating_observations_adds_likelihood_once_more() {
        let data = toy_data(8, 4, 2, 5);
        let doubled: Vec<Vec<f64>> = (0..8).map(|s| data.station_maxima(s).repeat(2)).collect();
        let big = data.with_maxima(doubled).unwrap();
        let m1 = model(Family::Splines, data);
        let m2 = model(Family::Splines, big);
        let p = random_point(&m1, &mut ChaCha8Rng::seed_from_u64(6));
        let prior = m1.log_prior(&p).unwrap();
        let l1 = m1.log_joint(&p).unwrap() - prior;
        let l2 = m2.log_joint(&p).unwrap() - prior;
        assert!((l2 - 2.0 * l1).abs() < 1e-9 * l1.abs());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for family in Family::ALL {
            let m = model(family, toy_data(9, 5, 2, 8));
            for _ in 0..3 {
                let p = random_point(&m, &mut rng);
                let g = m.log_joint_grad(&p).unwrap();
                assert!(m.log_joint(&p).unwrap().is_finite(), "{family} {:?} {:?}", m.log_prior(&p), m.pointwise_log_lik(&p));
                for i in 0..m.dim() {
                    let h = 1e-5;
                    let mut a = p.clone();
                    let mut b = p.clone();
                    a[i] += h;
                    b[i] -= h;
                    let fd = (m.log_joint(&a).unwrap() - m.log_joint(&b).unwrap()) / (2.0 * h);
                    let scale = fd.abs().max(1.0);
                    assert!((fd - g[i]).abs() / scale < 1e-5, "{family} coord {i}: {fd} vs {}", g[i]);
                }
            }
        }
    }

    #[test]
    fn intercept_score_without_data_follows_prior() {
        // A far-away single observation would dominate, so use a point where
        // only the prior matters: compare against the prior gradient alone.
        let m = model(Family::Linear, toy_data(3, 1, 0, 9));
        let mut p = vec![0.0; m.dim()];
        p[m.layout().intercept(1)] = -0.7;
        let (lp, lg) = {
            let mut g = vec![0.0; m.dim()];
            let v = m.prior_terms(&p, Some(&mut g));
            (v, g)
        };
        assert!(lp.is_finite());
        let want = -(-0.7 - calib().m_hat[1]) / (2.0f64 * calib().s_hat[1]).powi(2);
        assert!((lg[m.layout().intercept(1)] - want).abs() < 1e-12);
    }

    #[test]
    fn outside_support_is_log_zero() {
        let m = model(Family::Linear, toy_data(3, 4, 1, 10));
        let mut p = vec![0.0; m.dim()];
        // tiny scale and strongly negative shape push the upper bound below the data
        p[m.layout().intercept(0)] = 1.0;
        p[m.layout().intercept(1)] = -5.0;
        p[m.layout().intercept(2)] = -4.0;
        assert_eq!(m.log_joint(&p).unwrap(), f64::NEG_INFINITY);
        assert!(m.log_joint_grad(&p).unwrap().iter().all(|&g| g == 0.0));
        let mut g = vec![1.0; m.dim()];
        assert_eq!(m.log_density_grad(&p, &mut g), LOG_ZERO);
    }
}
