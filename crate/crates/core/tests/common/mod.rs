//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use std::f64::consts::PI;

use gevreg::io::{simulate_basin, BasinConfig, EffectShape};
use gevreg::model::{BlockKind, Dataset, Family, Model, ModelSpec, PriorCalibration};

pub fn calibration() -> PriorCalibration {
    PriorCalibration {
        m_hat: [4.6, -1.2, 0.2],
        s_hat: [0.5, 0.2, 0.3],
    }
}

/// A basin with mild covariate effects, so that points near the prior
/// centre keep every maximum inside the support.
pub fn basin(s: usize, t: usize, m: usize, seed: u64) -> Dataset {
    let cfg = BasinConfig {
        psi_amplitude: 0.1,
        tau_amplitude: 0.05,
        n_stations: s,
        n_years: t,
        n_covariates: m,
        n_active: m.min(2),
        effects: EffectShape::Nonlinear,
        seed,
        ..BasinConfig::default()
    };
    simulate_basin(&cfg).unwrap().dataset().unwrap()
}

pub fn model(family: Family, data: Dataset, k: usize) -> Model {
    Model::new(ModelSpec::new(family, calibration()).with_basis_size(k), data).unwrap()
}

/// `h^{-1}` written out from the link definition
/// `phi = a + b log(-log(1 - (xi + 1/2)^c))`.
pub fn naive_shape(phi: f64) -> f64 {
    let (a, b, c) = (0.062376, 0.39563, 0.8);
    let w = ((phi - a) / b).exp();
    let p = 1.0 - (-w).exp();
    p.powf(1.0 / c) - 0.5
}

pub fn naive_gev_logpdf(y: f64, mu: f64, sigma: f64, xi: f64) -> f64 {
    let z = (y - mu) / sigma;
    if xi.abs() < 1e-12 {
        return -sigma.ln() - z - (-z).exp();
    }
    let t = 1.0 + xi * z;
    if t <= 0.0 {
        return f64::NEG_INFINITY;
    }
    -sigma.ln() - (1.0 + 1.0 / xi) * t.ln() - t.powf(-1.0 / xi)
}

fn normal(x: f64, m: f64, s: f64) -> f64 {
    -0.5 * ((x - m) / s).powi(2) - s.ln() - 0.5 * (2.0 * PI).ln()
}

/// Density of `l = log v` when `v` is half-normal.
fn half_normal_log(l: f64, sd: f64) -> f64 {
    let v = l.exp();
    (2.0f64).ln() + normal(v, 0.0, sd) + l
}

/// Density of `l = log v` when `v` is half-Cauchy.
fn half_cauchy_log(l: f64, scale: f64) -> f64 {
    let v = l.exp();
    (2.0 / (PI * scale * (1.0 + (v / scale).powi(2)))).ln() + l
}

/// The log joint of `model` at `params`, evaluated term by term from the
/// model definition. Only the design columns are taken from the model.
pub fn naive_log_joint(model: &Model, params: &[f64]) -> f64 {
    let layout = model.layout();
    let data = model.data();
    let spec = model.spec();
    let (s, m, k) = (data.n_stations(), data.n_covariates(), spec.basis_size);
    let cal = &spec.calibration;
    let pr = &spec.priors;
    let block = |kind, j, c| {
        let b = layout.find(kind, j, c).expect("block");
        &params[b.range()]
    };
    let mut lp = 0.0;
    let mut linked = vec![[0.0; 3]; s];
    for j in 0..3 {
        let b0 = block(BlockKind::Intercept, j, None)[0];
        lp += normal(b0, cal.m_hat[j], pr.intercept_factor * cal.s_hat[j]);
        let log_kappa = block(BlockKind::LogKappa, j, None)[0];
        lp += half_normal_log(log_kappa, pr.kappa_sd);
        let zu = block(BlockKind::RandomEffectStd, j, None);
        for (i, l) in linked.iter_mut().enumerate() {
            l[j] = b0 + log_kappa.exp() * zu[i];
            lp += normal(zu[i], 0.0, 1.0);
        }
        for c in 0..m {
            let x: Vec<f64> = data.x().column(c).iter().copied().collect();
            let coef: Vec<f64> = match spec.family {
                Family::Linear => {
                    let beta = block(BlockKind::Beta, j, None)[c];
                    lp += normal(beta, 0.0, pr.coef_sd);
                    vec![beta]
                }
                Family::Splines => {
                    let beta = block(BlockKind::Beta, j, None)[c];
                    lp += normal(beta, 0.0, pr.coef_sd);
                    let lo = block(BlockKind::LogOmega, j, None)[c];
                    lp += half_normal_log(lo, pr.omega_sd);
                    let z = block(BlockKind::GammaStd, j, Some(c));
                    assert_eq!(z.len(), k - 2);
                    let mut v = vec![beta];
                    for &zi in z {
                        lp += normal(zi, 0.0, 1.0);
                        v.push(lo.exp() * zi);
                    }
                    v
                }
                Family::SplinesHs => {
                    let eta = block(BlockKind::LogEta, j, None)[0];
                    if c == 0 {
                        lp += half_cauchy_log(eta, cal.s_hat[j]);
                    }
                    let lambda = block(BlockKind::LogLambda, j, None)[c];
                    lp += half_cauchy_log(lambda, 1.0);
                    let a = block(BlockKind::AlphaStd, j, Some(c));
                    let d = block(BlockKind::LogDelta, j, Some(c));
                    assert_eq!(a.len(), k - 1);
                    let mut v = Vec::new();
                    for (&ai, &di) in a.iter().zip(d) {
                        lp += normal(ai, 0.0, 1.0) + half_cauchy_log(di, 1.0);
                        // variance eta^2 lambda^2 delta
                        v.push((eta.exp().powi(2) * lambda.exp().powi(2) * di.exp()).sqrt() * ai);
                    }
                    v
                }
            };
            let cols: Vec<Vec<f64>> = match spec.family {
                Family::Linear => vec![x],
                _ => {
                    let z = &model.smooths()[c].design.z;
                    (0..z.ncols()).map(|q| z.column(q).iter().copied().collect()).collect()
                }
            };
            for (col, a) in cols.iter().zip(&coef) {
                for (l, v) in linked.iter_mut().zip(col) {
                    l[j] += a * v;
                }
            }
        }
    }
    for (i, l) in linked.iter().enumerate() {
        let mu = l[0].exp();
        let sigma = (l[0] + l[1]).exp();
        let xi = naive_shape(l[2]);
        for &y in data.station_maxima(i) {
            lp += naive_gev_logpdf(y, mu, sigma, xi);
        }
    }
    lp
}

pub fn central_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            p[i] = x[i] + h;
            let up = f(&p);
            p[i] = x[i] - h;
            let down = f(&p);
            p[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Composite Simpson rule with `n` (even) intervals.
pub fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

/// Two-sided Kolmogorov-Smirnov statistic against `cdf`.
pub fn ks_statistic(values: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    v.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).max((i as f64 + 1.0) / n - f)
        })
        .fold(0.0, f64::max)
}

/// A point whose predictor keeps the simulated maxima inside the support.
pub fn random_point(model: &Model, rng: &mut impl rand::Rng) -> Vec<f64> {
    let layout = model.layout();
    let mut p: Vec<f64> = (0..layout.dim()).map(|_| rng.random_range(-0.5..0.5)).collect();
    for b in layout.blocks() {
        match b.kind {
            BlockKind::Intercept => p[b.start] = model.spec().calibration.m_hat[b.theta] + rng.random_range(-0.05..0.05),
            BlockKind::LogOmega
            | BlockKind::LogDelta
            | BlockKind::LogLambda
            | BlockKind::LogEta
            | BlockKind::LogKappa => {
                for v in &mut p[b.range()] {
                    *v = -1.5 + rng.random_range(-0.5..0.5);
                }
            }
            BlockKind::Beta => {
                for v in &mut p[b.range()] {
                    *v *= 0.2;
                }
            }
            _ => {}
        }
    }
    p
}
