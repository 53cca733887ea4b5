//! Generalized Extreme Value primitives and the multivariate link.
//!
//! The link maps native station parameters `(mu, sigma, xi)` onto the
//! regression scale `(psi, tau, phi) = (log mu, log(sigma / mu), h(xi))`,
//! where `h` confines the shape to `(-0.5, 0.5)`.
//!
//! Return levels use the exact analytic inverse of the GEV cdf,
//! `mu + (sigma / xi) * ((-log(1 - 1/R))^(-xi) - 1)`. The commonly printed
//! form `mu - sigma/xi * [1 + log(1 - 1/R)^(-xi)]` does not invert the cdf
//! and is not used.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Below this magnitude the shape is treated as exactly zero (Gumbel branch).
pub const SHAPE_TOL: f64 = 1e-8;

/// Finite log-density used for out-of-support points inside the sampler.
pub const LOG_ZERO: f64 = -1e300;

const XI_LOWER: f64 = -0.5;
const XI_UPPER: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GevParams {
    pub mu: f64,
    pub sigma: f64,
    pub xi: f64,
}

impl GevParams {
    pub fn new(mu: f64, sigma: f64, xi: f64) -> Result<Self> {
        let p = Self { mu, sigma, xi };
        p.validate()?;
        Ok(p)
    }

    fn validate(&self) -> Result<()> {
        if !(self.mu.is_finite() && self.sigma.is_finite() && self.xi.is_finite()) {
            return Err(Error::NonFinite("GEV parameters"));
        }
        if self.sigma <= 0.0 {
            return Err(Error::invalid(format!("GEV scale must be positive, got {}", self.sigma)));
        }
        Ok(())
    }

    /// Closed support `(lower, upper)`; infinite ends where unbounded.
    pub fn support(&self) -> (f64, f64) {
        if self.xi.abs() < SHAPE_TOL {
            (f64::NEG_INFINITY, f64::INFINITY)
        } else if self.xi < 0.0 {
            (f64::NEG_INFINITY, self.mu - self.sigma / self.xi)
        } else {
            (self.mu - self.sigma / self.xi, f64::INFINITY)
        }
    }

    /// Inverse cdf at probability `prob` in (0, 1).
    pub fn quantile(&self, prob: f64) -> f64 {
        quantile_from_neg_log(-prob.ln(), self)
    }
}

/// `mu + sigma/xi * (w^(-xi) - 1)` with `w = -log F`.
fn quantile_from_neg_log(w: f64, p: &GevParams) -> f64 {
    if p.xi.abs() < SHAPE_TOL {
        p.mu - p.sigma * w.ln()
    } else {
        p.mu + p.sigma * (-p.xi * w.ln()).exp_m1() / p.xi
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkedParams {
    pub psi: f64,
    pub tau: f64,
    pub phi: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShapeLinkConstants {
    pub a_phi: f64,
    pub b_phi: f64,
    pub c_phi: f64,
}

impl Default for ShapeLinkConstants {
    fn default() -> Self {
        Self {
            a_phi: 0.062376,
            b_phi: 0.39563,
            c_phi: 0.8,
        }
    }
}

/// Return period in blocks, `R > 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReturnPeriod(f64);

impl ReturnPeriod {
    pub fn new(blocks: f64) -> Result<Self> {
        if !blocks.is_finite() || blocks <= 1.0 {
            return Err(Error::invalid(format!("return period must exceed 1 block, got {blocks}")));
        }
        Ok(Self(blocks))
    }

    pub fn blocks(&self) -> f64 {
        self.0
    }

    /// Per-block exceedance probability `1 / R`.
    pub fn exceedance(&self) -> f64 {
        1.0 / self.0
    }
}

fn check_finite(y: f64) -> Result<()> {
    if y.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite("observation"))
    }
}

pub fn gev_cdf(y: f64, params: &GevParams) -> Result<f64> {
    check_finite(y)?;
    params.validate()?;
    let z = (y - params.mu) / params.sigma;
    if params.xi.abs() < SHAPE_TOL {
        return Ok((-(-z).exp()).exp());
    }
    let t = 1.0 + params.xi * z;
    if t <= 0.0 {
        return Ok(if params.xi < 0.0 { 1.0 } else { 0.0 });
    }
    let a = (-(params.xi * z).ln_1p() / params.xi).exp();
    Ok((-a).exp())
}

/// GEV log-density; `-inf` outside the support.
pub fn gev_logpdf(y: f64, params: &GevParams) -> Result<f64> {
    check_finite(y)?;
    params.validate()?;
    Ok(logpdf_raw(y, params.mu, params.sigma, params.xi).unwrap_or(f64::NEG_INFINITY))
}

/// Log-density without validation; `None` outside the support.
pub(crate) fn logpdf_raw(y: f64, mu: f64, sigma: f64, xi: f64) -> Option<f64> {
    let z = (y - mu) / sigma;
    if xi.abs() < SHAPE_TOL {
        return Some(-sigma.ln() - z - (-z).exp());
    }
    let q = xi * z;
    if q <= -1.0 {
        return None;
    }
    let log_t = q.ln_1p();
    Some(-sigma.ln() - (1.0 + 1.0 / xi) * log_t - (-log_t / xi).exp())
}

/// `((1 + q) log(1 + q) - q) / q^2`, stable as `q -> 0`.
fn tlogt_ratio(q: f64) -> f64 {
    if q.abs() < 0.01 {
        // sum_{n >= 2} (-1)^n q^(n-2) / (n (n - 1)), truncated where q^9 < 1e-18
        let mut acc = 0.0;
        let mut pow = 1.0;
        for n in 2..11u32 {
            let sign = if n % 2 == 0 { 1.0 } else { -1.0 };
            acc += sign * pow / f64::from(n * (n - 1));
            pow *= q;
        }
        acc
    } else {
        ((1.0 + q) * q.ln_1p() - q) / (q * q)
    }
}

/// Summed log-density of `ys` under one parameter set and its partials with
/// respect to `(mu, sigma, xi)`; `None` if any value is outside the support.
pub(crate) fn sum_logpdf_grad(ys: &[f64], mu: f64, sigma: f64, xi: f64) -> Option<(f64, [f64; 3])> {
    if xi.abs() < SHAPE_TOL {
        let mut acc = (0.0, [0.0; 3]);
        for &y in ys {
            let (v, d) = logpdf_grad_raw(y, mu, sigma, xi)?;
            acc.0 += v;
            (0..3).for_each(|i| acc.1[i] += d[i]);
        }
        return Some(acc);
    }
    let inv_sigma = 1.0 / sigma;
    let inv_xi = 1.0 / xi;
    let (mut value, mut s_mu, mut s_sigma, mut s_xi) = (0.0, 0.0, 0.0, 0.0);
    for &y in ys {
        let z = (y - mu) * inv_sigma;
        let q = xi * z;
        if q <= -1.0 {
            return None;
        }
        let inv_t = 1.0 / (1.0 + q);
        let log_t = q.ln_1p();
        let a = (-log_t * inv_xi).exp();
        value -= (1.0 + inv_xi) * log_t + a;
        let w = (xi + 1.0 - a) * inv_t;
        s_mu += w;
        s_sigma += z * w;
        s_xi += ((1.0 - a) * z * z * tlogt_ratio(q) - z) * inv_t;
    }
    let n = ys.len() as f64;
    let d_mu = s_mu * inv_sigma;
    let d_sigma = (s_sigma - n) * inv_sigma;
    Some((value - n * sigma.ln(), [d_mu, d_sigma, s_xi]))
}

/// Log-density and its partial derivatives with respect to `(mu, sigma, xi)`.
pub(crate) fn logpdf_grad_raw(y: f64, mu: f64, sigma: f64, xi: f64) -> Option<(f64, [f64; 3])> {
    let z = (y - mu) / sigma;
    if xi.abs() < SHAPE_TOL {
        let e = (-z).exp();
        let value = -sigma.ln() - z - e;
        let d_mu = (1.0 - e) / sigma;
        let d_sigma = (-1.0 + z * (1.0 - e)) / sigma;
        let d_xi = (1.0 - e) * z * z / 2.0 - z;
        return Some((value, [d_mu, d_sigma, d_xi]));
    }
    let q = xi * z;
    if q <= -1.0 {
        return None;
    }
    let t = 1.0 + q;
    let log_t = q.ln_1p();
    let a = (-log_t / xi).exp();
    let value = -sigma.ln() - (1.0 + 1.0 / xi) * log_t - a;
    let d_mu = (xi + 1.0 - a) / (sigma * t);
    let d_sigma = (-1.0 + z * (xi + 1.0 - a) / t) / sigma;
    let d_xi = ((1.0 - a) * z * z * tlogt_ratio(q) - z) / t;
    Some((value, [d_mu, d_sigma, d_xi]))
}

pub fn return_level(rp: ReturnPeriod, params: &GevParams) -> f64 {
    let w = -(-rp.exceedance()).ln_1p();
    quantile_from_neg_log(w, params)
}

/// One draw by inversion of a uniform variate.
pub fn gev_draw<R: Rng + ?Sized>(params: &GevParams, rng: &mut R) -> f64 {
    let u: f64 = rng.random();
    // `random()` is in [0, 1); map 0 onto the smallest positive double.
    let u = if u == 0.0 { f64::MIN_POSITIVE } else { u };
    params.quantile(u)
}

pub fn gev_sample(params: &GevParams, n: usize, seed: u64) -> Result<Vec<f64>> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n).map(|_| gev_draw(params, &mut rng)).collect())
}

/// `ln(xi + 0.5)` without losing bits near either end of the interval.
fn ln_shifted(xi: f64) -> f64 {
    if xi > 0.0 {
        (xi - 0.5).ln_1p()
    } else {
        (xi + 0.5).ln()
    }
}

/// `h(xi) = a + b log(-log(1 - (xi + 0.5)^c))`.
pub fn shape_link(xi: f64, c: &ShapeLinkConstants) -> Result<f64> {
    if !xi.is_finite() {
        return Err(Error::NonFinite("shape"));
    }
    if xi <= XI_LOWER || xi >= XI_UPPER {
        return Err(Error::invalid(format!("shape {xi} outside (-0.5, 0.5)")));
    }
    let log_p = c.c_phi * ln_shifted(xi);
    let p = log_p.exp();
    let w = if p < 0.5 { -(-p).ln_1p() } else { -(-log_p.exp_m1()).ln() };
    Ok(c.a_phi + c.b_phi * w.ln())
}

pub fn shape_link_inverse(phi: f64, c: &ShapeLinkConstants) -> f64 {
    shape_link_inverse_with_deriv(phi, c).0
}

/// `h^{-1}(phi)` and `d h^{-1} / d phi`.
pub(crate) fn shape_link_inverse_with_deriv(phi: f64, c: &ShapeLinkConstants) -> (f64, f64) {
    let log_w = (phi - c.a_phi) / c.b_phi;
    let w = log_w.exp();
    let e = (-w).exp();
    let log_p = if e > 0.5 { (-(-w).exp_m1()).ln() } else { (-e).ln_1p() };
    // small w: -expm1(-w) ~ w, so log p ~ log w exactly
    let log_p = if w < 1e-300 { log_w } else { log_p };
    let s = log_p / c.c_phi;
    let xi = if s < -std::f64::consts::LN_2 { s.exp() - 0.5 } else { 0.5 + s.exp_m1() };
    let xi = xi.clamp(next_up(XI_LOWER), next_down(XI_UPPER));
    let deriv = (log_p * (1.0 / c.c_phi - 1.0)).exp() / c.c_phi * e * w / c.b_phi;
    (xi, deriv)
}

fn next_up(x: f64) -> f64 {
    f64::from_bits(if x >= 0.0 { x.to_bits() + 1 } else { x.to_bits() - 1 })
}

fn next_down(x: f64) -> f64 {
    f64::from_bits(if x > 0.0 { x.to_bits() - 1 } else { x.to_bits() + 1 })
}

pub fn link_params(p: &GevParams, c: &ShapeLinkConstants) -> Result<LinkedParams> {
    p.validate()?;
    if p.mu <= 0.0 {
        return Err(Error::invalid(format!("location must be positive to link, got {}", p.mu)));
    }
    Ok(LinkedParams {
        psi: p.mu.ln(),
        tau: (p.sigma / p.mu).ln(),
        phi: shape_link(p.xi, c)?,
    })
}

pub fn inverse_link_params(l: &LinkedParams, c: &ShapeLinkConstants) -> GevParams {
    GevParams {
        mu: l.psi.exp(),
        sigma: (l.psi + l.tau).exp(),
        xi: shape_link_inverse(l.phi, c),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn gp(mu: f64, sigma: f64, xi: f64) -> GevParams {
        GevParams::new(mu, sigma, xi).unwrap()
    }

    #[test]
    fn cdf_at_location_is_inverse_e() {
        for &(mu, sigma, xi) in &[(0.0, 1.0, 0.0), (5.0, 2.0, 0.3), (-1.0, 0.5, -0.4)] {
            let f = gev_cdf(mu, &gp(mu, sigma, xi)).unwrap();
            assert!((f - (-1.0f64).exp()).abs() < 1e-15);
        }
    }

    #[test]
    fn cdf_upper_endpoint_and_gumbel_value() {
        assert_eq!(gev_cdf(2.0, &gp(0.0, 1.0, -0.5)).unwrap(), 1.0);
        assert_eq!(gev_cdf(3.0, &gp(0.0, 1.0, -0.5)).unwrap(), 1.0);
        assert_eq!(gev_cdf(-3.0, &gp(0.0, 1.0, 0.5)).unwrap(), 0.0);
        let g = gev_cdf(2.0, &gp(0.0, 1.0, 0.0)).unwrap();
        assert!((g - 0.873_423).abs() < 1e-6);
        // limit of the xi != 0 branch
        let near = gev_cdf(2.0, &gp(0.0, 1.0, 1e-6)).unwrap();
        assert!((near - g).abs() < 1e-5);
    }

    #[test]
    fn cdf_rejects_non_finite() {
        assert!(gev_cdf(f64::NAN, &gp(0.0, 1.0, 0.0)).is_err());
        assert!(gev_cdf(1.0, &GevParams { mu: 0.0, sigma: -1.0, xi: 0.0 }).is_err());
        assert!(GevParams::new(0.0, f64::INFINITY, 0.0).is_err());
    }

    #[test]
    fn logpdf_examples() {
        assert_eq!(gev_logpdf(0.0, &gp(0.0, 1.0, 0.0)).unwrap(), -1.0);
        assert_eq!(gev_logpdf(3.0, &gp(0.0, 1.0, -0.5)).unwrap(), f64::NEG_INFINITY);
        assert!(logpdf_raw(3.0, 0.0, 1.0, -0.5).is_none());
    }

    #[test]
    fn density_matches_cdf_slope() {
        let p = gp(1.0, 2.0, 0.3);
        for &y in &[-0.5, 0.5, 1.0, 3.0, 8.0] {
            let h = 1e-5;
            let fd = (gev_cdf(y + h, &p).unwrap() - gev_cdf(y - h, &p).unwrap()) / (2.0 * h);
            let dens = gev_logpdf(y, &p).unwrap().exp();
            assert!((fd - dens).abs() < 1e-6, "y={y}: {fd} vs {dens}");
        }
    }

    #[test]
    fn logpdf_partials_match_finite_differences() {
        let cases = [(10.0, 3.0, 0.2, 12.0), (10.0, 3.0, -0.3, 9.0), (0.0, 1.0, 1e-9, 0.7), (0.0, 1.0, 3e-5, -1.2)];
        for &(mu, sigma, xi, y) in &cases {
            let (_, g) = logpdf_grad_raw(y, mu, sigma, xi).unwrap();
            let h = 1e-6;
            let f = |m: f64, s: f64, x: f64| logpdf_raw(y, m, s, x).unwrap();
            let fd = [
                (f(mu + h, sigma, xi) - f(mu - h, sigma, xi)) / (2.0 * h),
                (f(mu, sigma + h, xi) - f(mu, sigma - h, xi)) / (2.0 * h),
                (f(mu, sigma, xi + h) - f(mu, sigma, xi - h)) / (2.0 * h),
            ];
            for k in 0..3 {
                assert!((g[k] - fd[k]).abs() < 1e-6 * (1.0 + g[k].abs()), "case {:?} k={k}: {} vs {}", (mu, sigma, xi), g[k], fd[k]);
            }
        }
    }

    #[test]
    fn batched_sum_matches_single_terms() {
        let ys = [8.0, 10.5, 12.0, 15.0, 30.0, 10.02];
        for xi in [0.2, -0.1, 1e-9, 0.004] {
            let (v, g) = sum_logpdf_grad(&ys, 10.0, 3.0, xi).unwrap();
            let mut want = (0.0, [0.0; 3]);
            for &y in &ys {
                let (a, d) = logpdf_grad_raw(y, 10.0, 3.0, xi).unwrap();
                want.0 += a;
                (0..3).for_each(|k| want.1[k] += d[k]);
            }
            assert!((v - want.0).abs() < 1e-12 * want.0.abs());
            for k in 0..3 {
                assert!((g[k] - want.1[k]).abs() < 1e-10 * (1.0 + want.1[k].abs()), "xi {xi} k {k}");
            }
        }
        assert!(sum_logpdf_grad(&[8.0, 30.0], 10.0, 3.0, -0.5).is_none());
    }

    #[test]
    fn return_level_examples() {
        let q = return_level(ReturnPeriod::new(100.0).unwrap(), &gp(0.0, 1.0, 0.0));
        assert!((q - 4.600_149_9).abs() < 1e-6);
        assert!((gev_cdf(q, &gp(0.0, 1.0, 0.0)).unwrap() - 0.99).abs() < 1e-12);
        let e = std::f64::consts::E;
        let rp = ReturnPeriod::new(e / (e - 1.0)).unwrap();
        for &xi in &[-0.3, 0.0, 0.25] {
            let p = gp(7.0, 2.0, xi);
            assert!((return_level(rp, &p) - 7.0).abs() < 1e-12);
        }
        assert!(ReturnPeriod::new(1.0).is_err());
        assert!(ReturnPeriod::new(0.5).is_err());
    }

    #[test]
    fn return_level_inverts_cdf() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let p = gp(rng.random_range(-50.0..50.0), rng.random_range(0.1..20.0), rng.random_range(-0.49..0.49));
            let rp = ReturnPeriod::new(rng.random_range(1.01..500.0)).unwrap();
            let q = return_level(rp, &p);
            assert!((gev_cdf(q, &p).unwrap() - (1.0 - rp.exceedance())).abs() < 1e-10);
        }
    }

    #[test]
    fn return_level_increasing_in_period() {
        let p = gp(100.0, 30.0, 0.1);
        let mut last = f64::NEG_INFINITY;
        for r in [1.5, 2.0, 10.0, 50.0, 100.0, 1000.0] {
            let q = return_level(ReturnPeriod::new(r).unwrap(), &p);
            assert!(q > last);
            last = q;
        }
    }

    #[test]
    fn sample_is_reproducible_and_bounded() {
        let p = gp(0.0, 1.0, -0.5);
        let a = gev_sample(&p, 1000, 11).unwrap();
        let b = gev_sample(&p, 1000, 11).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|&y| y <= 2.0));
        assert!(gev_sample(&p, 0, 1).unwrap().is_empty());
    }

    #[test]
    fn sample_median_matches_cdf() {
        let p = gp(100.0, 30.0, 0.1);
        let draws = gev_sample(&p, 100_000, 5).unwrap();
        let median = p.quantile(0.5);
        let frac = draws.iter().filter(|&&y| y <= median).count() as f64 / draws.len() as f64;
        assert!((frac - 0.5).abs() < 0.01);
    }

    #[test]
    fn shape_link_examples() {
        let c = ShapeLinkConstants::default();
        let h0 = shape_link(0.0, &c).unwrap();
        assert!(h0.abs() < 1e-4);
        assert!((h0 + 9.739_585_9e-7).abs() < 1e-12);
        let (a, b) = (shape_link(0.499, &c).unwrap(), shape_link(0.49, &c).unwrap());
        assert!(a > b && b > h0);
        assert!((shape_link_inverse(shape_link(0.25, &c).unwrap(), &c) - 0.25).abs() < 1e-8);
        assert!(shape_link(0.5, &c).is_err());
        assert!(shape_link(-0.5, &c).is_err());
        assert!(shape_link(f64::NAN, &c).is_err());
    }

    #[test]
    fn shape_link_inverse_range() {
        let c = ShapeLinkConstants::default();
        assert!(shape_link_inverse(shape_link(0.0, &c).unwrap(), &c).abs() < 1e-8);
        let lo = shape_link_inverse(-10.0, &c);
        assert!(lo > -0.5 && lo < -0.4999);
        for phi in [-1e6, -50.0, 5.0, 50.0, 1e6] {
            let xi = shape_link_inverse(phi, &c);
            assert!(xi > -0.5 && xi < 0.5, "phi={phi} -> {xi}");
        }
    }

    #[test]
    fn shape_link_derivative() {
        let c = ShapeLinkConstants::default();
        for phi in [-3.0, -0.7, 0.0, 0.4, 1.1] {
            let (_, d) = shape_link_inverse_with_deriv(phi, &c);
            let h = 1e-6;
            let fd = (shape_link_inverse(phi + h, &c) - shape_link_inverse(phi - h, &c)) / (2.0 * h);
            assert!((d - fd).abs() < 1e-7, "phi={phi}: {d} vs {fd}");
        }
    }

    #[test]
    fn link_examples() {
        let c = ShapeLinkConstants::default();
        let l = link_params(&gp(1.0, 1.0, 0.0), &c).unwrap();
        assert_eq!(l.psi, 0.0);
        assert_eq!(l.tau, 0.0);
        assert!(l.phi.abs() < 1e-4);
        let p = inverse_link_params(&LinkedParams { psi: 100f64.ln(), tau: 0.3f64.ln(), phi: 0.0 }, &c);
        assert!((p.mu - 100.0).abs() < 1e-10);
        assert!((p.sigma - 30.0).abs() < 1e-10);
        assert!(p.xi.abs() < 1e-4);
        assert!(link_params(&gp(-1.0, 1.0, 0.0), &c).is_err());
        assert!(link_params(&gp(0.0, 1.0, 0.0), &c).is_err());
    }

    #[test]
    fn endpoints_clear_two_scales() {
        // for xi in (-0.5, 0) the upper endpoint exceeds mu + 2 sigma
        for xi in [-0.499, -0.3, -0.1, -1e-3] {
            let p = gp(10.0, 2.0, xi);
            assert!(p.support().1 > p.mu + 2.0 * p.sigma);
        }
        for xi in [1e-3, 0.2, 0.499] {
            let p = gp(10.0, 2.0, xi);
            assert!(p.support().0 < p.mu - 2.0 * p.sigma);
        }
    }
}
