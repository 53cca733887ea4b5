//! Log densities of the prior families, including the log-scale forms with
//! their Jacobian terms.

use std::f64::consts::{LN_2, PI};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

pub fn normal_lpdf(x: f64, mean: f64, sd: f64) -> f64 {
    let z = (x - mean) / sd;
    -HALF_LN_2PI - sd.ln() - 0.5 * z * z
}

pub fn std_normal_lpdf(z: f64) -> f64 {
    -HALF_LN_2PI - 0.5 * z * z
}

pub fn half_normal_lpdf(x: f64, sd: f64) -> f64 {
    if x < 0.0 {
        return f64::NEG_INFINITY;
    }
    LN_2 + normal_lpdf(x, 0.0, sd)
}

pub fn half_cauchy_lpdf(x: f64, scale: f64) -> f64 {
    if x < 0.0 {
        return f64::NEG_INFINITY;
    }
    let r = x / scale;
    (2.0 / PI).ln() - scale.ln() - r.mul_add(r, 1.0).ln()
}

/// Half-normal density of `exp(l)` plus the Jacobian `l`, and its derivative in `l`.
pub fn log_half_normal_on_log(l: f64, sd: f64) -> (f64, f64) {
    let x = l.exp();
    (half_normal_lpdf(x, sd) + l, 1.0 - (x / sd).powi(2))
}

/// Half-Cauchy density of `exp(l)` plus the Jacobian `l`, and its derivative in `l`.
pub fn log_half_cauchy_on_log(l: f64, scale: f64) -> (f64, f64) {
    let x = l.exp();
    let r2 = (x / scale).powi(2);
    (half_cauchy_lpdf(x, scale) + l, 1.0 - 2.0 * r2 / (1.0 + r2))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Composite Simpson rule on `[a, b]` with `n` (even) panels.
    fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
        let h = (b - a) / n as f64;
        let mut acc = f(a) + f(b);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * f(a + i as f64 * h);
        }
        acc * h / 3.0
    }

    #[test]
    fn half_normal_integrates_to_one() {
        let total = simpson(|x| half_normal_lpdf(x, 2.0).exp(), 0.0, 40.0, 20_000);
        assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn half_cauchy_integrates_to_one() {
        // substitute x = scale * tan(t), t in [0, pi/2)
        let scale = 0.7;
        let total = simpson(
            |t: f64| {
                if t >= PI / 2.0 {
                    return 2.0 / PI;
                }
                let x = scale * t.tan();
                half_cauchy_lpdf(x, scale).exp() * scale / t.cos().powi(2)
            },
            0.0,
            PI / 2.0,
            2_000,
        );
        assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn log_scale_forms_integrate_to_one_in_log_space() {
        let hn = simpson(|l| log_half_normal_on_log(l, 2.0).0.exp(), -40.0, 5.0, 40_000);
        assert!((hn - 1.0).abs() < 1e-8);
        let hc = simpson(|l| log_half_cauchy_on_log(l, 1.0).0.exp(), -60.0, 60.0, 60_000);
        assert!((hc - 1.0).abs() < 1e-8);
    }

    #[test]
    fn log_scale_derivatives() {
        for l in [-2.0, -0.3, 0.0, 0.8, 2.5] {
            let h = 1e-6;
            let fd = (log_half_normal_on_log(l + h, 2.0).0 - log_half_normal_on_log(l - h, 2.0).0) / (2.0 * h);
            assert!((fd - log_half_normal_on_log(l, 2.0).1).abs() < 1e-7);
            let fd = (log_half_cauchy_on_log(l + h, 0.4).0 - log_half_cauchy_on_log(l - h, 0.4).0) / (2.0 * h);
            assert!((fd - log_half_cauchy_on_log(l, 0.4).1).abs() < 1e-7);
        }
    }
}
