//! No-U-Turn Hamiltonian Monte Carlo with multinomial trajectory sampling,
//! dual-averaging step size and windowed diagonal metric adaptation, plus
//! split R-hat and effective sample size.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// An unnormalized log density with gradient. Values at or below
/// `LOG_ZERO` mark points outside the support.
pub trait LogDensity: Sync {
    fn dim(&self) -> usize;

    /// Writes the gradient into `grad` and returns the log density.
    fn log_density_grad(&self, x: &[f64], grad: &mut [f64]) -> f64;
}

const MAX_DELTA_H: f64 = 1000.0;
const INIT_ATTEMPTS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub n_chains: usize,
    pub n_warmup: usize,
    pub n_draws: usize,
    pub target_accept: f64,
    pub max_tree_depth: usize,
    pub seed: u64,
    pub init_jitter: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            n_chains: 4,
            n_warmup: 1000,
            n_draws: 1000,
            target_accept: 0.8,
            max_tree_depth: 10,
            seed: 1,
            init_jitter: 0.5,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: &str| {
            Err(Error::Config {
                field: format!("sampler.{field}"),
                message: message.to_string(),
            })
        };
        if self.n_chains == 0 {
            return bad("n_chains", "must be at least 1");
        }
        if self.n_draws == 0 {
            return bad("n_draws", "must be at least 1");
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return bad("target_accept", "must lie in (0, 1)");
        }
        if self.max_tree_depth == 0 || self.max_tree_depth > 30 {
            return bad("max_tree_depth", "must lie in 1..=30");
        }
        if !(self.init_jitter >= 0.0 && self.init_jitter.is_finite()) {
            return bad("init_jitter", "must be finite and non-negative");
        }
        Ok(())
    }
}

/// Starting point and per-coordinate jitter multipliers.
#[derive(Debug, Clone)]
pub struct Init {
    pub center: Vec<f64>,
    pub jitter_mask: Vec<f64>,
}

impl Init {
    pub fn at(center: Vec<f64>) -> Self {
        let n = center.len();
        Self {
            center,
            jitter_mask: vec![1.0; n],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainStats {
    pub step_size: f64,
    pub inv_metric: Vec<f64>,
    pub divergences: usize,
    pub warmup_divergences: usize,
    pub mean_accept: f64,
    pub tree_depths: Vec<u32>,
    pub n_leapfrog: u64,
}

/// Retained draws, chain-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorDraws {
    pub n_chains: usize,
    pub n_draws: usize,
    pub dim: usize,
    draws: Vec<f64>,
    log_density: Vec<f64>,
    pub stats: Vec<ChainStats>,
}

impl PosteriorDraws {
    pub fn from_parts(n_chains: usize, n_draws: usize, dim: usize, draws: Vec<f64>, log_density: Vec<f64>) -> Result<Self> {
        if draws.len() != n_chains * n_draws * dim || log_density.len() != n_chains * n_draws {
            return Err(Error::Shape("draw array does not match its dimensions".into()));
        }
        Ok(Self {
            n_chains,
            n_draws,
            dim,
            draws,
            log_density,
            stats: Vec::new(),
        })
    }

    pub fn n_total(&self) -> usize {
        self.n_chains * self.n_draws
    }

    pub fn draw(&self, chain: usize, i: usize) -> &[f64] {
        let start = (chain * self.n_draws + i) * self.dim;
        &self.draws[start..start + self.dim]
    }

    /// Draws in chain order, flattened.
    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.draws.chunks_exact(self.dim.max(1)).take(self.n_total())
    }

    pub fn log_density(&self) -> &[f64] {
        &self.log_density
    }

    /// One coordinate, split by chain.
    pub fn coordinate(&self, k: usize) -> Vec<Vec<f64>> {
        (0..self.n_chains)
            .map(|c| (0..self.n_draws).map(|i| self.draw(c, i)[k]).collect())
            .collect()
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for d in self.iter() {
            m.iter_mut().zip(d).for_each(|(a, b)| *a += b);
        }
        let n = self.n_total() as f64;
        m.iter_mut().for_each(|a| *a /= n);
        m
    }

    pub fn divergences(&self) -> usize {
        self.stats.iter().map(|s| s.divergences).sum()
    }
}

pub fn sample<T: LogDensity>(target: &T, init: &Init, cfg: &SamplerConfig) -> Result<PosteriorDraws> {
    cfg.validate()?;
    let dim = target.dim();
    if init.center.len() != dim || init.jitter_mask.len() != dim {
        return Err(Error::Shape(format!("initial point has length {}, target needs {dim}", init.center.len())));
    }
    let chains: Vec<Result<ChainOutput>> = (0..cfg.n_chains)
        .into_par_iter()
        .map(|c| run_chain(target, init, cfg, cfg.seed.wrapping_add(c as u64)))
        .collect();
    let mut draws = Vec::with_capacity(cfg.n_chains * cfg.n_draws * dim);
    let mut log_density = Vec::with_capacity(cfg.n_chains * cfg.n_draws);
    let mut stats = Vec::with_capacity(cfg.n_chains);
    for chain in chains {
        let out = chain?;
        draws.extend(out.draws);
        log_density.extend(out.log_density);
        stats.push(out.stats);
    }
    let mut pd = PosteriorDraws::from_parts(cfg.n_chains, cfg.n_draws, dim, draws, log_density)?;
    pd.stats = stats;
    Ok(pd)
}

struct ChainOutput {
    draws: Vec<f64>,
    log_density: Vec<f64>,
    stats: ChainStats,
}

#[derive(Debug, Clone)]
struct PhasePoint {
    q: Vec<f64>,
    p: Vec<f64>,
    g: Vec<f64>,
    lp: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn log_sum_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Kinetic plus potential energy for a diagonal inverse metric.
pub fn hamiltonian(lp: f64, p: &[f64], inv_metric: &[f64]) -> f64 {
    let kinetic: f64 = p.iter().zip(inv_metric).map(|(pi, m)| pi * pi * m).sum();
    -lp + 0.5 * kinetic
}

/// Runs `n_steps` leapfrog steps from `(q, p)` and returns the Hamiltonian
/// after each step, starting with the initial value.
pub fn leapfrog_energies<T: LogDensity>(
    target: &T,
    q: &[f64],
    p: &[f64],
    inv_metric: &[f64],
    step: f64,
    n_steps: usize,
) -> Vec<f64> {
    let mut g = vec![0.0; q.len()];
    let lp = target.log_density_grad(q, &mut g);
    let mut z = PhasePoint {
        q: q.to_vec(),
        p: p.to_vec(),
        g,
        lp,
    };
    let mut out = vec![hamiltonian(z.lp, &z.p, inv_metric)];
    for _ in 0..n_steps {
        leapfrog(target, &mut z, inv_metric, step);
        out.push(hamiltonian(z.lp, &z.p, inv_metric));
    }
    out
}

fn leapfrog<T: LogDensity>(target: &T, z: &mut PhasePoint, inv_metric: &[f64], eps: f64) {
    for (p, g) in z.p.iter_mut().zip(&z.g) {
        *p += 0.5 * eps * g;
    }
    for ((q, p), m) in z.q.iter_mut().zip(&z.p).zip(inv_metric) {
        *q += eps * m * p;
    }
    z.lp = target.log_density_grad(&z.q, &mut z.g);
    for (p, g) in z.p.iter_mut().zip(&z.g) {
        *p += 0.5 * eps * g;
    }
}

struct DualAveraging {
    mu: f64,
    s_bar: f64,
    x_bar: f64,
    counter: f64,
    delta: f64,
}

impl DualAveraging {
    const GAMMA: f64 = 0.05;
    const T0: f64 = 10.0;
    const KAPPA: f64 = 0.75;

    fn new(eps: f64, delta: f64) -> Self {
        Self {
            mu: (10.0 * eps).ln(),
            s_bar: 0.0,
            x_bar: 0.0,
            counter: 0.0,
            delta,
        }
    }

    fn update(&mut self, accept: f64) -> f64 {
        let accept = if accept.is_finite() { accept.min(1.0) } else { 0.0 };
        self.counter += 1.0;
        let eta = 1.0 / (self.counter + Self::T0);
        self.s_bar = (1.0 - eta) * self.s_bar + eta * (self.delta - accept);
        let x = self.mu - self.s_bar * self.counter.sqrt() / Self::GAMMA;
        let w = self.counter.powf(-Self::KAPPA);
        self.x_bar = (1.0 - w) * self.x_bar + w * x;
        x.exp()
    }

    fn final_step(&self) -> f64 {
        self.x_bar.exp()
    }
}

#[derive(Default)]
struct Welford {
    n: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Welford {
    fn add(&mut self, x: &[f64]) {
        if self.mean.is_empty() {
            self.mean = vec![0.0; x.len()];
            self.m2 = vec![0.0; x.len()];
        }
        self.n += 1;
        let n = self.n as f64;
        for i in 0..x.len() {
            let d = x[i] - self.mean[i];
            self.mean[i] += d / n;
            self.m2[i] += d * (x[i] - self.mean[i]);
        }
    }

    /// Sample variance shrunk towards a small constant.
    fn regularized_variance(&self) -> Vec<f64> {
        let n = self.n as f64;
        self.m2
            .iter()
            .map(|m2| {
                let var = m2 / (n - 1.0);
                (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0))
            })
            .collect()
    }
}

/// Expanding metric-estimation windows between a fast initial and final buffer.
struct WindowSchedule {
    n_warmup: usize,
    init_buffer: usize,
    term_buffer: usize,
    window_size: usize,
    next_window: usize,
    counter: usize,
    enabled: bool,
}

impl WindowSchedule {
    fn new(n_warmup: usize) -> Self {
        let (mut init, mut term, mut base) = (75, 50, 25);
        let enabled = n_warmup >= 20;
        if enabled && init + term + base > n_warmup {
            init = (0.15 * n_warmup as f64) as usize;
            term = (0.1 * n_warmup as f64) as usize;
            base = n_warmup - init - term;
        }
        Self {
            n_warmup,
            init_buffer: init,
            term_buffer: term,
            window_size: base,
            next_window: init + base - 1,
            counter: 0,
            enabled,
        }
    }

    fn in_window(&self) -> bool {
        self.enabled
            && self.counter >= self.init_buffer
            && self.counter < self.n_warmup - self.term_buffer
            && self.counter != self.n_warmup
    }

    fn at_window_end(&self) -> bool {
        self.enabled && self.counter == self.next_window && self.counter != self.n_warmup
    }

    fn advance_window(&mut self) {
        let last = self.n_warmup - self.term_buffer - 1;
        if self.next_window == last {
            return;
        }
        self.window_size *= 2;
        self.next_window = self.counter + self.window_size;
        if self.next_window != last && self.next_window + 2 * self.window_size >= self.n_warmup - self.term_buffer {
            self.next_window = last;
        }
    }
}

struct Nuts<'a, T: LogDensity> {
    target: &'a T,
    inv_metric: Vec<f64>,
    sqrt_metric: Vec<f64>,
    eps: f64,
    max_depth: usize,
    rng: ChaCha8Rng,
    // per-transition accumulators
    n_leapfrog: u64,
    sum_metro_prob: f64,
    divergent: bool,
}

struct Transition {
    accept: f64,
    depth: u32,
    divergent: bool,
}

impl<'a, T: LogDensity> Nuts<'a, T> {
    fn set_metric(&mut self, inv: Vec<f64>) {
        self.sqrt_metric = inv.iter().map(|v| (1.0 / v).sqrt()).collect();
        self.inv_metric = inv;
    }

    fn sample_momentum(&mut self, z: &mut PhasePoint) {
        for (p, s) in z.p.iter_mut().zip(&self.sqrt_metric) {
            let n: f64 = self.rng.sample(StandardNormal);
            *p = s * n;
        }
    }

    fn sharp(&self, p: &[f64]) -> Vec<f64> {
        p.iter().zip(&self.inv_metric).map(|(a, b)| a * b).collect()
    }

    fn h(&self, z: &PhasePoint) -> f64 {
        let h = hamiltonian(z.lp, &z.p, &self.inv_metric);
        if h.is_nan() {
            f64::INFINITY
        } else {
            h
        }
    }

    fn criterion(p_sharp_minus: &[f64], p_sharp_plus: &[f64], rho: &[f64]) -> bool {
        dot(p_sharp_plus, rho) > 0.0 && dot(p_sharp_minus, rho) > 0.0
    }

    /// Heuristic that doubles or halves the step until the one-step
    /// acceptance crosses 0.8.
    fn init_step_size(&mut self, z: &PhasePoint) -> Result<()> {
        let ln08 = 0.8f64.ln();
        let mut direction = 0.0;
        for _ in 0..200 {
            let mut w = z.clone();
            self.sample_momentum(&mut w);
            let h0 = self.h(&w);
            leapfrog(self.target, &mut w, &self.inv_metric, self.eps);
            let delta_h = h0 - self.h(&w);
            if direction == 0.0 {
                direction = if delta_h > ln08 { 1.0 } else { -1.0 };
            }
            if direction > 0.0 && !(delta_h > ln08) || direction < 0.0 && !(delta_h < ln08) {
                return Ok(());
            }
            self.eps = if direction > 0.0 { 2.0 * self.eps } else { 0.5 * self.eps };
            if self.eps > 1e7 {
                return Err(Error::Sampler("step size diverged to infinity; posterior may be improper".into()));
            }
            if self.eps < 1e-300 {
                return Err(Error::Sampler("step size collapsed to zero".into()));
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn build_tree(
        &mut self,
        depth: usize,
        z: &mut PhasePoint,
        z_propose: &mut PhasePoint,
        p_sharp_beg: &mut Vec<f64>,
        p_sharp_end: &mut Vec<f64>,
        rho: &mut [f64],
        p_beg: &mut Vec<f64>,
        p_end: &mut Vec<f64>,
        h0: f64,
        sign: f64,
        log_sum_weight: &mut f64,
    ) -> bool {
        if depth == 0 {
            leapfrog(self.target, z, &self.inv_metric, sign * self.eps);
            self.n_leapfrog += 1;
            let h = self.h(z);
            if h - h0 > MAX_DELTA_H {
                self.divergent = true;
            }
            *log_sum_weight = log_sum_exp(*log_sum_weight, h0 - h);
            self.sum_metro_prob += if h0 - h > 0.0 { 1.0 } else { (h0 - h).exp() };
            z_propose.clone_from(z);
            *p_sharp_beg = self.sharp(&z.p);
            p_sharp_end.clone_from(p_sharp_beg);
            rho.iter_mut().zip(&z.p).for_each(|(r, p)| *r += p);
            p_beg.clone_from(&z.p);
            p_end.clone_from(p_beg);
            return !self.divergent;
        }
        let n = z.q.len();
        // left subtree
        let mut rho_left = vec![0.0; n];
        let mut p_init_end = vec![0.0; n];
        let mut p_sharp_init_end = vec![0.0; n];
        let mut lsw_left = f64::NEG_INFINITY;
        let valid_init = self.build_tree(
            depth - 1,
            z,
            z_propose,
            p_sharp_beg,
            &mut p_sharp_init_end,
            &mut rho_left,
            p_beg,
            &mut p_init_end,
            h0,
            sign,
            &mut lsw_left,
        );
        if !valid_init {
            return false;
        }
        // right subtree
        let mut z_propose_final = z.clone();
        let mut rho_right = vec![0.0; n];
        let mut p_final_beg = vec![0.0; n];
        let mut p_sharp_final_beg = vec![0.0; n];
        let mut lsw_right = f64::NEG_INFINITY;
        let valid_final = self.build_tree(
            depth - 1,
            z,
            &mut z_propose_final,
            &mut p_sharp_final_beg,
            p_sharp_end,
            &mut rho_right,
            &mut p_final_beg,
            p_end,
            h0,
            sign,
            &mut lsw_right,
        );
        if !valid_final {
            return false;
        }
        let lsw_subtree = log_sum_exp(lsw_left, lsw_right);
        *log_sum_weight = log_sum_exp(*log_sum_weight, lsw_subtree);
        if lsw_right > lsw_subtree {
            *z_propose = z_propose_final;
        } else {
            let accept = (lsw_right - lsw_subtree).exp();
            if self.rng.random::<f64>() < accept {
                *z_propose = z_propose_final;
            }
        }
        let rho_subtree: Vec<f64> = rho_left.iter().zip(&rho_right).map(|(a, b)| a + b).collect();
        rho.iter_mut().zip(&rho_subtree).for_each(|(r, s)| *r += s);
        let mut persist = Self::criterion(p_sharp_beg, p_sharp_end, &rho_subtree);
        let rho_extended: Vec<f64> = rho_left.iter().zip(&p_final_beg).map(|(a, b)| a + b).collect();
        persist &= Self::criterion(p_sharp_beg, &p_sharp_final_beg, &rho_extended);
        let rho_extended: Vec<f64> = rho_right.iter().zip(&p_init_end).map(|(a, b)| a + b).collect();
        persist &= Self::criterion(&p_sharp_init_end, p_sharp_end, &rho_extended);
        persist
    }

    fn transition(&mut self, z: &mut PhasePoint) -> Transition {
        self.sample_momentum(z);
        self.n_leapfrog = 0;
        self.sum_metro_prob = 0.0;
        self.divergent = false;

        let mut z_fwd = z.clone();
        let mut z_bck = z.clone();
        let mut z_sample = z.clone();
        let mut z_propose = z.clone();

        let p_sharp = self.sharp(&z.p);
        let (mut p_fwd_fwd, mut p_fwd_bck, mut p_bck_fwd, mut p_bck_bck) =
            (z.p.clone(), z.p.clone(), z.p.clone(), z.p.clone());
        let (mut ps_fwd_fwd, mut ps_fwd_bck, mut ps_bck_fwd, mut ps_bck_bck) =
            (p_sharp.clone(), p_sharp.clone(), p_sharp.clone(), p_sharp);
        let mut rho = z.p.clone();
        let mut log_sum_weight = 0.0;
        let h0 = self.h(z);
        let n = z.q.len();
        let mut depth = 0;

        while depth < self.max_depth {
            let mut rho_fwd = vec![0.0; n];
            let mut rho_bck = vec![0.0; n];
            let mut lsw_subtree = f64::NEG_INFINITY;
            let valid = if self.rng.random::<f64>() > 0.5 {
                rho_bck.clone_from(&rho);
                p_bck_fwd.clone_from(&p_fwd_bck);
                ps_bck_fwd.clone_from(&ps_fwd_bck);
                let mut zz = z_fwd.clone();
                let v = self.build_tree(
                    depth,
                    &mut zz,
                    &mut z_propose,
                    &mut ps_fwd_bck,
                    &mut ps_fwd_fwd,
                    &mut rho_fwd,
                    &mut p_fwd_bck,
                    &mut p_fwd_fwd,
                    h0,
                    1.0,
                    &mut lsw_subtree,
                );
                z_fwd = zz;
                v
            } else {
                rho_fwd.clone_from(&rho);
                p_fwd_bck.clone_from(&p_bck_fwd);
                ps_fwd_bck.clone_from(&ps_bck_fwd);
                let mut zz = z_bck.clone();
                let v = self.build_tree(
                    depth,
                    &mut zz,
                    &mut z_propose,
                    &mut ps_bck_fwd,
                    &mut ps_bck_bck,
                    &mut rho_bck,
                    &mut p_bck_fwd,
                    &mut p_bck_bck,
                    h0,
                    -1.0,
                    &mut lsw_subtree,
                );
                z_bck = zz;
                v
            };
            if !valid {
                break;
            }
            depth += 1;
            if lsw_subtree > log_sum_weight {
                z_sample.clone_from(&z_propose);
            } else {
                let accept = (lsw_subtree - log_sum_weight).exp();
                if self.rng.random::<f64>() < accept {
                    z_sample.clone_from(&z_propose);
                }
            }
            log_sum_weight = log_sum_exp(log_sum_weight, lsw_subtree);
            rho = rho_bck.iter().zip(&rho_fwd).map(|(a, b)| a + b).collect();
            let mut persist = Self::criterion(&ps_bck_bck, &ps_fwd_fwd, &rho);
            let rho_ext: Vec<f64> = rho_bck.iter().zip(&p_fwd_bck).map(|(a, b)| a + b).collect();
            persist &= Self::criterion(&ps_bck_bck, &ps_fwd_bck, &rho_ext);
            let rho_ext: Vec<f64> = rho_fwd.iter().zip(&p_bck_fwd).map(|(a, b)| a + b).collect();
            persist &= Self::criterion(&ps_bck_fwd, &ps_fwd_fwd, &rho_ext);
            if !persist {
                break;
            }
        }
        *z = z_sample;
        Transition {
            accept: if self.n_leapfrog > 0 { self.sum_metro_prob / self.n_leapfrog as f64 } else { 0.0 },
            depth: depth as u32,
            divergent: self.divergent,
        }
    }
}

fn find_initial_point<T: LogDensity, R: Rng>(target: &T, init: &Init, jitter: f64, rng: &mut R) -> Result<PhasePoint> {
    let dim = init.center.len();
    let mut g = vec![0.0; dim];
    for attempt in 0..INIT_ATTEMPTS {
        let scale = jitter * 0.5f64.powi((attempt / 10) as i32);
        let q: Vec<f64> = init
            .center
            .iter()
            .zip(&init.jitter_mask)
            .map(|(c, m)| {
                let u: f64 = rng.random_range(-1.0..=1.0);
                c + m * scale * u
            })
            .collect();
        let lp = target.log_density_grad(&q, &mut g);
        if lp.is_finite() && lp > crate::gev::LOG_ZERO * 0.5 && g.iter().all(|v| v.is_finite()) {
            return Ok(PhasePoint {
                q,
                p: vec![0.0; dim],
                g: g.clone(),
                lp,
            });
        }
    }
    Err(Error::Sampler(format!("no finite starting point after {INIT_ATTEMPTS} attempts")))
}

fn run_chain<T: LogDensity>(target: &T, init: &Init, cfg: &SamplerConfig, seed: u64) -> Result<ChainOutput> {
    let dim = target.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut z = find_initial_point(target, init, cfg.init_jitter, &mut rng)?;
    let mut nuts = Nuts {
        target,
        inv_metric: vec![1.0; dim],
        sqrt_metric: vec![1.0; dim],
        eps: 1.0,
        max_depth: cfg.max_tree_depth,
        rng,
        n_leapfrog: 0,
        sum_metro_prob: 0.0,
        divergent: false,
    };
    nuts.init_step_size(&z)?;
    let mut da = DualAveraging::new(nuts.eps, cfg.target_accept);
    let mut windows = WindowSchedule::new(cfg.n_warmup);
    let mut estimator = Welford::default();
    let mut total_leapfrog = 0u64;
    let mut warmup_divergences = 0;

    for _ in 0..cfg.n_warmup {
        let t = nuts.transition(&mut z);
        total_leapfrog += nuts.n_leapfrog;
        warmup_divergences += usize::from(t.divergent);
        nuts.eps = da.update(t.accept);
        if windows.in_window() {
            estimator.add(&z.q);
        }
        if windows.at_window_end() {
            windows.advance_window();
            nuts.set_metric(estimator.regularized_variance());
            estimator = Welford::default();
            nuts.init_step_size(&z)?;
            da = DualAveraging::new(nuts.eps, cfg.target_accept);
        }
        windows.counter += 1;
    }
    if cfg.n_warmup > 0 {
        nuts.eps = da.final_step();
    }

    let mut draws = Vec::with_capacity(cfg.n_draws * dim);
    let mut log_density = Vec::with_capacity(cfg.n_draws);
    let mut tree_depths = Vec::with_capacity(cfg.n_draws);
    let mut divergences = 0;
    let mut accept_sum = 0.0;
    for _ in 0..cfg.n_draws {
        let t = nuts.transition(&mut z);
        total_leapfrog += nuts.n_leapfrog;
        divergences += usize::from(t.divergent);
        accept_sum += t.accept;
        tree_depths.push(t.depth);
        draws.extend_from_slice(&z.q);
        log_density.push(z.lp);
    }
    if draws.iter().any(|v| !v.is_finite()) {
        return Err(Error::Sampler("non-finite draw".into()));
    }
    Ok(ChainOutput {
        draws,
        log_density,
        stats: ChainStats {
            step_size: nuts.eps,
            inv_metric: nuts.inv_metric,
            divergences,
            warmup_divergences,
            mean_accept: accept_sum / cfg.n_draws as f64,
            tree_depths,
            n_leapfrog: total_leapfrog,
        },
    })
}

fn check_chains(chains: &[Vec<f64>], min_chains: usize) -> Result<usize> {
    if chains.len() < min_chains {
        return Err(Error::invalid(format!("need at least {min_chains} chains, got {}", chains.len())));
    }
    let n = chains[0].len();
    if chains.iter().any(|c| c.len() != n) {
        return Err(Error::Shape("chains have different lengths".into()));
    }
    if n * chains.len() < 4 || n < 2 {
        return Err(Error::invalid("fewer than 4 draws"));
    }
    if chains.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("draws"));
    }
    Ok(n)
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// Split-chain potential scale reduction factor.
pub fn rhat(chains: &[Vec<f64>]) -> Result<f64> {
    let n = check_chains(chains, 2)?;
    if n < 4 {
        return Err(Error::invalid("split R-hat needs at least 4 draws per chain"));
    }
    let half = n / 2;
    let splits: Vec<&[f64]> = chains
        .iter()
        .flat_map(|c| [&c[..half], &c[n - half..]])
        .collect();
    let stats: Vec<(f64, f64)> = splits.iter().map(|s| mean_var(s)).collect();
    let w = stats.iter().map(|s| s.1).sum::<f64>() / stats.len() as f64;
    let means: Vec<f64> = stats.iter().map(|s| s.0).collect();
    let b_over_n = mean_var(&means).1;
    if !(w > 0.0) {
        return Err(Error::Degenerate("zero within-chain variance".into()));
    }
    let var_plus = (half as f64 - 1.0) / half as f64 * w + b_over_n;
    Ok((var_plus / w).sqrt())
}

/// Effective sample size from the autocorrelations, truncated by Geyer's
/// initial monotone sequence.
pub fn ess(chains: &[Vec<f64>]) -> Result<f64> {
    let n = check_chains(chains, 1)?;
    let m = chains.len();
    let means: Vec<f64> = chains.iter().map(|c| c.iter().sum::<f64>() / n as f64).collect();
    let acov = |lag: usize| -> f64 {
        chains
            .iter()
            .zip(&means)
            .map(|(c, mu)| (0..n - lag).map(|i| (c[i] - mu) * (c[i + lag] - mu)).sum::<f64>() / n as f64)
            .sum::<f64>()
            / m as f64
    };
    let acov0 = acov(0);
    let mean_var = acov0 * n as f64 / (n as f64 - 1.0);
    let mut var_plus = mean_var * (n as f64 - 1.0) / n as f64;
    if m > 1 {
        var_plus += mean_var_of(&means);
    }
    if !(var_plus > 0.0) {
        return Err(Error::Degenerate("zero variance".into()));
    }
    let rho_at = |lag: usize| 1.0 - (mean_var - acov(lag)) / var_plus;
    let mut rho = vec![0.0; n];
    rho[0] = 1.0;
    let mut rho_even = 1.0;
    let mut rho_odd = rho_at(1);
    if n > 1 {
        rho[1] = rho_odd;
    }
    let mut t = 1;
    while t + 2 < n.saturating_sub(3) && rho_even + rho_odd > 0.0 {
        rho_even = rho_at(t + 1);
        rho_odd = rho_at(t + 2);
        if rho_even + rho_odd >= 0.0 {
            rho[t + 1] = rho_even;
            rho[t + 2] = rho_odd;
        }
        t += 2;
    }
    let max_t = t;
    if rho_even > 0.0 && max_t + 1 < n {
        rho[max_t + 1] = rho_even;
    }
    let mut t = 1;
    while t + 2 <= max_t {
        let prev = rho[t - 1] + rho[t];
        if rho[t + 1] + rho[t + 2] > prev {
            rho[t + 1] = prev / 2.0;
            rho[t + 2] = prev / 2.0;
        }
        t += 2;
    }
    let total = (m * n) as f64;
    let tail = if max_t + 1 < n { rho[max_t + 1] } else { 0.0 };
    let tau = (-1.0 + 2.0 * rho[..max_t].iter().sum::<f64>() + tail).max(1.0 / total.log10());
    Ok(total / tau)
}

fn mean_var_of(x: &[f64]) -> f64 {
    mean_var(x).1
}

/// Monte Carlo standard error of the mean of one coordinate.
pub fn mcse_mean(chains: &[Vec<f64>]) -> Result<f64> {
    let all: Vec<f64> = chains.iter().flatten().copied().collect();
    let sd = mean_var(&all).1.sqrt();
    Ok(sd / ess(chains)?.sqrt())
}
