//! Multinomial no-U-turn sampler with a diagonal metric, dual-averaging step
//! size adaptation and windowed metric adaptation.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A differentiable log density on unconstrained coordinates.
pub trait LogDensity: Sync {
    fn dim(&self) -> usize;
    fn log_density(&self, x: &[f64]) -> Result<f64>;
    /// Writes the gradient into `grad` and returns the value.
    fn log_density_grad(&self, x: &[f64], grad: &mut [f64]) -> Result<f64>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NutsConfig {
    pub warmup: usize,
    pub samples: usize,
    pub target_accept: f64,
    pub max_tree_depth: usize,
    pub chains: usize,
    pub seed: u64,
    pub init_jitter: f64,
}

impl Default for NutsConfig {
    fn default() -> Self {
        NutsConfig {
            warmup: 1000,
            samples: 1000,
            target_accept: 0.8,
            max_tree_depth: 10,
            chains: 4,
            seed: 1,
            init_jitter: 2.0,
        }
    }
}

impl NutsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 || self.chains == 0 {
            return Err(Error::InvalidArgument("samples and chains must be positive".into()));
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "target_accept {} outside (0, 1)",
                self.target_accept
            )));
        }
        if !(self.init_jitter >= 0.0) {
            return Err(Error::InvalidArgument("init_jitter must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DrawStats {
    pub divergent: bool,
    pub tree_depth: usize,
    pub n_leapfrog: usize,
    pub step_size: f64,
    pub energy: f64,
    pub accept_stat: f64,
    pub log_density: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainOutput {
    /// Post-warmup draws in unconstrained coordinates.
    pub draws: Vec<Vec<f64>>,
    pub stats: Vec<DrawStats>,
    pub warmup_divergences: usize,
    pub step_size: f64,
    pub inv_metric: Vec<f64>,
    pub warmup_seconds: f64,
    pub sampling_seconds: f64,
}

impl ChainOutput {
    pub fn divergences(&self) -> usize {
        self.stats.iter().filter(|s| s.divergent).count()
    }
}

/// Independent RNG stream for one chain: the master seed selects the key and
/// the chain index selects the stream.
pub fn chain_rng(seed: u64, chain: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chain as u64);
    rng
}

/// Phase-space position with cached log density and gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Point {
    pub q: Vec<f64>,
    pub grad: Vec<f64>,
    pub logp: f64,
}

impl Point {
    pub fn new<T: LogDensity + ?Sized>(target: &T, q: Vec<f64>) -> Point {
        let mut grad = vec![0.0; q.len()];
        let logp = match target.log_density_grad(&q, &mut grad) {
            Ok(v) if v.is_finite() && grad.iter().all(|g| g.is_finite()) => v,
            _ => f64::NEG_INFINITY,
        };
        Point { q, grad, logp }
    }
}

const MAX_RETRIES: usize = 100;
const MAX_DELTA_H: f64 = 1000.0;

/// Draw a starting point uniformly in `[-jitter, jitter]^H` with finite
/// density and gradient.
pub fn initialize<T: LogDensity + ?Sized, R: Rng + ?Sized>(
    target: &T,
    config: &NutsConfig,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let r = config.init_jitter;
    for _ in 0..MAX_RETRIES {
        let q: Vec<f64> = (0..target.dim())
            .map(|_| if r > 0.0 { rng.random_range(-r..r) } else { 0.0 })
            .collect();
        if Point::new(target, q.clone()).logp.is_finite() {
            return Ok(q);
        }
    }
    Err(Error::Initialization(format!(
        "no finite log density after {MAX_RETRIES} attempts"
    )))
}

/// One NUTS kernel with fixed step size and diagonal inverse metric.
pub struct Nuts<'a, T: LogDensity + ?Sized> {
    pub target: &'a T,
    pub step_size: f64,
    pub inv_metric: Vec<f64>,
    pub max_depth: usize,
}

struct Tree {
    // scratch for one trajectory
    divergent: bool,
    n_leapfrog: usize,
    sum_metro_prob: f64,
}

impl<'a, T: LogDensity + ?Sized> Nuts<'a, T> {
    pub fn new(target: &'a T, step_size: f64, max_depth: usize) -> Self {
        Nuts {
            target,
            step_size,
            inv_metric: vec![1.0; target.dim()],
            max_depth,
        }
    }

    fn kinetic(&self, p: &[f64]) -> f64 {
        0.5 * p.iter().zip(&self.inv_metric).map(|(p, m)| p * p * m).sum::<f64>()
    }

    fn hamiltonian(&self, z: &Point, p: &[f64]) -> f64 {
        let h = -z.logp + self.kinetic(p);
        if h.is_nan() {
            f64::INFINITY
        } else {
            h
        }
    }

    fn velocity(&self, p: &[f64]) -> Vec<f64> {
        p.iter().zip(&self.inv_metric).map(|(p, m)| p * m).collect()
    }

    fn sample_momentum<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.inv_metric
            .iter()
            .map(|m| rng.sample::<f64, _>(StandardNormal) / m.sqrt())
            .collect()
    }

    fn leapfrog(&self, z: &mut Point, p: &mut [f64], eps: f64) {
        for (p, g) in p.iter_mut().zip(&z.grad) {
            *p += 0.5 * eps * g;
        }
        for ((q, p), m) in z.q.iter_mut().zip(p.iter()).zip(&self.inv_metric) {
            *q += eps * m * p;
        }
        let logp = match self.target.log_density_grad(&z.q, &mut z.grad) {
            Ok(v) if v.is_finite() && z.grad.iter().all(|g| g.is_finite()) => v,
            _ => f64::NEG_INFINITY,
        };
        z.logp = logp;
        if logp.is_finite() {
            for (p, g) in p.iter_mut().zip(&z.grad) {
                *p += 0.5 * eps * g;
            }
        }
    }

    /// One transition from `z`; returns the new point and its statistics.
    pub fn transition<R: Rng + ?Sized>(&self, z: &Point, rng: &mut R) -> (Point, DrawStats) {
        if self.max_depth == 0 {
            return self.single_step(z, rng);
        }
        let p0 = self.sample_momentum(rng);
        let h0 = self.hamiltonian(z, &p0);
        let mut sample = z.clone();
        let mut sample_p = p0.clone();

        let mut z_fwd = z.clone();
        let mut p_fwd = p0.clone();
        let mut z_bck = z.clone();
        let mut p_bck = p0.clone();

        let mut p_fwd_fwd = p0.clone();
        let mut ps_fwd_fwd = self.velocity(&p0);
        let mut p_fwd_bck = p0.clone();
        let mut ps_fwd_bck = ps_fwd_fwd.clone();
        let mut p_bck_fwd = p0.clone();
        let mut ps_bck_fwd = ps_fwd_fwd.clone();
        let mut p_bck_bck = p0.clone();
        let mut ps_bck_bck = ps_fwd_fwd.clone();

        let mut rho = p0.clone();
        let mut log_sum_weight = 0.0;
        let mut tree = Tree {
            divergent: false,
            n_leapfrog: 0,
            sum_metro_prob: 0.0,
        };
        let mut depth = 0;
        let dim = p0.len();

        while depth < self.max_depth {
            let mut rho_fwd = vec![0.0; dim];
            let mut rho_bck = vec![0.0; dim];
            let mut log_sum_weight_subtree = f64::NEG_INFINITY;
            let valid;
            let mut propose = (z.clone(), p0.clone());
            if rng.random::<f64>() > 0.5 {
                rho_bck.copy_from_slice(&rho);
                p_bck_fwd.copy_from_slice(&p_fwd_bck);
                ps_bck_fwd.copy_from_slice(&ps_fwd_bck);
                valid = self.build_tree(
                    depth,
                    &mut z_fwd,
                    &mut p_fwd,
                    &mut propose,
                    &mut ps_fwd_bck,
                    &mut ps_fwd_fwd,
                    &mut rho_fwd,
                    &mut p_fwd_bck,
                    &mut p_fwd_fwd,
                    h0,
                    1.0,
                    &mut tree,
                    &mut log_sum_weight_subtree,
                    rng,
                );
            } else {
                rho_fwd.copy_from_slice(&rho);
                p_fwd_bck.copy_from_slice(&p_bck_fwd);
                ps_fwd_bck.copy_from_slice(&ps_bck_fwd);
                valid = self.build_tree(
                    depth,
                    &mut z_bck,
                    &mut p_bck,
                    &mut propose,
                    &mut ps_bck_fwd,
                    &mut ps_bck_bck,
                    &mut rho_bck,
                    &mut p_bck_fwd,
                    &mut p_bck_bck,
                    h0,
                    -1.0,
                    &mut tree,
                    &mut log_sum_weight_subtree,
                    rng,
                );
            }
            if !valid {
                break;
            }
            depth += 1;
            if log_sum_weight_subtree > log_sum_weight {
                sample = propose.0;
                sample_p = propose.1;
            } else {
                let accept = (log_sum_weight_subtree - log_sum_weight).exp();
                if rng.random::<f64>() < accept {
                    sample = propose.0;
                    sample_p = propose.1;
                }
            }
            log_sum_weight = log_sum_exp(log_sum_weight, log_sum_weight_subtree);

            for i in 0..dim {
                rho[i] = rho_bck[i] + rho_fwd[i];
            }
            let mut persist = criterion(&ps_bck_bck, &ps_fwd_fwd, &rho);
            let ext: Vec<f64> = (0..dim).map(|i| rho_bck[i] + p_fwd_bck[i]).collect();
            persist &= criterion(&ps_bck_bck, &ps_fwd_bck, &ext);
            let ext: Vec<f64> = (0..dim).map(|i| rho_fwd[i] + p_bck_fwd[i]).collect();
            persist &= criterion(&ps_bck_fwd, &ps_fwd_fwd, &ext);
            if !persist {
                break;
            }
        }
        let accept_stat = if tree.n_leapfrog > 0 {
            tree.sum_metro_prob / tree.n_leapfrog as f64
        } else {
            0.0
        };
        let energy = self.hamiltonian(&sample, &sample_p);
        let stats = DrawStats {
            divergent: tree.divergent,
            tree_depth: depth,
            n_leapfrog: tree.n_leapfrog,
            step_size: self.step_size,
            energy,
            accept_stat,
            log_density: sample.logp,
        };
        (sample, stats)
    }

    #[allow(clippy::too_many_arguments)]
    fn build_tree<R: Rng + ?Sized>(
        &self,
        depth: usize,
        z: &mut Point,
        p: &mut Vec<f64>,
        propose: &mut (Point, Vec<f64>),
        ps_beg: &mut Vec<f64>,
        ps_end: &mut Vec<f64>,
        rho: &mut [f64],
        p_beg: &mut Vec<f64>,
        p_end: &mut Vec<f64>,
        h0: f64,
        sign: f64,
        tree: &mut Tree,
        log_sum_weight: &mut f64,
        rng: &mut R,
    ) -> bool {
        if depth == 0 {
            self.leapfrog(z, p, sign * self.step_size);
            tree.n_leapfrog += 1;
            let h = self.hamiltonian(z, p);
            if h - h0 > MAX_DELTA_H {
                tree.divergent = true;
            }
            *log_sum_weight = log_sum_exp(*log_sum_weight, h0 - h);
            tree.sum_metro_prob += if h0 - h > 0.0 { 1.0 } else { (h0 - h).exp() };
            propose.0.clone_from(z);
            propose.1.clone_from(p);
            *ps_beg = self.velocity(p);
            ps_end.clone_from(ps_beg);
            for (r, v) in rho.iter_mut().zip(p.iter()) {
                *r += v;
            }
            p_beg.clone_from(p);
            p_end.clone_from(p);
            return !tree.divergent;
        }
        let dim = p.len();

        let mut lsw_init = f64::NEG_INFINITY;
        let mut p_init_end = vec![0.0; dim];
        let mut ps_init_end = vec![0.0; dim];
        let mut rho_init = vec![0.0; dim];
        let valid_init = self.build_tree(
            depth - 1,
            z,
            p,
            propose,
            ps_beg,
            &mut ps_init_end,
            &mut rho_init,
            p_beg,
            &mut p_init_end,
            h0,
            sign,
            tree,
            &mut lsw_init,
            rng,
        );
        if !valid_init {
            return false;
        }

        let mut propose_final = (z.clone(), p.clone());
        let mut lsw_final = f64::NEG_INFINITY;
        let mut p_final_beg = vec![0.0; dim];
        let mut ps_final_beg = vec![0.0; dim];
        let mut rho_final = vec![0.0; dim];
        let valid_final = self.build_tree(
            depth - 1,
            z,
            p,
            &mut propose_final,
            &mut ps_final_beg,
            ps_end,
            &mut rho_final,
            &mut p_final_beg,
            p_end,
            h0,
            sign,
            tree,
            &mut lsw_final,
            rng,
        );
        if !valid_final {
            return false;
        }

        let lsw_subtree = log_sum_exp(lsw_init, lsw_final);
        *log_sum_weight = log_sum_exp(*log_sum_weight, lsw_subtree);
        if lsw_final > lsw_subtree {
            *propose = propose_final;
        } else {
            let accept = (lsw_final - lsw_subtree).exp();
            if rng.random::<f64>() < accept {
                *propose = propose_final;
            }
        }

        let rho_subtree: Vec<f64> = (0..dim).map(|i| rho_init[i] + rho_final[i]).collect();
        for (r, s) in rho.iter_mut().zip(&rho_subtree) {
            *r += s;
        }
        let mut persist = criterion(ps_beg, ps_end, &rho_subtree);
        let ext: Vec<f64> = (0..dim).map(|i| rho_init[i] + p_final_beg[i]).collect();
        persist &= criterion(ps_beg, &ps_final_beg, &ext);
        let ext: Vec<f64> = (0..dim).map(|i| rho_final[i] + p_init_end[i]).collect();
        persist &= criterion(&ps_init_end, ps_end, &ext);
        persist
    }

    /// Depth-zero trajectories: a single leapfrog step with a Metropolis
    /// correction.
    fn single_step<R: Rng + ?Sized>(&self, z: &Point, rng: &mut R) -> (Point, DrawStats) {
        let p0 = self.sample_momentum(rng);
        let h0 = self.hamiltonian(z, &p0);
        let mut next = z.clone();
        let mut p = p0.clone();
        self.leapfrog(&mut next, &mut p, self.step_size);
        let h = self.hamiltonian(&next, &p);
        let accept_stat = if h0 - h > 0.0 { 1.0 } else { (h0 - h).exp() };
        let divergent = h - h0 > MAX_DELTA_H;
        let (out, out_p) = if rng.random::<f64>() < accept_stat {
            (next, p)
        } else {
            (z.clone(), p0)
        };
        let stats = DrawStats {
            divergent,
            tree_depth: 0,
            n_leapfrog: 1,
            step_size: self.step_size,
            energy: self.hamiltonian(&out, &out_p),
            accept_stat,
            log_density: out.logp,
        };
        (out, stats)
    }

    /// Heuristic search for a step size whose single-step acceptance is
    /// near 0.8.
    fn init_step_size<R: Rng + ?Sized>(&mut self, z: &Point, rng: &mut R) {
        let target = 0.8f64.ln();
        let mut direction = 0.0;
        loop {
            let p0 = self.sample_momentum(rng);
            let h0 = self.hamiltonian(z, &p0);
            let mut zz = z.clone();
            let mut p = p0;
            self.leapfrog(&mut zz, &mut p, self.step_size);
            let h = self.hamiltonian(&zz, &p);
            let delta = h0 - h;
            if direction == 0.0 {
                direction = if delta > target { 1.0 } else { -1.0 };
            }
            self.step_size *= if direction > 0.0 { 2.0 } else { 0.5 };
            if self.step_size > 1e7 || self.step_size < 1e-12 {
                self.step_size = self.step_size.clamp(1e-12, 1e7);
                break;
            }
            if (direction > 0.0 && !(delta > target)) || (direction < 0.0 && !(delta < target)) {
                break;
            }
        }
    }
}

fn criterion(ps_minus: &[f64], ps_plus: &[f64], rho: &[f64]) -> bool {
    let a: f64 = ps_plus.iter().zip(rho).map(|(x, y)| x * y).sum();
    let b: f64 = ps_minus.iter().zip(rho).map(|(x, y)| x * y).sum();
    a > 0.0 && b > 0.0
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

/// Nesterov dual averaging of `log ε` towards a target acceptance statistic.
#[derive(Debug, Clone)]
pub struct DualAveraging {
    mu: f64,
    delta: f64,
    gamma: f64,
    kappa: f64,
    t0: f64,
    counter: f64,
    s_bar: f64,
    x_bar: f64,
}

impl DualAveraging {
    pub fn new(step_size: f64, delta: f64) -> Self {
        DualAveraging {
            mu: (10.0 * step_size).ln(),
            delta,
            gamma: 0.05,
            kappa: 0.75,
            t0: 10.0,
            counter: 0.0,
            s_bar: 0.0,
            x_bar: 0.0,
        }
    }

    pub fn restart(&mut self, step_size: f64) {
        self.mu = (10.0 * step_size).ln();
        self.counter = 0.0;
        self.s_bar = 0.0;
        self.x_bar = 0.0;
    }

    /// Returns the next step size to use.
    pub fn update(&mut self, accept_stat: f64) -> f64 {
        self.counter += 1.0;
        let a = accept_stat.min(1.0);
        let eta = 1.0 / (self.counter + self.t0);
        self.s_bar = (1.0 - eta) * self.s_bar + eta * (self.delta - a);
        let x = self.mu - self.s_bar * self.counter.sqrt() / self.gamma;
        let x_eta = self.counter.powf(-self.kappa);
        self.x_bar = (1.0 - x_eta) * self.x_bar + x_eta * x;
        x.exp()
    }

    pub fn final_step_size(&self) -> f64 {
        self.x_bar.exp()
    }
}

/// Warmup schedule: an initial fast buffer, doubling slow windows that
/// estimate the metric, and a terminal fast buffer.
#[derive(Debug, Clone)]
pub struct WindowSchedule {
    warmup: usize,
    init_buffer: usize,
    term_buffer: usize,
    window_size: usize,
    next_window: usize,
    enabled: bool,
}

impl WindowSchedule {
    pub fn new(warmup: usize) -> Self {
        let (mut init_buffer, mut term_buffer, mut base) = (75, 50, 25);
        let enabled = warmup >= 20;
        if init_buffer + base + term_buffer > warmup {
            init_buffer = (0.15 * warmup as f64) as usize;
            term_buffer = (0.1 * warmup as f64) as usize;
            base = warmup.saturating_sub(init_buffer + term_buffer);
        }
        WindowSchedule {
            warmup,
            init_buffer,
            term_buffer,
            window_size: base,
            next_window: (init_buffer + base).saturating_sub(1),
            enabled,
        }
    }

    /// Whether iteration `i` contributes to the metric estimate.
    pub fn in_window(&self, i: usize) -> bool {
        self.enabled && i >= self.init_buffer && i < self.warmup - self.term_buffer && i != self.warmup
    }

    /// Whether a slow window closes after iteration `i`.
    pub fn window_end(&self, i: usize) -> bool {
        self.enabled && i == self.next_window && i != self.warmup
    }

    fn advance(&mut self, i: usize) {
        let last = self.warmup - self.term_buffer - 1;
        if self.next_window == last {
            return;
        }
        self.window_size *= 2;
        self.next_window = i + self.window_size;
        if self.next_window != last && self.next_window + 2 * self.window_size >= self.warmup - self.term_buffer {
            self.next_window = last;
        }
    }
}

/// Welford running mean and variance per coordinate.
#[derive(Debug, Clone)]
struct Welford {
    n: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Welford {
    fn new(dim: usize) -> Self {
        Welford {
            n: 0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    fn add(&mut self, x: &[f64]) {
        self.n += 1;
        for i in 0..x.len() {
            let d = x[i] - self.mean[i];
            self.mean[i] += d / self.n as f64;
            self.m2[i] += d * (x[i] - self.mean[i]);
        }
    }

    /// Variance shrunk towards a small constant.
    fn regularized_variance(&self) -> Vec<f64> {
        let n = self.n as f64;
        self.m2
            .iter()
            .map(|m| {
                let var = if self.n > 1 { m / (n - 1.0) } else { 1.0 };
                (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0))
            })
            .collect()
    }
}

/// Run warmup and sampling for one chain.
pub fn run_chain<T: LogDensity + ?Sized, R: Rng + ?Sized>(
    target: &T,
    config: &NutsConfig,
    rng: &mut R,
) -> Result<ChainOutput> {
    config.validate()?;
    if target.dim() == 0 {
        return Err(Error::InvalidArgument("target has dimension 0".into()));
    }
    let start = Instant::now();
    let q0 = initialize(target, config, rng)?;
    let mut z = Point::new(target, q0);
    let mut nuts = Nuts::new(target, 1.0, config.max_tree_depth);
    nuts.init_step_size(&z, rng);
    let mut da = DualAveraging::new(nuts.step_size, config.target_accept);
    let mut windows = WindowSchedule::new(config.warmup);
    let mut est = Welford::new(target.dim());
    let mut warmup_divergences = 0;

    for i in 0..config.warmup {
        let (next, stats) = nuts.transition(&z, rng);
        z = next;
        warmup_divergences += stats.divergent as usize;
        nuts.step_size = da.update(stats.accept_stat);
        if windows.in_window(i) {
            est.add(&z.q);
        }
        if windows.window_end(i) {
            windows.advance(i);
            nuts.inv_metric = est.regularized_variance();
            est = Welford::new(target.dim());
            nuts.init_step_size(&z, rng);
            da.restart(nuts.step_size);
        }
    }
    if config.warmup > 0 {
        nuts.step_size = da.final_step_size();
    }
    let warmup_seconds = start.elapsed().as_secs_f64();

    let start = Instant::now();
    let mut draws = Vec::with_capacity(config.samples);
    let mut all_stats = Vec::with_capacity(config.samples);
    for _ in 0..config.samples {
        let (next, stats) = nuts.transition(&z, rng);
        z = next;
        draws.push(z.q.clone());
        all_stats.push(stats);
    }
    Ok(ChainOutput {
        draws,
        stats: all_stats,
        warmup_divergences,
        step_size: nuts.step_size,
        inv_metric: nuts.inv_metric,
        warmup_seconds,
        sampling_seconds: start.elapsed().as_secs_f64(),
    })
}

/// Run `config.chains` chains in parallel, one thread and RNG stream each.
pub fn run_chains<T: LogDensity + ?Sized>(target: &T, config: &NutsConfig) -> Result<Vec<ChainOutput>> {
    config.validate()?;
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..config.chains)
            .map(|c| {
                s.spawn(move || {
                    let mut rng = chain_rng(config.seed, c);
                    run_chain(target, config, &mut rng)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("chain thread panicked"))
            .collect()
    })
}
