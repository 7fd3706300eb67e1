//! Dynamic Hamiltonian Monte Carlo: multinomial NUTS with a diagonal metric,
//! dual-averaging step size adaptation and windowed variance estimation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model_spec::{Dataset, ModelConfig, ParameterLayout, ParameterSet};
use crate::posterior::{from_unconstrained, Posterior};

/// A differentiable log density over `R^dim`.
pub trait LogDensity: Sync {
    fn dim(&self) -> usize;

    /// Returns the log density at `x` and writes its gradient into `grad`.
    fn log_density_gradient(&self, x: &[f64], grad: &mut [f64]) -> f64;

    /// Human-readable name of the block containing coordinate `index`.
    fn coordinate_label(&self, index: usize) -> String {
        format!("coordinate {index}")
    }
}

/// Restricts a density to a subset of its coordinates, holding the others at
/// fixed values. The result is the conditional density up to a constant.
pub struct Pinned<'a, T> {
    inner: &'a T,
    free: Vec<usize>,
    base: Vec<f64>,
}

impl<'a, T: LogDensity> Pinned<'a, T> {
    /// `pinned` lists `(coordinate, value)` pairs held fixed.
    pub fn new(inner: &'a T, pinned: &[(usize, f64)]) -> Self {
        let mut base = vec![0.0; inner.dim()];
        let mut is_pinned = vec![false; inner.dim()];
        for &(i, v) in pinned {
            base[i] = v;
            is_pinned[i] = true;
        }
        let free = (0..inner.dim()).filter(|&i| !is_pinned[i]).collect();
        Self { inner, free, base }
    }

    /// Full coordinate vector for a point in the free subspace.
    pub fn expand(&self, free_values: &[f64]) -> Vec<f64> {
        let mut x = self.base.clone();
        for (&i, &v) in self.free.iter().zip(free_values) {
            x[i] = v;
        }
        x
    }

    pub fn free_indices(&self) -> &[usize] {
        &self.free
    }
}

impl<T: LogDensity> LogDensity for Pinned<'_, T> {
    fn dim(&self) -> usize {
        self.free.len()
    }

    fn log_density_gradient(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        let full = self.expand(x);
        let mut full_grad = vec![0.0; full.len()];
        let lp = self.inner.log_density_gradient(&full, &mut full_grad);
        for (g, &i) in grad.iter_mut().zip(&self.free) {
            *g = full_grad[i];
        }
        lp
    }

    fn coordinate_label(&self, index: usize) -> String {
        self.inner.coordinate_label(self.free[index])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSettings {
    pub chains: usize,
    /// Total iterations per chain, warmup included.
    pub iterations: usize,
    pub warmup: usize,
    pub thin: usize,
    pub seed: u64,
    pub max_tree_depth: usize,
    pub target_accept: f64,
    /// Initial values are drawn uniformly from `[-init_radius, init_radius]`
    /// in unconstrained coordinates.
    pub init_radius: f64,
}

impl Default for SamplerSettings {
    fn default() -> Self {
        Self {
            chains: 2,
            iterations: 2000,
            warmup: 1000,
            thin: 1,
            seed: 1,
            max_tree_depth: 10,
            target_accept: 0.8,
            init_radius: 2.0,
        }
    }
}

impl SamplerSettings {
    pub fn validate(&self) -> Result<()> {
        if self.chains == 0 {
            return Err(Error::Config("chains must be at least 1".into()));
        }
        if self.warmup >= self.iterations {
            return Err(Error::Config(format!(
                "warmup ({}) must be smaller than iterations ({})",
                self.warmup, self.iterations
            )));
        }
        if self.thin == 0 {
            return Err(Error::Config("thin must be at least 1".into()));
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(Error::Config("target_accept must lie in (0, 1)".into()));
        }
        if !(self.init_radius >= 0.0) {
            return Err(Error::Config("init_radius must be non-negative".into()));
        }
        Ok(())
    }

    /// Stored draws per chain.
    pub fn draws_per_chain(&self) -> usize {
        (self.iterations - self.warmup) / self.thin
    }
}

/// Diagonal inverse mass matrix (the per-coordinate variance scale).
#[derive(Debug, Clone, PartialEq)]
pub struct DiagMetric {
    pub inv_mass: Vec<f64>,
}

impl DiagMetric {
    pub fn identity(dim: usize) -> Self {
        Self {
            inv_mass: vec![1.0; dim],
        }
    }

    pub fn kinetic_energy(&self, momentum: &[f64]) -> f64 {
        0.5 * momentum
            .iter()
            .zip(&self.inv_mass)
            .map(|(p, m)| p * p * m)
            .sum::<f64>()
    }

    fn velocity(&self, momentum: &[f64]) -> Vec<f64> {
        momentum.iter().zip(&self.inv_mass).map(|(p, m)| p * m).collect()
    }

    fn sample_momentum<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.inv_mass
            .iter()
            .map(|m| {
                let z: f64 = rng.sample(StandardNormal);
                z / m.sqrt()
            })
            .collect()
    }
}

/// Position, momentum and the cached density/gradient at the position.
#[derive(Debug, Clone, PartialEq)]
pub struct PhasePoint {
    pub position: Vec<f64>,
    pub momentum: Vec<f64>,
    pub log_density: f64,
    pub gradient: Vec<f64>,
}

impl PhasePoint {
    pub fn new<T: LogDensity + ?Sized>(target: &T, position: Vec<f64>, momentum: Vec<f64>) -> Self {
        let mut gradient = vec![0.0; position.len()];
        let log_density = target.log_density_gradient(&position, &mut gradient);
        Self {
            position,
            momentum,
            log_density,
            gradient,
        }
    }

    pub fn hamiltonian(&self, metric: &DiagMetric) -> f64 {
        let h = -self.log_density + metric.kinetic_energy(&self.momentum);
        if h.is_nan() {
            f64::INFINITY
        } else {
            h
        }
    }

    fn is_finite(&self) -> bool {
        self.log_density.is_finite() && self.gradient.iter().all(|g| g.is_finite())
    }
}

/// One velocity-Verlet step of signed size `step_size`.
pub fn leapfrog<T: LogDensity + ?Sized>(
    target: &T,
    metric: &DiagMetric,
    point: &PhasePoint,
    step_size: f64,
) -> PhasePoint {
    let half = 0.5 * step_size;
    let mut momentum: Vec<f64> = point
        .momentum
        .iter()
        .zip(&point.gradient)
        .map(|(p, g)| p + half * g)
        .collect();
    let position: Vec<f64> = point
        .position
        .iter()
        .zip(&momentum)
        .zip(&metric.inv_mass)
        .map(|((q, p), m)| q + step_size * m * p)
        .collect();
    let mut gradient = vec![0.0; position.len()];
    let log_density = target.log_density_gradient(&position, &mut gradient);
    for (p, g) in momentum.iter_mut().zip(&gradient) {
        *p += half * g;
    }
    PhasePoint {
        position,
        momentum,
        log_density,
        gradient,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransitionStats {
    pub tree_depth: usize,
    pub n_leapfrog: usize,
    pub divergent: bool,
    /// Mean Metropolis acceptance probability over the trajectory.
    pub accept_stat: f64,
    /// Hamiltonian at the selected point.
    pub energy: f64,
    pub step_size: f64,
    pub log_density: f64,
}

/// Energy error beyond which a trajectory is declared divergent.
const MAX_ENERGY_ERROR: f64 = 1000.0;

struct TreeBuilder<'a, T: ?Sized, R> {
    target: &'a T,
    metric: &'a DiagMetric,
    step_size: f64,
    h0: f64,
    rng: &'a mut R,
    n_leapfrog: usize,
    sum_metro_prob: f64,
    divergent: bool,
}

struct Subtree {
    log_sum_weight: f64,
    proposal: PhasePoint,
    rho: Vec<f64>,
    p_beg: Vec<f64>,
    p_end: Vec<f64>,
    p_sharp_beg: Vec<f64>,
    p_sharp_end: Vec<f64>,
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

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn no_u_turn(p_sharp_minus: &[f64], p_sharp_plus: &[f64], rho: &[f64]) -> bool {
    dot(p_sharp_plus, rho) > 0.0 && dot(p_sharp_minus, rho) > 0.0
}

impl<T: LogDensity + ?Sized, R: Rng> TreeBuilder<'_, T, R> {
    /// Builds a subtree of `2^depth` leapfrog steps from `start` in direction
    /// `sign`. Returns `None` if the subtree is invalid (divergence or U-turn),
    /// otherwise the subtree and its last point.
    fn build(&mut self, start: &PhasePoint, depth: usize, sign: f64) -> (Option<Subtree>, PhasePoint) {
        if depth == 0 {
            let next = leapfrog(self.target, self.metric, start, sign * self.step_size);
            self.n_leapfrog += 1;
            let h = next.hamiltonian(self.metric);
            let delta = self.h0 - h;
            if h - self.h0 > MAX_ENERGY_ERROR || !next.is_finite() {
                self.divergent = true;
            }
            self.sum_metro_prob += if delta > 0.0 { 1.0 } else { delta.exp() };
            if self.divergent {
                return (None, next);
            }
            let p_sharp = self.metric.velocity(&next.momentum);
            let tree = Subtree {
                log_sum_weight: delta,
                proposal: next.clone(),
                rho: next.momentum.clone(),
                p_beg: next.momentum.clone(),
                p_end: next.momentum.clone(),
                p_sharp_beg: p_sharp.clone(),
                p_sharp_end: p_sharp,
            };
            return (Some(tree), next);
        }

        let (init, mid) = self.build(start, depth - 1, sign);
        let Some(init) = init else {
            return (None, mid);
        };
        let (fin, end) = self.build(&mid, depth - 1, sign);
        let Some(fin) = fin else {
            return (None, end);
        };

        let log_sum_weight = log_sum_exp(init.log_sum_weight, fin.log_sum_weight);
        let accept = (fin.log_sum_weight - log_sum_weight).exp();
        let take_final = fin.log_sum_weight > log_sum_weight || self.rng.random::<f64>() < accept;
        let proposal = if take_final { fin.proposal } else { init.proposal };

        let rho = add(&init.rho, &fin.rho);
        let mut persist = no_u_turn(&init.p_sharp_beg, &fin.p_sharp_end, &rho);
        let rho_ext = add(&init.rho, &fin.p_beg);
        persist &= no_u_turn(&init.p_sharp_beg, &fin.p_sharp_beg, &rho_ext);
        let rho_ext = add(&fin.rho, &init.p_end);
        persist &= no_u_turn(&init.p_sharp_end, &fin.p_sharp_end, &rho_ext);
        if !persist {
            return (None, end);
        }
        (
            Some(Subtree {
                log_sum_weight,
                proposal,
                rho,
                p_beg: init.p_beg,
                p_end: fin.p_end,
                p_sharp_beg: init.p_sharp_beg,
                p_sharp_end: fin.p_sharp_end,
            }),
            end,
        )
    }
}

/// One NUTS transition from `current` (whose momentum is ignored).
pub fn nuts_transition<T: LogDensity + ?Sized, R: Rng>(
    target: &T,
    current: &PhasePoint,
    rng: &mut R,
    step_size: f64,
    metric: &DiagMetric,
    max_tree_depth: usize,
) -> (PhasePoint, TransitionStats) {
    let mut start = current.clone();
    start.momentum = metric.sample_momentum(rng);
    let h0 = start.hamiltonian(metric);

    let mut builder = TreeBuilder {
        target,
        metric,
        step_size,
        h0,
        rng,
        n_leapfrog: 0,
        sum_metro_prob: 0.0,
        divergent: false,
    };

    let p_sharp = metric.velocity(&start.momentum);
    let mut fwd = start.clone();
    let mut bck = start.clone();
    let (mut p_fwd_fwd, mut p_bck_bck) = (start.momentum.clone(), start.momentum.clone());
    let (mut p_sharp_fwd_fwd, mut p_sharp_bck_bck) = (p_sharp.clone(), p_sharp);
    let mut rho = start.momentum.clone();
    let mut log_sum_weight = 0.0;
    let mut sample = start;
    let mut depth = 0;

    while depth < max_tree_depth {
        let forward = builder.rng.random::<f64>() > 0.5;
        let (tree, edge) = if forward {
            builder.build(&fwd, depth, 1.0)
        } else {
            builder.build(&bck, depth, -1.0)
        };
        let Some(tree) = tree else {
            break;
        };
        depth += 1;

        if tree.log_sum_weight > log_sum_weight {
            sample = tree.proposal.clone();
        } else {
            let accept = (tree.log_sum_weight - log_sum_weight).exp();
            if builder.rng.random::<f64>() < accept {
                sample = tree.proposal.clone();
            }
        }
        log_sum_weight = log_sum_exp(log_sum_weight, tree.log_sum_weight);

        // Orient the new subtree relative to the existing trajectory.
        let (rho_bck, rho_fwd, p_bck_fwd, p_fwd_bck, p_sharp_bck_fwd, p_sharp_fwd_bck);
        if forward {
            rho_bck = rho.clone();
            rho_fwd = tree.rho;
            p_bck_fwd = p_fwd_fwd.clone();
            p_sharp_bck_fwd = p_sharp_fwd_fwd.clone();
            p_fwd_bck = tree.p_beg;
            p_sharp_fwd_bck = tree.p_sharp_beg;
            p_fwd_fwd = tree.p_end;
            p_sharp_fwd_fwd = tree.p_sharp_end;
            fwd = edge;
        } else {
            rho_fwd = rho.clone();
            rho_bck = tree.rho;
            p_fwd_bck = p_bck_bck.clone();
            p_sharp_fwd_bck = p_sharp_bck_bck.clone();
            p_bck_fwd = tree.p_beg;
            p_sharp_bck_fwd = tree.p_sharp_beg;
            p_bck_bck = tree.p_end;
            p_sharp_bck_bck = tree.p_sharp_end;
            bck = edge;
        }

        rho = add(&rho_bck, &rho_fwd);
        let mut persist = no_u_turn(&p_sharp_bck_bck, &p_sharp_fwd_fwd, &rho);
        let rho_ext = add(&rho_bck, &p_fwd_bck);
        persist &= no_u_turn(&p_sharp_bck_bck, &p_sharp_fwd_bck, &rho_ext);
        let rho_ext = add(&rho_fwd, &p_bck_fwd);
        persist &= no_u_turn(&p_sharp_bck_fwd, &p_sharp_fwd_fwd, &rho_ext);
        if !persist {
            break;
        }
    }

    let accept_stat = if builder.n_leapfrog == 0 {
        0.0
    } else {
        (builder.sum_metro_prob / builder.n_leapfrog as f64).clamp(0.0, 1.0)
    };
    let stats = TransitionStats {
        tree_depth: depth,
        n_leapfrog: builder.n_leapfrog,
        divergent: builder.divergent,
        accept_stat,
        energy: sample.hamiltonian(metric),
        step_size,
        log_density: sample.log_density,
    };
    (sample, stats)
}

/// Dual averaging of the log step size toward a target acceptance rate.
#[derive(Debug, Clone)]
pub struct DualAveraging {
    target: f64,
    mu: f64,
    s_bar: f64,
    x_bar: f64,
    counter: f64,
    gamma: f64,
    t0: f64,
    kappa: f64,
}

impl DualAveraging {
    pub fn new(target: f64, initial_step: f64) -> Self {
        let mut da = Self {
            target,
            mu: 0.0,
            s_bar: 0.0,
            x_bar: 0.0,
            counter: 0.0,
            gamma: 0.05,
            t0: 10.0,
            kappa: 0.75,
        };
        da.restart(initial_step);
        da
    }

    pub fn restart(&mut self, step: f64) {
        self.mu = (10.0 * step).ln();
        self.s_bar = 0.0;
        self.x_bar = 0.0;
        self.counter = 0.0;
    }

    /// Records one acceptance statistic and returns the next step size.
    pub fn update(&mut self, accept_stat: f64) -> f64 {
        self.counter += 1.0;
        let stat = accept_stat.min(1.0);
        let eta = 1.0 / (self.counter + self.t0);
        self.s_bar = (1.0 - eta) * self.s_bar + eta * (self.target - stat);
        let x = self.mu - self.s_bar * self.counter.sqrt() / self.gamma;
        let w = self.counter.powf(-self.kappa);
        self.x_bar = (1.0 - w) * self.x_bar + w * x;
        x.exp()
    }

    pub fn final_step(&self) -> f64 {
        self.x_bar.exp()
    }
}

/// Welford running variance per coordinate.
#[derive(Debug, Clone)]
struct RunningVariance {
    count: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl RunningVariance {
    fn new(dim: usize) -> Self {
        Self {
            count: 0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    fn push(&mut self, x: &[f64]) {
        self.count += 1;
        let n = self.count as f64;
        for ((m, s), &v) in self.mean.iter_mut().zip(&mut self.m2).zip(x) {
            let delta = v - *m;
            *m += delta / n;
            *s += delta * (v - *m);
        }
    }

    /// Sample variances shrunk toward 1e-3, as in Stan's windowed adaptation.
    fn regularized(&self) -> Vec<f64> {
        let n = self.count as f64;
        self.m2
            .iter()
            .map(|s| {
                let var = s / (n - 1.0);
                (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0))
            })
            .collect()
    }
}

/// Heuristic initial step size: double or halve until the one-step
/// acceptance probability crosses 0.8.
pub fn initial_step_size<T: LogDensity + ?Sized, R: Rng>(
    target: &T,
    point: &PhasePoint,
    metric: &DiagMetric,
    start: f64,
    rng: &mut R,
) -> f64 {
    let mut step = start;
    let log_threshold = 0.8_f64.ln();
    let probe = |step: f64, rng: &mut R| {
        let mut p = point.clone();
        p.momentum = metric.sample_momentum(rng);
        let h0 = p.hamiltonian(metric);
        let next = leapfrog(target, metric, &p, step);
        let h = next.hamiltonian(metric);
        h0 - h
    };
    let direction = if probe(step, rng) > log_threshold { 1 } else { -1 };
    for _ in 0..100 {
        let delta = probe(step, rng);
        if direction == 1 && !(delta > log_threshold) {
            break;
        }
        if direction == -1 && !(delta < log_threshold) {
            break;
        }
        step = if direction == 1 { step * 2.0 } else { step * 0.5 };
        if step > 1e7 || step < 1e-12 {
            break;
        }
    }
    step
}

/// Warmup window boundaries: iterations at which the metric is updated.
fn adaptation_windows(warmup: usize) -> (usize, usize, Vec<usize>) {
    let (mut init_buffer, mut term_buffer, mut base) = (75, 50, 25);
    if warmup < 20 {
        return (warmup, 0, Vec::new());
    }
    if init_buffer + base + term_buffer > warmup {
        init_buffer = (0.15 * warmup as f64) as usize;
        term_buffer = (0.1 * warmup as f64) as usize;
        base = warmup - init_buffer - term_buffer;
    }
    let last = warmup - term_buffer;
    let mut ends = Vec::new();
    let mut start = init_buffer;
    let mut size = base;
    while start < last {
        let mut end = start + size;
        // Stretch the final window to the terminal buffer.
        if end + 2 * size > last {
            end = last;
        }
        ends.push(end);
        start = end;
        size *= 2;
    }
    (init_buffer, term_buffer, ends)
}

#[derive(Debug, Clone)]
pub struct WarmupResult {
    pub step_size: f64,
    pub metric: DiagMetric,
    pub point: PhasePoint,
    pub stats: Vec<TransitionStats>,
}

/// Consecutive divergent warmup transitions that abort a chain.
pub const MAX_CONSECUTIVE_DIVERGENCES: usize = 100;

/// Adapts step size and diagonal metric over `settings.warmup` iterations.
pub fn warmup_adapt<T: LogDensity + ?Sized, R: Rng>(
    target: &T,
    settings: &SamplerSettings,
    initial: PhasePoint,
    rng: &mut R,
) -> Result<WarmupResult> {
    let dim = target.dim();
    let mut metric = DiagMetric::identity(dim);
    let mut point = initial;
    let mut step = initial_step_size(target, &point, &metric, 1.0, rng);
    let mut da = DualAveraging::new(settings.target_accept, step);
    let (init_buffer, _, windows) = adaptation_windows(settings.warmup);
    let window_end = windows.last().copied().unwrap_or(init_buffer);
    let mut var = RunningVariance::new(dim);
    let mut stats = Vec::with_capacity(settings.warmup);
    let mut consecutive = 0;

    for it in 0..settings.warmup {
        let (next, st) = nuts_transition(target, &point, rng, step, &metric, settings.max_tree_depth);
        point = next;
        stats.push(st);
        if st.divergent {
            consecutive += 1;
            if consecutive >= MAX_CONSECUTIVE_DIVERGENCES {
                return Err(Error::ChainAborted {
                    chain: 0,
                    reason: format!(
                        "{consecutive} consecutive divergent transitions; largest scaled gradient in block `{}`",
                        worst_block(target, &point, &metric)
                    ),
                });
            }
        } else {
            consecutive = 0;
        }
        step = da.update(st.accept_stat);

        let it1 = it + 1;
        if it >= init_buffer && it < window_end {
            var.push(&point.position);
        }
        if windows.contains(&it1) {
            if var.count >= 3 {
                metric = DiagMetric {
                    inv_mass: var.regularized(),
                };
            }
            var = RunningVariance::new(dim);
            point = PhasePoint::new(target, point.position, point.momentum);
            step = initial_step_size(target, &point, &metric, step, rng);
            da.restart(step);
        }
    }
    if settings.warmup > 0 {
        step = da.final_step();
    }
    Ok(WarmupResult {
        step_size: step,
        metric,
        point,
        stats,
    })
}

fn worst_block<T: LogDensity + ?Sized>(target: &T, point: &PhasePoint, metric: &DiagMetric) -> String {
    let mut worst = 0;
    let mut worst_val = f64::NEG_INFINITY;
    for (i, (g, m)) in point.gradient.iter().zip(&metric.inv_mass).enumerate() {
        let v = if g.is_finite() { g.abs() * m.sqrt() } else { f64::INFINITY };
        if v > worst_val {
            worst_val = v;
            worst = i;
        }
    }
    target.coordinate_label(worst)
}

/// Post-warmup output of one chain in the sampler's own coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainDraws {
    /// `draws x dim`, row-major per draw.
    pub values: Vec<Vec<f64>>,
    pub stats: Vec<TransitionStats>,
    pub step_size: f64,
    pub inv_metric: Vec<f64>,
}

/// Random generator for chain `chain`: the shared seed with its own stream.
pub fn chain_rng(seed: u64, chain: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chain as u64);
    rng
}

fn initial_point<T: LogDensity + ?Sized, R: Rng>(target: &T, radius: f64, rng: &mut R) -> Option<PhasePoint> {
    let dim = target.dim();
    for _ in 0..100 {
        let q: Vec<f64> = (0..dim)
            .map(|_| if radius > 0.0 { rng.random_range(-radius..=radius) } else { 0.0 })
            .collect();
        let point = PhasePoint::new(target, q, vec![0.0; dim]);
        if point.is_finite() {
            return Some(point);
        }
    }
    None
}

/// Runs one chain: dispersed initialization, warmup, then sampling.
pub fn sample_chain<T: LogDensity + ?Sized>(
    target: &T,
    settings: &SamplerSettings,
    chain: usize,
) -> Result<ChainDraws> {
    let mut rng = chain_rng(settings.seed, chain);
    let init = initial_point(target, settings.init_radius, &mut rng).ok_or_else(|| Error::ChainAborted {
        chain,
        reason: "no finite initial point found in 100 attempts".into(),
    })?;
    let warm = warmup_adapt(target, settings, init, &mut rng).map_err(|e| match e {
        Error::ChainAborted { reason, .. } => Error::ChainAborted { chain, reason },
        other => other,
    })?;
    let mut point = warm.point;
    let n_keep = settings.draws_per_chain();
    let mut values = Vec::with_capacity(n_keep);
    let mut stats = Vec::with_capacity(n_keep);
    for j in 0..settings.iterations - settings.warmup {
        let (next, st) = nuts_transition(
            target,
            &point,
            &mut rng,
            warm.step_size,
            &warm.metric,
            settings.max_tree_depth,
        );
        point = next;
        if (j + 1) % settings.thin == 0 {
            values.push(point.position.clone());
            stats.push(st);
        }
    }
    Ok(ChainDraws {
        values,
        stats,
        step_size: warm.step_size,
        inv_metric: warm.metric.inv_mass,
    })
}

/// Runs all chains. Chains execute concurrently when threads are available;
/// results are ordered by chain index and independent of scheduling.
pub fn sample<T: LogDensity + ?Sized>(target: &T, settings: &SamplerSettings) -> Result<Vec<ChainDraws>> {
    settings.validate()?;
    (0..settings.chains)
        .into_par_iter()
        .map(|c| sample_chain(target, settings, c))
        .collect()
}

/// Posterior draws in constrained space, one block of rows per chain.
#[derive(Debug, Clone, PartialEq)]
pub struct DrawsMatrix {
    pub names: Vec<String>,
    pub config: ModelConfig,
    pub layout: ParameterLayout,
    pub chains: Vec<ChainDraws>,
}

impl DrawsMatrix {
    /// Wraps unconstrained sampler output, mapping each draw to constrained space.
    pub fn from_unconstrained(config: &ModelConfig, layout: &ParameterLayout, chains: Vec<ChainDraws>) -> Self {
        let chains = chains
            .into_iter()
            .map(|mut c| {
                for v in &mut c.values {
                    let (params, _) = from_unconstrained(v, layout);
                    *v = params.to_constrained(layout);
                }
                c
            })
            .collect();
        Self {
            names: layout.names(),
            config: config.clone(),
            layout: layout.clone(),
            chains,
        }
    }

    /// Builds draws from constrained parameter sets, one inner vector per
    /// chain. Sampler statistics are left empty.
    pub fn from_parameter_sets(config: &ModelConfig, layout: &ParameterLayout, chains: &[Vec<ParameterSet>]) -> Self {
        let chains = chains
            .iter()
            .map(|sets| ChainDraws {
                values: sets.iter().map(|s| s.to_constrained(layout)).collect(),
                stats: Vec::new(),
                step_size: f64::NAN,
                inv_metric: Vec::new(),
            })
            .collect();
        Self {
            names: layout.names(),
            config: config.clone(),
            layout: layout.clone(),
            chains,
        }
    }

    pub fn n_chains(&self) -> usize {
        self.chains.len()
    }

    pub fn n_draws(&self) -> usize {
        self.chains.iter().map(|c| c.values.len()).sum()
    }

    /// Draws of one parameter grouped by chain.
    pub fn column(&self, index: usize) -> Vec<Vec<f64>> {
        self.chains
            .iter()
            .map(|c| c.values.iter().map(|v| v[index]).collect())
            .collect()
    }

    /// Every draw across chains, in chain order.
    pub fn iter_draws(&self) -> impl Iterator<Item = &[f64]> {
        self.chains.iter().flat_map(|c| c.values.iter().map(|v| v.as_slice()))
    }

    pub fn parameter_sets(&self) -> impl Iterator<Item = ParameterSet> + '_ {
        self.iter_draws()
            .map(|v| ParameterSet::from_constrained(v, &self.layout))
    }

    /// Posterior mean of every constrained coordinate.
    pub fn mean(&self) -> Vec<f64> {
        // Running update, so a constant column returns its value unchanged.
        let mut acc = vec![0.0; self.layout.total_dim];
        let mut count = 0.0;
        for v in self.iter_draws() {
            count += 1.0;
            for (a, x) in acc.iter_mut().zip(v) {
                *a += (x - *a) / count;
            }
        }
        acc
    }

    pub fn divergences(&self) -> usize {
        self.chains
            .iter()
            .flat_map(|c| &c.stats)
            .filter(|s| s.divergent)
            .count()
    }
}

/// Fits `config` to `dataset`.
pub fn run(config: &ModelConfig, dataset: &Dataset, settings: &SamplerSettings) -> Result<DrawsMatrix> {
    let report = crate::model_spec::validate_dataset(dataset);
    if !report.is_valid() {
        return Err(Error::Validation(report.to_string()));
    }
    let posterior = Posterior::new(dataset, config)?;
    let chains = sample(&posterior, settings)?;
    Ok(DrawsMatrix::from_unconstrained(config, posterior.layout(), chains))
}

#[cfg(test)]
mod tests {
    use super::*;

    struct StdNormal(usize);

    impl LogDensity for StdNormal {
        fn dim(&self) -> usize {
            self.0
        }
        fn log_density_gradient(&self, x: &[f64], grad: &mut [f64]) -> f64 {
            for (g, v) in grad.iter_mut().zip(x) {
                *g = -v;
            }
            -0.5 * x.iter().map(|v| v * v).sum::<f64>()
        }
    }

    #[test]
    fn zero_step_is_identity() {
        let t = StdNormal(3);
        let m = DiagMetric::identity(3);
        let p = PhasePoint::new(&t, vec![0.3, -1.0, 2.0], vec![0.5, 0.1, -0.2]);
        let q = leapfrog(&t, &m, &p, 0.0);
        assert_eq!(p, q);
    }

    #[test]
    fn leapfrog_is_reversible() {
        let t = StdNormal(2);
        let m = DiagMetric {
            inv_mass: vec![0.7, 1.9],
        };
        let start = PhasePoint::new(&t, vec![1.2, -0.4], vec![0.3, 0.8]);
        let mut p = start.clone();
        for _ in 0..25 {
            p = leapfrog(&t, &m, &p, 0.1);
        }
        p.momentum.iter_mut().for_each(|v| *v = -*v);
        for _ in 0..25 {
            p = leapfrog(&t, &m, &p, 0.1);
        }
        for (a, b) in p.position.iter().zip(&start.position) {
            assert!((a - b).abs() < 1e-10);
        }
        for (a, b) in p.momentum.iter().zip(&start.momentum) {
            assert!((a + b).abs() < 1e-10);
        }
    }

    #[test]
    fn energy_error_is_second_order() {
        let t = StdNormal(1);
        let m = DiagMetric::identity(1);
        let start = PhasePoint::new(&t, vec![1.0], vec![0.5]);
        let h0 = 0.5 * (1.0 + 0.25);
        // Integrate over a fixed trajectory length so the global error order shows.
        let steps = [0.2, 0.1, 0.05];
        let errs: Vec<f64> = steps
            .iter()
            .map(|&e| {
                let n = (1.0 / e as f64).round() as usize;
                let mut p = start.clone();
                for _ in 0..n {
                    p = leapfrog(&t, &m, &p, e);
                }
                let h = 0.5 * (p.position[0].powi(2) + p.momentum[0].powi(2));
                (h - h0).abs()
            })
            .collect();
        // Least-squares slope of log error against log step size.
        let xs: Vec<f64> = steps.iter().map(|s| s.ln()).collect();
        let ys: Vec<f64> = errs.iter().map(|e| e.ln()).collect();
        let mx = xs.iter().sum::<f64>() / 3.0;
        let my = ys.iter().sum::<f64>() / 3.0;
        let slope = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>()
            / xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>();
        assert!((slope - 2.0).abs() < 0.2, "slope {slope}");
    }

    #[test]
    fn transition_bounds_and_depth_cap() {
        let t = StdNormal(4);
        let m = DiagMetric::identity(4);
        let mut rng = chain_rng(3, 0);
        let mut p = PhasePoint::new(&t, vec![0.1; 4], vec![0.0; 4]);
        for _ in 0..200 {
            let (next, st) = nuts_transition(&t, &p, &mut rng, 0.4, &m, 5);
            assert!((0.0..=1.0).contains(&st.accept_stat));
            assert!(st.tree_depth <= 5);
            p = next;
        }
        let (next, st) = nuts_transition(&t, &p, &mut rng, 0.4, &m, 0);
        assert_eq!(next.position, p.position);
        assert_eq!(st.tree_depth, 0);
        assert_eq!(st.n_leapfrog, 0);
    }

    #[test]
    fn divergence_at_start_keeps_current() {
        struct Cliff;
        impl LogDensity for Cliff {
            fn dim(&self) -> usize {
                1
            }
            fn log_density_gradient(&self, x: &[f64], grad: &mut [f64]) -> f64 {
                if x[0].abs() > 1e-9 {
                    grad[0] = f64::NAN;
                    return f64::NAN;
                }
                grad[0] = 0.0;
                0.0
            }
        }
        let m = DiagMetric::identity(1);
        let p = PhasePoint::new(&Cliff, vec![0.0], vec![0.0]);
        let mut rng = chain_rng(1, 0);
        let (next, st) = nuts_transition(&Cliff, &p, &mut rng, 0.5, &m, 10);
        assert!(st.divergent);
        assert_eq!(next.position, p.position);
    }

    #[test]
    fn window_schedule_matches_reference_shape() {
        let (init, term, ends) = adaptation_windows(1000);
        assert_eq!((init, term), (75, 50));
        assert_eq!(ends, vec![100, 150, 250, 450, 950]);
        let (init, term, ends) = adaptation_windows(100);
        assert_eq!((init, term), (15, 10));
        assert_eq!(ends, vec![90]);
        assert!(adaptation_windows(10).2.is_empty());
    }

    #[test]
    fn warmup_zero_keeps_identity_metric() {
        let t = StdNormal(2);
        let settings = SamplerSettings {
            warmup: 0,
            iterations: 10,
            ..Default::default()
        };
        let mut rng = chain_rng(5, 0);
        let init = PhasePoint::new(&t, vec![0.5, -0.5], vec![0.0; 2]);
        let mut rng2 = chain_rng(5, 0);
        let expected = initial_step_size(&t, &init, &DiagMetric::identity(2), 1.0, &mut rng2);
        let res = warmup_adapt(&t, &settings, init, &mut rng).unwrap();
        assert_eq!(res.metric, DiagMetric::identity(2));
        assert_eq!(res.step_size, expected);
    }

    #[test]
    fn settings_validation() {
        let bad = SamplerSettings {
            warmup: 10,
            iterations: 10,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        assert!(SamplerSettings {
            thin: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert_eq!(
            SamplerSettings {
                iterations: 2000,
                warmup: 1000,
                thin: 4,
                ..Default::default()
            }
            .draws_per_chain(),
            250
        );
    }
}
