//! No-U-Turn sampler with dual-averaging step size and windowed diagonal
//! mass-matrix adaptation (slice-sampling variant of Hoffman & Gelman).

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::BoError;

/// Energy error beyond which a trajectory is declared divergent.
const MAX_ENERGY_ERROR: f64 = 1000.0;

/// Unnormalized log density over unconstrained coordinates.
pub trait LogDensity {
    fn dim(&self) -> usize;
    /// Log density and its gradient; `-inf` marks an invalid point.
    fn logp_grad(&self, z: &[f64]) -> (f64, Vec<f64>);
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NutsConfig {
    pub warmup: usize,
    pub samples: usize,
    pub thin: usize,
    pub max_depth: usize,
    pub target_accept: f64,
}

impl Default for NutsConfig {
    fn default() -> Self {
        Self {
            warmup: 1024,
            samples: 1024,
            thin: 16,
            max_depth: 10,
            target_accept: 0.8,
        }
    }
}

impl NutsConfig {
    pub fn validate(&self) -> Result<(), BoError> {
        if self.samples == 0 || self.thin == 0 || self.thin > self.samples {
            return Err(BoError::InvalidConfig(format!(
                "need samples ≥ thin ≥ 1, got samples {} thin {}",
                self.samples, self.thin
            )));
        }
        if self.max_depth == 0 || !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(BoError::InvalidConfig("max_depth ≥ 1 and target_accept in (0, 1) required".into()));
        }
        Ok(())
    }

    /// Draws kept after thinning.
    pub fn retained(&self) -> usize {
        self.samples / self.thin
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NutsOutput {
    pub draws: Vec<Vec<f64>>,
    /// Divergent transitions after warmup.
    pub divergences: usize,
    pub step_size: f64,
    pub inv_mass: Vec<f64>,
    pub mean_tree_depth: f64,
}

struct Point {
    z: Vec<f64>,
    logp: f64,
    grad: Vec<f64>,
}

struct Tree {
    minus: (Point, Vec<f64>),
    plus: (Point, Vec<f64>),
    proposal: Point,
    n_valid: f64,
    keep_going: bool,
    accept_sum: f64,
    n_steps: usize,
    divergent: bool,
}

struct Sampler<'a, L: LogDensity> {
    target: &'a L,
    inv_mass: Vec<f64>,
}

impl<L: LogDensity> Sampler<'_, L> {
    fn point(&self, z: Vec<f64>) -> Point {
        let (logp, grad) = self.target.logp_grad(&z);
        Point { z, logp, grad }
    }

    fn kinetic(&self, r: &[f64]) -> f64 {
        0.5 * r.iter().zip(&self.inv_mass).map(|(p, m)| p * p * m).sum::<f64>()
    }

    fn leapfrog(&self, x: &Point, r: &[f64], eps: f64) -> (Point, Vec<f64>) {
        let mut r: Vec<f64> = r.iter().zip(&x.grad).map(|(p, g)| p + 0.5 * eps * g).collect();
        let z: Vec<f64> = x
            .z
            .iter()
            .zip(&r)
            .zip(&self.inv_mass)
            .map(|((z, p), m)| z + eps * m * p)
            .collect();
        let next = self.point(z);
        if next.logp.is_finite() {
            for (p, g) in r.iter_mut().zip(&next.grad) {
                *p += 0.5 * eps * g;
            }
        }
        (next, r)
    }

    fn no_u_turn(&self, minus: &(Point, Vec<f64>), plus: &(Point, Vec<f64>)) -> bool {
        let mut a = 0.0;
        let mut b = 0.0;
        for i in 0..minus.0.z.len() {
            let dz = plus.0.z[i] - minus.0.z[i];
            a += dz * self.inv_mass[i] * minus.1[i];
            b += dz * self.inv_mass[i] * plus.1[i];
        }
        a >= 0.0 && b >= 0.0
    }

    #[allow(clippy::too_many_arguments)]
    fn build<R: Rng>(
        &self,
        x: &Point,
        r: &[f64],
        log_u: f64,
        dir: f64,
        depth: usize,
        eps: f64,
        h0: f64,
        rng: &mut R,
    ) -> Tree {
        if depth == 0 {
            let (next, r_next) = self.leapfrog(x, r, dir * eps);
            let h = if next.logp.is_finite() {
                next.logp - self.kinetic(&r_next)
            } else {
                f64::NEG_INFINITY
            };
            let n_valid = if log_u <= h { 1.0 } else { 0.0 };
            let divergent = !(log_u < h + MAX_ENERGY_ERROR);
            let accept = if h.is_finite() { (h - h0).exp().min(1.0) } else { 0.0 };
            let proposal = Point {
                z: next.z.clone(),
                logp: next.logp,
                grad: next.grad.clone(),
            };
            let edge = |p: &Point| Point {
                z: p.z.clone(),
                logp: p.logp,
                grad: p.grad.clone(),
            };
            return Tree {
                minus: (edge(&next), r_next.clone()),
                plus: (next, r_next),
                proposal,
                n_valid,
                keep_going: !divergent,
                accept_sum: accept,
                n_steps: 1,
                divergent,
            };
        }
        let mut tree = self.build(x, r, log_u, dir, depth - 1, eps, h0, rng);
        if !tree.keep_going {
            return tree;
        }
        let (start, r_start) = if dir < 0.0 { &tree.minus } else { &tree.plus };
        let other = self.build(start, r_start, log_u, dir, depth - 1, eps, h0, rng);
        let total = tree.n_valid + other.n_valid;
        if total > 0.0 && rng.random::<f64>() < other.n_valid / total {
            tree.proposal = other.proposal;
        }
        if dir < 0.0 {
            tree.minus = other.minus;
        } else {
            tree.plus = other.plus;
        }
        tree.n_valid = total;
        tree.accept_sum += other.accept_sum;
        tree.n_steps += other.n_steps;
        tree.divergent |= other.divergent;
        tree.keep_going = other.keep_going && self.no_u_turn(&tree.minus, &tree.plus);
        tree
    }

    /// One NUTS transition; returns the new point, mean acceptance statistic,
    /// depth reached and whether a divergence occurred.
    fn transition<R: Rng>(&self, x: Point, eps: f64, max_depth: usize, rng: &mut R) -> (Point, f64, usize, bool) {
        let r0: Vec<f64> = self
            .inv_mass
            .iter()
            .map(|m| rng.sample::<f64, _>(StandardNormal) / m.sqrt())
            .collect();
        let h0 = x.logp - self.kinetic(&r0);
        let log_u = h0 + rng.random::<f64>().ln();
        let copy = |p: &Point| Point {
            z: p.z.clone(),
            logp: p.logp,
            grad: p.grad.clone(),
        };
        let mut minus = (copy(&x), r0.clone());
        let mut plus = (copy(&x), r0);
        let mut current = x;
        let mut n_valid = 1.0;
        let mut accept_sum = 0.0;
        let mut n_steps = 0;
        let mut depth = 0;
        let mut divergent = false;
        while depth < max_depth {
            let dir = if rng.random::<bool>() { 1.0 } else { -1.0 };
            let tree = if dir < 0.0 {
                self.build(&minus.0, &minus.1, log_u, dir, depth, eps, h0, rng)
            } else {
                self.build(&plus.0, &plus.1, log_u, dir, depth, eps, h0, rng)
            };
            accept_sum += tree.accept_sum;
            n_steps += tree.n_steps;
            divergent |= tree.divergent;
            depth += 1;
            if tree.keep_going && rng.random::<f64>() < tree.n_valid / n_valid {
                current = tree.proposal;
            }
            if dir < 0.0 {
                minus = tree.minus;
            } else {
                plus = tree.plus;
            }
            n_valid += tree.n_valid;
            if !tree.keep_going || !self.no_u_turn(&minus, &plus) {
                break;
            }
        }
        (current, accept_sum / n_steps.max(1) as f64, depth, divergent)
    }

    fn initial_step_size<R: Rng>(&self, x: &Point, rng: &mut R) -> f64 {
        let mut eps = 0.1;
        let r: Vec<f64> = self
            .inv_mass
            .iter()
            .map(|m| rng.sample::<f64, _>(StandardNormal) / m.sqrt())
            .collect();
        let h0 = x.logp - self.kinetic(&r);
        let log_ratio = |eps: f64| {
            let (next, rn) = self.leapfrog(x, &r, eps);
            let h = next.logp - self.kinetic(&rn);
            if h.is_finite() {
                h - h0
            } else {
                f64::NEG_INFINITY
            }
        };
        let dir = if log_ratio(eps) > 0.5f64.ln() { 1.0 } else { -1.0 };
        for _ in 0..50 {
            let lr = log_ratio(eps);
            if !(dir * lr > -dir * 2f64.ln()) {
                break;
            }
            eps *= 2f64.powf(dir);
        }
        eps.clamp(1e-6, 10.0)
    }
}

struct DualAveraging {
    mu: f64,
    h_bar: f64,
    log_eps_bar: f64,
    m: f64,
    target: f64,
}

impl DualAveraging {
    fn new(eps: f64, target: f64) -> Self {
        Self {
            mu: (10.0 * eps).ln(),
            h_bar: 0.0,
            log_eps_bar: 0.0,
            m: 0.0,
            target,
        }
    }

    fn update(&mut self, accept: f64) -> f64 {
        const GAMMA: f64 = 0.05;
        const T0: f64 = 10.0;
        const KAPPA: f64 = 0.75;
        self.m += 1.0;
        let w = 1.0 / (self.m + T0);
        self.h_bar = (1.0 - w) * self.h_bar + w * (self.target - accept);
        let log_eps = self.mu - self.m.sqrt() / GAMMA * self.h_bar;
        let eta = self.m.powf(-KAPPA);
        self.log_eps_bar = eta * log_eps + (1.0 - eta) * self.log_eps_bar;
        log_eps.exp()
    }

    fn final_step(&self) -> f64 {
        self.log_eps_bar.exp()
    }
}

/// End points of the slow adaptation windows (iteration indices, exclusive).
fn adaptation_windows(warmup: usize) -> (usize, Vec<usize>) {
    if warmup < 20 {
        return (warmup, Vec::new());
    }
    let (init, term, base) = if warmup < 150 {
        ((warmup * 15) / 100, (warmup * 10) / 100, 0)
    } else {
        (75, 50, 25)
    };
    let slow_end = warmup - term;
    let mut ends = Vec::new();
    if base == 0 {
        ends.push(slow_end);
        return (init, ends);
    }
    let mut start = init;
    let mut size = base;
    while start < slow_end {
        let mut end = start + size;
        if end + 2 * size > slow_end {
            end = slow_end;
        }
        ends.push(end);
        start = end;
        size *= 2;
    }
    (init, ends)
}

/// Runs one chain from `z0`.
pub fn sample<L: LogDensity, R: Rng>(
    target: &L,
    z0: &[f64],
    config: &NutsConfig,
    rng: &mut R,
) -> Result<NutsOutput, BoError> {
    config.validate()?;
    let d = target.dim();
    if z0.len() != d {
        return Err(BoError::Dimension { expected: d, got: z0.len() });
    }
    let mut sampler = Sampler {
        target,
        inv_mass: vec![1.0; d],
    };
    let mut x = sampler.point(z0.to_vec());
    if !x.logp.is_finite() {
        return Err(BoError::Sampling("initial point has zero density".into()));
    }

    let (init_buffer, windows) = adaptation_windows(config.warmup);
    let mut eps = sampler.initial_step_size(&x, rng);
    let mut da = DualAveraging::new(eps, config.target_accept);
    let mut window_idx = 0;
    let mut count = 0.0;
    let mut mean = vec![0.0; d];
    let mut m2 = vec![0.0; d];

    for it in 0..config.warmup {
        let (next, accept, _, _) = sampler.transition(x, eps, config.max_depth, rng);
        x = next;
        eps = da.update(accept);
        if window_idx < windows.len() && it >= init_buffer {
            count += 1.0;
            for i in 0..d {
                let delta = x.z[i] - mean[i];
                mean[i] += delta / count;
                m2[i] += delta * (x.z[i] - mean[i]);
            }
            if it + 1 == windows[window_idx] {
                let n = count;
                sampler.inv_mass = m2
                    .iter()
                    .map(|s| (n / (n + 5.0)) * (s / (n - 1.0).max(1.0)) + 1e-3 * (5.0 / (n + 5.0)))
                    .collect();
                x = sampler.point(x.z);
                eps = sampler.initial_step_size(&x, rng);
                da = DualAveraging::new(eps, config.target_accept);
                window_idx += 1;
                count = 0.0;
                mean.iter_mut().for_each(|v| *v = 0.0);
                m2.iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }
    if config.warmup > 0 {
        eps = da.final_step();
    }

    let mut draws = Vec::with_capacity(config.retained());
    let mut divergences = 0;
    let mut depth_sum = 0;
    for it in 0..config.samples {
        let (next, _, depth, divergent) = sampler.transition(x, eps, config.max_depth, rng);
        x = next;
        depth_sum += depth;
        divergences += divergent as usize;
        if (it + 1) % config.thin == 0 {
            draws.push(x.z.clone());
        }
    }
    Ok(NutsOutput {
        draws,
        divergences,
        step_size: eps,
        inv_mass: sampler.inv_mass,
        mean_tree_depth: depth_sum as f64 / config.samples as f64,
    })
}
