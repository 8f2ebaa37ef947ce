//! Expected improvement under the hyperparameter-mixture posterior and its
//! maximization over the unit cube.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::gp::{predict_mixture, GpPosterior, KernelHyperparams, TrialDataset};
use crate::BoError;

/// `E[max(f* − f, 0)]` for `f ~ N(μ, σ²)`; minimization convention.
pub fn expected_improvement(mu: f64, sigma: f64, best: f64) -> f64 {
    let gap = best - mu;
    if !(sigma > 0.0) {
        return gap.max(0.0);
    }
    let n = Normal::standard();
    let z = gap / sigma;
    (gap * n.cdf(z) + sigma * n.pdf(z)).max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AcquisitionConfig {
    pub candidates: usize,
    pub restarts: usize,
    pub initial_step: f64,
    pub min_step: f64,
}

impl Default for AcquisitionConfig {
    fn default() -> Self {
        Self {
            candidates: 1024,
            restarts: 8,
            initial_step: 0.1,
            min_step: 1e-3,
        }
    }
}

/// GP posteriors for each hyperparameter draw, fitted to one dataset.
pub struct Surrogate {
    components: Vec<GpPosterior>,
    /// Incumbent in standardized units.
    best: f64,
    dim: usize,
}

impl Surrogate {
    pub fn fit(data: &TrialDataset, hypers: &[KernelHyperparams]) -> Result<Self, BoError> {
        if hypers.is_empty() {
            return Err(BoError::InvalidHyperparams("no hyperparameter samples".into()));
        }
        let components = hypers
            .iter()
            .map(|h| GpPosterior::fit(data, h))
            .collect::<Result<Vec<_>, _>>()?;
        let best = data.outputs().iter().copied().fold(f64::INFINITY, f64::min);
        Ok(Self {
            components,
            best,
            dim: data.dim(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn incumbent(&self) -> f64 {
        self.best
    }

    /// EI under the mixture: the average of the per-draw EI values.
    pub fn expected_improvement(&self, q: &[f64]) -> f64 {
        self.components
            .iter()
            .map(|c| {
                let (m, v) = c.predict(q);
                expected_improvement(m, v.sqrt(), self.best)
            })
            .sum::<f64>()
            / self.components.len() as f64
    }

    pub fn predict(&self, q: &[f64]) -> (f64, f64) {
        predict_mixture(&self.components, q)
    }
}

/// Additive-recurrence low-discrepancy points with a random shift.
fn kronecker_points<R: Rng>(d: usize, n: usize, rng: &mut R) -> Vec<Vec<f64>> {
    // φ_d is the unique positive root of x^(d+1) = x + 1.
    let mut phi = 2.0f64;
    for _ in 0..64 {
        phi = (1.0 + phi).powf(1.0 / (d as f64 + 1.0));
    }
    let alpha: Vec<f64> = (1..=d).map(|j| phi.powi(-(j as i32)).fract()).collect();
    let shift: Vec<f64> = (0..d).map(|_| rng.random::<f64>()).collect();
    (0..n)
        .map(|i| {
            (0..d)
                .map(|j| (shift[j] + (i as f64 + 1.0) * alpha[j]).fract())
                .collect()
        })
        .collect()
}

/// Coordinate pattern search from `x`, halving the step when no axis move helps.
fn refine(s: &Surrogate, mut x: Vec<f64>, mut fx: f64, config: &AcquisitionConfig) -> (Vec<f64>, f64) {
    let mut step = config.initial_step;
    while step >= config.min_step {
        let mut improved = false;
        for j in 0..x.len() {
            for dir in [1.0, -1.0] {
                let old = x[j];
                let moved = (old + dir * step).clamp(0.0, 1.0);
                if moved == old {
                    continue;
                }
                x[j] = moved;
                let f = s.expected_improvement(&x);
                if f > fx {
                    fx = f;
                    improved = true;
                    break;
                }
                x[j] = old;
            }
        }
        if !improved {
            step *= 0.5;
        }
    }
    (x, fx)
}

/// Maximizes EI over `[0, 1]^d`: scores quasi-random candidates, refines the
/// best few locally, and returns the winner. When EI vanishes everywhere the
/// candidate of largest posterior variance is returned instead.
pub fn maximize_acquisition(s: &Surrogate, config: &AcquisitionConfig, seed: u64) -> Result<Vec<f64>, BoError> {
    if config.candidates == 0 || config.restarts == 0 || !(config.min_step > 0.0) {
        return Err(BoError::InvalidConfig(format!("{config:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let candidates = kronecker_points(s.dim, config.candidates, &mut rng);
    let mut scored: Vec<(f64, usize)> = candidates
        .iter()
        .enumerate()
        .map(|(i, c)| (s.expected_improvement(c), i))
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));

    if !(scored[0].0 > 0.0) {
        log::warn!("expected improvement vanishes on all candidates; sampling the most uncertain point");
        let pick = candidates
            .iter()
            .map(|c| s.predict(c).1)
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, v)| if v > acc.1 { (i, v) } else { acc });
        return Ok(candidates[pick.0].clone());
    }

    let mut best = (candidates[scored[0].1].clone(), scored[0].0);
    for &(f, i) in scored.iter().take(config.restarts) {
        let (x, fx) = refine(s, candidates[i].clone(), f, config);
        if fx > best.1 {
            best = (x, fx);
        }
    }
    Ok(best.0)
}
