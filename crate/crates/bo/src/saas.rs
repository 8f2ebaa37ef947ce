//! Sparse axis-aligned subspace (SAAS) prior over GP hyperparameters and
//! fully Bayesian inference over it with NUTS.
//!
//! Inverse lengthscales `ρ_d = 1/ℓ_d` are half-Cauchy with a shared global
//! scale `τ`, itself half-Cauchy; the signal variance is log-normal. The
//! sampler works in `z = [log σ², log τ, log ρ_1, …, log ρ_D]`.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::gp::{lml_with_gradient, KernelHyperparams, TrialDataset, NOISE_VARIANCE};
use crate::nuts::{self, LogDensity, NutsConfig};
use crate::BoError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SaasPrior {
    /// Scale of the half-Cauchy prior on the global shrinkage `τ`.
    pub tau_scale: f64,
    pub log_outputscale_mean: f64,
    pub log_outputscale_std: f64,
}

impl Default for SaasPrior {
    fn default() -> Self {
        Self {
            tau_scale: 0.1,
            log_outputscale_mean: 0.0,
            log_outputscale_std: 1.0,
        }
    }
}

fn log_half_cauchy(x: f64, scale: f64) -> f64 {
    (2.0 / PI).ln() - scale.ln() - (1.0 + (x / scale).powi(2)).ln()
}

impl SaasPrior {
    /// Prior log density in natural coordinates `(σ², τ, ρ)`, without any
    /// change-of-variables term.
    pub fn log_density(&self, outputscale: f64, tau: f64, rho: &[f64]) -> f64 {
        if !(outputscale > 0.0 && tau > 0.0 && rho.iter().all(|&r| r > 0.0)) {
            return f64::NEG_INFINITY;
        }
        let s = self.log_outputscale_std;
        let e = (outputscale.ln() - self.log_outputscale_mean) / s;
        let log_normal = -0.5 * e * e - s.ln() - 0.5 * (2.0 * PI).ln() - outputscale.ln();
        log_normal + log_half_cauchy(tau, self.tau_scale) + rho.iter().map(|&r| log_half_cauchy(r, tau)).sum::<f64>()
    }
}

/// Log posterior over `z = [log σ², log τ, log ρ_1, …, log ρ_D]`.
pub struct SaasPosterior {
    sq: Vec<DMatrix<f64>>,
    y: Vec<f64>,
    prior: SaasPrior,
}

impl SaasPosterior {
    pub fn new(data: &TrialDataset, prior: SaasPrior) -> Self {
        Self {
            sq: data.squared_differences(),
            y: data.outputs().to_vec(),
            prior,
        }
    }

    pub fn pack(hyper: &KernelHyperparams, tau: f64) -> Vec<f64> {
        let mut z = vec![hyper.outputscale.ln(), tau.ln()];
        z.extend(hyper.lengthscales.iter().map(|l| -l.ln()));
        z
    }

    pub fn unpack(z: &[f64]) -> (KernelHyperparams, f64) {
        let lengthscales = z[2..].iter().map(|v| (-v).exp()).collect();
        (KernelHyperparams::new(z[0].exp(), lengthscales), z[1].exp())
    }
}

impl LogDensity for SaasPosterior {
    fn dim(&self) -> usize {
        self.sq.len() + 2
    }

    fn logp_grad(&self, z: &[f64]) -> (f64, Vec<f64>) {
        let d = self.sq.len();
        if z.iter().any(|v| !v.is_finite() || v.abs() > 50.0) {
            return (f64::NEG_INFINITY, vec![0.0; d + 2]);
        }
        let outputscale = z[0].exp();
        let tau = z[1].exp();
        let rho: Vec<f64> = z[2..].iter().map(|v| v.exp()).collect();
        let (lml, g_scale, g_rho) = lml_with_gradient(&self.sq, &self.y, outputscale, &rho, NOISE_VARIANCE);
        if !lml.is_finite() {
            return (f64::NEG_INFINITY, vec![0.0; d + 2]);
        }

        let p = &self.prior;
        let s2 = p.log_outputscale_std.powi(2);
        let mut lp = lml;
        let mut g = vec![0.0; d + 2];

        // log σ² is normal once the Jacobian σ² is absorbed.
        lp += -0.5 * (z[0] - p.log_outputscale_mean).powi(2) / s2 - 0.5 * (2.0 * PI * s2).ln();
        g[0] = g_scale - (z[0] - p.log_outputscale_mean) / s2;

        // τ ~ HC(scale), plus log-Jacobian log τ.
        let a = (tau / p.tau_scale).powi(2);
        lp += log_half_cauchy(tau, p.tau_scale) + z[1];
        g[1] = 1.0 - 2.0 * a / (1.0 + a);

        // ρ_d ~ HC(τ), plus log-Jacobian log ρ_d.
        for i in 0..d {
            let b = (rho[i] / tau).powi(2);
            lp += log_half_cauchy(rho[i], tau) + z[2 + i];
            let share = 2.0 * b / (1.0 + b);
            g[1] += share - 1.0;
            g[2 + i] = g_rho[i] + 1.0 - share;
        }
        (lp, g)
    }
}

/// Unnormalized log posterior density of `(hyper, τ)` in the sampler's
/// log coordinates, Jacobian included.
pub fn log_posterior_density(
    data: &TrialDataset,
    hyper: &KernelHyperparams,
    tau: f64,
    prior: &SaasPrior,
) -> Result<f64, BoError> {
    hyper.validate(data.dim())?;
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(BoError::InvalidHyperparams(format!("global scale {tau}")));
    }
    let post = SaasPosterior::new(data, *prior);
    Ok(post.logp_grad(&SaasPosterior::pack(hyper, tau)).0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McmcDiagnostics {
    pub divergences: usize,
    pub step_size: f64,
    pub mean_tree_depth: f64,
    pub warmup: usize,
    pub samples: usize,
    pub thin: usize,
}

/// Thinned posterior draws of the kernel hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSamples {
    pub hyperparams: Vec<KernelHyperparams>,
    pub taus: Vec<f64>,
    pub diagnostics: McmcDiagnostics,
}

impl PosteriorSamples {
    pub fn len(&self) -> usize {
        self.hyperparams.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hyperparams.is_empty()
    }

    /// Per-dimension median lengthscale across draws.
    pub fn median_lengthscales(&self) -> Vec<f64> {
        let d = self.hyperparams.first().map_or(0, |h| h.lengthscales.len());
        (0..d)
            .map(|i| {
                let mut v: Vec<f64> = self.hyperparams.iter().map(|h| h.lengthscales[i]).collect();
                v.sort_by(f64::total_cmp);
                let m = v.len() / 2;
                if v.len() % 2 == 1 {
                    v[m]
                } else {
                    0.5 * (v[m - 1] + v[m])
                }
            })
            .collect()
    }
}

/// Samples the SAAS posterior with a single NUTS chain seeded by `seed`.
pub fn sample_hyperparams(
    data: &TrialDataset,
    prior: &SaasPrior,
    config: &NutsConfig,
    seed: u64,
) -> Result<PosteriorSamples, BoError> {
    let post = SaasPosterior::new(data, *prior);
    let d = data.dim();
    // Start at moderate shrinkage with every dimension mildly relevant.
    let mut z0 = vec![0.0, prior.tau_scale.ln()];
    z0.extend(std::iter::repeat_n((0.5f64).ln(), d));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let out = nuts::sample(&post, &z0, config, &mut rng)?;
    let (hyperparams, taus) = out.draws.iter().map(|z| SaasPosterior::unpack(z)).unzip();
    Ok(PosteriorSamples {
        hyperparams,
        taus,
        diagnostics: McmcDiagnostics {
            divergences: out.divergences,
            step_size: out.step_size,
            mean_tree_depth: out.mean_tree_depth,
            warmup: config.warmup,
            samples: config.samples,
            thin: config.thin,
        },
    })
}
