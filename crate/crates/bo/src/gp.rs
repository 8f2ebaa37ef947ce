//! Exact Gaussian-process regression with a Matérn-5/2 ARD kernel.
//!
//! Inputs live in the unit cube and outputs are standardized before fitting;
//! the prior mean is zero in standardized units.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::BoError;

/// Observation noise variance in standardized units.
pub const NOISE_VARIANCE: f64 = 1e-6;
const MAX_JITTER: f64 = 1e-6;
const SQRT5: f64 = 2.236_067_977_499_79;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelHyperparams {
    /// Signal variance σ².
    pub outputscale: f64,
    /// ARD lengthscales ℓ_d in unit-cube coordinates.
    pub lengthscales: Vec<f64>,
    pub noise: f64,
}

impl KernelHyperparams {
    pub fn new(outputscale: f64, lengthscales: Vec<f64>) -> Self {
        Self {
            outputscale,
            lengthscales,
            noise: NOISE_VARIANCE,
        }
    }

    pub fn validate(&self, dim: usize) -> Result<(), BoError> {
        let pos = |x: f64| x > 0.0 && x.is_finite();
        if self.lengthscales.len() != dim {
            return Err(BoError::Dimension {
                expected: dim,
                got: self.lengthscales.len(),
            });
        }
        if !pos(self.outputscale) || !self.lengthscales.iter().all(|&l| pos(l)) || !(self.noise >= 0.0) {
            return Err(BoError::InvalidHyperparams(format!("{self:?}")));
        }
        Ok(())
    }
}

/// `(1 + s + s²/3)·exp(−s)` with `s = √5·r`: the unit-variance Matérn-5/2 profile.
pub(crate) fn matern52_profile(r: f64) -> f64 {
    let s = SQRT5 * r;
    (1.0 + s + s * s / 3.0) * (-s).exp()
}

/// Matérn-5/2 covariance between two points.
pub fn matern52(a: &[f64], b: &[f64], hyper: &KernelHyperparams) -> f64 {
    let r2: f64 = a
        .iter()
        .zip(b)
        .zip(&hyper.lengthscales)
        .map(|((x, y), l)| ((x - y) / l).powi(2))
        .sum();
    hyper.outputscale * matern52_profile(r2.sqrt())
}

/// Observations with inputs in `[0, 1]^d` and standardized outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialDataset {
    inputs: Vec<Vec<f64>>,
    raw: Vec<f64>,
    y: Vec<f64>,
    mean: f64,
    std: f64,
}

impl TrialDataset {
    pub fn new(inputs: Vec<Vec<f64>>, outputs: Vec<f64>) -> Result<Self, BoError> {
        if inputs.len() != outputs.len() {
            return Err(BoError::InvalidData(format!(
                "{} inputs but {} outputs",
                inputs.len(),
                outputs.len()
            )));
        }
        if inputs.len() < 2 {
            return Err(BoError::InvalidData("at least two observations are needed".into()));
        }
        let d = inputs[0].len();
        for (i, x) in inputs.iter().enumerate() {
            if x.len() != d {
                return Err(BoError::Dimension { expected: d, got: x.len() });
            }
            if !x.iter().all(|v| (-1e-12..=1.0 + 1e-12).contains(v)) {
                return Err(BoError::InvalidData(format!("input {i} is outside the unit cube")));
            }
        }
        if !outputs.iter().all(|y| y.is_finite()) {
            return Err(BoError::InvalidData("outputs must be finite".into()));
        }
        let n = outputs.len() as f64;
        let mean = outputs.iter().sum::<f64>() / n;
        let var = outputs.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n;
        let std = if var > 0.0 { var.sqrt() } else { 1.0 };
        let y = outputs.iter().map(|v| (v - mean) / std).collect();
        Ok(Self {
            inputs,
            raw: outputs,
            y,
            mean,
            std,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs[0].len()
    }

    pub fn inputs(&self) -> &[Vec<f64>] {
        &self.inputs
    }

    pub fn raw_outputs(&self) -> &[f64] {
        &self.raw
    }

    /// Standardized outputs.
    pub fn outputs(&self) -> &[f64] {
        &self.y
    }

    pub fn standardize(&self, y: f64) -> f64 {
        (y - self.mean) / self.std
    }

    pub fn unstandardize(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }

    /// Standard deviation used for standardization.
    pub fn scale(&self) -> f64 {
        self.std
    }

    /// Per-dimension squared differences, `out[d][(i, j)] = (x_i,d − x_j,d)²`.
    pub(crate) fn squared_differences(&self) -> Vec<DMatrix<f64>> {
        let n = self.len();
        (0..self.dim())
            .map(|d| DMatrix::from_fn(n, n, |i, j| (self.inputs[i][d] - self.inputs[j][d]).powi(2)))
            .collect()
    }
}

fn kernel_matrix(data: &TrialDataset, hyper: &KernelHyperparams, jitter: f64) -> DMatrix<f64> {
    let n = data.len();
    let x = data.inputs();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..i {
            let v = matern52(&x[i], &x[j], hyper);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
        k[(i, i)] = hyper.outputscale + hyper.noise + jitter;
    }
    k
}

/// A GP conditioned on a dataset under fixed hyperparameters.
#[derive(Debug, Clone)]
pub struct GpPosterior {
    hyper: KernelHyperparams,
    inputs: Vec<Vec<f64>>,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
}

impl GpPosterior {
    /// Factorizes `K + noise·I`, escalating a diagonal jitter up to 1e-6 if needed.
    pub fn fit(data: &TrialDataset, hyper: &KernelHyperparams) -> Result<Self, BoError> {
        hyper.validate(data.dim())?;
        let mut jitter = 0.0;
        loop {
            if let Some(chol) = Cholesky::new(kernel_matrix(data, hyper, jitter)) {
                let alpha = chol.solve(&DVector::from_column_slice(data.outputs()));
                return Ok(Self {
                    hyper: hyper.clone(),
                    inputs: data.inputs().to_vec(),
                    chol,
                    alpha,
                });
            }
            jitter = if jitter == 0.0 { 1e-10 } else { jitter * 10.0 };
            if jitter > MAX_JITTER {
                return Err(BoError::Factorization);
            }
        }
    }

    pub fn hyperparams(&self) -> &KernelHyperparams {
        &self.hyper
    }

    fn cross_covariance(&self, q: &[f64]) -> DVector<f64> {
        DVector::from_iterator(self.inputs.len(), self.inputs.iter().map(|x| matern52(x, q, &self.hyper)))
    }

    /// Latent mean and variance at `q` in standardized units; the variance is clamped at 0.
    pub fn predict(&self, q: &[f64]) -> (f64, f64) {
        let ks = self.cross_covariance(q);
        let mean = ks.dot(&self.alpha);
        let mut v = ks;
        self.chol.l_dirty().solve_lower_triangular_mut(&mut v);
        let var = self.hyper.outputscale - v.norm_squared();
        (mean, var.max(0.0))
    }
}

/// Posterior mean and variance of `data`'s GP at `q`.
pub fn gp_posterior(data: &TrialDataset, hyper: &KernelHyperparams, q: &[f64]) -> Result<(f64, f64), BoError> {
    if q.len() != data.dim() {
        return Err(BoError::Dimension {
            expected: data.dim(),
            got: q.len(),
        });
    }
    Ok(GpPosterior::fit(data, hyper)?.predict(q))
}

/// Moments of the equal-weight mixture of the component posteriors.
pub fn predict_mixture(components: &[GpPosterior], q: &[f64]) -> (f64, f64) {
    assert!(!components.is_empty(), "mixture needs at least one component");
    if components.len() == 1 {
        return components[0].predict(q);
    }
    let m = components.len() as f64;
    let (mut s1, mut s2) = (0.0, 0.0);
    for c in components {
        let (mu, var) = c.predict(q);
        s1 += mu;
        s2 += var + mu * mu;
    }
    let mean = s1 / m;
    (mean, (s2 / m - mean * mean).max(0.0))
}

/// Log marginal likelihood of the standardized outputs.
pub fn log_marginal_likelihood(data: &TrialDataset, hyper: &KernelHyperparams) -> Result<f64, BoError> {
    hyper.validate(data.dim())?;
    let rho: Vec<f64> = hyper.lengthscales.iter().map(|l| 1.0 / l).collect();
    let sq = data.squared_differences();
    Ok(lml_with_gradient(&sq, data.outputs(), hyper.outputscale, &rho, hyper.noise).0)
}

/// Log marginal likelihood together with its gradient with respect to
/// `log σ²` and each `log ρ_d`, where `ρ_d = 1/ℓ_d`.
///
/// Uses the same jitter escalation as [`GpPosterior::fit`]; returns `-inf` with
/// a zero gradient when even the largest jitter fails.
pub(crate) fn lml_with_gradient(
    sq: &[DMatrix<f64>],
    y: &[f64],
    outputscale: f64,
    rho: &[f64],
    noise: f64,
) -> (f64, f64, Vec<f64>) {
    let n = y.len();
    let dims = rho.len();
    let mut r2 = DMatrix::zeros(n, n);
    for (s, &p) in sq.iter().zip(rho) {
        r2 += s * (p * p);
    }
    let mut k = DMatrix::zeros(n, n);
    // dk/dr² up to the factor ρ_d², per entry.
    let mut dk = DMatrix::zeros(n, n);
    for j in 0..n {
        for i in 0..n {
            let s = SQRT5 * r2[(i, j)].sqrt();
            let e = (-s).exp();
            k[(i, j)] = outputscale * (1.0 + s + s * s / 3.0) * e;
            dk[(i, j)] = -5.0 / 3.0 * outputscale * (1.0 + s) * e;
        }
    }
    let signal = k.clone();
    for i in 0..n {
        k[(i, i)] += noise;
    }
    let mut jitter = 0.0;
    let chol = loop {
        let mut kj = k.clone();
        for i in 0..n {
            kj[(i, i)] += jitter;
        }
        if let Some(c) = Cholesky::new(kj) {
            break c;
        }
        jitter = if jitter == 0.0 { 1e-10 } else { jitter * 10.0 };
        if jitter > MAX_JITTER {
            return (f64::NEG_INFINITY, 0.0, vec![0.0; dims]);
        }
    };
    let yv = DVector::from_column_slice(y);
    let alpha = chol.solve(&yv);
    let log_det: f64 = chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>() * 2.0;
    let lml = -0.5 * yv.dot(&alpha) - 0.5 * log_det - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();

    let mut w = chol.inverse();
    w.ger(-1.0, &alpha, &alpha, 1.0);
    // w now holds K⁻¹ − ααᵀ; the gradient is −½ tr(w ∂K).
    let g_scale = -0.5 * w.component_mul(&signal).sum();
    let wk = w.component_mul(&dk);
    let g_rho = sq
        .iter()
        .zip(rho)
        .map(|(s, &p)| -0.5 * p * p * wk.component_mul(s).sum())
        .collect();
    (lml, g_scale, g_rho)
}
