//! Box-bounded parameter spaces and Latin hypercube designs.
//!
//! Everything downstream of the space works in the unit cube; log-scaled
//! dimensions are uniform in `log(x)` there.

use mpctune_core::sim::{ParamVector, PARAM_NAMES};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::BoError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Linear,
    Log,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dimension {
    pub name: String,
    pub lower: f64,
    pub upper: f64,
    pub scale: Scale,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpace {
    dims: Vec<Dimension>,
}

impl ParamSpace {
    pub fn new(dims: Vec<Dimension>) -> Result<Self, BoError> {
        if dims.is_empty() {
            return Err(BoError::InvalidSpace("no dimensions".into()));
        }
        for d in &dims {
            if !(d.lower < d.upper && d.lower.is_finite() && d.upper.is_finite()) {
                return Err(BoError::InvalidSpace(format!(
                    "{}: lower bound {} must be below upper bound {}",
                    d.name, d.lower, d.upper
                )));
            }
            if d.scale == Scale::Log && d.lower <= 0.0 {
                return Err(BoError::InvalidSpace(format!(
                    "{}: log-scaled bounds must be positive",
                    d.name
                )));
            }
        }
        Ok(Self { dims })
    }

    /// The unit cube `[0, 1]^d` with linear scaling.
    pub fn unit(d: usize) -> Self {
        Self::new(
            (0..d)
                .map(|i| Dimension {
                    name: format!("x{i}"),
                    lower: 0.0,
                    upper: 1.0,
                    scale: Scale::Linear,
                })
                .collect(),
        )
        .expect("unit cube is valid")
    }

    /// The 12-dimensional MPC tuning space: cost weights span two decades
    /// either side of their defaults, gains span `[0.01, 100]`, all log-scaled.
    pub fn mpc_default() -> Self {
        let defaults = ParamVector::defaults();
        let dims = PARAM_NAMES
            .iter()
            .zip(defaults.as_slice())
            .enumerate()
            .map(|(i, (name, &x))| {
                let (lower, upper) = if i < 4 { (x * 1e-2, x * 1e2) } else { (0.01, 100.0) };
                Dimension {
                    name: name.to_string(),
                    lower,
                    upper,
                    scale: Scale::Log,
                }
            })
            .collect();
        Self::new(dims).expect("default bounds are valid")
    }

    pub fn dims(&self) -> &[Dimension] {
        &self.dims
    }

    pub fn len(&self) -> usize {
        self.dims.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dims.is_empty()
    }

    /// Raw value of unit coordinate `u` along dimension `i`.
    pub fn from_unit_1d(&self, i: usize, u: f64) -> f64 {
        let d = &self.dims[i];
        let u = u.clamp(0.0, 1.0);
        match d.scale {
            Scale::Linear => d.lower + u * (d.upper - d.lower),
            Scale::Log => (d.lower.ln() + u * (d.upper.ln() - d.lower.ln())).exp(),
        }
    }

    pub fn to_unit_1d(&self, i: usize, x: f64) -> f64 {
        let d = &self.dims[i];
        match d.scale {
            Scale::Linear => (x - d.lower) / (d.upper - d.lower),
            Scale::Log => (x.ln() - d.lower.ln()) / (d.upper.ln() - d.lower.ln()),
        }
    }

    pub fn from_unit(&self, u: &[f64]) -> Vec<f64> {
        u.iter().enumerate().map(|(i, &x)| self.from_unit_1d(i, x)).collect()
    }

    pub fn to_unit(&self, x: &[f64]) -> Vec<f64> {
        x.iter().enumerate().map(|(i, &v)| self.to_unit_1d(i, v)).collect()
    }

    /// Names of the dimensions whose raw value lies outside the bounds.
    pub fn out_of_bounds(&self, x: &[f64]) -> Vec<String> {
        self.dims
            .iter()
            .zip(x)
            .filter(|(d, &v)| !(v >= d.lower * (1.0 - 1e-12) && v <= d.upper * (1.0 + 1e-12)))
            .map(|(d, &v)| format!("{} = {v} not in [{}, {}]", d.name, d.lower, d.upper))
            .collect()
    }
}

/// `n` points in the unit cube, one per stratum `[k/n, (k+1)/n)` along every
/// axis, strata randomly permuted per axis and points jittered within them.
pub fn latin_hypercube_unit<R: Rng>(d: usize, n: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut points = vec![vec![0.0; d]; n];
    let mut strata: Vec<usize> = (0..n).collect();
    for j in 0..d {
        strata.shuffle(rng);
        for (p, &k) in points.iter_mut().zip(&strata) {
            p[j] = (k as f64 + rng.random::<f64>()) / n as f64;
        }
    }
    points
}

/// Latin hypercube design in raw units; log-scaled dimensions are stratified in log space.
pub fn latin_hypercube<R: Rng>(space: &ParamSpace, n: usize, rng: &mut R) -> Vec<Vec<f64>> {
    latin_hypercube_unit(space.len(), n, rng)
        .iter()
        .map(|u| space.from_unit(u))
        .collect()
}
