//! Point-estimate hyperparameters for the vanilla BO baseline: maximum a
//! posteriori under weak log-normal priors, no sparsity.

use argmin::core::{CostFunction, Executor, Gradient};
use argmin::solver::linesearch::MoreThuenteLineSearch;
use argmin::solver::quasinewton::LBFGS;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::gp::{lml_with_gradient, KernelHyperparams, TrialDataset, NOISE_VARIANCE};
use crate::BoError;

const STARTS: usize = 4;
const MAX_ITERS: u64 = 200;
/// Box on every log-parameter. Outside it the objective is evaluated at the
/// clamped point plus a quadratic penalty, so line searches never see `inf`.
const LOG_BOUND: f64 = 12.0;
const BOX_PENALTY: f64 = 1e6;

/// Negative log posterior over `w = [log σ², log ℓ_1, …, log ℓ_D]`.
struct MapObjective {
    sq: Vec<DMatrix<f64>>,
    y: Vec<f64>,
    ls_mean: f64,
    ls_std: f64,
}

impl MapObjective {
    fn new(data: &TrialDataset) -> Self {
        let d = data.dim() as f64;
        Self {
            sq: data.squared_differences(),
            y: data.outputs().to_vec(),
            // Dimension-scaled log-normal lengthscale prior.
            ls_mean: std::f64::consts::SQRT_2 + 0.5 * d.ln(),
            ls_std: 3f64.sqrt(),
        }
    }

    fn eval(&self, w_raw: &[f64]) -> (f64, Vec<f64>) {
        let d = self.sq.len();
        if w_raw.iter().any(|v| !v.is_finite()) {
            return (f64::INFINITY, vec![0.0; d + 1]);
        }
        let w: Vec<f64> = w_raw.iter().map(|v| v.clamp(-LOG_BOUND, LOG_BOUND)).collect();
        let (mut f, mut g) = self.eval_inside(&w);
        for i in 0..=d {
            let excess = w_raw[i] - w[i];
            if excess != 0.0 {
                f += BOX_PENALTY * excess * excess;
                g[i] = 2.0 * BOX_PENALTY * excess;
            }
        }
        (f, g)
    }

    fn eval_inside(&self, w: &[f64]) -> (f64, Vec<f64>) {
        let d = self.sq.len();
        let rho: Vec<f64> = w[1..].iter().map(|v| (-v).exp()).collect();
        let (lml, g_scale, g_rho) = lml_with_gradient(&self.sq, &self.y, w[0].exp(), &rho, NOISE_VARIANCE);
        if !lml.is_finite() {
            return (f64::INFINITY, vec![0.0; d + 1]);
        }
        let mut f = -lml + 0.5 * w[0] * w[0];
        let mut g = vec![0.0; d + 1];
        g[0] = -g_scale + w[0];
        let s2 = self.ls_std * self.ls_std;
        for i in 0..d {
            let e = w[1 + i] - self.ls_mean;
            f += 0.5 * e * e / s2;
            // ∂/∂log ℓ = −∂/∂log ρ.
            g[1 + i] = g_rho[i] + e / s2;
        }
        (f, g)
    }
}

impl CostFunction for &MapObjective {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, w: &Vec<f64>) -> Result<f64, argmin::core::Error> {
        Ok(self.eval(w).0)
    }
}

impl Gradient for &MapObjective {
    type Param = Vec<f64>;
    type Gradient = Vec<f64>;

    fn gradient(&self, w: &Vec<f64>) -> Result<Vec<f64>, argmin::core::Error> {
        Ok(self.eval(w).1)
    }
}

fn unpack(w: &[f64]) -> KernelHyperparams {
    KernelHyperparams::new(w[0].exp(), w[1..].iter().map(|v| v.exp()).collect())
}

/// Negative log posterior of `hyper` under the vanilla priors.
pub fn map_objective(data: &TrialDataset, hyper: &KernelHyperparams) -> f64 {
    let mut w = vec![hyper.outputscale.ln()];
    w.extend(hyper.lengthscales.iter().map(|l| l.ln()));
    MapObjective::new(data).eval(&w).0
}

/// Multi-start L-BFGS MAP fit. The first start has unit lengthscales and
/// unit output scale; the result is never worse than any start.
pub fn vanilla_fit(data: &TrialDataset, seed: u64) -> Result<KernelHyperparams, BoError> {
    let obj = MapObjective::new(data);
    let d = data.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let prior = Normal::new(obj.ls_mean, 0.5 * obj.ls_std).expect("finite prior");
    let mut starts = vec![vec![0.0; d + 1]];
    let mut mode = vec![0.0];
    mode.extend(std::iter::repeat_n(obj.ls_mean, d));
    starts.push(mode);
    while starts.len() < STARTS {
        let mut w = vec![rng.random_range(-1.0..1.0)];
        w.extend((0..d).map(|_| prior.sample(&mut rng).clamp(-LOG_BOUND + 1.0, LOG_BOUND - 1.0)));
        starts.push(w);
    }

    let mut best: Option<(Vec<f64>, f64)> = None;
    let mut consider = |w: Vec<f64>, f: f64| {
        if f.is_finite() && best.as_ref().is_none_or(|b| f < b.1) {
            best = Some((w, f));
        }
    };
    for w0 in starts {
        let f0 = obj.eval(&w0).0;
        consider(w0.clone(), f0);
        let solver = LBFGS::new(MoreThuenteLineSearch::new(), 7)
            .with_tolerance_grad(1e-8)
            .and_then(|s| s.with_tolerance_cost(1e-12));
        let Ok(solver) = solver else { continue };
        match Executor::new(&obj, solver)
            .configure(|state| state.param(w0).max_iters(MAX_ITERS))
            .run()
        {
            Ok(res) => {
                if let Some(w) = res.state.best_param.clone() {
                    let f = obj.eval(&w).0;
                    consider(w, f);
                }
            }
            Err(e) => log::debug!("vanilla fit start failed: {e}"),
        }
    }
    match best {
        Some((w, _)) => Ok(unpack(&w.iter().map(|v| v.clamp(-LOG_BOUND, LOG_BOUND)).collect::<Vec<_>>())),
        None => {
            log::warn!("vanilla hyperparameter fit failed; using unit lengthscales");
            Ok(KernelHyperparams::new(1.0, vec![1.0; d]))
        }
    }
}
