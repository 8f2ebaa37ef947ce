//! Feasibility-driven DDP over a generic multiple-shooting problem.
//!
//! Each iterate carries its defects `f̄_{t+1} = f(x_t, u_t) − x_{t+1}`. The
//! backward pass propagates the value function through the linearized
//! dynamics including the defects, and the forward pass contracts them by
//! `(1 − α)`:
//!
//! ```text
//! û_t     = ū_t + α·k_t + K_t·(x̂_t − x̄_t)
//! x̂_{t+1} = f(x̂_t, û_t) − (1 − α)·f̄_{t+1}
//! ```
//!
//! so an accepted full step yields a dynamically feasible trajectory. The
//! expected cost change is obtained by rolling the same update through the
//! local quadratic model, which makes it exactly `α·g + ½α²·h`.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dynamics::{gravity_vector, JointState};
use crate::ocp::{CostDerivatives, OcpError, OcpProblem};

/// Interface the solver needs from an optimal-control problem. Node costs
/// are the contributions to the objective, already scaled by the node
/// duration where applicable.
pub trait ShootingProblem {
    fn nx(&self) -> usize;
    fn nu(&self) -> usize;
    fn horizon(&self) -> usize;
    fn node_cost(&self, k: usize, x: &DVector<f64>, u: &DVector<f64>) -> Result<f64, OcpError>;
    fn node_derivatives(
        &self,
        k: usize,
        x: &DVector<f64>,
        u: &DVector<f64>,
    ) -> Result<CostDerivatives, OcpError>;
    fn final_cost(&self, x: &DVector<f64>) -> Result<f64, OcpError>;
    fn final_derivatives(&self, x: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>), OcpError>;
    fn transition(&self, k: usize, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>, OcpError>;
    fn transition_derivatives(
        &self,
        k: usize,
        x: &DVector<f64>,
        u: &DVector<f64>,
    ) -> Result<(DMatrix<f64>, DMatrix<f64>), OcpError>;

    /// Control guess used for a cold start at state `x`.
    fn initial_control(&self, _x: &DVector<f64>) -> DVector<f64> {
        DVector::zeros(self.nu())
    }
}

impl ShootingProblem for OcpProblem<'_> {
    fn nx(&self) -> usize {
        OcpProblem::nx(self)
    }

    fn nu(&self) -> usize {
        OcpProblem::nu(self)
    }

    fn horizon(&self) -> usize {
        self.nodes()
    }

    fn node_cost(&self, k: usize, x: &DVector<f64>, u: &DVector<f64>) -> Result<f64, OcpError> {
        Ok(self.running_cost(k, x, u)? * self.dt())
    }

    fn node_derivatives(
        &self,
        k: usize,
        x: &DVector<f64>,
        u: &DVector<f64>,
    ) -> Result<CostDerivatives, OcpError> {
        let dt = self.dt();
        let mut d = self.cost_derivatives(k, x, u)?;
        d.lx *= dt;
        d.lu *= dt;
        d.lxx *= dt;
        d.luu *= dt;
        d.lux *= dt;
        Ok(d)
    }

    fn final_cost(&self, x: &DVector<f64>) -> Result<f64, OcpError> {
        self.terminal_cost(x)
    }

    fn final_derivatives(&self, x: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>), OcpError> {
        self.terminal_derivatives(x)
    }

    fn transition(&self, _k: usize, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>, OcpError> {
        self.dynamics(x, u)
    }

    fn transition_derivatives(
        &self,
        _k: usize,
        x: &DVector<f64>,
        u: &DVector<f64>,
    ) -> Result<(DMatrix<f64>, DMatrix<f64>), OcpError> {
        self.dynamics_derivatives(x, u)
    }

    /// Quasi-static guess: hold the gravity torque of the current posture.
    fn initial_control(&self, x: &DVector<f64>) -> DVector<f64> {
        let s = JointState::from_x(x);
        gravity_vector(self.model(), &s.q).unwrap_or_else(|_| DVector::zeros(self.nu()))
    }
}

/// Time-invariant linear dynamics `x⁺ = A·x + B·u` with cost
/// `Σ xᵀQx + uᵀRu + x_Nᵀ Q_f x_N`.
#[derive(Debug, Clone)]
pub struct LinearQuadraticProblem {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub q_final: DMatrix<f64>,
    pub horizon: usize,
}

impl ShootingProblem for LinearQuadraticProblem {
    fn nx(&self) -> usize {
        self.a.nrows()
    }

    fn nu(&self) -> usize {
        self.b.ncols()
    }

    fn horizon(&self) -> usize {
        self.horizon
    }

    fn node_cost(&self, _k: usize, x: &DVector<f64>, u: &DVector<f64>) -> Result<f64, OcpError> {
        Ok(x.dot(&(&self.q * x)) + u.dot(&(&self.r * u)))
    }

    fn node_derivatives(
        &self,
        _k: usize,
        x: &DVector<f64>,
        u: &DVector<f64>,
    ) -> Result<CostDerivatives, OcpError> {
        Ok(CostDerivatives {
            lx: &self.q * x * 2.0,
            lu: &self.r * u * 2.0,
            lxx: &self.q * 2.0,
            luu: &self.r * 2.0,
            lux: DMatrix::zeros(self.nu(), self.nx()),
        })
    }

    fn final_cost(&self, x: &DVector<f64>) -> Result<f64, OcpError> {
        Ok(x.dot(&(&self.q_final * x)))
    }

    fn final_derivatives(&self, x: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>), OcpError> {
        Ok((&self.q_final * x * 2.0, &self.q_final * 2.0))
    }

    fn transition(&self, _k: usize, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>, OcpError> {
        Ok(&self.a * x + &self.b * u)
    }

    fn transition_derivatives(
        &self,
        _k: usize,
        _x: &DVector<f64>,
        _u: &DVector<f64>,
    ) -> Result<(DMatrix<f64>, DMatrix<f64>), OcpError> {
        Ok((self.a.clone(), self.b.clone()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub max_iterations: usize,
    /// Converged once the expected improvement of a full step drops below this.
    pub tolerance: f64,
    pub reg_init: f64,
    pub reg_min: f64,
    pub reg_max: f64,
    pub reg_factor: f64,
    /// Candidate step lengths, tried in order.
    pub step_set: Vec<f64>,
    /// Fraction of the expected improvement a step has to realize.
    pub acceptance: f64,
    /// Record one [`IterationRecord`] per iteration.
    pub trace: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iterations: 10,
            tolerance: 1e-9,
            reg_init: 1e-9,
            reg_min: 1e-9,
            reg_max: 1e9,
            reg_factor: 10.0,
            step_set: (0..=10).map(|i| 0.5f64.powi(i)).collect(),
            acceptance: 0.1,
            trace: false,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<(), DdpError> {
        let bad = |m: &str| Err(DdpError::InvalidConfig(m.to_string()));
        if self.max_iterations == 0 {
            return bad("max_iterations must be at least 1");
        }
        if !(self.tolerance > 0.0) {
            return bad("tolerance must be positive");
        }
        if !(self.reg_min >= 0.0 && self.reg_min <= self.reg_init && self.reg_init <= self.reg_max) {
            return bad("regularization bounds must satisfy 0 <= min <= init <= max");
        }
        if !(self.reg_factor > 1.0) {
            return bad("reg_factor must exceed 1");
        }
        if self.step_set.is_empty() || self.step_set.iter().any(|a| !(*a > 0.0 && *a <= 1.0)) {
            return bad("step_set entries must lie in (0, 1]");
        }
        Ok(())
    }
}

/// One solver iteration, emitted as a JSON line when tracing is enabled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub cost: f64,
    pub reg: f64,
    /// Accepted step length, or `None` when the line search failed.
    pub step: Option<f64>,
    pub expected_improvement: f64,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DdpError {
    #[error("invalid solver configuration: {0}")]
    InvalidConfig(String),
    #[error("{what} has {got} entries, expected {expected}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("Q_uu at node {node} is not positive definite even with regularization {reg:e}")]
    NotPositiveDefinite { node: usize, reg: f64 },
    #[error("solver diverged after {} iterations", trace.len())]
    Diverged { trace: Vec<IterationRecord> },
    #[error(transparent)]
    Problem(#[from] OcpError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DdpSolution {
    pub xs: Vec<DVector<f64>>,
    pub us: Vec<DVector<f64>>,
    /// Feedforward terms `k_t`.
    pub k: Vec<DVector<f64>>,
    /// Feedback gains `K_t`, each `nu × nx`.
    pub gains: Vec<DMatrix<f64>>,
    pub cost: f64,
    pub converged: bool,
    /// Number of forward passes attempted.
    pub iterations: usize,
    pub expected_improvement: f64,
    pub wall_time: f64,
    pub trace: Vec<IterationRecord>,
}

impl DdpSolution {
    /// Writes the iteration trace as JSON lines.
    pub fn write_trace<W: std::io::Write>(&self, mut out: W) -> std::io::Result<()> {
        for r in &self.trace {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Initial guess for the next receding-horizon cycle: drop the first
    /// node, repeat the last one and pin the first state to `x0`.
    pub fn shifted(&self, x0: &DVector<f64>) -> (Vec<DVector<f64>>, Vec<DVector<f64>>) {
        let mut xs: Vec<_> = self.xs[1..].to_vec();
        xs.push(self.xs[self.xs.len() - 1].clone());
        xs[0] = x0.clone();
        let mut us: Vec<_> = self.us[1..].to_vec();
        us.push(self.us[self.us.len() - 1].clone());
        (xs, us)
    }
}

/// Local models of costs and dynamics along a trajectory.
#[derive(Debug, Clone)]
pub struct Linearization {
    pub fx: Vec<DMatrix<f64>>,
    pub fu: Vec<DMatrix<f64>>,
    pub costs: Vec<CostDerivatives>,
    pub final_lx: DVector<f64>,
    pub final_lxx: DMatrix<f64>,
}

impl Linearization {
    pub fn new<P: ShootingProblem + ?Sized>(
        problem: &P,
        xs: &[DVector<f64>],
        us: &[DVector<f64>],
    ) -> Result<Self, DdpError> {
        let n = problem.horizon();
        let mut fx = Vec::with_capacity(n);
        let mut fu = Vec::with_capacity(n);
        let mut costs = Vec::with_capacity(n);
        for t in 0..n {
            let (a, b) = problem.transition_derivatives(t, &xs[t], &us[t])?;
            fx.push(a);
            fu.push(b);
            costs.push(problem.node_derivatives(t, &xs[t], &us[t])?);
        }
        let (final_lx, final_lxx) = problem.final_derivatives(&xs[n])?;
        Ok(Self {
            fx,
            fu,
            costs,
            final_lx,
            final_lxx,
        })
    }

    /// Riccati-like recursion with `reg·I` added to `Q_uu`.
    pub fn backward(&self, gaps: &[DVector<f64>], reg: f64) -> Result<Gains, DdpError> {
        let n = self.fx.len();
        let nu = self.fu.first().map_or(0, |b| b.ncols());
        let mut vx = self.final_lx.clone();
        let mut vxx = self.final_lxx.clone();
        let mut k = vec![DVector::zeros(nu); n];
        let mut big_k = vec![DMatrix::zeros(nu, vx.len()); n];
        for t in (0..n).rev() {
            let (a, b, c) = (&self.fx[t], &self.fu[t], &self.costs[t]);
            let vx_next = &vx + &vxx * &gaps[t];
            let vxx_a = &vxx * a;
            let vxx_b = &vxx * b;
            let qx = &c.lx + a.transpose() * &vx_next;
            let qu = &c.lu + b.transpose() * &vx_next;
            let qxx = &c.lxx + a.transpose() * &vxx_a;
            let quu = &c.luu + b.transpose() * &vxx_b;
            let qux = &c.lux + b.transpose() * &vxx_a;

            let mut quu_reg = quu.clone();
            for i in 0..nu {
                quu_reg[(i, i)] += reg;
            }
            let chol = quu_reg
                .cholesky()
                .ok_or(DdpError::NotPositiveDefinite { node: t, reg })?;
            let kt = -chol.solve(&qu);
            let big_kt = -chol.solve(&qux);

            let kt_quu = big_kt.transpose() * &quu;
            vx = &qx + &kt_quu * &kt + big_kt.transpose() * &qu + qux.transpose() * &kt;
            vxx = &qxx + &kt_quu * &big_kt + big_kt.transpose() * &qux + qux.transpose() * &big_kt;
            vxx = (&vxx + vxx.transpose()) * 0.5;
            k[t] = kt;
            big_k[t] = big_kt;
        }
        Ok(Gains { k, big_k })
    }

    /// Coefficients `(g, h)` of the model cost change `α·g + ½α²·h`.
    pub fn expected_change(&self, gains: &Gains, gaps: &[DVector<f64>]) -> (f64, f64) {
        let mut dx = DVector::zeros(self.final_lx.len());
        let (mut g, mut h) = (0.0, 0.0);
        for t in 0..self.fx.len() {
            let c = &self.costs[t];
            let du = &gains.k[t] + &gains.big_k[t] * &dx;
            g += c.lx.dot(&dx) + c.lu.dot(&du);
            h += dx.dot(&(&c.lxx * &dx)) + du.dot(&(&c.luu * &du)) + 2.0 * du.dot(&(&c.lux * &dx));
            dx = &self.fx[t] * &dx + &self.fu[t] * &du + &gaps[t];
        }
        g += self.final_lx.dot(&dx);
        h += dx.dot(&(&self.final_lxx * &dx));
        (g, h)
    }
}

/// Feedforward and feedback terms from one backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Gains {
    pub k: Vec<DVector<f64>>,
    pub big_k: Vec<DMatrix<f64>>,
}

/// Result of one nonlinear rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub xs: Vec<DVector<f64>>,
    pub us: Vec<DVector<f64>>,
    pub gaps: Vec<DVector<f64>>,
    pub cost: f64,
}

/// Defects `f(x_t, u_t) − x_{t+1}` and the objective of a trajectory.
pub fn evaluate_trajectory<P: ShootingProblem + ?Sized>(
    problem: &P,
    xs: &[DVector<f64>],
    us: &[DVector<f64>],
) -> Result<(Vec<DVector<f64>>, f64), DdpError> {
    let n = problem.horizon();
    let mut gaps = Vec::with_capacity(n);
    let mut cost = 0.0;
    for t in 0..n {
        gaps.push(problem.transition(t, &xs[t], &us[t])? - &xs[t + 1]);
        cost += problem.node_cost(t, &xs[t], &us[t])?;
    }
    cost += problem.final_cost(&xs[n])?;
    Ok((gaps, cost))
}

/// Linearizes at `(xs, us)` and runs the backward recursion.
pub fn backward_pass<P: ShootingProblem + ?Sized>(
    problem: &P,
    xs: &[DVector<f64>],
    us: &[DVector<f64>],
    reg: f64,
) -> Result<(Gains, (f64, f64)), DdpError> {
    check_trajectory(problem, xs, us)?;
    let (gaps, _) = evaluate_trajectory(problem, xs, us)?;
    let lin = Linearization::new(problem, xs, us)?;
    let gains = lin.backward(&gaps, reg)?;
    let change = lin.expected_change(&gains, &gaps);
    Ok((gains, change))
}

/// Nonlinear rollout of the local policy with step `alpha`. Returns `None`
/// when the rollout leaves the finite domain.
pub fn forward_pass<P: ShootingProblem + ?Sized>(
    problem: &P,
    xs: &[DVector<f64>],
    us: &[DVector<f64>],
    gaps: &[DVector<f64>],
    gains: &Gains,
    alpha: f64,
) -> Option<Rollout> {
    let n = problem.horizon();
    let mut new_xs = Vec::with_capacity(n + 1);
    let mut new_us = Vec::with_capacity(n);
    let mut new_gaps = Vec::with_capacity(n);
    let mut cost = 0.0;
    new_xs.push(xs[0].clone());
    for t in 0..n {
        let x = &new_xs[t];
        let u = &us[t] + &gains.k[t] * alpha + &gains.big_k[t] * (x - &xs[t]);
        cost += problem.node_cost(t, x, &u).ok()?;
        let next = problem.transition(t, x, &u).ok()?;
        let gap = &gaps[t] * (1.0 - alpha);
        let x_next = next - &gap;
        if !x_next.iter().all(|v| v.is_finite()) {
            return None;
        }
        new_us.push(u);
        new_gaps.push(gap);
        new_xs.push(x_next);
    }
    cost += problem.final_cost(&new_xs[n]).ok()?;
    cost.is_finite().then_some(Rollout {
        xs: new_xs,
        us: new_us,
        gaps: new_gaps,
        cost,
    })
}

fn check_trajectory<P: ShootingProblem + ?Sized>(
    problem: &P,
    xs: &[DVector<f64>],
    us: &[DVector<f64>],
) -> Result<(), DdpError> {
    let n = problem.horizon();
    if xs.len() != n + 1 {
        return Err(DdpError::Dimension {
            what: "xs",
            expected: n + 1,
            got: xs.len(),
        });
    }
    if us.len() != n {
        return Err(DdpError::Dimension {
            what: "us",
            expected: n,
            got: us.len(),
        });
    }
    if let Some(x) = xs.iter().find(|x| x.len() != problem.nx()) {
        return Err(DdpError::Dimension {
            what: "state",
            expected: problem.nx(),
            got: x.len(),
        });
    }
    if let Some(u) = us.iter().find(|u| u.len() != problem.nu()) {
        return Err(DdpError::Dimension {
            what: "control",
            expected: problem.nu(),
            got: u.len(),
        });
    }
    Ok(())
}

/// Solves from the measured state `x0`, warm-starting from the shifted
/// previous solution when one is given and cold-starting otherwise.
pub fn solve<P: ShootingProblem + ?Sized>(
    problem: &P,
    x0: &DVector<f64>,
    warm_start: Option<&DdpSolution>,
    config: &SolverConfig,
) -> Result<DdpSolution, DdpError> {
    let n = problem.horizon();
    let (xs, us) = match warm_start {
        Some(prev) if prev.xs.len() == n + 1 && prev.us.len() == n => {
            let (mut xs, us) = prev.shifted(x0);
            // The repeated last control is rolled out so the tail carries no defect.
            xs[n] = problem.transition(n - 1, &xs[n - 1], &us[n - 1])?;
            (xs, us)
        }
        _ => (vec![x0.clone(); n + 1], vec![problem.initial_control(x0); n]),
    };
    solve_from(problem, xs, us, config)
}

/// Solves from an explicit initial guess; `xs[0]` is the fixed initial state.
pub fn solve_from<P: ShootingProblem + ?Sized>(
    problem: &P,
    mut xs: Vec<DVector<f64>>,
    mut us: Vec<DVector<f64>>,
    config: &SolverConfig,
) -> Result<DdpSolution, DdpError> {
    let start = Instant::now();
    config.validate()?;
    check_trajectory(problem, &xs, &us)?;

    let mut trace = Vec::new();
    let (mut gaps, mut cost) = evaluate_trajectory(problem, &xs, &us)?;
    if !cost.is_finite() {
        return Err(DdpError::Diverged { trace });
    }
    let mut reg = config.reg_init;
    let mut iterations = 0;
    let mut converged = false;
    let mut expected;
    let mut gains;
    let mut lin = Linearization::new(problem, &xs, &us)?;

    loop {
        gains = loop {
            match lin.backward(&gaps, reg) {
                Ok(g) => break g,
                Err(DdpError::NotPositiveDefinite { node, .. }) => {
                    if reg >= config.reg_max {
                        return Err(DdpError::NotPositiveDefinite { node, reg });
                    }
                    reg = increase(reg, config);
                }
                Err(e) => return Err(e),
            }
        };
        let (g, h) = lin.expected_change(&gains, &gaps);
        expected = -(g + 0.5 * h);
        let feasible = gaps.iter().all(|d| d.iter().all(|v| *v == 0.0));
        if feasible && expected < config.tolerance {
            converged = true;
            break;
        }
        if iterations >= config.max_iterations {
            break;
        }
        iterations += 1;

        let mut accepted = None;
        for &alpha in &config.step_set {
            let Some(r) = forward_pass(problem, &xs, &us, &gaps, &gains, alpha) else {
                continue;
            };
            let predicted = -(alpha * g + 0.5 * alpha * alpha * h);
            let actual = cost - r.cost;
            let ok = if predicted >= 0.0 {
                actual >= config.acceptance * predicted
            } else {
                // Closing defects may raise the cost; tolerate up to twice the predicted rise.
                actual >= 2.0 * predicted
            };
            if ok && (!feasible || actual >= 0.0) {
                accepted = Some((alpha, r));
                break;
            }
        }

        match accepted {
            Some((alpha, r)) => {
                xs = r.xs;
                us = r.us;
                gaps = r.gaps;
                cost = r.cost;
                if alpha >= 0.5 {
                    reg = (reg / config.reg_factor).max(config.reg_min);
                }
                if config.trace {
                    trace.push(IterationRecord {
                        iteration: iterations,
                        cost,
                        reg,
                        step: Some(alpha),
                        expected_improvement: expected,
                    });
                }
                lin = Linearization::new(problem, &xs, &us)?;
            }
            None => {
                if config.trace {
                    trace.push(IterationRecord {
                        iteration: iterations,
                        cost,
                        reg,
                        step: None,
                        expected_improvement: expected,
                    });
                }
                if reg >= config.reg_max {
                    break;
                }
                reg = increase(reg, config);
            }
        }
        if !cost.is_finite() {
            return Err(DdpError::Diverged { trace });
        }
    }

    Ok(DdpSolution {
        xs,
        us,
        k: gains.k,
        gains: gains.big_k,
        cost,
        converged,
        iterations,
        expected_improvement: expected,
        wall_time: start.elapsed().as_secs_f64(),
        trace,
    })
}

fn increase(reg: f64, config: &SolverConfig) -> f64 {
    (reg * config.reg_factor).max(config.reg_min).max(1e-12).min(config.reg_max)
}
