//! Discretized tracking problem solved by the MPC.
//!
//! Running cost per node, multiplied by `dt` in the horizon sum:
//!
//! ```text
//! ℓ(x,u) = w_pos‖p(q) − p_des‖² + w_rot‖R(q) − R_des‖²_F + w_tau‖u‖² + w_v‖v‖²
//!        + w_lim_tau·Γ(u) + w_lim_x·Γ(x)
//! ```
//!
//! with the terminal cost `w_pos‖p(q_N) − p_des,N‖²` left unscaled. `Γ` is a
//! one-sided quadratic penalty that is zero inside the limits.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use std::ops::AddAssign;

use crate::dynamics::{
    forward_dynamics_derivatives, forward_dynamics_derivatives_fd, forward_kinematics, kinematics,
    DynamicsError,
    JointState, RobotModel,
};
use crate::trajectory::ReferenceSample;

/// Tunable and fixed cost weights. The terminal position weight is always
/// equal to `w_pos`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostWeights {
    pub w_pos: f64,
    pub w_rot: f64,
    pub w_tau: f64,
    pub w_v: f64,
    pub w_lim_tau: f64,
    pub w_lim_x: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self {
            w_pos: 1e5,
            w_rot: 1e-4,
            w_tau: 1e-2,
            w_v: 1e-3,
            w_lim_tau: 1e1,
            w_lim_x: 1e1,
        }
    }
}

impl CostWeights {
    pub fn w_pos_terminal(&self) -> f64 {
        self.w_pos
    }

    pub fn is_valid(&self) -> bool {
        [self.w_pos, self.w_rot, self.w_tau, self.w_v, self.w_lim_tau, self.w_lim_x]
            .iter()
            .all(|w| *w >= 0.0 && w.is_finite())
    }
}

/// How the state-transition Jacobians are obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DerivativeMode {
    /// Inverse-dynamics identity with differentiated RNEA.
    #[default]
    InverseDynamics,
    /// Central differences of forward dynamics.
    FiniteDifference,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum OcpError {
    #[error("horizon must have at least one node")]
    EmptyHorizon,
    #[error("node time step must be positive, got {0}")]
    InvalidTimeStep(f64),
    #[error("expected {expected} references, got {got}")]
    ReferenceCount { expected: usize, got: usize },
    #[error("cost weights must be finite and non-negative")]
    InvalidWeights,
    #[error("node {k} is outside the horizon of {nodes} nodes")]
    NodeOutOfRange { k: usize, nodes: usize },
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
}

#[derive(Debug, Clone)]
pub struct OcpProblem<'m> {
    model: &'m RobotModel,
    nodes: usize,
    dt: f64,
    references: Vec<ReferenceSample>,
    weights: CostWeights,
    barrier_margin: f64,
    derivative_mode: DerivativeMode,
}

/// Gradient and Gauss-Newton Hessian blocks of one node cost.
#[derive(Debug, Clone)]
pub struct CostDerivatives {
    pub lx: DVector<f64>,
    pub lu: DVector<f64>,
    pub lxx: DMatrix<f64>,
    pub luu: DMatrix<f64>,
    pub lux: DMatrix<f64>,
}

impl<'m> OcpProblem<'m> {
    pub fn new(
        model: &'m RobotModel,
        nodes: usize,
        dt: f64,
        references: Vec<ReferenceSample>,
        weights: CostWeights,
    ) -> Result<Self, OcpError> {
        if nodes == 0 {
            return Err(OcpError::EmptyHorizon);
        }
        if !(dt > 0.0) {
            return Err(OcpError::InvalidTimeStep(dt));
        }
        if references.len() != nodes + 1 {
            return Err(OcpError::ReferenceCount {
                expected: nodes + 1,
                got: references.len(),
            });
        }
        if !weights.is_valid() {
            return Err(OcpError::InvalidWeights);
        }
        Ok(Self {
            model,
            nodes,
            dt,
            references,
            weights,
            barrier_margin: 0.0,
            derivative_mode: DerivativeMode::default(),
        })
    }

    /// Shrinks every barrier interval by `margin` on both sides.
    pub fn with_barrier_margin(mut self, margin: f64) -> Self {
        self.barrier_margin = margin;
        self
    }

    pub fn with_derivative_mode(mut self, mode: DerivativeMode) -> Self {
        self.derivative_mode = mode;
        self
    }

    pub fn model(&self) -> &'m RobotModel {
        self.model
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn nx(&self) -> usize {
        self.model.nx()
    }

    pub fn nu(&self) -> usize {
        self.model.nu()
    }

    pub fn weights(&self) -> &CostWeights {
        &self.weights
    }

    pub fn references(&self) -> &[ReferenceSample] {
        &self.references
    }

    fn torque_bounds(&self) -> (DVector<f64>, DVector<f64>) {
        let l = self.model.limits();
        (
            l.u_min.add_scalar(self.barrier_margin),
            l.u_max.add_scalar(-self.barrier_margin),
        )
    }

    fn state_bounds(&self) -> (DVector<f64>, DVector<f64>) {
        let l = self.model.limits();
        (
            l.state_lower().add_scalar(self.barrier_margin),
            l.state_upper().add_scalar(-self.barrier_margin),
        )
    }

    fn check_node(&self, k: usize) -> Result<(), OcpError> {
        if k >= self.nodes {
            return Err(OcpError::NodeOutOfRange {
                k,
                nodes: self.nodes,
            });
        }
        Ok(())
    }

    fn check_dims(&self, x: &DVector<f64>, u: Option<&DVector<f64>>) -> Result<(), OcpError> {
        if x.len() != self.nx() {
            return Err(DynamicsError::Dimension {
                what: "x",
                expected: self.nx(),
                got: x.len(),
            }
            .into());
        }
        if let Some(u) = u {
            if u.len() != self.nu() {
                return Err(DynamicsError::Dimension {
                    what: "u",
                    expected: self.nu(),
                    got: u.len(),
                }
                .into());
            }
        }
        Ok(())
    }

    /// Node cost `ℓ_k(x, u)` before the `dt` scaling.
    pub fn running_cost(&self, k: usize, x: &DVector<f64>, u: &DVector<f64>) -> Result<f64, OcpError> {
        self.check_node(k)?;
        self.check_dims(x, Some(u))?;
        Ok(self.cost_with_reference(&self.references[k], x, u))
    }

    /// Node cost against an arbitrary reference, before the `dt` scaling.
    pub fn cost_with_reference(&self, r: &ReferenceSample, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        let n = self.model.nq();
        let w = &self.weights;
        let q = x.rows(0, n).into_owned();
        let v = x.rows(n, n);
        let pose = forward_kinematics(self.model, &q).expect("dimensions checked");
        let (u_lo, u_hi) = self.torque_bounds();
        let (x_lo, x_hi) = self.state_bounds();
        w.w_pos * (pose.p - r.p_des).norm_squared()
            + w.w_rot * (pose.r - r.r_des).norm_squared()
            + w.w_tau * u.norm_squared()
            + w.w_v * v.norm_squared()
            + w.w_lim_tau * barrier(u, &u_lo, &u_hi)
            + w.w_lim_x * barrier(x, &x_lo, &x_hi)
    }

    pub fn terminal_cost(&self, x: &DVector<f64>) -> Result<f64, OcpError> {
        self.check_dims(x, None)?;
        let q = x.rows(0, self.model.nq()).into_owned();
        let p = forward_kinematics(self.model, &q)?.p;
        Ok(self.weights.w_pos_terminal() * (p - self.references[self.nodes].p_des).norm_squared())
    }

    /// `Σ ℓ_k·dt + ℓ_N` along a trajectory.
    pub fn total_cost(&self, xs: &[DVector<f64>], us: &[DVector<f64>]) -> Result<f64, OcpError> {
        let mut cost = 0.0;
        for (k, (x, u)) in xs.iter().zip(us).enumerate() {
            cost += self.running_cost(k, x, u)? * self.dt;
        }
        Ok(cost + self.terminal_cost(&xs[self.nodes])?)
    }

    /// Analytic gradient and Gauss-Newton Hessian of `ℓ_k` (unscaled by `dt`).
    pub fn cost_derivatives(
        &self,
        k: usize,
        x: &DVector<f64>,
        u: &DVector<f64>,
    ) -> Result<CostDerivatives, OcpError> {
        self.check_node(k)?;
        self.check_dims(x, Some(u))?;
        let r = &self.references[k];
        let n = self.model.nq();
        let nx = 2 * n;
        let w = &self.weights;
        let q = x.rows(0, n).into_owned();
        let (pose, jac) = kinematics(self.model, &q)?;

        let mut lx = DVector::zeros(nx);
        let mut lxx = DMatrix::zeros(nx, nx);

        // Position tracking.
        let j_lin = jac.rows(0, 3);
        let e = pose.p - r.p_des;
        let g_pos = j_lin.transpose() * e * (2.0 * w.w_pos);
        let h_pos = j_lin.transpose() * j_lin * (2.0 * w.w_pos);
        lx.rows_mut(0, n).add_assign(&g_pos);
        lxx.view_mut((0, 0), (n, n)).add_assign(&h_pos);

        // Orientation tracking on the Frobenius residual; ∂R/∂q_j = [ω_j]× R.
        if w.w_rot != 0.0 {
            let residual = pose.r - r.r_des;
            let dr: Vec<Matrix3<f64>> = (0..n)
                .map(|j| {
                    let omega = Vector3::new(jac[(3, j)], jac[(4, j)], jac[(5, j)]);
                    omega.cross_matrix() * pose.r
                })
                .collect();
            for i in 0..n {
                lx[i] += 2.0 * w.w_rot * residual.dot(&dr[i]);
                for j in 0..=i {
                    let h = 2.0 * w.w_rot * dr[i].dot(&dr[j]);
                    lxx[(i, j)] += h;
                    if i != j {
                        lxx[(j, i)] += h;
                    }
                }
            }
        }

        // Velocity regularization.
        for i in 0..n {
            lx[n + i] += 2.0 * w.w_v * x[n + i];
            lxx[(n + i, n + i)] += 2.0 * w.w_v;
        }

        // State barrier.
        let (x_lo, x_hi) = self.state_bounds();
        let (bg, bh) = barrier_derivatives(x, &x_lo, &x_hi);
        lx += bg * w.w_lim_x;
        for i in 0..nx {
            lxx[(i, i)] += w.w_lim_x * bh[i];
        }

        // Torque regularization and barrier.
        let (u_lo, u_hi) = self.torque_bounds();
        let (ug, uh) = barrier_derivatives(u, &u_lo, &u_hi);
        let lu = u * (2.0 * w.w_tau) + ug * w.w_lim_tau;
        let mut luu = DMatrix::from_diagonal_element(n, n, 2.0 * w.w_tau);
        for i in 0..n {
            luu[(i, i)] += w.w_lim_tau * uh[i];
        }

        Ok(CostDerivatives {
            lx,
            lu,
            lxx,
            luu,
            lux: DMatrix::zeros(n, nx),
        })
    }

    /// Gradient and Gauss-Newton Hessian of the terminal cost.
    pub fn terminal_derivatives(&self, x: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>), OcpError> {
        self.check_dims(x, None)?;
        let n = self.model.nq();
        let q = x.rows(0, n).into_owned();
        let (pose, jac) = kinematics(self.model, &q)?;
        let w = self.weights.w_pos_terminal();
        let j_lin = jac.rows(0, 3);
        let e = pose.p - self.references[self.nodes].p_des;
        let mut lx = DVector::zeros(2 * n);
        let mut lxx = DMatrix::zeros(2 * n, 2 * n);
        lx.rows_mut(0, n).copy_from(&(j_lin.transpose() * e * (2.0 * w)));
        lxx.view_mut((0, 0), (n, n))
            .copy_from(&(j_lin.transpose() * j_lin * (2.0 * w)));
        Ok((lx, lxx))
    }

    /// Semi-implicit Euler transition `x⁺ = f(x, u)` over one node interval.
    pub fn dynamics(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>, OcpError> {
        self.check_dims(x, Some(u))?;
        let s = JointState::from_x(x);
        Ok(crate::dynamics::step(self.model, &s, u, self.dt)?.to_x())
    }

    /// Jacobians `(f_x, f_u)` of [`OcpProblem::dynamics`].
    pub fn dynamics_derivatives(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
    ) -> Result<(DMatrix<f64>, DMatrix<f64>), OcpError> {
        self.check_dims(x, Some(u))?;
        let (fx, fu, _) = self.transition_with_derivatives(x, u)?;
        Ok((fx, fu))
    }

    /// Next state together with its Jacobians, sharing one factorization.
    pub(crate) fn transition_with_derivatives(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
    ) -> Result<(DMatrix<f64>, DMatrix<f64>, DVector<f64>), OcpError> {
        let n = self.model.nq();
        let dt = self.dt;
        let s = JointState::from_x(x);
        let d = match self.derivative_mode {
            DerivativeMode::InverseDynamics => forward_dynamics_derivatives(self.model, &s, u)?,
            DerivativeMode::FiniteDifference => forward_dynamics_derivatives_fd(self.model, &s, u)?,
        };
        let mut fx = DMatrix::identity(2 * n, 2 * n);
        let mut fu = DMatrix::zeros(2 * n, n);
        // v⁺ = v + a·dt
        fx.view_mut((n, 0), (n, n)).add_assign(&(&d.da_dq * dt));
        fx.view_mut((n, n), (n, n)).add_assign(&(&d.da_dv * dt));
        fu.view_mut((n, 0), (n, n)).copy_from(&(&d.da_du * dt));
        // q⁺ = q + v⁺·dt
        let dq_dx = fx.rows(n, n) * dt;
        fx.rows_mut(0, n).add_assign(&dq_dx);
        let dq_du = fu.rows(n, n) * dt;
        fu.rows_mut(0, n).copy_from(&dq_du);

        let v_next = &s.v + &d.accel * dt;
        let q_next = &s.q + &v_next * dt;
        let next = JointState::new(q_next, v_next);
        if !next.is_finite() {
            return Err(DynamicsError::Diverged.into());
        }
        Ok((fx, fu, next.to_x()))
    }
}

/// One-sided quadratic penalty `Σ max(0, x−hi)² + max(0, lo−x)²`.
pub fn barrier(value: &DVector<f64>, lower: &DVector<f64>, upper: &DVector<f64>) -> f64 {
    value
        .iter()
        .zip(lower.iter().zip(upper.iter()))
        .map(|(&x, (&lo, &hi))| {
            let above = (x - hi).max(0.0);
            let below = (lo - x).max(0.0);
            above * above + below * below
        })
        .sum()
}

/// Gradient and diagonal Hessian of [`barrier`].
pub fn barrier_derivatives(
    value: &DVector<f64>,
    lower: &DVector<f64>,
    upper: &DVector<f64>,
) -> (DVector<f64>, DVector<f64>) {
    let n = value.len();
    let mut grad = DVector::zeros(n);
    let mut hess = DVector::zeros(n);
    for i in 0..n {
        if value[i] > upper[i] {
            grad[i] = 2.0 * (value[i] - upper[i]);
            hess[i] = 2.0;
        } else if value[i] < lower[i] {
            grad[i] = -2.0 * (lower[i] - value[i]);
            hess[i] = 2.0;
        }
    }
    (grad, hess)
}
