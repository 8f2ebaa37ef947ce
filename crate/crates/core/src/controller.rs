//! Command generation between MPC updates.
//!
//! ```text
//! ũ = u*_k + K_d(v*_{k+1} − v) + K_p(q*_{k+1} − q)
//!     + Jᵀ diag(K_pc)(p(q*_{k+1}) − p(q)) + Jᵀ diag(K_dc)(J(q*_{k+1})·v*_{k+1} − J·v)
//! τ = sat(ũ) − g(q)
//! ```
//!
//! `J` without an argument is the linear Jacobian at the measured
//! configuration. The robot adds `g(q)` back internally, so the torque that
//! reaches the joints is `sat(ũ)`.

use std::sync::Arc;

use nalgebra::{DVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::ddp::DdpSolution;
use crate::dynamics::{gravity_vector, kinematics, DynamicsError, JointState, RobotModel};

/// Small offset absorbing round-off when a tick lands exactly on a node boundary.
const NODE_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GainSet {
    pub k_p: f64,
    pub k_d: f64,
    pub k_pc: Vector3<f64>,
    pub k_dc: Vector3<f64>,
}

impl Default for GainSet {
    fn default() -> Self {
        Self {
            k_p: 1.0,
            k_d: 1.0,
            k_pc: Vector3::repeat(1.0),
            k_dc: Vector3::repeat(1.0),
        }
    }
}

impl GainSet {
    pub fn zero() -> Self {
        Self {
            k_p: 0.0,
            k_d: 0.0,
            k_pc: Vector3::zeros(),
            k_dc: Vector3::zeros(),
        }
    }

    pub fn is_valid(&self) -> bool {
        std::iter::once(self.k_p)
            .chain(std::iter::once(self.k_d))
            .chain(self.k_pc.iter().copied())
            .chain(self.k_dc.iter().copied())
            .all(|g| g >= 0.0 && g.is_finite())
    }
}

/// How the feedforward torque evolves inside a node interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Feedforward {
    #[default]
    ZeroOrderHold,
    Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlCommand {
    /// Torque sent to the robot, gravity already removed.
    pub tau: DVector<f64>,
    /// `sat(ũ)`, the torque the joints actually receive.
    pub applied: DVector<f64>,
    pub saturated: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ControllerError {
    #[error("node {k} is outside the horizon of {nodes} nodes")]
    NodeOutOfRange { k: usize, nodes: usize },
    #[error("MPC solution is {age:.4} s old, horizon covers {horizon:.4} s")]
    Stale { age: f64, horizon: f64 },
    #[error("negative solution age {0}")]
    FutureSolution(f64),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
}

/// A solution together with the time its initial state was measured.
/// Replaced wholesale by the MPC, never mutated.
#[derive(Debug, Clone)]
pub struct MpcSnapshot {
    pub solution: Arc<DdpSolution>,
    pub t_solution: f64,
    /// Node duration of the problem that produced the solution.
    pub dt: f64,
}

impl MpcSnapshot {
    pub fn horizon_time(&self) -> f64 {
        self.solution.us.len() as f64 * self.dt
    }
}

/// Node index `floor(age / dt)` with a small tolerance for round-off.
pub fn node_index(age: f64, dt: f64) -> usize {
    (age / dt + NODE_EPS).floor() as usize
}

/// Raw torque `ũ` for node `k` with feedforward `u_ff`.
pub fn feedback_command_with(
    solution: &DdpSolution,
    k: usize,
    u_ff: &DVector<f64>,
    state: &JointState,
    model: &RobotModel,
    gains: &GainSet,
) -> Result<DVector<f64>, ControllerError> {
    let nodes = solution.us.len();
    if k >= nodes {
        return Err(ControllerError::NodeOutOfRange { k, nodes });
    }
    let n = model.nq();
    model.check_len("q", state.q.len())?;
    model.check_len("v", state.v.len())?;
    let target = JointState::from_x(&solution.xs[k + 1]);

    let mut u = u_ff + (&target.v - &state.v) * gains.k_d + (&target.q - &state.q) * gains.k_p;

    if gains.k_pc != Vector3::zeros() || gains.k_dc != Vector3::zeros() {
        let (pose, jac) = kinematics(model, &state.q)?;
        let (pose_t, jac_t) = kinematics(model, &target.q)?;
        let j = jac.rows(0, 3);
        let ep = pose_t.p - pose.p;
        let ev = jac_t.rows(0, 3) * &target.v - j * &state.v;
        let wrench = ep.component_mul(&gains.k_pc) + ev.component_mul(&gains.k_dc);
        u += j.transpose() * wrench;
    }
    debug_assert_eq!(u.len(), n);
    Ok(u)
}

/// Raw torque `ũ` for node `k` with the zero-order-held feedforward `u*_k`.
pub fn feedback_command(
    solution: &DdpSolution,
    k: usize,
    state: &JointState,
    model: &RobotModel,
    gains: &GainSet,
) -> Result<DVector<f64>, ControllerError> {
    let nodes = solution.us.len();
    if k >= nodes {
        return Err(ControllerError::NodeOutOfRange { k, nodes });
    }
    feedback_command_with(solution, k, &solution.us[k], state, model, gains)
}

/// Clamps to the torque limits, then removes gravity.
pub fn saturate_and_compensate(
    raw: &DVector<f64>,
    model: &RobotModel,
    q: &DVector<f64>,
) -> Result<ControlCommand, ControllerError> {
    model.check_len("u", raw.len())?;
    let limits = model.limits();
    let mut saturated = vec![false; raw.len()];
    let applied = DVector::from_fn(raw.len(), |i, _| {
        let clamped = raw[i].clamp(limits.u_min[i], limits.u_max[i]);
        saturated[i] = clamped != raw[i];
        clamped
    });
    let tau = &applied - gravity_vector(model, q)?;
    Ok(ControlCommand {
        tau,
        applied,
        saturated,
    })
}

/// One control-rate update from the latest MPC snapshot at clock `t`.
pub fn control_tick(
    t: f64,
    snapshot: &MpcSnapshot,
    state: &JointState,
    model: &RobotModel,
    gains: &GainSet,
    feedforward: Feedforward,
) -> Result<ControlCommand, ControllerError> {
    let age = t - snapshot.t_solution;
    if age < -NODE_EPS * snapshot.dt {
        return Err(ControllerError::FutureSolution(age));
    }
    let horizon = snapshot.horizon_time();
    if age >= horizon - NODE_EPS * snapshot.dt {
        return Err(ControllerError::Stale { age, horizon });
    }
    let age = age.max(0.0);
    let sol = &snapshot.solution;
    let k = node_index(age, snapshot.dt).min(sol.us.len() - 1);
    let u_ff = match feedforward {
        Feedforward::ZeroOrderHold => sol.us[k].clone(),
        Feedforward::Linear if k + 1 < sol.us.len() => {
            let s = (age / snapshot.dt - k as f64).clamp(0.0, 1.0);
            &sol.us[k] * (1.0 - s) + &sol.us[k + 1] * s
        }
        Feedforward::Linear => sol.us[k].clone(),
    };
    let raw = feedback_command_with(sol, k, &u_ff, state, model, gains)?;
    saturate_and_compensate(&raw, model, &state.q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{bundled_model, Joint, JointLimits};
    use nalgebra::{dvector, DMatrix, Isometry3, Matrix3, Unit};

    fn solution(model: &RobotModel, nodes: usize) -> DdpSolution {
        let n = model.nq();
        let xs = (0..=nodes)
            .map(|i| {
                let q = DVector::from_fn(n, |j, _| 0.1 * (i + j) as f64 - 0.5);
                JointState::new(q, DVector::from_element(n, 0.05 * i as f64)).to_x()
            })
            .collect();
        DdpSolution {
            xs,
            us: (0..nodes).map(|i| DVector::from_element(n, i as f64)).collect(),
            k: vec![DVector::zeros(n); nodes],
            gains: vec![DMatrix::zeros(n, 2 * n); nodes],
            cost: 0.0,
            converged: true,
            iterations: 1,
            expected_improvement: 0.0,
            wall_time: 0.0,
            trace: Vec::new(),
        }
    }

    fn pendulum() -> RobotModel {
        let joint = Joint {
            name: "hinge".into(),
            origin: Isometry3::identity(),
            axis: Unit::new_normalize(Vector3::z()),
            mass: 1.0,
            com: Vector3::new(1.0, 0.0, 0.0),
            inertia: Matrix3::zeros(),
            armature: 0.0,
        };
        RobotModel::new(
            "pendulum",
            vec![joint],
            Isometry3::translation(1.0, 0.0, 0.0),
            Vector3::new(0.0, -9.81, 0.0),
            JointLimits::symmetric(&[4.0], &[10.0], &[50.0]),
        )
        .unwrap()
    }

    #[test]
    fn table_defaults() {
        let g = GainSet::default();
        assert_eq!((g.k_p, g.k_d), (1.0, 1.0));
        assert_eq!(g.k_pc, Vector3::repeat(1.0));
        assert_eq!(g.k_dc, Vector3::repeat(1.0));
    }

    #[test]
    fn on_target_returns_feedforward() {
        let model = bundled_model("ur10e_approx").unwrap();
        let sol = solution(&model, 4);
        let state = JointState::from_x(&sol.xs[3]);
        let u = feedback_command(&sol, 2, &state, &model, &GainSet::default()).unwrap();
        assert!((u - &sol.us[2]).amax() < 1e-12);
    }

    #[test]
    fn zero_gains_return_feedforward() {
        let model = bundled_model("ur10e_approx").unwrap();
        let sol = solution(&model, 4);
        let state = JointState::new(DVector::from_element(6, 0.3), DVector::from_element(6, -1.0));
        let u = feedback_command(&sol, 1, &state, &model, &GainSet::zero()).unwrap();
        assert_eq!(u, sol.us[1]);
    }

    #[test]
    fn joint_position_error_scales_with_kp() {
        let model = bundled_model("ur10e_approx").unwrap();
        let sol = solution(&model, 4);
        let mut state = JointState::from_x(&sol.xs[1]);
        state.q[0] -= 1.0;
        let gains = GainSet {
            k_p: 28.7,
            ..GainSet::zero()
        };
        let u = feedback_command(&sol, 0, &state, &model, &gains).unwrap();
        let mut expected = DVector::zeros(6);
        expected[0] = 28.7;
        assert!((u - &sol.us[0] - expected).amax() < 1e-12);
    }

    #[test]
    fn saturation_then_gravity_removal() {
        let model = pendulum();
        let cmd = saturate_and_compensate(&dvector![150.0], &model, &dvector![0.0]).unwrap();
        assert_eq!(cmd.applied, dvector![50.0]);
        assert_eq!(cmd.saturated, vec![true]);
        assert!((cmd.tau[0] - (50.0 - 9.81)).abs() < 1e-12);

        let cmd = saturate_and_compensate(&dvector![0.0], &model, &dvector![0.0]).unwrap();
        assert!((cmd.tau[0] + 9.81).abs() < 1e-12);
        assert_eq!(cmd.saturated, vec![false]);

        let free = model.with_gravity(Vector3::zeros());
        let cmd = saturate_and_compensate(&dvector![12.5], &free, &dvector![0.3]).unwrap();
        assert_eq!(cmd.tau, dvector![12.5]);
    }

    #[test]
    fn node_sequence_over_ten_ticks() {
        let seq: Vec<usize> = (0..10).map(|i| node_index(i as f64 * 0.002, 0.0025)).collect();
        assert_eq!(seq, vec![0, 0, 1, 2, 3, 4, 4, 5, 6, 7]);
    }

    #[test]
    fn stale_solution_is_rejected() {
        let model = bundled_model("ur10e_approx").unwrap();
        let snap = MpcSnapshot {
            solution: Arc::new(solution(&model, 4)),
            t_solution: 1.0,
            dt: 0.0025,
        };
        let state = JointState::from_x(&snap.solution.xs[0]);
        let g = GainSet::default();
        assert!(control_tick(1.0, &snap, &state, &model, &g, Feedforward::ZeroOrderHold).is_ok());
        assert!(control_tick(1.0099, &snap, &state, &model, &g, Feedforward::ZeroOrderHold).is_ok());
        assert!(matches!(
            control_tick(1.01, &snap, &state, &model, &g, Feedforward::ZeroOrderHold),
            Err(ControllerError::Stale { .. })
        ));
    }

    #[test]
    fn tick_on_target_is_feedforward_minus_gravity() {
        let model = bundled_model("ur10e_approx").unwrap();
        let mut sol = solution(&model, 4);
        for u in &mut sol.us {
            u.fill(3.0);
        }
        let snap = MpcSnapshot {
            solution: Arc::new(sol),
            t_solution: 0.0,
            dt: 0.0025,
        };
        let state = JointState::from_x(&snap.solution.xs[2]);
        let cmd = control_tick(0.003, &snap, &state, &model, &GainSet::default(), Feedforward::ZeroOrderHold)
            .unwrap();
        let expected = &snap.solution.us[1] - gravity_vector(&model, &state.q).unwrap();
        assert_eq!(cmd.tau, expected);
    }

    #[test]
    fn linear_feedforward_interpolates() {
        let model = bundled_model("ur10e_approx").unwrap();
        let snap = MpcSnapshot {
            solution: Arc::new(solution(&model, 4)),
            t_solution: 0.0,
            dt: 0.0025,
        };
        let state = JointState::from_x(&snap.solution.xs[2]);
        let cmd = control_tick(0.003, &snap, &state, &model, &GainSet::zero(), Feedforward::Linear).unwrap();
        // Node 1 at fraction 0.2: 1 + 0.2·(2 − 1).
        assert!((cmd.applied[0] - 1.2).abs() < 1e-9);
    }
}
