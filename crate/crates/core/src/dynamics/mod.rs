//! Rigid-body digital twin of a fixed-base serial manipulator.
//!
//! Implements the manipulator equation `M(q)·v̇ + C(q,v)·v + g(q) = u` with
//! Newton-Euler inverse dynamics for the bias terms, composite-rigid-body
//! accumulation for the mass matrix and a Cholesky solve for forward dynamics.
//! Time stepping is semi-implicit Euler. No friction, backlash or delays.

mod algorithms;
mod kinematics;
mod model;
pub mod model_file;

pub use algorithms::{
    bias_forces, forward_dynamics, forward_dynamics_derivatives, forward_dynamics_derivatives_fd,
    gravity_vector, inverse_dynamics, mass_matrix, step, DynamicsDerivatives,
};
pub use kinematics::{forward_kinematics, frame_jacobian, kinematics, EePose};
pub use model::{Joint, JointLimits, JointState, RobotModel, STANDARD_GRAVITY};
pub use model_file::{load_model_file, parse_model, ModelFileError};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DynamicsError {
    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("invalid robot model: {0}")]
    InvalidModel(String),
    #[error("mass matrix is not positive definite")]
    NotPositiveDefinite,
    #[error("time step must be positive, got {0}")]
    InvalidTimeStep(f64),
    #[error("integration produced a non-finite state")]
    Diverged,
}

const UR10E_APPROX: &str = include_str!("../../models/ur10e_approx.model");
const PLANAR_2LINK: &str = include_str!("../../models/planar_2link.model");

/// Names of the models shipped with the crate.
pub const BUNDLED_MODELS: [&str; 2] = ["ur10e_approx", "planar_2link"];

/// Loads one of the models shipped with the crate.
pub fn bundled_model(name: &str) -> Option<RobotModel> {
    let text = match name {
        "ur10e_approx" => UR10E_APPROX,
        "planar_2link" => PLANAR_2LINK,
        _ => return None,
    };
    Some(parse_model(text).expect("bundled model files are valid"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::{dvector, DMatrix, DVector, Isometry3, Matrix3, Unit, Vector3};
    use std::f64::consts::FRAC_PI_2;

    /// 1-DOF point-mass pendulum about z, link along +x at q = 0, gravity −y.
    fn pendulum(mass: f64, length: f64) -> RobotModel {
        let joint = Joint {
            name: "hinge".into(),
            origin: Isometry3::identity(),
            axis: Unit::new_normalize(Vector3::z()),
            mass,
            com: Vector3::new(length, 0.0, 0.0),
            inertia: Matrix3::zeros(),
            armature: 0.0,
        };
        RobotModel::new(
            "pendulum",
            vec![joint],
            Isometry3::translation(length, 0.0, 0.0),
            Vector3::new(0.0, -9.81, 0.0),
            JointLimits::symmetric(&[4.0], &[10.0], &[50.0]),
        )
        .unwrap()
    }

    fn planar() -> RobotModel {
        bundled_model("planar_2link").unwrap()
    }

    #[test]
    fn planar_fk_straight_arm() {
        let pose = forward_kinematics(&planar(), &dvector![0.0, 0.0]).unwrap();
        assert_relative_eq!(pose.p, Vector3::new(2.0, 0.0, 0.0), epsilon = 1e-15);
    }

    #[test]
    fn planar_fk_quarter_turn() {
        let pose = forward_kinematics(&planar(), &dvector![FRAC_PI_2, 0.0]).unwrap();
        assert_relative_eq!(pose.p, Vector3::new(0.0, 2.0, 0.0), epsilon = 1e-15);
    }

    #[test]
    fn fk_rejects_wrong_length() {
        let e = forward_kinematics(&planar(), &dvector![0.0]).unwrap_err();
        assert!(matches!(e, DynamicsError::Dimension { expected: 2, got: 1, .. }));
    }

    #[test]
    fn one_link_jacobian_is_tangential() {
        let j = frame_jacobian(&pendulum(1.0, 1.0), &dvector![0.0]).unwrap();
        assert_relative_eq!(j[(0, 0)], 0.0);
        assert_relative_eq!(j[(1, 0)], 1.0);
        assert_relative_eq!(j[(2, 0)], 0.0);
        assert_relative_eq!(j[(5, 0)], 1.0);
    }

    #[test]
    fn zero_length_chain_has_no_linear_jacobian() {
        let mut m = pendulum(1.0, 0.5);
        m = RobotModel::new(
            "axis",
            m.joints().to_vec(),
            Isometry3::identity(),
            *m.gravity(),
            m.limits().clone(),
        )
        .unwrap();
        let j = frame_jacobian(&m, &dvector![0.3]).unwrap();
        assert!(j.rows(0, 3).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn point_mass_inertia() {
        let (m, l) = (2.0, 0.7);
        let mm = mass_matrix(&pendulum(m, l), &dvector![0.4]).unwrap();
        assert_relative_eq!(mm[(0, 0)], m * l * l, epsilon = 1e-14);
    }

    #[test]
    fn horizontal_pendulum_bias_and_acceleration() {
        let model = pendulum(1.0, 1.0);
        let horizontal = JointState::at_rest(dvector![0.0]);
        let bias = bias_forces(&model, &horizontal).unwrap();
        assert_relative_eq!(bias[0], 9.81, epsilon = 1e-12);
        let a = forward_dynamics(&model, &horizontal, &dvector![0.0]).unwrap();
        assert_relative_eq!(a[0], -9.81, epsilon = 1e-12);
    }

    #[test]
    fn upright_and_hanging_pendulum_have_no_gravity_torque() {
        let model = pendulum(1.0, 1.0);
        for q in [FRAC_PI_2, -FRAC_PI_2] {
            let g = gravity_vector(&model, &dvector![q]).unwrap();
            assert!(g[0].abs() < 1e-14, "q={q}: {g}");
        }
    }

    #[test]
    fn gravity_vector_equals_bias_at_rest_bitwise() {
        let model = bundled_model("ur10e_approx").unwrap();
        let q = dvector![0.1, -1.2, 1.4, -0.3, 0.8, 2.0];
        let g = gravity_vector(&model, &q).unwrap();
        let b = bias_forces(&model, &JointState::at_rest(q)).unwrap();
        assert_eq!(g, b);
    }

    #[test]
    fn zero_gravity_at_rest_has_zero_bias() {
        let model = bundled_model("ur10e_approx").unwrap().with_gravity(Vector3::zeros());
        let q = dvector![0.1, -1.2, 1.4, -0.3, 0.8, 2.0];
        let b = bias_forces(&model, &JointState::at_rest(q)).unwrap();
        assert_eq!(b, DVector::zeros(6));
    }

    #[test]
    fn flipping_gravity_flips_gravity_torque() {
        let model = bundled_model("ur10e_approx").unwrap();
        let flipped = model.with_gravity(-model.gravity());
        let q = dvector![0.4, -0.9, 1.1, 0.2, -0.5, 0.0];
        let g = gravity_vector(&model, &q).unwrap();
        let gf = gravity_vector(&flipped, &q).unwrap();
        assert_eq!(g, -gf);
    }

    #[test]
    fn equilibrium_torque_gives_zero_acceleration() {
        let model = bundled_model("ur10e_approx").unwrap();
        let s = JointState::new(
            dvector![0.3, -1.0, 1.2, -0.4, 0.6, 0.1],
            dvector![0.5, -0.2, 0.3, 1.0, -0.7, 0.2],
        );
        let bias = bias_forces(&model, &s).unwrap();
        let a = forward_dynamics(&model, &s, &bias).unwrap();
        assert!(a.amax() < 1e-12, "{a}");
    }

    #[test]
    fn step_at_rest_without_forces_is_identity() {
        let model = pendulum(1.0, 1.0).with_gravity(Vector3::zeros());
        let s = JointState::at_rest(dvector![0.2]);
        let next = step(&model, &s, &dvector![0.0], 1e-3).unwrap();
        assert_eq!(next, s);
    }

    #[test]
    fn step_rejects_non_positive_dt() {
        let model = pendulum(1.0, 1.0);
        let s = JointState::at_rest(dvector![0.2]);
        assert!(matches!(
            step(&model, &s, &dvector![0.0], 0.0),
            Err(DynamicsError::InvalidTimeStep(_))
        ));
    }

    #[test]
    fn step_flags_divergence() {
        let model = pendulum(1.0, 1.0);
        let s = JointState::at_rest(dvector![0.2]);
        assert_eq!(
            step(&model, &s, &dvector![f64::INFINITY], 1e-3),
            Err(DynamicsError::Diverged)
        );
    }

    #[test]
    fn singular_chain_fails_factorization() {
        // A point mass sitting on its own joint axis contributes no inertia.
        let model = pendulum(1.0, 0.0);
        let s = JointState::at_rest(dvector![0.0]);
        assert_eq!(
            forward_dynamics(&model, &s, &dvector![1.0]),
            Err(DynamicsError::NotPositiveDefinite)
        );
    }

    #[test]
    fn rejects_non_positive_mass() {
        let mut joint = pendulum(1.0, 1.0).joints()[0].clone();
        joint.mass = 0.0;
        let e = RobotModel::new(
            "bad",
            vec![joint],
            Isometry3::identity(),
            Vector3::zeros(),
            JointLimits::symmetric(&[1.0], &[1.0], &[1.0]),
        )
        .unwrap_err();
        assert!(matches!(e, DynamicsError::InvalidModel(_)));
    }

    #[test]
    fn analytic_derivatives_match_finite_differences() {
        let model = bundled_model("ur10e_approx").unwrap();
        let s = JointState::new(
            dvector![0.3, -1.0, 1.2, -0.4, 0.6, 0.1],
            dvector![0.5, -0.2, 0.3, 1.0, -0.7, 0.2],
        );
        let u = dvector![5.0, 80.0, 30.0, 2.0, -1.0, 0.5];
        let fast = forward_dynamics_derivatives(&model, &s, &u).unwrap();
        let slow = forward_dynamics_derivatives_fd(&model, &s, &u).unwrap();
        let close = |a: &DMatrix<f64>, b: &DMatrix<f64>| {
            (a - b).amax() <= 1e-6 * b.amax().max(1.0)
        };
        assert!(close(&fast.da_dq, &slow.da_dq));
        assert!(close(&fast.da_dv, &slow.da_dv));
        assert!(close(&fast.da_du, &slow.da_du));
        assert_eq!(fast.accel, forward_dynamics(&model, &s, &u).unwrap());
    }
}
