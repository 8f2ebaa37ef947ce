use nalgebra::{DVector, Isometry3, Matrix3, Unit, Vector3};

use super::DynamicsError;

/// A revolute joint together with the link it drives.
#[derive(Debug, Clone, PartialEq)]
pub struct Joint {
    pub name: String,
    /// Fixed transform from the parent joint frame to this joint's frame,
    /// applied before the joint rotation.
    pub origin: Isometry3<f64>,
    /// Rotation axis expressed in the joint frame.
    pub axis: Unit<Vector3<f64>>,
    /// Link mass in kg.
    pub mass: f64,
    /// Link center of mass in the (rotated) joint frame, m.
    pub com: Vector3<f64>,
    /// Rotational inertia about the center of mass, joint-frame axes, kg·m².
    pub inertia: Matrix3<f64>,
    /// Reflected rotor inertia acting directly on the joint, kg·m².
    pub armature: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointLimits {
    pub q_min: DVector<f64>,
    pub q_max: DVector<f64>,
    pub v_min: DVector<f64>,
    pub v_max: DVector<f64>,
    pub u_min: DVector<f64>,
    pub u_max: DVector<f64>,
}

impl JointLimits {
    /// Symmetric limits `[-x, x]` on every joint.
    pub fn symmetric(q: &[f64], v: &[f64], u: &[f64]) -> Self {
        let pos = |x: &[f64]| DVector::from_column_slice(x);
        let neg = |x: &[f64]| -DVector::from_column_slice(x);
        Self {
            q_min: neg(q),
            q_max: pos(q),
            v_min: neg(v),
            v_max: pos(v),
            u_min: neg(u),
            u_max: pos(u),
        }
    }

    pub fn state_lower(&self) -> DVector<f64> {
        stack(&self.q_min, &self.v_min)
    }

    pub fn state_upper(&self) -> DVector<f64> {
        stack(&self.q_max, &self.v_max)
    }
}

fn stack(a: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
    DVector::from_iterator(a.len() + b.len(), a.iter().chain(b.iter()).copied())
}

/// Fixed-base serial chain of revolute joints.
#[derive(Debug, Clone, PartialEq)]
pub struct RobotModel {
    name: String,
    joints: Vec<Joint>,
    ee_offset: Isometry3<f64>,
    gravity: Vector3<f64>,
    limits: JointLimits,
}

pub const STANDARD_GRAVITY: [f64; 3] = [0.0, 0.0, -9.81];

impl RobotModel {
    pub fn new(
        name: impl Into<String>,
        joints: Vec<Joint>,
        ee_offset: Isometry3<f64>,
        gravity: Vector3<f64>,
        limits: JointLimits,
    ) -> Result<Self, DynamicsError> {
        let model = Self {
            name: name.into(),
            joints,
            ee_offset,
            gravity,
            limits,
        };
        model.validate()?;
        Ok(model)
    }

    fn validate(&self) -> Result<(), DynamicsError> {
        let n = self.joints.len();
        if n == 0 {
            return Err(DynamicsError::InvalidModel("model has no joints".into()));
        }
        for (i, j) in self.joints.iter().enumerate() {
            if !(j.mass > 0.0 && j.mass.is_finite()) {
                return Err(DynamicsError::InvalidModel(format!(
                    "joint {i} ({}): mass must be positive, got {}",
                    j.name, j.mass
                )));
            }
            if !(j.armature >= 0.0 && j.armature.is_finite()) {
                return Err(DynamicsError::InvalidModel(format!(
                    "joint {i} ({}): armature must be non-negative, got {}",
                    j.name, j.armature
                )));
            }
            check_inertia(&j.inertia).map_err(|msg| {
                DynamicsError::InvalidModel(format!("joint {i} ({}): {msg}", j.name))
            })?;
        }
        let l = &self.limits;
        for (label, lo, hi) in [
            ("position", &l.q_min, &l.q_max),
            ("velocity", &l.v_min, &l.v_max),
            ("torque", &l.u_min, &l.u_max),
        ] {
            if lo.len() != n || hi.len() != n {
                return Err(DynamicsError::InvalidModel(format!(
                    "{label} limits must have {n} entries"
                )));
            }
            if let Some(i) = (0..n).find(|&i| !(lo[i] < hi[i])) {
                return Err(DynamicsError::InvalidModel(format!(
                    "joint {i}: {label} lower limit {} is not below upper limit {}",
                    lo[i], hi[i]
                )));
            }
        }
        if !self.gravity.iter().all(|g| g.is_finite()) {
            return Err(DynamicsError::InvalidModel("gravity must be finite".into()));
        }
        Ok(())
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn joints(&self) -> &[Joint] {
        &self.joints
    }

    pub fn nq(&self) -> usize {
        self.joints.len()
    }

    pub fn nv(&self) -> usize {
        self.joints.len()
    }

    pub fn nu(&self) -> usize {
        self.joints.len()
    }

    pub fn nx(&self) -> usize {
        2 * self.joints.len()
    }

    pub fn ee_offset(&self) -> &Isometry3<f64> {
        &self.ee_offset
    }

    pub fn gravity(&self) -> &Vector3<f64> {
        &self.gravity
    }

    pub fn limits(&self) -> &JointLimits {
        &self.limits
    }

    /// Copy of the model with a different gravity vector.
    pub fn with_gravity(&self, gravity: Vector3<f64>) -> Self {
        Self {
            gravity,
            ..self.clone()
        }
    }

    pub(crate) fn check_len(&self, what: &'static str, len: usize) -> Result<(), DynamicsError> {
        if len != self.nq() {
            return Err(DynamicsError::Dimension {
                what,
                expected: self.nq(),
                got: len,
            });
        }
        Ok(())
    }
}

/// Rotational inertia must be symmetric and positive semi-definite. Point
/// masses (zero inertia) are accepted; the mass matrix factorization catches
/// any resulting singular chain.
fn check_inertia(inertia: &Matrix3<f64>) -> Result<(), String> {
    if !inertia.iter().all(|x| x.is_finite()) {
        return Err("inertia has non-finite entries".into());
    }
    let asym = (inertia - inertia.transpose()).abs().max();
    if asym > 1e-12 * inertia.abs().max().max(1.0) {
        return Err("inertia is not symmetric".into());
    }
    let eig = inertia.symmetric_eigenvalues();
    if eig.iter().any(|&e| e < -1e-12) {
        return Err(format!("inertia is not positive semi-definite (eigenvalues {eig:?})"));
    }
    Ok(())
}

/// Joint positions and velocities.
#[derive(Debug, Clone, PartialEq)]
pub struct JointState {
    pub q: DVector<f64>,
    pub v: DVector<f64>,
}

impl JointState {
    pub fn new(q: DVector<f64>, v: DVector<f64>) -> Self {
        Self { q, v }
    }

    pub fn at_rest(q: DVector<f64>) -> Self {
        let n = q.len();
        Self {
            q,
            v: DVector::zeros(n),
        }
    }

    pub fn from_x(x: &DVector<f64>) -> Self {
        let n = x.len() / 2;
        Self {
            q: x.rows(0, n).into_owned(),
            v: x.rows(n, n).into_owned(),
        }
    }

    /// Stacked state `[q; v]`.
    pub fn to_x(&self) -> DVector<f64> {
        stack(&self.q, &self.v)
    }

    pub fn is_finite(&self) -> bool {
        self.q.iter().chain(self.v.iter()).all(|x| x.is_finite())
    }
}
