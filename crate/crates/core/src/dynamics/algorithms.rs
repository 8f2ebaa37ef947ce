use nalgebra::{Cholesky, DMatrix, DVector, Dyn, Matrix3, Vector3};

use super::kinematics::ChainFrames;
use super::{DynamicsError, Joint, JointState, RobotModel};

/// Rotation of each joint frame relative to its parent and the frame origin
/// in the parent.
pub(crate) type LinkTransforms = Vec<(Matrix3<f64>, Vector3<f64>)>;

pub(crate) fn link_transform(joint: &Joint, qi: f64) -> (Matrix3<f64>, Vector3<f64>) {
    let r = joint.origin.rotation.to_rotation_matrix().into_inner()
        * nalgebra::Rotation3::from_axis_angle(&joint.axis, qi).into_inner();
    (r, joint.origin.translation.vector)
}

pub(crate) fn link_transforms(model: &RobotModel, q: &DVector<f64>) -> LinkTransforms {
    model.joints().iter().zip(q.iter()).map(|(j, &qi)| link_transform(j, qi)).collect()
}

/// Recursive Newton-Euler inverse dynamics with an explicit gravity vector.
pub(crate) fn rnea(
    model: &RobotModel,
    q: &DVector<f64>,
    v: &DVector<f64>,
    a: &DVector<f64>,
    gravity: &Vector3<f64>,
) -> DVector<f64> {
    rnea_with(model, &link_transforms(model, q), v, a, gravity)
}

/// RNEA on precomputed link transforms.
///
/// Velocities and accelerations are propagated outward in each joint's own
/// frame; link wrenches are accumulated inward. Gravity enters as a fictitious
/// base acceleration of `-gravity`.
pub(crate) fn rnea_with(
    model: &RobotModel,
    rel: &[(Matrix3<f64>, Vector3<f64>)],
    v: &DVector<f64>,
    a: &DVector<f64>,
    gravity: &Vector3<f64>,
) -> DVector<f64> {
    let n = model.nq();
    let joints = model.joints();
    let mut force = Vec::with_capacity(n);
    let mut moment = Vec::with_capacity(n);

    let mut w_p = Vector3::zeros();
    let mut wd_p = Vector3::zeros();
    let mut acc_p = -gravity;
    for i in 0..n {
        let j = &joints[i];
        let (r, p) = &rel[i];
        let rt = r.transpose();
        let z = j.axis.into_inner();

        let w_in = rt * w_p;
        let w = w_in + z * v[i];
        let wd = rt * wd_p + w_in.cross(&(z * v[i])) + z * a[i];
        let acc = rt * (acc_p + wd_p.cross(p) + w_p.cross(&w_p.cross(p)));
        let acc_c = acc + wd.cross(&j.com) + w.cross(&w.cross(&j.com));

        force.push(j.mass * acc_c);
        moment.push(j.inertia * wd + w.cross(&(j.inertia * w)));
        w_p = w;
        wd_p = wd;
        acc_p = acc;
    }

    let mut tau = DVector::zeros(n);
    let mut f_child = Vector3::zeros();
    let mut n_child = Vector3::zeros();
    for i in (0..n).rev() {
        let j = &joints[i];
        let (f_in, n_in, p_child) = if i + 1 < n {
            let (r_c, p_c) = &rel[i + 1];
            (r_c * f_child, r_c * n_child, *p_c)
        } else {
            (Vector3::zeros(), Vector3::zeros(), Vector3::zeros())
        };
        let f = force[i] + f_in;
        let m = moment[i] + j.com.cross(&force[i]) + n_in + p_child.cross(&f_in);
        tau[i] = j.axis.dot(&m) + j.armature * a[i];
        f_child = f;
        n_child = m;
    }
    tau
}

/// Inverse dynamics `τ = M(q)a + C(q,v)v + g(q)` using the model gravity.
pub fn inverse_dynamics(
    model: &RobotModel,
    state: &JointState,
    a: &DVector<f64>,
) -> Result<DVector<f64>, DynamicsError> {
    check_state(model, state)?;
    model.check_len("a", a.len())?;
    Ok(rnea(model, &state.q, &state.v, a, model.gravity()))
}

/// Joint-space inertia matrix by composite-rigid-body accumulation.
///
/// Composite bodies are accumulated from the tip toward the base in the world
/// frame. Entry `(i, j)`, `j >= i`, is the torque about axis `i` needed to give
/// the composite body beyond joint `j` a unit angular acceleration about axis `j`.
pub fn mass_matrix(model: &RobotModel, q: &DVector<f64>) -> Result<DMatrix<f64>, DynamicsError> {
    model.check_len("q", q.len())?;
    Ok(crba(model, &ChainFrames::compute(model, q)))
}

pub(crate) fn crba(model: &RobotModel, frames: &ChainFrames) -> DMatrix<f64> {
    let n = model.nq();
    let joints = model.joints();
    let mut c_mass = vec![0.0; n];
    let mut c_com = vec![Vector3::zeros(); n];
    let mut c_inertia = vec![Matrix3::zeros(); n];

    for i in (0..n).rev() {
        let link_inertia = frames.rot[i] * joints[i].inertia * frames.rot[i].transpose();
        let m_i = joints[i].mass;
        let (m_out, com_out, inertia_out) = if i + 1 < n {
            (c_mass[i + 1], c_com[i + 1], c_inertia[i + 1])
        } else {
            (0.0, Vector3::zeros(), Matrix3::zeros())
        };
        let m = m_i + m_out;
        let com = (frames.com[i] * m_i + com_out * m_out) / m;
        c_inertia[i] = link_inertia
            + parallel_axis(m_i, &(frames.com[i] - com))
            + inertia_out
            + parallel_axis(m_out, &(com_out - com));
        c_mass[i] = m;
        c_com[i] = com;
    }

    let mut mm = DMatrix::zeros(n, n);
    for j in 0..n {
        let z_j = frames.axis[j];
        let force = c_mass[j] * z_j.cross(&(c_com[j] - frames.origin[j]));
        let moment_com = c_inertia[j] * z_j;
        for i in 0..=j {
            let moment = moment_com + (c_com[j] - frames.origin[i]).cross(&force);
            let m_ij = frames.axis[i].dot(&moment);
            mm[(i, j)] = m_ij;
            mm[(j, i)] = m_ij;
        }
        mm[(j, j)] += joints[j].armature;
    }
    mm
}

fn parallel_axis(mass: f64, d: &Vector3<f64>) -> Matrix3<f64> {
    mass * (Matrix3::identity() * d.norm_squared() - d * d.transpose())
}

/// Coriolis, centrifugal and gravity torques `C(q,v)v + g(q)`.
pub fn bias_forces(model: &RobotModel, state: &JointState) -> Result<DVector<f64>, DynamicsError> {
    check_state(model, state)?;
    let zero = DVector::zeros(model.nv());
    Ok(rnea(model, &state.q, &state.v, &zero, model.gravity()))
}

/// Gravity torques `g(q)`; identical to [`bias_forces`] at zero velocity.
pub fn gravity_vector(model: &RobotModel, q: &DVector<f64>) -> Result<DVector<f64>, DynamicsError> {
    model.check_len("q", q.len())?;
    let zero = DVector::zeros(model.nv());
    Ok(rnea(model, q, &zero, &zero, model.gravity()))
}

/// Joint accelerations `M(q)⁻¹ (u − b(q,v))`.
pub fn forward_dynamics(
    model: &RobotModel,
    state: &JointState,
    u: &DVector<f64>,
) -> Result<DVector<f64>, DynamicsError> {
    check_state(model, state)?;
    model.check_len("u", u.len())?;
    let frames = ChainFrames::compute(model, &state.q);
    let chol = factor(crba(model, &frames))?;
    let zero = DVector::zeros(model.nv());
    let bias = rnea(model, &state.q, &state.v, &zero, model.gravity());
    Ok(chol.solve(&(u - bias)))
}

fn factor(m: DMatrix<f64>) -> Result<Cholesky<f64, Dyn>, DynamicsError> {
    Cholesky::new(m).ok_or(DynamicsError::NotPositiveDefinite)
}

/// One semi-implicit Euler step: `v⁺ = v + a·dt`, `q⁺ = q + v⁺·dt`.
pub fn step(
    model: &RobotModel,
    state: &JointState,
    u: &DVector<f64>,
    dt: f64,
) -> Result<JointState, DynamicsError> {
    if !(dt > 0.0) {
        return Err(DynamicsError::InvalidTimeStep(dt));
    }
    let a = forward_dynamics(model, state, u)?;
    let v = &state.v + a * dt;
    let q = &state.q + &v * dt;
    let next = JointState { q, v };
    if !next.is_finite() {
        return Err(DynamicsError::Diverged);
    }
    Ok(next)
}

/// Forward dynamics together with its partial derivatives.
#[derive(Debug, Clone)]
pub struct DynamicsDerivatives {
    pub accel: DVector<f64>,
    pub da_dq: DMatrix<f64>,
    pub da_dv: DMatrix<f64>,
    /// `∂a/∂u = M(q)⁻¹`.
    pub da_du: DMatrix<f64>,
}

/// Derivatives of forward dynamics through the inverse-dynamics identity
/// `∂a/∂(q,v) = −M⁻¹ ∂ID/∂(q,v)` evaluated at the forward-dynamics solution.
/// The inverse-dynamics partials are taken by central differences of RNEA.
pub fn forward_dynamics_derivatives(
    model: &RobotModel,
    state: &JointState,
    u: &DVector<f64>,
) -> Result<DynamicsDerivatives, DynamicsError> {
    check_state(model, state)?;
    model.check_len("u", u.len())?;
    let n = model.nv();
    let g = model.gravity();
    let frames = ChainFrames::compute(model, &state.q);
    let chol = factor(crba(model, &frames))?;
    let mut rel = link_transforms(model, &state.q);
    let zero = DVector::zeros(n);
    let bias = rnea_with(model, &rel, &state.v, &zero, g);
    let accel = chol.solve(&(u - bias));

    let mut did_dq = DMatrix::zeros(n, n);
    let mut did_dv = DMatrix::zeros(n, n);
    let mut v = state.v.clone();
    let joints = model.joints();
    for k in 0..n {
        let h = 1e-6 * state.q[k].abs().max(1.0);
        let nominal = rel[k];
        rel[k] = link_transform(&joints[k], state.q[k] + h);
        let plus = rnea_with(model, &rel, &state.v, &accel, g);
        rel[k] = link_transform(&joints[k], state.q[k] - h);
        let minus = rnea_with(model, &rel, &state.v, &accel, g);
        rel[k] = nominal;
        did_dq.set_column(k, &((plus - minus) / (2.0 * h)));

        let h = 1e-6 * state.v[k].abs().max(1.0);
        v[k] = state.v[k] + h;
        let plus = rnea_with(model, &rel, &v, &accel, g);
        v[k] = state.v[k] - h;
        let minus = rnea_with(model, &rel, &v, &accel, g);
        v[k] = state.v[k];
        did_dv.set_column(k, &((plus - minus) / (2.0 * h)));
    }
    let da_du = chol.inverse();
    Ok(DynamicsDerivatives {
        accel,
        da_dq: -(&da_du * did_dq),
        da_dv: -(&da_du * did_dv),
        da_du,
    })
}

/// Same quantities as [`forward_dynamics_derivatives`], by central differences
/// of [`forward_dynamics`] itself. Slower; kept as the reference path.
pub fn forward_dynamics_derivatives_fd(
    model: &RobotModel,
    state: &JointState,
    u: &DVector<f64>,
) -> Result<DynamicsDerivatives, DynamicsError> {
    let n = model.nv();
    let accel = forward_dynamics(model, state, u)?;
    let mut out = DynamicsDerivatives {
        accel,
        da_dq: DMatrix::zeros(n, n),
        da_dv: DMatrix::zeros(n, n),
        da_du: DMatrix::zeros(n, n),
    };
    for k in 0..n {
        let h = 1e-6 * state.q[k].abs().max(1.0);
        let mut s = state.clone();
        s.q[k] += h;
        let plus = forward_dynamics(model, &s, u)?;
        s.q[k] -= 2.0 * h;
        let minus = forward_dynamics(model, &s, u)?;
        out.da_dq.set_column(k, &((plus - minus) / (2.0 * h)));

        let h = 1e-6 * state.v[k].abs().max(1.0);
        let mut s = state.clone();
        s.v[k] += h;
        let plus = forward_dynamics(model, &s, u)?;
        s.v[k] -= 2.0 * h;
        let minus = forward_dynamics(model, &s, u)?;
        out.da_dv.set_column(k, &((plus - minus) / (2.0 * h)));

        let h = 1e-6 * u[k].abs().max(1.0);
        let mut uu = u.clone();
        uu[k] += h;
        let plus = forward_dynamics(model, state, &uu)?;
        uu[k] -= 2.0 * h;
        let minus = forward_dynamics(model, state, &uu)?;
        out.da_du.set_column(k, &((plus - minus) / (2.0 * h)));
    }
    Ok(out)
}

fn check_state(model: &RobotModel, state: &JointState) -> Result<(), DynamicsError> {
    model.check_len("q", state.q.len())?;
    model.check_len("v", state.v.len())
}
