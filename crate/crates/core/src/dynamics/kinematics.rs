use nalgebra::{DMatrix, DVector, Matrix3, Rotation3, Vector3};

use super::{DynamicsError, RobotModel};

/// End-effector pose in the base frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EePose {
    pub p: Vector3<f64>,
    pub r: Matrix3<f64>,
}

/// World-frame placement of every joint frame for one configuration.
#[derive(Debug, Clone)]
pub(crate) struct ChainFrames {
    /// Rotation of joint frame `i` (after its joint rotation) in the base frame.
    pub rot: Vec<Matrix3<f64>>,
    /// Origin of joint frame `i` in the base frame.
    pub origin: Vec<Vector3<f64>>,
    /// Joint axis in the base frame.
    pub axis: Vec<Vector3<f64>>,
    /// Link center of mass in the base frame.
    pub com: Vec<Vector3<f64>>,
    pub ee: EePose,
}

impl ChainFrames {
    pub fn compute(model: &RobotModel, q: &DVector<f64>) -> Self {
        let n = model.nq();
        let mut rot = Vec::with_capacity(n);
        let mut origin = Vec::with_capacity(n);
        let mut axis = Vec::with_capacity(n);
        let mut com = Vec::with_capacity(n);
        let mut r_prev = Matrix3::identity();
        let mut o_prev = Vector3::zeros();
        for (joint, &qi) in model.joints().iter().zip(q.iter()) {
            let o = o_prev + r_prev * joint.origin.translation.vector;
            let r = r_prev
                * joint.origin.rotation.to_rotation_matrix().matrix()
                * Rotation3::from_axis_angle(&joint.axis, qi).matrix();
            axis.push(r * joint.axis.into_inner());
            com.push(o + r * joint.com);
            rot.push(r);
            origin.push(o);
            r_prev = r;
            o_prev = o;
        }
        let off = model.ee_offset();
        let ee = EePose {
            p: o_prev + r_prev * off.translation.vector,
            r: r_prev * off.rotation.to_rotation_matrix().matrix(),
        };
        Self {
            rot,
            origin,
            axis,
            com,
            ee,
        }
    }

    /// Geometric Jacobian of the end-effector frame, linear rows first.
    pub fn jacobian(&self) -> DMatrix<f64> {
        let n = self.axis.len();
        let mut j = DMatrix::zeros(6, n);
        for i in 0..n {
            let z = self.axis[i];
            let lin = z.cross(&(self.ee.p - self.origin[i]));
            j.fixed_view_mut::<3, 1>(0, i).copy_from(&lin);
            j.fixed_view_mut::<3, 1>(3, i).copy_from(&z);
        }
        j
    }
}

pub fn forward_kinematics(model: &RobotModel, q: &DVector<f64>) -> Result<EePose, DynamicsError> {
    model.check_len("q", q.len())?;
    Ok(ChainFrames::compute(model, q).ee)
}

/// 6×n Jacobian mapping joint velocities to `[ṗ; ω]` of the end-effector,
/// both expressed in the base frame.
pub fn frame_jacobian(model: &RobotModel, q: &DVector<f64>) -> Result<DMatrix<f64>, DynamicsError> {
    model.check_len("q", q.len())?;
    Ok(ChainFrames::compute(model, q).jacobian())
}

/// Forward kinematics and Jacobian from a single pass over the chain.
pub fn kinematics(
    model: &RobotModel,
    q: &DVector<f64>,
) -> Result<(EePose, DMatrix<f64>), DynamicsError> {
    model.check_len("q", q.len())?;
    let frames = ChainFrames::compute(model, q);
    Ok((frames.ee, frames.jacobian()))
}
