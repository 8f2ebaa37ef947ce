//! Plain-text robot model files.
//!
//! ```text
//! # comments start with '#'
//! robot-model 1                 # format header, must be the first statement
//! name <identifier>
//! gravity <gx> <gy> <gz>        # optional, m/s², default 0 0 -9.81
//!
//! joint <name>                  # one block per joint, base to tip
//! origin <x> <y> <z> <roll> <pitch> <yaw>   # parent frame -> joint frame, m / rad
//! axis <ax> <ay> <az>           # rotation axis in the joint frame
//! mass <kg>
//! com <x> <y> <z>               # link center of mass in the joint frame, m
//! inertia <ixx> <iyy> <izz> <ixy> <ixz> <iyz>   # about the COM, kg·m²
//! armature <kg·m²>              # optional reflected rotor inertia, default 0
//! position_limits <min> <max>   # rad
//! velocity_limits <min> <max>   # rad/s
//! torque_limits <min> <max>     # N·m
//! end
//!
//! end_effector <x> <y> <z> <roll> <pitch> <yaw>  # last joint frame -> tool frame
//! ```
//!
//! Roll-pitch-yaw angles compose as `Rz(yaw)·Ry(pitch)·Rx(roll)`. Every key
//! inside a joint block except `armature` is required exactly once.

use std::fmt;
use std::path::Path;

use nalgebra::{DVector, Isometry3, Matrix3, Translation3, Unit, UnitQuaternion, Vector3};

use super::{Joint, JointLimits, RobotModel, STANDARD_GRAVITY};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelFileError {
    /// 1-based line number, 0 when the problem is not tied to a line.
    pub line: usize,
    pub message: String,
}

impl fmt::Display for ModelFileError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.line == 0 {
            write!(f, "robot model: {}", self.message)
        } else {
            write!(f, "robot model line {}: {}", self.line, self.message)
        }
    }
}

impl std::error::Error for ModelFileError {}

fn err<T>(line: usize, message: impl Into<String>) -> Result<T, ModelFileError> {
    Err(ModelFileError {
        line,
        message: message.into(),
    })
}

#[derive(Default)]
struct JointBlock {
    name: String,
    start: usize,
    origin: Option<Isometry3<f64>>,
    axis: Option<Unit<Vector3<f64>>>,
    mass: Option<f64>,
    com: Option<Vector3<f64>>,
    inertia: Option<Matrix3<f64>>,
    armature: Option<f64>,
    q: Option<(f64, f64)>,
    v: Option<(f64, f64)>,
    u: Option<(f64, f64)>,
}

pub fn load_model_file(path: impl AsRef<Path>) -> Result<RobotModel, ModelFileError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| ModelFileError {
        line: 0,
        message: format!("cannot read {}: {e}", path.display()),
    })?;
    parse_model(&text)
}

pub fn parse_model(text: &str) -> Result<RobotModel, ModelFileError> {
    let mut header_seen = false;
    let mut name: Option<String> = None;
    let mut gravity = Vector3::from(STANDARD_GRAVITY);
    let mut ee: Option<Isometry3<f64>> = None;
    let mut blocks: Vec<JointBlock> = Vec::new();
    let mut current: Option<JointBlock> = None;

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let mut tokens = content.split_whitespace();
        let key = tokens.next().unwrap_or_default();
        let args: Vec<&str> = tokens.collect();

        if !header_seen {
            if key != "robot-model" {
                return err(line, "expected 'robot-model <version>' header");
            }
            let version: u32 = match args.as_slice() {
                [v] => v.parse().or_else(|_| err(line, format!("bad version '{v}'")))?,
                _ => return err(line, "header takes exactly one version number"),
            };
            if version != FORMAT_VERSION {
                return err(line, format!("unsupported format version {version}"));
            }
            header_seen = true;
            continue;
        }

        if let Some(block) = current.as_mut() {
            match key {
                "origin" => set_once(&mut block.origin, parse_pose(line, &args)?, line, key)?,
                "axis" => {
                    let a = parse_vec3(line, &args)?;
                    if a.norm() < 1e-12 {
                        return err(line, "axis must be non-zero");
                    }
                    set_once(&mut block.axis, Unit::new_normalize(a), line, key)?
                }
                "mass" => {
                    let m = parse_scalar(line, &args)?;
                    if !(m > 0.0) {
                        return err(line, format!("mass must be positive, got {m}"));
                    }
                    set_once(&mut block.mass, m, line, key)?
                }
                "com" => set_once(&mut block.com, parse_vec3(line, &args)?, line, key)?,
                "inertia" => {
                    let i = parse_inertia(line, &args)?;
                    set_once(&mut block.inertia, i, line, key)?
                }
                "armature" => {
                    let a = parse_scalar(line, &args)?;
                    if !(a >= 0.0) {
                        return err(line, format!("armature must be non-negative, got {a}"));
                    }
                    set_once(&mut block.armature, a, line, key)?
                }
                "position_limits" => set_once(&mut block.q, parse_range(line, &args)?, line, key)?,
                "velocity_limits" => set_once(&mut block.v, parse_range(line, &args)?, line, key)?,
                "torque_limits" => set_once(&mut block.u, parse_range(line, &args)?, line, key)?,
                "end" => {
                    if !args.is_empty() {
                        return err(line, "'end' takes no arguments");
                    }
                    let block = current.take().expect("inside joint block");
                    check_block(&block, line)?;
                    blocks.push(block);
                }
                other => return err(line, format!("unknown joint key '{other}'")),
            }
            continue;
        }

        match key {
            "name" => match args.as_slice() {
                [n] => {
                    if name.is_some() {
                        return err(line, "duplicate 'name'");
                    }
                    name = Some((*n).to_string())
                }
                _ => return err(line, "'name' takes one identifier"),
            },
            "gravity" => gravity = parse_vec3(line, &args)?,
            "joint" => match args.as_slice() {
                [n] => {
                    current = Some(JointBlock {
                        name: (*n).to_string(),
                        start: line,
                        ..Default::default()
                    })
                }
                _ => return err(line, "'joint' takes one name"),
            },
            "end_effector" => {
                if ee.is_some() {
                    return err(line, "duplicate 'end_effector'");
                }
                ee = Some(parse_pose(line, &args)?)
            }
            "robot-model" => return err(line, "duplicate header"),
            other => return err(line, format!("unknown key '{other}'")),
        }
    }

    if !header_seen {
        return err(0, "missing 'robot-model' header");
    }
    if let Some(block) = current {
        return err(block.start, format!("joint '{}' is missing 'end'", block.name));
    }
    if blocks.is_empty() {
        return err(0, "model has no joints");
    }

    let mut joints = Vec::with_capacity(blocks.len());
    let mut limits = [Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new()];
    for b in &blocks {
        let (q, v, u) = (b.q.unwrap(), b.v.unwrap(), b.u.unwrap());
        for (slot, x) in limits.iter_mut().zip([q.0, q.1, v.0, v.1, u.0, u.1]) {
            slot.push(x);
        }
        joints.push(Joint {
            name: b.name.clone(),
            origin: b.origin.unwrap(),
            axis: b.axis.unwrap(),
            mass: b.mass.unwrap(),
            com: b.com.unwrap(),
            inertia: b.inertia.unwrap(),
            armature: b.armature.unwrap_or(0.0),
        });
    }
    let [q_min, q_max, v_min, v_max, u_min, u_max] = limits.map(DVector::from_vec);
    let limits = JointLimits {
        q_min,
        q_max,
        v_min,
        v_max,
        u_min,
        u_max,
    };
    RobotModel::new(
        name.unwrap_or_else(|| "unnamed".into()),
        joints,
        ee.unwrap_or_else(Isometry3::identity),
        gravity,
        limits,
    )
    .map_err(|e| ModelFileError {
        line: 0,
        message: e.to_string(),
    })
}

fn set_once<T>(slot: &mut Option<T>, value: T, line: usize, key: &str) -> Result<(), ModelFileError> {
    if slot.is_some() {
        return err(line, format!("duplicate '{key}' in joint block"));
    }
    *slot = Some(value);
    Ok(())
}

fn check_block(b: &JointBlock, line: usize) -> Result<(), ModelFileError> {
    let missing: Vec<&str> = [
        ("origin", b.origin.is_none()),
        ("axis", b.axis.is_none()),
        ("mass", b.mass.is_none()),
        ("com", b.com.is_none()),
        ("inertia", b.inertia.is_none()),
        ("position_limits", b.q.is_none()),
        ("velocity_limits", b.v.is_none()),
        ("torque_limits", b.u.is_none()),
    ]
    .into_iter()
    .filter_map(|(k, m)| m.then_some(k))
    .collect();
    if !missing.is_empty() {
        return err(
            line,
            format!("joint '{}' is missing {}", b.name, missing.join(", ")),
        );
    }
    Ok(())
}

fn parse_numbers(line: usize, args: &[&str], count: usize) -> Result<Vec<f64>, ModelFileError> {
    if args.len() != count {
        return err(line, format!("expected {count} numbers, found {}", args.len()));
    }
    args.iter()
        .map(|s| match s.parse::<f64>() {
            Ok(x) if x.is_finite() => Ok(x),
            _ => err(line, format!("'{s}' is not a finite number")),
        })
        .collect()
}

fn parse_scalar(line: usize, args: &[&str]) -> Result<f64, ModelFileError> {
    Ok(parse_numbers(line, args, 1)?[0])
}

fn parse_vec3(line: usize, args: &[&str]) -> Result<Vector3<f64>, ModelFileError> {
    Ok(Vector3::from_vec(parse_numbers(line, args, 3)?))
}

fn parse_range(line: usize, args: &[&str]) -> Result<(f64, f64), ModelFileError> {
    let x = parse_numbers(line, args, 2)?;
    if !(x[0] < x[1]) {
        return err(line, format!("lower limit {} must be below upper limit {}", x[0], x[1]));
    }
    Ok((x[0], x[1]))
}

fn parse_pose(line: usize, args: &[&str]) -> Result<Isometry3<f64>, ModelFileError> {
    let x = parse_numbers(line, args, 6)?;
    Ok(Isometry3::from_parts(
        Translation3::new(x[0], x[1], x[2]),
        UnitQuaternion::from_euler_angles(x[3], x[4], x[5]),
    ))
}

fn parse_inertia(line: usize, args: &[&str]) -> Result<Matrix3<f64>, ModelFileError> {
    let x = parse_numbers(line, args, 6)?;
    let (ixx, iyy, izz, ixy, ixz, iyz) = (x[0], x[1], x[2], x[3], x[4], x[5]);
    let m = Matrix3::new(ixx, ixy, ixz, ixy, iyy, iyz, ixz, iyz, izz);
    let eig = m.symmetric_eigenvalues();
    if eig.iter().any(|&e| e < -1e-12) {
        return err(line, "inertia is not positive semi-definite");
    }
    Ok(m)
}
