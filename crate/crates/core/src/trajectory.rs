//! Task-space reference shapes sampled by a progress variable `φ = t / duration`.
//!
//! Polygons are traversed at constant speed along the perimeter, visiting the
//! vertices at equal increments of `φ`; the circle is traversed at a constant
//! angular rate. Every path is closed: `φ = 0` and `φ = 1` give the same point.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use nalgebra::{Matrix3, Vector2, Vector3};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Square,
    Hexagon,
    Circle,
}

impl ShapeKind {
    fn sides(self) -> Option<usize> {
        match self {
            ShapeKind::Square => Some(4),
            ShapeKind::Hexagon => Some(6),
            ShapeKind::Circle => None,
        }
    }
}

impl FromStr for ShapeKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "square" => Ok(ShapeKind::Square),
            "hexagon" => Ok(ShapeKind::Hexagon),
            "circle" => Ok(ShapeKind::Circle),
            other => Err(format!("unknown shape '{other}' (square | hexagon | circle)")),
        }
    }
}

impl fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ShapeKind::Square => "square",
            ShapeKind::Hexagon => "hexagon",
            ShapeKind::Circle => "circle",
        })
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TrajectoryError {
    #[error("shape size must be positive, got {0}")]
    InvalidSize(f64),
    #[error("duration must be positive, got {0}")]
    InvalidDuration(f64),
    #[error("time {t} is outside [0, {duration}]")]
    OutOfRange { t: f64, duration: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapeSpec {
    kind: ShapeKind,
    /// Side length for polygons, radius for the circle, m.
    size: f64,
    center: Vector3<f64>,
    /// Columns are the in-plane x axis, in-plane y axis and plane normal.
    plane: Matrix3<f64>,
    duration: f64,
    orientation: Matrix3<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceSample {
    pub p_des: Vector3<f64>,
    pub r_des: Matrix3<f64>,
    pub v_des: Vector3<f64>,
}

impl ShapeSpec {
    pub fn new(
        kind: ShapeKind,
        size: f64,
        center: Vector3<f64>,
        plane: Matrix3<f64>,
        duration: f64,
        orientation: Matrix3<f64>,
    ) -> Result<Self, TrajectoryError> {
        if !(size > 0.0 && size.is_finite()) {
            return Err(TrajectoryError::InvalidSize(size));
        }
        if !(duration > 0.0 && duration.is_finite()) {
            return Err(TrajectoryError::InvalidDuration(duration));
        }
        Ok(Self {
            kind,
            size,
            center,
            plane,
            duration,
            orientation,
        })
    }

    /// Places the shape so that its starting point (`φ = 0`) is `start`.
    pub fn starting_at(
        kind: ShapeKind,
        size: f64,
        start: Vector3<f64>,
        plane: Matrix3<f64>,
        duration: f64,
        orientation: Matrix3<f64>,
    ) -> Result<Self, TrajectoryError> {
        let mut spec = Self::new(kind, size, Vector3::zeros(), plane, duration, orientation)?;
        spec.center = start - spec.to_world(&spec.planar_point(0.0).0);
        Ok(spec)
    }

    pub fn kind(&self) -> ShapeKind {
        self.kind
    }

    pub fn size(&self) -> f64 {
        self.size
    }

    pub fn center(&self) -> &Vector3<f64> {
        &self.center
    }

    pub fn plane(&self) -> &Matrix3<f64> {
        &self.plane
    }

    pub fn duration(&self) -> f64 {
        self.duration
    }

    pub fn orientation(&self) -> &Matrix3<f64> {
        &self.orientation
    }

    /// Copy with a different total duration.
    pub fn with_duration(&self, duration: f64) -> Result<Self, TrajectoryError> {
        Self::new(self.kind, self.size, self.center, self.plane, duration, self.orientation)
    }

    /// Polygon vertices in plane coordinates (empty for the circle).
    pub fn vertices(&self) -> Vec<Vector2<f64>> {
        match self.kind.sides() {
            Some(n) => {
                let radius = self.size / (2.0 * (PI / n as f64).sin());
                // Squares start rotated by half a sector so their edges are axis-aligned.
                let offset = if n == 4 { PI / 4.0 } else { 0.0 };
                (0..n)
                    .map(|j| {
                        let a = offset + 2.0 * PI * j as f64 / n as f64;
                        Vector2::new(radius * a.cos(), radius * a.sin())
                    })
                    .collect()
            }
            None => Vec::new(),
        }
    }

    /// Path length of one lap, m.
    pub fn perimeter(&self) -> f64 {
        match self.kind.sides() {
            Some(n) => n as f64 * self.size,
            None => 2.0 * PI * self.size,
        }
    }

    fn to_world(&self, xy: &Vector2<f64>) -> Vector3<f64> {
        self.plane * Vector3::new(xy.x, xy.y, 0.0)
    }

    /// Point and unit tangent in plane coordinates at progress `phi`.
    fn planar_point(&self, phi: f64) -> (Vector2<f64>, Vector2<f64>) {
        match self.kind.sides() {
            Some(n) => {
                let verts = self.vertices();
                let scaled = phi * n as f64;
                let edge = (scaled.floor() as usize).min(n - 1);
                let s = scaled - edge as f64;
                let a = verts[edge];
                let b = verts[(edge + 1) % n];
                (a + (b - a) * s, (b - a).normalize())
            }
            None => {
                let a = 2.0 * PI * phi;
                (
                    Vector2::new(self.size * a.cos(), self.size * a.sin()),
                    Vector2::new(-a.sin(), a.cos()),
                )
            }
        }
    }

    /// Reference at time `t ∈ [0, duration]`.
    pub fn sample(&self, t: f64) -> Result<ReferenceSample, TrajectoryError> {
        if !(0.0..=self.duration).contains(&t) {
            return Err(TrajectoryError::OutOfRange {
                t,
                duration: self.duration,
            });
        }
        let (xy, tangent) = self.planar_point(t / self.duration);
        let speed = self.perimeter() / self.duration;
        Ok(ReferenceSample {
            p_des: self.center + self.to_world(&xy),
            r_des: self.orientation,
            v_des: self.to_world(&tangent) * speed,
        })
    }
}

pub fn sample_reference(spec: &ShapeSpec, t: f64) -> Result<ReferenceSample, TrajectoryError> {
    spec.sample(t)
}

/// References at `t0, t0 + dt, …, t0 + N·dt`, clamped to `[0, duration]`.
pub fn trajectory_to_ocp_references(
    spec: &ShapeSpec,
    t0: f64,
    nodes: usize,
    dt: f64,
) -> Vec<ReferenceSample> {
    (0..=nodes)
        .map(|i| {
            let t = (t0 + i as f64 * dt).clamp(0.0, spec.duration);
            spec.sample(t).expect("clamped time is in range")
        })
        .collect()
}
