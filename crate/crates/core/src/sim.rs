//! Closed-loop episodes: MPC re-solves at its own period, the controller
//! ticks at the control period and the twin integrates with a finer substep.
//! Time is simulated; solves are instantaneous on the episode clock and their
//! measured (or modelled) duration is only compared against the MPC period.

use std::io::Write;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::controller::{control_tick, ControlCommand, Feedforward, GainSet, MpcSnapshot};
use crate::ddp::{solve, DdpSolution, SolverConfig};
use crate::dynamics::{forward_kinematics, step, JointState, RobotModel};
use crate::ocp::{CostWeights, DerivativeMode, OcpProblem};
use crate::trajectory::{trajectory_to_ocp_references, ShapeKind, ShapeSpec};

/// Number of entries in a [`ParamVector`].
pub const PARAM_DIM: usize = 12;

pub const PARAM_NAMES: [&str; PARAM_DIM] = [
    "w_pos", "w_rot", "w_tau", "w_v", "k_p", "k_d", "k_pc_x", "k_pc_y", "k_pc_z", "k_dc_x", "k_dc_y",
    "k_dc_z",
];

/// Joint configuration the bundled tasks start from.
pub const HOME_POSTURE: [f64; 6] = [0.0, -1.2, 1.5, -1.87, -1.57, 0.0];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum SolveTiming {
    /// Measured wall-clock time of each solve.
    WallClock,
    /// `iterations × per_iteration` seconds, for reproducible runs.
    Deterministic { per_iteration: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeConfig {
    pub model: RobotModel,
    pub shape: ShapeSpec,
    pub weights: CostWeights,
    pub gains: GainSet,
    pub solver: SolverConfig,
    pub horizon: usize,
    pub dt_ocp: f64,
    pub control_period: f64,
    pub mpc_period: f64,
    pub physics_dt: f64,
    pub q0: DVector<f64>,
    /// Simulated time; defaults to the shape duration.
    pub duration: f64,
    pub seed: u64,
    pub timing: SolveTiming,
    pub feedforward: Feedforward,
    pub derivatives: DerivativeMode,
    pub warm_start: bool,
    /// Tracking error beyond which the episode is declared failed, m.
    pub divergence_threshold: f64,
    pub record_log: bool,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SimError {
    #[error("invalid episode configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid objective input: {0}")]
    InvalidObjective(String),
}

impl EpisodeConfig {
    /// Hexagon of `side` metres in the horizontal plane, starting at the
    /// end-effector position of `q0` and holding its orientation.
    pub fn hexagon(model: RobotModel, q0: DVector<f64>, side: f64, duration: f64) -> Result<Self, SimError> {
        Self::task(model, q0, ShapeKind::Hexagon, side, duration)
    }

    pub fn task(
        model: RobotModel,
        q0: DVector<f64>,
        kind: ShapeKind,
        size: f64,
        duration: f64,
    ) -> Result<Self, SimError> {
        let pose = forward_kinematics(&model, &q0).map_err(|e| SimError::InvalidConfig(e.to_string()))?;
        let shape = ShapeSpec::starting_at(kind, size, pose.p, Matrix3::identity(), duration, pose.r)
            .map_err(|e| SimError::InvalidConfig(e.to_string()))?;
        Ok(Self {
            model,
            shape,
            weights: CostWeights::default(),
            gains: GainSet::default(),
            solver: SolverConfig::default(),
            horizon: 20,
            dt_ocp: 0.0025,
            control_period: 0.002,
            mpc_period: 0.004,
            physics_dt: 0.0005,
            q0,
            duration,
            seed: 0,
            timing: SolveTiming::WallClock,
            feedforward: Feedforward::ZeroOrderHold,
            derivatives: DerivativeMode::InverseDynamics,
            warm_start: true,
            divergence_threshold: 0.5,
            record_log: false,
        })
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidConfig(m));
        if self.horizon == 0 {
            return bad("horizon must be at least one node".into());
        }
        for (name, v) in [
            ("dt_ocp", self.dt_ocp),
            ("control_period", self.control_period),
            ("mpc_period", self.mpc_period),
            ("physics_dt", self.physics_dt),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if self.control_period > self.mpc_period + 1e-12 {
            return bad("control period must not exceed the MPC period".into());
        }
        if self.physics_dt > self.control_period + 1e-12 {
            return bad("physics substep must not exceed the control period".into());
        }
        if !(self.duration >= 0.0) {
            return bad(format!("duration must be non-negative, got {}", self.duration));
        }
        if self.q0.len() != self.model.nq() {
            return bad(format!("q0 has {} entries, model has {} joints", self.q0.len(), self.model.nq()));
        }
        if !self.weights.is_valid() || !self.gains.is_valid() {
            return bad("weights and gains must be finite and non-negative".into());
        }
        self.solver
            .validate()
            .map_err(|e| SimError::InvalidConfig(e.to_string()))
    }

    fn substeps(&self) -> usize {
        ((self.control_period / self.physics_dt).round() as usize).max(1)
    }
}

/// One control tick of an episode log.
#[derive(Debug, Clone, PartialEq)]
pub struct TickRecord {
    pub t: f64,
    pub q: DVector<f64>,
    pub v: DVector<f64>,
    pub tau: DVector<f64>,
    pub p: Vector3<f64>,
    pub p_des: Vector3<f64>,
    pub error: f64,
    /// Solve time of the MPC cycle started at this tick, zero otherwise.
    pub solve_time: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub ticks: usize,
    pub solves: usize,
    /// Mean end-effector position error, m.
    pub avg_error: f64,
    pub max_error: f64,
    /// Accumulated running cost along the realized closed-loop trajectory.
    pub cost: f64,
    pub mean_solve_time: f64,
    pub mean_iterations: f64,
    pub realtime_violations: usize,
    pub saturated_ticks: usize,
    pub failed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
    #[serde(skip)]
    pub log: Vec<TickRecord>,
}

impl EpisodeMetrics {
    fn empty() -> Self {
        Self {
            ticks: 0,
            solves: 0,
            avg_error: 0.0,
            max_error: 0.0,
            cost: 0.0,
            mean_solve_time: 0.0,
            mean_iterations: 0.0,
            realtime_violations: 0,
            saturated_ticks: 0,
            failed: false,
            failure: None,
            log: Vec::new(),
        }
    }
}

struct Cycle {
    snapshot: MpcSnapshot,
    solve_time: f64,
    iterations: usize,
}

fn mpc_cycle(
    config: &EpisodeConfig,
    t: f64,
    x: &DVector<f64>,
    previous: Option<&DdpSolution>,
) -> Result<Cycle, String> {
    let refs = trajectory_to_ocp_references(&config.shape, t, config.horizon, config.dt_ocp);
    let problem = OcpProblem::new(&config.model, config.horizon, config.dt_ocp, refs, config.weights)
        .map_err(|e| e.to_string())?
        .with_derivative_mode(config.derivatives);
    let warm = if config.warm_start { previous } else { None };
    let start = Instant::now();
    let solution = solve(&problem, x, warm, &config.solver).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed().as_secs_f64();
    let solve_time = match config.timing {
        SolveTiming::WallClock => elapsed,
        SolveTiming::Deterministic { per_iteration } => solution.iterations as f64 * per_iteration,
    };
    Ok(Cycle {
        iterations: solution.iterations,
        snapshot: MpcSnapshot {
            solution: Arc::new(solution),
            t_solution: t,
            dt: config.dt_ocp,
        },
        solve_time,
    })
}

/// Runs one closed-loop episode. Deterministic for a fixed configuration
/// when solve timing is deterministic.
pub fn run_episode(config: &EpisodeConfig) -> Result<EpisodeMetrics, SimError> {
    config.validate()?;
    let mut metrics = EpisodeMetrics::empty();
    let ticks = (config.duration / config.control_period + 1e-9).floor() as usize;
    let substeps = config.substeps();
    let h = config.control_period / substeps as f64;
    let model = &config.model;
    let cost_problem = OcpProblem::new(
        model,
        1,
        config.dt_ocp,
        trajectory_to_ocp_references(&config.shape, 0.0, 1, config.dt_ocp),
        config.weights,
    )
    .map_err(|e| SimError::InvalidConfig(e.to_string()))?;

    let mut state = JointState::at_rest(config.q0.clone());
    let mut snapshot: Option<MpcSnapshot> = None;
    let mut next_solve = 0.0;
    let mut error_sum = 0.0;
    let mut solve_time_sum = 0.0;
    let mut iteration_sum = 0usize;

    for tick in 0..ticks {
        let t = tick as f64 * config.control_period;
        let mut tick_solve = (0.0, 0);
        if t + 1e-12 >= next_solve {
            let previous = snapshot.as_ref().map(|s| s.solution.as_ref());
            match mpc_cycle(config, t, &state.to_x(), previous) {
                Ok(cycle) => {
                    metrics.solves += 1;
                    solve_time_sum += cycle.solve_time;
                    iteration_sum += cycle.iterations;
                    if cycle.solve_time > config.mpc_period {
                        metrics.realtime_violations += 1;
                    }
                    tick_solve = (cycle.solve_time, cycle.iterations);
                    snapshot = Some(cycle.snapshot);
                }
                Err(e) => {
                    metrics.failed = true;
                    metrics.failure = Some(format!("solver failed at t={t:.4}: {e}"));
                    break;
                }
            }
            next_solve += config.mpc_period;
        }

        let reference = config
            .shape
            .sample(t.min(config.shape.duration()))
            .expect("clamped time is in range");
        let p = forward_kinematics(model, &state.q).expect("state dimension fixed").p;
        let error = (p - reference.p_des).norm();

        let snap = snapshot.as_ref().expect("a solve happens on the first tick");
        let command = match control_tick(t, snap, &state, model, &config.gains, config.feedforward) {
            Ok(c) => c,
            Err(_) => {
                metrics.realtime_violations += 1;
                hold_gravity(model, &state)
            }
        };
        if command.saturated.iter().any(|s| *s) {
            metrics.saturated_ticks += 1;
        }

        metrics.ticks += 1;
        error_sum += error;
        metrics.max_error = metrics.max_error.max(error);
        metrics.cost +=
            cost_problem.cost_with_reference(&reference, &state.to_x(), &command.applied) * config.control_period;

        if config.record_log {
            metrics.log.push(TickRecord {
                t,
                q: state.q.clone(),
                v: state.v.clone(),
                tau: command.tau.clone(),
                p,
                p_des: reference.p_des,
                error,
                solve_time: tick_solve.0,
                iterations: tick_solve.1,
            });
        }

        // The robot adds g(q) back to τ, so the joints receive sat(ũ).
        let mut diverged = error > config.divergence_threshold || !error.is_finite();
        for _ in 0..substeps {
            match step(model, &state, &command.applied, h) {
                Ok(next) => state = next,
                Err(_) => {
                    diverged = true;
                    break;
                }
            }
        }
        if diverged {
            metrics.failed = true;
            metrics.failure = Some(format!("tracking diverged at t={t:.4}"));
            break;
        }
    }

    if metrics.ticks > 0 {
        metrics.avg_error = error_sum / metrics.ticks as f64;
    }
    if metrics.solves > 0 {
        metrics.mean_solve_time = solve_time_sum / metrics.solves as f64;
        metrics.mean_iterations = iteration_sum as f64 / metrics.solves as f64;
    }
    Ok(metrics)
}

fn hold_gravity(model: &RobotModel, state: &JointState) -> ControlCommand {
    let g = crate::dynamics::gravity_vector(model, &state.q).expect("state dimension fixed");
    ControlCommand {
        tau: DVector::zeros(g.len()),
        saturated: vec![false; g.len()],
        applied: g,
    }
}

/// Normalizers for the two objective terms, taken from a reference episode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Baseline {
    pub cost: f64,
    pub solve_time: f64,
}

impl Baseline {
    pub fn from_metrics(m: &EpisodeMetrics) -> Result<Self, SimError> {
        if m.failed {
            return Err(SimError::InvalidObjective("baseline episode failed".into()));
        }
        let b = Self {
            cost: m.cost,
            solve_time: m.mean_solve_time,
        };
        if !(b.cost > 0.0 && b.cost.is_finite() && b.solve_time > 0.0 && b.solve_time.is_finite()) {
            return Err(SimError::InvalidObjective(format!(
                "baseline terms must be finite and positive, got cost {} and solve time {}",
                b.cost, b.solve_time
            )));
        }
        Ok(b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub alpha: f64,
    /// Divide each term by its baseline value.
    pub normalize: bool,
    /// Failed episodes score this multiple of the baseline objective.
    pub failure_factor: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            alpha: 0.8,
            normalize: true,
            failure_factor: 10.0,
        }
    }
}

/// `J = α·𝓛 + (1 − α)·t_solve`, each term divided by its baseline value in
/// normalized mode.
pub fn objective(metrics: &EpisodeMetrics, config: &ObjectiveConfig, baseline: &Baseline) -> Result<f64, SimError> {
    let a = config.alpha;
    if !(0.0..=1.0).contains(&a) {
        return Err(SimError::InvalidObjective(format!("alpha must lie in [0, 1], got {a}")));
    }
    if !(baseline.cost > 0.0 && baseline.solve_time > 0.0 && baseline.cost.is_finite() && baseline.solve_time.is_finite()) {
        return Err(SimError::InvalidObjective("baseline terms must be finite and positive".into()));
    }
    let (cost_scale, time_scale) = if config.normalize {
        (baseline.cost, baseline.solve_time)
    } else {
        (1.0, 1.0)
    };
    let combine = |cost: f64, time: f64| a * cost / cost_scale + (1.0 - a) * time / time_scale;
    if metrics.failed {
        return Ok(config.failure_factor * combine(baseline.cost, baseline.solve_time));
    }
    if !(metrics.cost.is_finite() && metrics.mean_solve_time.is_finite()) {
        return Err(SimError::InvalidObjective("episode metrics are not finite".into()));
    }
    Ok(combine(metrics.cost, metrics.mean_solve_time))
}

/// Tunable parameters `[w_pos, w_rot, w_tau, w_v, K_p, K_d, K_pc, K_dc]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamVector(pub [f64; PARAM_DIM]);

impl ParamVector {
    pub fn pack(weights: &CostWeights, gains: &GainSet) -> Self {
        Self([
            weights.w_pos,
            weights.w_rot,
            weights.w_tau,
            weights.w_v,
            gains.k_p,
            gains.k_d,
            gains.k_pc.x,
            gains.k_pc.y,
            gains.k_pc.z,
            gains.k_dc.x,
            gains.k_dc.y,
            gains.k_dc.z,
        ])
    }

    /// Splits into cost weights and gains, taking the fixed limit weights from `base`.
    pub fn unpack(&self, base: &CostWeights) -> (CostWeights, GainSet) {
        let p = &self.0;
        (
            CostWeights {
                w_pos: p[0],
                w_rot: p[1],
                w_tau: p[2],
                w_v: p[3],
                ..*base
            },
            GainSet {
                k_p: p[4],
                k_d: p[5],
                k_pc: Vector3::new(p[6], p[7], p[8]),
                k_dc: Vector3::new(p[9], p[10], p[11]),
            },
        )
    }

    pub fn defaults() -> Self {
        Self::pack(&CostWeights::default(), &GainSet::default())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

impl TryFrom<&[f64]> for ParamVector {
    type Error = SimError;

    fn try_from(v: &[f64]) -> Result<Self, SimError> {
        let arr: [f64; PARAM_DIM] = v
            .try_into()
            .map_err(|_| SimError::InvalidConfig(format!("expected {PARAM_DIM} parameters, got {}", v.len())))?;
        Ok(Self(arr))
    }
}

/// Runs the episode for `theta` and scores it. Infeasible parameters and
/// failed episodes are scored with the failure penalty.
pub fn evaluate_params(
    theta: &ParamVector,
    base: &EpisodeConfig,
    objective_config: &ObjectiveConfig,
    baseline: &Baseline,
) -> Result<(f64, EpisodeMetrics), SimError> {
    let (weights, gains) = theta.unpack(&base.weights);
    let mut config = base.clone();
    config.weights = weights;
    config.gains = gains;
    let metrics = if weights.is_valid() && gains.is_valid() {
        run_episode(&config)?
    } else {
        EpisodeMetrics {
            failed: true,
            failure: Some("parameters outside the admissible set".into()),
            ..EpisodeMetrics::empty()
        }
    };
    let j = objective(&metrics, objective_config, baseline)?;
    Ok((j, metrics))
}

/// Writes the per-tick log as CSV.
pub fn write_episode_csv<W: Write>(log: &[TickRecord], mut out: W) -> std::io::Result<()> {
    let n = log.first().map_or(0, |r| r.q.len());
    let mut header = vec!["t".to_string()];
    for prefix in ["q", "v", "tau"] {
        header.extend((1..=n).map(|i| format!("{prefix}{i}")));
    }
    header.extend(
        ["px", "py", "pz", "px_des", "py_des", "pz_des", "err", "solve_time", "iters"]
            .iter()
            .map(|s| s.to_string()),
    );
    writeln!(out, "{}", header.join(","))?;
    for r in log {
        let mut row = vec![format!("{}", r.t)];
        for v in r.q.iter().chain(r.v.iter()).chain(r.tau.iter()) {
            row.push(format!("{v}"));
        }
        for v in r.p.iter().chain(r.p_des.iter()) {
            row.push(format!("{v}"));
        }
        row.push(format!("{}", r.error));
        row.push(format!("{}", r.solve_time));
        row.push(format!("{}", r.iterations));
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::bundled_model;

    fn short_hexagon(duration: f64) -> EpisodeConfig {
        let model = bundled_model("ur10e_approx").unwrap();
        let mut c = EpisodeConfig::hexagon(model, DVector::from_row_slice(&HOME_POSTURE), 0.1, 10.0).unwrap();
        c.duration = duration;
        c.timing = SolveTiming::Deterministic { per_iteration: 1e-4 };
        c
    }

    #[test]
    fn zero_duration_has_no_ticks() {
        let m = run_episode(&short_hexagon(0.0)).unwrap();
        assert_eq!(m.ticks, 0);
        assert_eq!(m.solves, 0);
        assert_eq!(m.avg_error, 0.0);
        assert!(!m.failed);
    }

    #[test]
    fn short_episode_tracks_and_is_deterministic() {
        let mut c = short_hexagon(0.1);
        c.record_log = true;
        let a = run_episode(&c).unwrap();
        let b = run_episode(&c).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.ticks, 50);
        assert_eq!(a.solves, 25);
        assert!(!a.failed);
        assert!(a.max_error >= a.avg_error && a.avg_error > 0.0);
        assert!(a.max_error < 0.01, "{}", a.max_error);
        assert_eq!(a.log.len(), 50);
    }

    #[test]
    fn rejects_inconsistent_periods() {
        let mut c = short_hexagon(0.1);
        c.control_period = 0.01;
        assert!(matches!(run_episode(&c), Err(SimError::InvalidConfig(_))));
        let mut c = short_hexagon(0.1);
        c.physics_dt = 0.003;
        assert!(run_episode(&c).is_err());
    }

    fn metrics(cost: f64, time: f64) -> EpisodeMetrics {
        EpisodeMetrics {
            cost,
            mean_solve_time: time,
            ..EpisodeMetrics::empty()
        }
    }

    #[test]
    fn objective_normalization() {
        let base = Baseline {
            cost: 3.0,
            solve_time: 0.002,
        };
        let cfg = ObjectiveConfig::default();
        let j = objective(&metrics(3.0, 0.002), &cfg, &base).unwrap();
        assert!((j - 1.0).abs() < 1e-15);
        let j = objective(&metrics(1.5, 0.002), &cfg, &base).unwrap();
        assert!((j - 0.6).abs() < 1e-12);
        let only_cost = ObjectiveConfig { alpha: 1.0, ..cfg };
        assert_eq!(
            objective(&metrics(1.5, 0.002), &only_cost, &base).unwrap(),
            objective(&metrics(1.5, 9.0), &only_cost, &base).unwrap()
        );
        let failed = EpisodeMetrics {
            failed: true,
            ..metrics(f64::NAN, f64::NAN)
        };
        assert!((objective(&failed, &cfg, &base).unwrap() - 10.0).abs() < 1e-12);
        assert!(objective(&metrics(1.0, 1.0), &ObjectiveConfig { alpha: 1.5, ..cfg }, &base).is_err());
        assert!(objective(&metrics(f64::INFINITY, 1.0), &cfg, &base).is_err());
    }

    #[test]
    fn param_vector_round_trip() {
        let theta = ParamVector([4.1e4, 2.3e-5, 3.7e-3, 7.9e-4, 28.7, 0.18, 7.8, 6.5, 89.2, 2.1, 1.8, 10.3]);
        let (w, g) = theta.unpack(&CostWeights::default());
        assert_eq!(ParamVector::pack(&w, &g), theta);
        assert_eq!(w.w_pos_terminal(), 4.1e4);
        assert_eq!(w.w_lim_tau, 10.0);
        assert_eq!(ParamVector::defaults().0[4..], [1.0; 8]);
    }

    #[test]
    fn csv_has_expected_columns() {
        let mut c = short_hexagon(0.01);
        c.record_log = true;
        let m = run_episode(&c).unwrap();
        let mut buf = Vec::new();
        write_episode_csv(&m.log, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let header = text.lines().next().unwrap();
        assert_eq!(header.split(',').count(), 1 + 18 + 9);
        assert!(header.starts_with("t,q1,"));
        assert!(header.ends_with("err,solve_time,iters"));
        assert_eq!(text.lines().count(), 1 + m.ticks);
    }
}
