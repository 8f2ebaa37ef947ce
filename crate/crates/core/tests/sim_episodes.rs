use mpctune_core::dynamics::bundled_model;
use mpctune_core::sim::{
    evaluate_params, run_episode, write_episode_csv, Baseline, EpisodeConfig, ObjectiveConfig, ParamVector,
    SolveTiming, HOME_POSTURE,
};
use nalgebra::DVector;

fn hexagon(duration: f64) -> EpisodeConfig {
    let model = bundled_model("ur10e_approx").unwrap();
    let mut c = EpisodeConfig::hexagon(model, DVector::from_row_slice(&HOME_POSTURE), 0.1, 10.0).unwrap();
    c.duration = duration;
    c.timing = SolveTiming::Deterministic { per_iteration: 1e-4 };
    c
}

#[test]
fn zero_duration_episode_is_empty() {
    let m = run_episode(&hexagon(0.0)).unwrap();
    assert_eq!(m.ticks, 0);
    assert_eq!(m.solves, 0);
    assert_eq!(m.avg_error, 0.0);
    assert_eq!(m.max_error, 0.0);
    assert!(!m.failed);
}

#[test]
fn identical_configs_give_identical_metrics() {
    let mut c = hexagon(0.4);
    c.record_log = true;
    let a = run_episode(&c).unwrap();
    let b = run_episode(&c).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    assert_eq!(a.log, b.log);
    assert_eq!(a.ticks, 200);
    assert_eq!(a.solves, 100);
    assert!(a.max_error >= a.avg_error && a.avg_error > 0.0);
}

#[test]
fn default_parameters_score_exactly_one() {
    let c = hexagon(0.5);
    let baseline = Baseline::from_metrics(&run_episode(&c).unwrap()).unwrap();
    let (j, m) = evaluate_params(&ParamVector::defaults(), &c, &ObjectiveConfig::default(), &baseline).unwrap();
    assert!(!m.failed);
    assert_eq!(j, 1.0);
}

#[test]
fn inadmissible_parameters_get_the_failure_penalty() {
    let c = hexagon(0.2);
    let baseline = Baseline::from_metrics(&run_episode(&c).unwrap()).unwrap();
    let mut theta = ParamVector::defaults();
    theta.0[4] = -1.0;
    let (j, m) = evaluate_params(&theta, &c, &ObjectiveConfig::default(), &baseline).unwrap();
    assert!(m.failed);
    assert!((j - 10.0).abs() < 1e-12);
}

// Full 10 s hexagon with defaults: the repository's baseline fixture.
#[test]
fn default_hexagon_baseline_and_tuned_direction() {
    let c = hexagon(10.0);
    let base = run_episode(&c).unwrap();
    assert!(!base.failed, "{:?}", base.failure);
    assert_eq!(base.ticks, 5000);
    assert_eq!(base.saturated_ticks, 0);
    let avg_mm = base.avg_error * 1e3;
    assert!((2.45..2.60).contains(&avg_mm), "avg error {avg_mm} mm");
    assert!(base.max_error * 1e3 < 6.0);

    let baseline = Baseline::from_metrics(&base).unwrap();
    let saasbo = ParamVector([4.1e4, 2.3e-5, 3.7e-3, 7.9e-4, 28.7, 0.18, 7.8, 6.5, 89.2, 2.1, 1.8, 10.3]);
    let (j, m) = evaluate_params(&saasbo, &c, &ObjectiveConfig::default(), &baseline).unwrap();
    assert!(!m.failed);
    assert!(j < 1.0, "J = {j}");
}

#[test]
fn episode_log_exports_as_csv() {
    let mut c = hexagon(0.02);
    c.record_log = true;
    let m = run_episode(&c).unwrap();
    let mut buf = Vec::new();
    write_episode_csv(&m.log, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut lines = text.lines();
    let header: Vec<_> = lines.next().unwrap().split(',').collect();
    assert_eq!(header.len(), 1 + 18 + 6 + 3);
    assert_eq!(header[0], "t");
    assert_eq!(*header.last().unwrap(), "iters");
    assert_eq!(lines.count(), 10);
}
