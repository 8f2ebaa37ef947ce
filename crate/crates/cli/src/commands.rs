use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use mpctune_bo::campaign::{best_so_far, read_journal, run_campaign, EpisodeEvaluator, Method};
use mpctune_core::sim::{run_episode, write_episode_csv, ParamVector};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::{preset, CliError, PRESETS};

pub const JOURNAL: &str = "journal.jsonl";
pub const REPORT: &str = "report.json";
pub const BEST_THETA: &str = "best_theta.json";
pub const SAMPLES: &str = "posterior_samples.json";
pub const TRACE: &str = "best_so_far.csv";
pub const MANIFEST: &str = "manifest.json";
pub const EPISODE_CSV: &str = "episode.csv";
pub const METRICS: &str = "metrics.json";

/// Written before any episode runs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<PathBuf>,
    pub config: RunConfig,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub versions: Vec<(String, String)>,
}

impl RunManifest {
    fn write(&self) -> Result<(), CliError> {
        fs::create_dir_all(&self.out_dir)?;
        let text = serde_json::to_string_pretty(self).map_err(|e| CliError::Runtime(e.to_string()))?;
        fs::write(self.out_dir.join(MANIFEST), text + "\n")?;
        Ok(())
    }
}

fn versions() -> Vec<(String, String)> {
    vec![
        ("mpctune".into(), env!("CARGO_PKG_VERSION").into()),
        ("journal_format".into(), "1".into()),
    ]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ThetaFile {
    pub names: Vec<String>,
    pub theta: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y: Option<f64>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

fn load_config(path: Option<&Path>) -> Result<(RunConfig, PathBuf), CliError> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok((RunConfig::default(), PathBuf::from("."))),
    }
}

#[derive(Debug, Clone, Default)]
pub struct TuneArgs {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub method: Option<Method>,
    pub out: PathBuf,
    pub workers: Option<usize>,
    pub deterministic_time: bool,
}

/// Runs a campaign into `out`, resuming from an existing journal there.
pub fn cmd_tune(args: &TuneArgs) -> Result<(), CliError> {
    let (mut config, base) = load_config(args.config.as_deref())?;
    if let Some(s) = args.seed {
        config.campaign.seed = s;
    }
    if let Some(m) = args.method {
        config.campaign.method = m;
    }
    if let Some(w) = args.workers {
        config.campaign.workers = w;
    }
    if args.deterministic_time {
        config.mpc.deterministic_time = true;
        config.campaign.timestamps = false;
    }
    config.campaign.validate().map_err(|e| CliError::Config(format!("campaign: {e}")))?;
    let space = config.space()?;
    let episode = config.episode(&base)?;

    RunManifest {
        command: "tune".into(),
        config_path: args.config.clone(),
        config: config.clone(),
        seed: config.campaign.seed,
        out_dir: args.out.clone(),
        versions: versions(),
    }
    .write()?;

    let evaluator = EpisodeEvaluator::with_default_baseline(episode, config.objective())
        .map_err(|e| CliError::Runtime(format!("baseline episode: {e}")))?;
    let outcome = run_campaign(&config.campaign, &space, &evaluator, Some(&args.out.join(JOURNAL)))
        .map_err(|e| CliError::Runtime(e.to_string()))?;

    let report = outcome.report(&config.campaign, &space, reference_y(&evaluator));
    write_json(&args.out.join(REPORT), &report)?;
    write_json(
        &args.out.join(BEST_THETA),
        &ThetaFile {
            names: space.dims().iter().map(|d| d.name.clone()).collect(),
            theta: outcome.best_theta.clone(),
            y: Some(outcome.best_y),
        },
    )?;
    if let Some(s) = &outcome.last_samples {
        write_json(&args.out.join(SAMPLES), s)?;
    }
    let mut trace = String::from("trial,best\n");
    for (i, b) in report.best_so_far.iter().enumerate() {
        trace.push_str(&format!("{i},{b}\n"));
    }
    fs::write(args.out.join(TRACE), trace)?;

    println!(
        "{} seed {}: best J = {:.6} at trial {} ({:+.1}% vs default), {} trials{}",
        config.campaign.method,
        config.campaign.seed,
        outcome.best_y,
        outcome.best_index,
        report.improvement_percent,
        report.trials,
        if outcome.stopped_early { ", stopped early" } else { "" }
    );
    Ok(())
}

/// J of the default parameters; exactly 1 when the objective is normalized.
fn reference_y(e: &EpisodeEvaluator) -> f64 {
    let o = &e.objective;
    if o.normalize {
        1.0
    } else {
        o.alpha * e.baseline.cost + (1.0 - o.alpha) * e.baseline.solve_time
    }
}

#[derive(Debug, Clone, Default)]
pub struct EvalArgs {
    pub config: Option<PathBuf>,
    pub preset: Option<String>,
    pub theta: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: PathBuf,
    pub deterministic_time: bool,
}

fn read_theta(path: &Path) -> Result<Vec<f64>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    if let Ok(v) = serde_json::from_str::<Vec<f64>>(&text) {
        return Ok(v);
    }
    serde_json::from_str::<ThetaFile>(&text)
        .map(|f| f.theta)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

/// Runs one logged episode for a preset or a θ file.
pub fn cmd_eval(args: &EvalArgs) -> Result<(), CliError> {
    let (mut config, base) = load_config(args.config.as_deref())?;
    if let Some(s) = args.seed {
        config.campaign.seed = s;
    }
    if args.deterministic_time {
        config.mpc.deterministic_time = true;
    }
    let (label, theta) = match (&args.preset, &args.theta) {
        (Some(_), Some(_)) => return Err(CliError::Config("give either --preset or --theta, not both".into())),
        (Some(p), None) => (
            p.clone(),
            preset(p)
                .ok_or_else(|| CliError::Config(format!("unknown preset `{p}` (one of {})", PRESETS.join(", "))))?
                .0
                .to_vec(),
        ),
        (None, Some(path)) => (path.display().to_string(), read_theta(path)?),
        (None, None) => ("default".into(), ParamVector::defaults().0.to_vec()),
    };
    let space = config.space()?;
    if theta.len() != space.len() {
        return Err(CliError::Config(format!("θ has {} values, expected {}", theta.len(), space.len())));
    }
    let outside = space.out_of_bounds(&theta);
    if !outside.is_empty() {
        return Err(CliError::Config(format!("θ outside the search space: {}", outside.join("; "))));
    }
    let theta = ParamVector::try_from(theta.as_slice()).map_err(|e| CliError::Config(e.to_string()))?;
    let mut episode = config.episode(&base)?;

    RunManifest {
        command: format!("eval {label}"),
        config_path: args.config.clone(),
        config: config.clone(),
        seed: config.campaign.seed,
        out_dir: args.out.clone(),
        versions: versions(),
    }
    .write()?;

    let (weights, gains) = theta.unpack(&episode.weights);
    episode.weights = weights;
    episode.gains = gains;
    episode.record_log = true;
    let m = run_episode(&episode).map_err(|e| CliError::Runtime(e.to_string()))?;
    let mut csv = Vec::new();
    write_episode_csv(&m.log, &mut csv)?;
    fs::write(args.out.join(EPISODE_CSV), csv)?;
    write_json(&args.out.join(METRICS), &m)?;

    println!(
        "{label}: avg error {:.3} mm, max error {:.3} mm, mean solve {:.3} ms, mean iterations {:.3}{}",
        m.avg_error * 1e3,
        m.max_error * 1e3,
        m.mean_solve_time * 1e3,
        m.mean_iterations,
        if m.failed {
            format!(" (failed: {})", m.failure.as_deref().unwrap_or("unknown"))
        } else {
            String::new()
        }
    );
    if m.failed {
        return Err(CliError::Runtime("episode failed".into()));
    }
    Ok(())
}

/// Best-so-far traces of two journals side by side. Rows run to the longer
/// journal; the shorter column is left empty past its end.
pub fn compare_csv(a: &[f64], b: &[f64]) -> String {
    let mut s = String::from("trial,a,b\n");
    let cell = |v: Option<&f64>| v.map_or(String::new(), |x| x.to_string());
    for i in 0..a.len().max(b.len()) {
        s.push_str(&format!("{i},{},{}\n", cell(a.get(i)), cell(b.get(i))));
    }
    s
}

pub fn cmd_compare(a: &Path, b: &Path, out: Option<&Path>) -> Result<(), CliError> {
    let load = |p: &Path| read_journal(p).map_err(|e| CliError::Config(e.to_string()));
    let (ra, rb) = (load(a)?, load(b)?);
    if ra.is_empty() || rb.is_empty() {
        return Err(CliError::Config("both journals need at least one trial".into()));
    }
    let (ta, tb) = (best_so_far(&ra), best_so_far(&rb));
    let csv = compare_csv(&ta, &tb);
    match out {
        Some(p) => fs::write(p, &csv)?,
        None => std::io::stdout().write_all(csv.as_bytes())?,
    }
    eprintln!(
        "a: {} trials, final best {:.6}\nb: {} trials, final best {:.6}",
        ra.len(),
        ta.last().unwrap(),
        rb.len(),
        tb.last().unwrap()
    );
    Ok(())
}
