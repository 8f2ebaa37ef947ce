//! The tuning loop: Latin hypercube initialization followed by sequential
//! EI-driven trials, journaled as JSON lines so an interrupted campaign can
//! be resumed.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use mpctune_core::sim::{
    objective, run_episode, Baseline, EpisodeConfig, EpisodeMetrics, ObjectiveConfig, ParamVector, SimError,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::acquisition::{maximize_acquisition, AcquisitionConfig, Surrogate};
use crate::gp::TrialDataset;
use crate::nuts::NutsConfig;
use crate::saas::{sample_hyperparams, PosteriorSamples, SaasPrior};
use crate::space::{latin_hypercube_unit, ParamSpace};
use crate::vanilla::vanilla_fit;
use crate::BoError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Saasbo,
    Vanilla,
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "saasbo" => Ok(Self::Saasbo),
            "vanilla" => Ok(Self::Vanilla),
            other => Err(format!("unknown method `{other}` (expected saasbo or vanilla)")),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Saasbo => "saasbo",
            Self::Vanilla => "vanilla",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Init,
    Bo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CampaignConfig {
    pub n_init: usize,
    /// Total trial budget including the initial design.
    pub n_max: usize,
    /// Consecutive non-improving BO trials tolerated; the campaign stops on
    /// the first trial beyond that. `None` disables early stopping.
    pub patience: Option<usize>,
    /// Relative margin a trial must beat the incumbent by to count as improvement.
    pub improvement_tol: f64,
    pub seed: u64,
    pub method: Method,
    pub mcmc: NutsConfig,
    pub prior: SaasPrior,
    pub acquisition: AcquisitionConfig,
    /// Threads for the initial design; later trials are sequential.
    pub workers: usize,
    /// Record wall-clock timestamps in the journal.
    pub timestamps: bool,
}

impl Default for CampaignConfig {
    fn default() -> Self {
        Self {
            n_init: 100,
            n_max: 300,
            patience: Some(100),
            improvement_tol: 1e-6,
            seed: 0,
            method: Method::Saasbo,
            mcmc: NutsConfig::default(),
            prior: SaasPrior::default(),
            acquisition: AcquisitionConfig::default(),
            workers: 1,
            timestamps: true,
        }
    }
}

impl CampaignConfig {
    pub fn validate(&self) -> Result<(), BoError> {
        if self.n_init < 2 {
            return Err(BoError::InvalidConfig(format!("n_init must be at least 2, got {}", self.n_init)));
        }
        if self.n_max <= self.n_init {
            return Err(BoError::InvalidConfig(format!(
                "n_max ({}) must exceed n_init ({})",
                self.n_max, self.n_init
            )));
        }
        if !(self.improvement_tol >= 0.0) || self.workers == 0 {
            return Err(BoError::InvalidConfig("improvement_tol ≥ 0 and workers ≥ 1 required".into()));
        }
        self.mcmc.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub index: usize,
    pub theta: Vec<f64>,
    pub theta_unit: Vec<f64>,
    pub y: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<EpisodeMetrics>,
    pub phase: Phase,
    /// Seconds since the Unix epoch.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<f64>,
    /// Fraction of divergent NUTS transitions in the fit that proposed this trial.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub divergence_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub y: f64,
    pub metrics: Option<EpisodeMetrics>,
}

/// Objective oracle. Must not fail: bad parameters are scored, not raised.
pub trait Evaluator: Sync {
    fn evaluate(&self, theta: &[f64]) -> Evaluation;
}

impl<F: Fn(&[f64]) -> f64 + Sync> Evaluator for F {
    fn evaluate(&self, theta: &[f64]) -> Evaluation {
        Evaluation {
            y: self(theta),
            metrics: None,
        }
    }
}

/// Scores θ by a closed-loop episode of the digital twin.
pub struct EpisodeEvaluator {
    pub episode: EpisodeConfig,
    pub objective: ObjectiveConfig,
    pub baseline: Baseline,
    penalty: f64,
}

impl EpisodeEvaluator {
    pub fn new(episode: EpisodeConfig, objective_config: ObjectiveConfig, baseline: Baseline) -> Result<Self, BoError> {
        let failed = EpisodeMetrics {
            ticks: 0,
            solves: 0,
            avg_error: 0.0,
            max_error: 0.0,
            cost: 0.0,
            mean_solve_time: 0.0,
            mean_iterations: 0.0,
            realtime_violations: 0,
            saturated_ticks: 0,
            failed: true,
            failure: None,
            log: Vec::new(),
        };
        let penalty = objective(&failed, &objective_config, &baseline)?;
        Ok(Self {
            episode,
            objective: objective_config,
            baseline,
            penalty,
        })
    }

    /// Runs the default parameters once to obtain the normalizing baseline.
    pub fn with_default_baseline(episode: EpisodeConfig, objective_config: ObjectiveConfig) -> Result<Self, BoError> {
        let m = Self::default_episode(&episode)?;
        let baseline = Baseline::from_metrics(&m)?;
        Self::new(episode, objective_config, baseline)
    }

    pub fn default_episode(episode: &EpisodeConfig) -> Result<EpisodeMetrics, SimError> {
        let (weights, gains) = ParamVector::defaults().unpack(&episode.weights);
        let mut c = episode.clone();
        c.weights = weights;
        c.gains = gains;
        run_episode(&c)
    }
}

impl Evaluator for EpisodeEvaluator {
    fn evaluate(&self, theta: &[f64]) -> Evaluation {
        let scored = ParamVector::try_from(theta)
            .and_then(|p| mpctune_core::sim::evaluate_params(&p, &self.episode, &self.objective, &self.baseline));
        match scored {
            Ok((y, m)) if y.is_finite() => Evaluation { y, metrics: Some(m) },
            Ok((_, m)) => Evaluation {
                y: self.penalty,
                metrics: Some(m),
            },
            Err(e) => {
                log::warn!("episode evaluation failed: {e}");
                Evaluation {
                    y: self.penalty,
                    metrics: None,
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct CampaignOutcome {
    pub best_index: usize,
    pub best_theta: Vec<f64>,
    pub best_y: f64,
    pub records: Vec<TrialRecord>,
    pub stopped_early: bool,
    /// Hyperparameter draws of the last SAAS fit.
    pub last_samples: Option<PosteriorSamples>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignReport {
    pub method: Method,
    pub seed: u64,
    pub trials: usize,
    pub stopped_early: bool,
    pub best_index: usize,
    pub best_theta: Vec<f64>,
    pub best_y: f64,
    pub reference_y: f64,
    /// `100·(1 − best_y/reference_y)`.
    pub improvement_percent: f64,
    pub best_so_far: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lengthscale_medians: Option<Vec<(String, f64)>>,
}

impl CampaignOutcome {
    pub fn report(&self, config: &CampaignConfig, space: &ParamSpace, reference_y: f64) -> CampaignReport {
        CampaignReport {
            method: config.method,
            seed: config.seed,
            trials: self.records.len(),
            stopped_early: self.stopped_early,
            best_index: self.best_index,
            best_theta: self.best_theta.clone(),
            best_y: self.best_y,
            reference_y,
            improvement_percent: 100.0 * (1.0 - self.best_y / reference_y),
            best_so_far: best_so_far(&self.records),
            lengthscale_medians: self.last_samples.as_ref().map(|s| {
                space
                    .dims()
                    .iter()
                    .map(|d| d.name.clone())
                    .zip(s.median_lengthscales())
                    .collect()
            }),
        }
    }
}

/// Running minimum of `y` over trial order.
pub fn best_so_far(records: &[TrialRecord]) -> Vec<f64> {
    records
        .iter()
        .scan(f64::INFINITY, |best, r| {
            *best = best.min(r.y);
            Some(*best)
        })
        .collect()
}

/// Parses a journal. A truncated final line (no trailing newline) is dropped
/// with a warning; any other malformed line is an error.
pub fn read_journal(path: &Path) -> Result<Vec<TrialRecord>, BoError> {
    let text = std::fs::read_to_string(path)?;
    let complete = text.ends_with('\n');
    let lines: Vec<&str> = text.lines().collect();
    let mut records = Vec::new();
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<TrialRecord>(line) {
            Ok(r) => records.push(r),
            Err(e) if i + 1 == lines.len() && !complete => {
                log::warn!("{}: dropping truncated last line: {e}", path.display());
            }
            Err(e) => return Err(BoError::Journal(format!("{}:{}: {e}", path.display(), i + 1))),
        }
    }
    for (i, r) in records.iter().enumerate() {
        if r.index != i {
            return Err(BoError::Journal(format!(
                "{}: record {} has index {}",
                path.display(),
                i + 1,
                r.index
            )));
        }
    }
    Ok(records)
}

fn write_record(out: &mut File, r: &TrialRecord) -> Result<(), BoError> {
    let line = serde_json::to_string(r).map_err(|e| BoError::Journal(e.to_string()))?;
    writeln!(out, "{line}")?;
    out.flush()?;
    Ok(())
}

fn trial_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_add(index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64())
}

fn evaluate_batch<E: Evaluator>(evaluator: &E, thetas: &[Vec<f64>], workers: usize) -> Vec<Evaluation> {
    if workers <= 1 || thetas.len() <= 1 {
        return thetas.iter().map(|t| evaluator.evaluate(t)).collect();
    }
    let chunk = thetas.len().div_ceil(workers);
    std::thread::scope(|scope| {
        let handles: Vec<_> = thetas
            .chunks(chunk)
            .map(|part| scope.spawn(move || part.iter().map(|t| evaluator.evaluate(t)).collect::<Vec<_>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("evaluation worker panicked"))
            .collect()
    })
}

/// Consecutive BO trials since the incumbent last improved.
fn stall_length(records: &[TrialRecord], tol: f64) -> usize {
    let mut best = f64::INFINITY;
    let mut stall = 0;
    for r in records {
        let improved = r.y < best - tol * best.abs();
        best = best.min(r.y);
        match r.phase {
            Phase::Init => stall = 0,
            Phase::Bo if improved => stall = 0,
            Phase::Bo => stall += 1,
        }
    }
    stall
}

/// Runs (or resumes, when `journal` already holds trials) a campaign and
/// returns the best trial. The initial design depends only on the seed, so
/// both methods share it.
pub fn run_campaign<E: Evaluator>(
    config: &CampaignConfig,
    space: &ParamSpace,
    evaluator: &E,
    journal: Option<&Path>,
) -> Result<CampaignOutcome, BoError> {
    config.validate()?;
    let dim = space.len();
    let design = latin_hypercube_unit(dim, config.n_init, &mut ChaCha8Rng::seed_from_u64(config.seed));

    let mut records = match journal {
        Some(p) if p.exists() => read_journal(p)?,
        _ => Vec::new(),
    };
    for r in &records {
        if r.theta_unit.len() != dim || r.theta.len() != dim {
            return Err(BoError::Journal(format!("trial {} has the wrong dimension", r.index)));
        }
        if r.index < config.n_init && r.theta_unit != design[r.index] {
            return Err(BoError::Journal(format!(
                "trial {} does not match the initial design for seed {}",
                r.index, config.seed
            )));
        }
    }
    records.truncate(config.n_max);
    let mut out = match journal {
        Some(p) => {
            // Rewrite so a dropped partial line does not linger.
            let mut f = OpenOptions::new().create(true).write(true).truncate(true).open(p)?;
            for r in &records {
                write_record(&mut f, r)?;
            }
            Some(f)
        }
        None => None,
    };
    let stamp = || config.timestamps.then(now);

    // Initial design, in batches so the journal order stays fixed.
    let mut next = records.len();
    while next < config.n_init {
        let end = (next + config.workers.max(1)).min(config.n_init);
        let thetas: Vec<Vec<f64>> = design[next..end].iter().map(|u| space.from_unit(u)).collect();
        for (k, ev) in evaluate_batch(evaluator, &thetas, config.workers).into_iter().enumerate() {
            let r = TrialRecord {
                index: next + k,
                theta: thetas[k].clone(),
                theta_unit: design[next + k].clone(),
                y: ev.y,
                metrics: ev.metrics,
                phase: Phase::Init,
                timestamp: stamp(),
                divergence_rate: None,
            };
            if let Some(f) = out.as_mut() {
                write_record(f, &r)?;
            }
            records.push(r);
        }
        next = end;
    }

    let mut stopped_early = false;
    let mut last_samples = None;
    while records.len() < config.n_max {
        if let Some(p) = config.patience {
            if stall_length(&records, config.improvement_tol) > p {
                stopped_early = true;
                break;
            }
        }
        let index = records.len();
        let seed = trial_seed(config.seed, index);
        let data = TrialDataset::new(
            records.iter().map(|r| r.theta_unit.clone()).collect(),
            records.iter().map(|r| r.y).collect(),
        )?;
        let (hypers, divergence_rate) = match config.method {
            Method::Saasbo => {
                let samples = sample_hyperparams(&data, &config.prior, &config.mcmc, seed)?;
                let rate = samples.diagnostics.divergences as f64 / config.mcmc.samples as f64;
                if rate > 0.2 {
                    log::warn!("trial {index}: {:.0}% divergent transitions in the hyperparameter chain", rate * 100.0);
                }
                let h = samples.hyperparams.clone();
                last_samples = Some(samples);
                (h, Some(rate))
            }
            Method::Vanilla => (vec![vanilla_fit(&data, seed)?], None),
        };
        let surrogate = Surrogate::fit(&data, &hypers)?;
        let u = maximize_acquisition(&surrogate, &config.acquisition, seed)?;
        let theta = space.from_unit(&u);
        let ev = evaluator.evaluate(&theta);
        let r = TrialRecord {
            index,
            theta,
            theta_unit: u,
            y: ev.y,
            metrics: ev.metrics,
            phase: Phase::Bo,
            timestamp: stamp(),
            divergence_rate,
        };
        log::info!("trial {index}: y = {:.6}", r.y);
        if let Some(f) = out.as_mut() {
            write_record(f, &r)?;
        }
        records.push(r);
    }

    let (best_index, best) = records
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.y.total_cmp(&b.1.y))
        .expect("at least n_init trials");
    Ok(CampaignOutcome {
        best_index,
        best_theta: best.theta.clone(),
        best_y: best.y,
        stopped_early,
        records,
        last_samples,
    })
}
