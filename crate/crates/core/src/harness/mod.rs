//! Seeded multi-run experiments: configuration, execution, CSV output and
//! figures.

pub mod config;
pub mod plot;
pub mod stats;
pub mod validate;

pub use config::{Algorithm, Domain, ExperimentConfig};

use crate::agents::{Agent, EpisodeRecord, ReplayBuffer, TrainContext};
use crate::baselines::{run_max_policy_change, run_random};
use crate::curriculum::{
    run_readc, train_final, CurriculumError, CurriculumPlan, RewardGoal, RunState, Scorer,
    SelectionAudit,
};
use crate::env::Environment;
use crate::regressor::{train_teacher, Regressor, RegressorError};
use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Environment variable holding the worker count.
pub const WORKERS_ENV: &str = "READC_WORKERS";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("missing {what} at {}: {msg}", path.display())]
    MissingArtifact { what: String, path: PathBuf, msg: String },
    #[error("{what} is required for {algorithm}; set it in the [{section}] table")]
    Unconfigured { what: String, algorithm: String, section: String },
    #[error("cannot write {}: {msg}", path.display())]
    Io { path: PathBuf, msg: String },
    #[error(transparent)]
    Regressor(#[from] RegressorError),
    #[error("malformed metrics file: {0}")]
    Metrics(String),
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> HarnessError + '_ {
    move |e| HarnessError::Io { path: path.to_path_buf(), msg: e.to_string() }
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> HarnessError + '_ {
    move |e| HarnessError::Io { path: path.to_path_buf(), msg: e.to_string() }
}

/// Teacher and regressor shared by every run of an experiment.
#[derive(Default)]
pub struct Artifacts {
    pub teacher: Option<Agent>,
    pub regressor: Option<Regressor>,
}

pub fn save_agent(agent: &Agent, path: &Path) -> Result<(), HarnessError> {
    let text = serde_json::to_string(agent).expect("agents serialize");
    std::fs::write(path, text).map_err(io_err(path))
}

pub fn load_agent(path: &Path) -> Result<Agent, HarnessError> {
    let missing = |msg: String| HarnessError::MissingArtifact {
        what: "teacher model".into(),
        path: path.to_path_buf(),
        msg,
    };
    let text = std::fs::read_to_string(path).map_err(|e| missing(e.to_string()))?;
    serde_json::from_str(&text).map_err(|e| missing(e.to_string()))
}

/// Loads or trains whatever the configured algorithms need.
pub fn prepare_artifacts(config: &ExperimentConfig) -> Result<Artifacts, HarnessError> {
    let algos = &config.experiment.algorithms;
    let mut out = Artifacts::default();
    if algos.contains(&Algorithm::ReadcSa) {
        let Some(p) = &config.regressor.path else {
            return Err(HarnessError::Unconfigured {
                what: "an uncertainty regressor model".into(),
                algorithm: Algorithm::ReadcSa.name().into(),
                section: "regressor".into(),
            });
        };
        let path = config.resolve(p);
        if !path.exists() {
            return Err(HarnessError::MissingArtifact {
                what: "uncertainty regressor model".into(),
                path,
                msg: "file not found; create it with `readc train-regressor`".into(),
            });
        }
        out.regressor = Some(Regressor::load(&path)?);
    }
    if algos.contains(&Algorithm::ReadcTd) {
        out.teacher = Some(match &config.teacher.path {
            Some(p) => load_agent(&config.resolve(p))?,
            None => {
                let mut env = config.environment()?;
                let threshold = config.threshold(&env);
                info!("training teacher to return {threshold} over {} episodes", config.experiment.window);
                let mut rng = ChaCha8Rng::seed_from_u64(config.teacher.seed);
                train_teacher(
                    &mut env,
                    &config.agent,
                    threshold,
                    config.experiment.window,
                    config.teacher.budget,
                    &mut rng,
                )?
            }
        });
    }
    Ok(out)
}

/// Outcome of one (seed, algorithm) run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub run_id: usize,
    pub seed: u64,
    pub algorithm: Algorithm,
    pub init_hash: String,
    /// `ok`, or the error that ended the run.
    pub status: String,
    pub overhead_steps: u64,
    pub log: Vec<EpisodeRecord>,
    pub audits: Vec<SelectionAudit>,
    /// Offset step at which the convergence window completed.
    pub steps_to_convergence: Option<u64>,
    pub asymptotic_return: f64,
}

impl RunResult {
    pub fn failed(&self) -> bool {
        self.status != "ok"
    }
}

/// First offset step at which `window` consecutive target episodes each
/// returned at least `threshold`. Episodes from other starts are skipped.
pub fn convergence_step(
    log: &[EpisodeRecord],
    window: usize,
    threshold: f64,
    overhead: u64,
) -> Option<u64> {
    let mut run = 0;
    for rec in log.iter().filter(|r| r.on_target) {
        if rec.ret >= threshold {
            run += 1;
            if run >= window {
                return Some(rec.global_step + overhead);
            }
        } else {
            run = 0;
        }
    }
    None
}

/// Mean return of the last `n` target episodes.
pub fn asymptotic_return(log: &[EpisodeRecord], n: usize) -> f64 {
    let tail: Vec<f64> = log.iter().filter(|r| r.on_target).map(|r| r.ret).collect();
    let start = tail.len().saturating_sub(n);
    stats::mean(&tail[start..])
}

/// Network weights every algorithm starts from for `seed`.
pub fn initial_agent(env: &Environment, config: &ExperimentConfig, seed: u64) -> Agent {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Agent::for_env(env, config.agent.clone(), &mut rng).expect("validated layer sizes")
}

/// Executes one run. Errors inside training are captured in `status`.
pub fn run_one(
    config: &ExperimentConfig,
    env: &Environment,
    artifacts: &Artifacts,
    run_id: usize,
    seed: u64,
    algorithm: Algorithm,
) -> RunResult {
    let mut agent = initial_agent(env, config, seed);
    let init_hash = agent.params_hash();
    let mut env = env.clone();
    let mut replay = ReplayBuffer::new(config.agent.buffer_size);
    let mut ctx = TrainContext::new(config.experiment.budget);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let threshold = config.threshold(&env);
    let goal = RewardGoal {
        threshold,
        window: config.experiment.window,
        continue_to_budget: true,
    };
    let mut run = RunState {
        agent: &mut agent,
        env: &mut env,
        replay: &mut replay,
        ctx: &mut ctx,
        rng: &mut rng,
    };
    let outcome: Result<CurriculumPlan, CurriculumError> = match algorithm {
        Algorithm::None => train_final(&mut run, goal).map(|p| CurriculumPlan {
            final_phase: Some(p),
            ..CurriculumPlan::default()
        }),
        Algorithm::ReadcTd => match &artifacts.teacher {
            Some(t) => run_readc(&mut run, &config.curriculum, Scorer::Teacher(t), goal),
            None => Err(CurriculumError::MissingTeacher),
        },
        Algorithm::ReadcSa => match &artifacts.regressor {
            Some(r) => run_readc(&mut run, &config.curriculum, Scorer::Regressor(r), goal),
            None => Err(CurriculumError::MissingRegressor),
        },
        Algorithm::Random => run_random(&mut run, &config.baselines, goal),
        Algorithm::MaxPolicyChange => run_max_policy_change(&mut run, &config.baselines, goal),
    };
    let (status, overhead, audits) = match outcome {
        Ok(plan) => ("ok".to_string(), plan.overhead_steps, plan.audits),
        Err(e) => {
            warn!("run {run_id} ({}, seed {seed}) failed: {e}", algorithm.name());
            (format!("failed: {e}"), 0, Vec::new())
        }
    };
    let log = std::mem::take(&mut ctx.log);
    RunResult {
        run_id,
        seed,
        algorithm,
        init_hash,
        status,
        overhead_steps: overhead,
        steps_to_convergence: convergence_step(&log, config.experiment.window, threshold, overhead),
        asymptotic_return: asymptotic_return(&log, config.experiment.asymptote_episodes),
        audits,
        log,
    }
}

fn worker_count() -> usize {
    std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n: &usize| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Runs every seed for every algorithm, ordered seed-major.
pub fn run_all(config: &ExperimentConfig, artifacts: &Artifacts) -> Result<Vec<RunResult>, HarnessError> {
    config.validate()?;
    let env = config.environment()?;
    let jobs: Vec<(usize, u64, Algorithm)> = config
        .seeds()
        .into_iter()
        .flat_map(|s| config.experiment.algorithms.iter().map(move |&a| (s, a)))
        .enumerate()
        .map(|(i, (s, a))| (i, s, a))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(worker_count())
        .build()
        .map_err(|e| HarnessError::Config(e.to_string()))?;
    let mut results: Vec<RunResult> = pool.install(|| {
        jobs.par_iter()
            .map(|&(id, seed, algo)| {
                info!("run {id}: {} seed {seed}", algo.name());
                run_one(config, &env, artifacts, id, seed, algo)
            })
            .collect()
    });
    results.sort_by_key(|r| r.run_id);
    Ok(results)
}

/// One row of the per-episode metrics file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub run_id: usize,
    pub seed: u64,
    pub algorithm: String,
    /// Step count including curriculum-generation overhead.
    pub global_step: u64,
    pub episode: u64,
    pub phase: String,
    #[serde(rename = "return")]
    pub ret: f64,
    pub on_target: bool,
    pub converged: bool,
    pub steps_to_convergence: Option<u64>,
}

pub fn metrics_rows(results: &[RunResult]) -> Vec<MetricsRow> {
    results
        .iter()
        .flat_map(|r| {
            r.log.iter().map(move |e| MetricsRow {
                run_id: r.run_id,
                seed: r.seed,
                algorithm: r.algorithm.name().into(),
                global_step: e.global_step + r.overhead_steps,
                episode: e.episode,
                phase: e.phase.clone(),
                ret: e.ret,
                on_target: e.on_target,
                converged: r.steps_to_convergence.is_some(),
                steps_to_convergence: r.steps_to_convergence,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub algorithm: String,
    /// Upper edge of the step bucket.
    pub step: u64,
    pub runs: usize,
    pub mean_return: f64,
    pub ci95: f64,
}

/// Mean target-episode return per step bucket across runs, with a 95%
/// interval over the per-run bucket means.
pub fn summarize_curves(rows: &[MetricsRow], bucket: u64) -> Vec<SummaryRow> {
    // algorithm -> bucket -> run -> returns
    let mut acc: BTreeMap<&str, BTreeMap<u64, BTreeMap<usize, Vec<f64>>>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.on_target) {
        let b = r.global_step.div_ceil(bucket).max(1) * bucket;
        acc.entry(&r.algorithm)
            .or_default()
            .entry(b)
            .or_default()
            .entry(r.run_id)
            .or_default()
            .push(r.ret);
    }
    let mut out = Vec::new();
    for (algo, buckets) in acc {
        for (step, runs) in buckets {
            let means: Vec<f64> = runs.values().map(|v| stats::mean(v)).collect();
            out.push(SummaryRow {
                algorithm: algo.into(),
                step,
                runs: means.len(),
                mean_return: stats::mean(&means),
                ci95: stats::ci95_half_width(&means),
            });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub algorithm: String,
    pub runs: usize,
    pub failed: usize,
    pub converged: usize,
    /// Percentage of runs that converged.
    pub rate: f64,
    pub median_steps: Option<f64>,
    pub mean_steps: Option<f64>,
    pub mean_asymptotic_return: f64,
}

pub fn convergence_summary(results: &[RunResult]) -> Vec<ConvergenceRow> {
    let mut by_algo: BTreeMap<&str, Vec<&RunResult>> = BTreeMap::new();
    for r in results {
        by_algo.entry(r.algorithm.name()).or_default().push(r);
    }
    by_algo
        .into_iter()
        .map(|(algo, runs)| {
            let steps: Vec<f64> = runs
                .iter()
                .filter_map(|r| r.steps_to_convergence.map(|s| s as f64))
                .collect();
            let asym: Vec<f64> = runs
                .iter()
                .map(|r| r.asymptotic_return)
                .filter(|v| v.is_finite())
                .collect();
            ConvergenceRow {
                algorithm: algo.into(),
                runs: runs.len(),
                failed: runs.iter().filter(|r| r.failed()).count(),
                converged: steps.len(),
                rate: 100.0 * steps.len() as f64 / runs.len() as f64,
                median_steps: (!steps.is_empty()).then(|| stats::median(&steps)),
                mean_steps: (!steps.is_empty()).then(|| stats::mean(&steps)),
                mean_asymptotic_return: stats::mean(&asym),
            }
        })
        .collect()
}

#[derive(Debug, Serialize)]
struct RunRow<'a> {
    run_id: usize,
    seed: u64,
    algorithm: &'a str,
    init_hash: &'a str,
    status: &'a str,
    overhead_steps: u64,
    episodes: usize,
    final_step: u64,
    converged: bool,
    steps_to_convergence: Option<u64>,
    asymptotic_return: f64,
}

#[derive(Debug, Serialize)]
struct SelectionRow<'a> {
    run_id: usize,
    algorithm: &'a str,
    curriculum_step: usize,
    candidate_count: usize,
    chosen_state: &'a str,
    chosen_uncertainty: f64,
    max_uncertainty: f64,
    heuristic: &'a str,
    regions: usize,
    chosen_region: usize,
    fallback: bool,
}

fn write_csv<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    for row in rows {
        w.serialize(row).map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const CONVERGENCE_FILE: &str = "convergence.csv";
pub const RUNS_FILE: &str = "runs.csv";
pub const SELECTIONS_FILE: &str = "selections.csv";

/// Writes every CSV for `results` into `dir`.
pub fn write_results(
    dir: &Path,
    results: &[RunResult],
    bucket: u64,
) -> Result<Vec<PathBuf>, HarnessError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let rows = metrics_rows(results);
    let paths: Vec<PathBuf> = [METRICS_FILE, SUMMARY_FILE, CONVERGENCE_FILE, RUNS_FILE, SELECTIONS_FILE]
        .iter()
        .map(|f| dir.join(f))
        .collect();
    write_csv(&paths[0], &rows)?;
    write_csv(&paths[1], summarize_curves(&rows, bucket))?;
    write_csv(&paths[2], convergence_summary(results))?;
    write_csv(
        &paths[3],
        results.iter().map(|r| RunRow {
            run_id: r.run_id,
            seed: r.seed,
            algorithm: r.algorithm.name(),
            init_hash: &r.init_hash,
            status: &r.status,
            overhead_steps: r.overhead_steps,
            episodes: r.log.len(),
            final_step: r.log.last().map_or(0, |e| e.global_step) + r.overhead_steps,
            converged: r.steps_to_convergence.is_some(),
            steps_to_convergence: r.steps_to_convergence,
            asymptotic_return: r.asymptotic_return,
        }),
    )?;
    write_csv(
        &paths[4],
        results.iter().flat_map(|r| {
            r.audits.iter().map(move |a| SelectionRow {
                run_id: r.run_id,
                algorithm: r.algorithm.name(),
                curriculum_step: a.curriculum_step,
                candidate_count: a.candidate_count,
                chosen_state: &a.chosen_state,
                chosen_uncertainty: a.chosen_uncertainty,
                max_uncertainty: a.max_uncertainty,
                heuristic: &a.heuristic,
                regions: a.regions,
                chosen_region: a.chosen_region,
                fallback: a.fallback,
            })
        }),
    )?;
    Ok(paths)
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>, HarnessError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| HarnessError::MissingArtifact {
        what: "metrics file".into(),
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    r.deserialize()
        .collect::<Result<_, _>>()
        .map_err(|e| HarnessError::Metrics(e.to_string()))
}

/// Validates, prepares artifacts, runs, and writes results under the
/// configured output directory.
pub fn run_experiment(config: &ExperimentConfig) -> Result<(Vec<RunResult>, Vec<PathBuf>), HarnessError> {
    config.validate()?;
    let artifacts = prepare_artifacts(config)?;
    let results = run_all(config, &artifacts)?;
    let dir = config.resolve(&config.experiment.output);
    let paths = write_results(&dir, &results, config.experiment.bucket)?;
    std::fs::write(dir.join("config.toml"), config.to_toml()).map_err(io_err(&dir))?;
    Ok((results, paths))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(step: u64, ret: f64, on_target: bool) -> EpisodeRecord {
        EpisodeRecord {
            global_step: step,
            episode: 0,
            phase: "target".into(),
            ret,
            epsilon: 0.0,
            loss: 0.0,
            steps: 1,
            on_target,
            interrupted: false,
        }
    }

    fn small_config(algos: Vec<Algorithm>) -> ExperimentConfig {
        let mut c = ExperimentConfig::default();
        c.experiment.board = Some(PathBuf::from("b.txt"));
        c.base_dir = PathBuf::from(".");
        c.experiment.algorithms = algos;
        c.experiment.n_runs = 1;
        c.experiment.budget = 1_000;
        c.agent.hidden = vec![8, 8, 8];
        c
    }

    fn env() -> Environment {
        Environment::grid_from_text("S...\n.P..\n..K.\n...L\n").unwrap()
    }

    #[test]
    fn convergence_skips_other_starts() {
        let log = vec![
            rec(10, 5.0, true),
            rec(20, -1.0, false),
            rec(30, 5.0, true),
            rec(40, 0.0, true),
            rec(50, 5.0, true),
            rec(60, 5.0, true),
        ];
        assert_eq!(convergence_step(&log, 2, 5.0, 0), Some(30));
        assert_eq!(convergence_step(&log, 2, 5.0, 100), Some(130));
        assert_eq!(convergence_step(&log, 3, 5.0, 0), None);
        assert_eq!(asymptotic_return(&log, 2), 5.0);
    }

    #[test]
    fn single_run_produces_monotone_rows() {
        let c = small_config(vec![Algorithm::None]);
        let r = run_one(&c, &env(), &Artifacts::default(), 0, 3, Algorithm::None);
        assert_eq!(r.status, "ok");
        let rows = metrics_rows(&[r]);
        assert!(!rows.is_empty());
        assert!(rows.windows(2).all(|w| w[0].global_step <= w[1].global_step));
        assert!(rows.iter().all(|row| row.run_id == 0));
        let summary = summarize_curves(&rows, 100);
        assert!(summary.iter().all(|s| s.runs == 1 && s.ci95 == 0.0));
    }

    #[test]
    fn same_seed_same_initial_weights() {
        let c = small_config(vec![Algorithm::None, Algorithm::Random]);
        let a = run_one(&c, &env(), &Artifacts::default(), 0, 5, Algorithm::None);
        let b = run_one(&c, &env(), &Artifacts::default(), 1, 5, Algorithm::Random);
        assert_eq!(a.init_hash, b.init_hash);
        let other = run_one(&c, &env(), &Artifacts::default(), 2, 6, Algorithm::None);
        assert_ne!(a.init_hash, other.init_hash);
    }

    #[test]
    fn missing_teacher_is_recorded_as_failure() {
        let c = small_config(vec![Algorithm::ReadcTd]);
        let r = run_one(&c, &env(), &Artifacts::default(), 0, 1, Algorithm::ReadcTd);
        assert!(r.failed());
        let conv = convergence_summary(&[r]);
        assert_eq!(conv[0].failed, 1);
    }

    #[test]
    fn sa_without_model_names_the_artifact() {
        let c = small_config(vec![Algorithm::ReadcSa]);
        let err = prepare_artifacts(&c).err().unwrap().to_string();
        assert!(err.contains("regressor"), "{err}");
    }

    #[test]
    fn rate_is_a_percentage() {
        let base = RunResult {
            run_id: 0,
            seed: 0,
            algorithm: Algorithm::None,
            init_hash: String::new(),
            status: "ok".into(),
            overhead_steps: 0,
            log: Vec::new(),
            audits: Vec::new(),
            steps_to_convergence: None,
            asymptotic_return: 0.0,
        };
        let results: Vec<RunResult> = (0..10)
            .map(|i| RunResult {
                run_id: i,
                steps_to_convergence: (i < 3).then_some(100 * (i as u64 + 1)),
                ..base.clone()
            })
            .collect();
        let c = convergence_summary(&results);
        assert_eq!(c[0].rate, 30.0);
        assert_eq!(c[0].median_steps, Some(200.0));
    }

    #[test]
    fn summary_matches_recomputation() {
        let rows: Vec<MetricsRow> = (0..40u64)
            .map(|i| MetricsRow {
                run_id: (i % 4) as usize,
                seed: i % 4,
                algorithm: "none".into(),
                global_step: 25 * (i + 1),
                episode: i,
                phase: "target".into(),
                ret: (i * 7 % 13) as f64,
                on_target: true,
                converged: false,
                steps_to_convergence: None,
            })
            .collect();
        let summary = summarize_curves(&rows, 250);
        for s in &summary {
            let mut per_run = Vec::new();
            for run in 0..4 {
                let v: Vec<f64> = rows
                    .iter()
                    .filter(|r| r.run_id == run && r.global_step > s.step - 250 && r.global_step <= s.step)
                    .map(|r| r.ret)
                    .collect();
                if !v.is_empty() {
                    per_run.push(v.iter().sum::<f64>() / v.len() as f64);
                }
            }
            let m = per_run.iter().sum::<f64>() / per_run.len() as f64;
            assert_eq!(s.runs, per_run.len());
            assert!((s.mean_return - m).abs() < 1e-12);
        }
        assert_eq!(summary.len(), 4);
    }
}
