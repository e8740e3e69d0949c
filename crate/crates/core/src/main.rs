use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use readc::agents::AgentConfig;
use readc::env::{Environment, ParkingSpec};
use readc::harness::plot::{emit_plots, PlotOptions};
use readc::harness::validate::run_suite;
use readc::harness::{
    read_metrics, run_experiment, save_agent, load_agent, Algorithm, Domain, ExperimentConfig,
};
use readc::regressor::{
    build_training_set, fit_gbm, fit_linear, train_teacher, DatasetConfig, GbmParams, Regressor,
};
use std::path::{Path, PathBuf};

/// Relative-entropy start-state curricula: experiments, artifacts and figures.
#[derive(Parser)]
#[command(name = "readc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment described by a TOML config.
    Run {
        config: PathBuf,
        /// First seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Algorithms to run, comma separated.
        #[arg(long, value_delimiter = ',')]
        algo: Option<Vec<String>>,
        #[arg(long)]
        domain: Option<String>,
        #[arg(long)]
        budget: Option<u64>,
        #[arg(long)]
        runs: Option<usize>,
        /// Output directory, overriding the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a teacher until it meets the return threshold and save it.
    TrainTeacher {
        /// Grid board fixture; omit for parking.
        #[arg(long)]
        board: Option<PathBuf>,
        #[arg(long, default_value_t = false)]
        parking: bool,
        #[arg(long)]
        threshold: f64,
        #[arg(long, default_value_t = 10)]
        window: usize,
        #[arg(long, default_value_t = 100_000)]
        budget: u64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a dataset on a source board and fit the uncertainty regressor.
    TrainRegressor {
        #[arg(long)]
        board: Option<PathBuf>,
        #[arg(long, default_value_t = false)]
        parking: bool,
        /// Saved teacher for the source board; trained when absent.
        #[arg(long)]
        teacher: Option<PathBuf>,
        /// Return threshold for training a teacher.
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Fit the linear model instead of boosted trees.
        #[arg(long, default_value_t = false)]
        linear: bool,
        /// Also write the training rows as CSV.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Draw the return curve and convergence box plot from a metrics CSV.
    Plot {
        metrics: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1_000)]
        bucket: u64,
        /// Keep only the fastest-converging 80% of runs in the box plot.
        #[arg(long, default_value_t = false)]
        best_80: bool,
    },
    /// Check invariants on the shipped fixtures.
    Validate {
        #[arg(long, default_value = concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures"))]
        fixtures: PathBuf,
    },
}

fn source_env(board: &Option<PathBuf>, parking: bool) -> Result<Environment> {
    match (board, parking) {
        (Some(_), true) => bail!("give either --board or --parking, not both"),
        (Some(b), false) => Environment::grid_from_file(b)
            .with_context(|| format!("loading board {}", b.display())),
        (None, true) => Ok(Environment::parking(ParkingSpec::simple())),
        (None, false) => bail!("one of --board or --parking is required"),
    }
}

fn default_threshold(env: &Environment) -> f64 {
    ExperimentConfig::default().threshold(env)
}

fn run(
    config: &Path,
    seed: Option<u64>,
    algo: Option<Vec<String>>,
    domain: Option<String>,
    budget: Option<u64>,
    runs: Option<usize>,
    out: Option<PathBuf>,
) -> Result<()> {
    let mut c = ExperimentConfig::load(config)?;
    if let Some(s) = seed {
        c.experiment.seed = s;
        c.experiment.seeds.clear();
    }
    if let Some(list) = algo {
        c.experiment.algorithms = list
            .iter()
            .map(|a| a.parse::<Algorithm>())
            .collect::<Result<_, _>>()?;
    }
    if let Some(d) = domain {
        c.experiment.domain = d.parse()?;
        if c.experiment.domain == Domain::Parking {
            c.experiment.board = None;
        }
    }
    if let Some(b) = budget {
        c.experiment.budget = b;
    }
    if let Some(n) = runs {
        c.experiment.n_runs = n;
        c.experiment.seeds.clear();
    }
    if let Some(o) = out {
        c.experiment.output = std::env::current_dir()?.join(o);
    }
    let (results, paths) = run_experiment(&c)?;
    let failed = results.iter().filter(|r| r.failed()).count();
    for p in &paths {
        println!("{}", p.display());
    }
    println!("{} runs, {failed} failed", results.len());
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Run {
            config,
            seed,
            algo,
            domain,
            budget,
            runs,
            out,
        } => run(&config, seed, algo, domain, budget, runs, out)?,
        Command::TrainTeacher {
            board,
            parking,
            threshold,
            window,
            budget,
            seed,
            out,
        } => {
            let mut env = source_env(&board, parking)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let agent = train_teacher(&mut env, &AgentConfig::default(), threshold, window, budget, &mut rng)?;
            save_agent(&agent, &out)?;
            println!("{}", out.display());
        }
        Command::TrainRegressor {
            board,
            parking,
            teacher,
            threshold,
            seed,
            linear,
            dataset,
            out,
        } => {
            let mut env = source_env(&board, parking)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let dc = DatasetConfig::default();
            let teacher = match teacher {
                Some(p) => load_agent(&p)?,
                None => {
                    let t = threshold.unwrap_or_else(|| default_threshold(&env));
                    train_teacher(&mut env, &AgentConfig::default(), t, dc.teacher_window, dc.teacher_budget, &mut rng)?
                }
            };
            let data = build_training_set(&mut env, &teacher, &AgentConfig::default(), &dc, &mut rng)?;
            if let Some(p) = dataset {
                data.write_csv(&p)?;
            }
            let model = if linear {
                Regressor::Linear(fit_linear(&data)?)
            } else {
                Regressor::Gbm(fit_gbm(&data, GbmParams::default())?)
            };
            model.save(&out)?;
            println!("{} ({} rows)", out.display(), data.len());
        }
        Command::Plot {
            metrics,
            out,
            bucket,
            best_80,
        } => {
            let rows = read_metrics(&metrics)?;
            let dir = out.unwrap_or_else(|| metrics.parent().unwrap_or(Path::new(".")).to_path_buf());
            for p in emit_plots(&rows, &dir, PlotOptions { bucket, best_80 })? {
                println!("{}", p.display());
            }
        }
        Command::Validate { fixtures } => {
            let checks = run_suite(&fixtures);
            let mut failed = 0;
            for c in &checks {
                println!("{} {} {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
                failed += usize::from(!c.passed);
            }
            if failed > 0 {
                bail!("{failed} of {} checks failed", checks.len());
            }
        }
    }
    Ok(())
}
