//! Experiment configuration, read from TOML with one table per concern.

use super::HarnessError;
use crate::agents::AgentConfig;
use crate::baselines::BaselineConfig;
use crate::curriculum::CurriculumConfig;
use crate::env::{Environment, GridState, ParkingSpec};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Domain {
    Keylock,
    Flags,
    Parking,
}

impl Domain {
    pub fn name(self) -> &'static str {
        match self {
            Domain::Keylock => "keylock",
            Domain::Flags => "flags",
            Domain::Parking => "parking",
        }
    }
}

impl std::str::FromStr for Domain {
    type Err = HarnessError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "keylock" => Ok(Domain::Keylock),
            "flags" => Ok(Domain::Flags),
            "parking" => Ok(Domain::Parking),
            _ => Err(HarnessError::Config(format!("unknown domain {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    ReadcTd,
    ReadcSa,
    Random,
    MaxPolicyChange,
    None,
}

impl Algorithm {
    pub const ALL: [Algorithm; 5] = [
        Algorithm::ReadcTd,
        Algorithm::ReadcSa,
        Algorithm::Random,
        Algorithm::MaxPolicyChange,
        Algorithm::None,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::ReadcTd => "readc-td",
            Algorithm::ReadcSa => "readc-sa",
            Algorithm::Random => "random",
            Algorithm::MaxPolicyChange => "max-policy-change",
            Algorithm::None => "none",
        }
    }
}

impl std::str::FromStr for Algorithm {
    type Err = HarnessError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| HarnessError::Config(format!("unknown algorithm {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParkingLayout {
    #[default]
    Target,
    Simple,
}

/// Reward thresholds for the 20x20 and 30x30 boards.
pub const LARGE_BOARD_THRESHOLDS: [(Domain, f64); 3] = [
    (Domain::Keylock, 900.0),
    (Domain::Flags, 84.0),
    (Domain::Parking, -15.0),
];
pub const PARKING_THRESHOLD: f64 = -20.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSection {
    pub domain: Domain,
    /// Board fixture for grid domains, relative to the config file.
    pub board: Option<PathBuf>,
    pub parking_layout: ParkingLayout,
    pub algorithms: Vec<Algorithm>,
    pub n_runs: usize,
    /// First seed; runs use `seed, seed + 1, ...` unless `seeds` is given.
    pub seed: u64,
    pub seeds: Vec<u64>,
    pub budget: u64,
    /// Return every episode of the convergence window must reach. Grid
    /// boards default to the optimal return minus `threshold_slack`.
    pub threshold: Option<f64>,
    pub threshold_slack: f64,
    pub window: usize,
    /// Trailing target episodes averaged into the asymptotic return.
    pub asymptote_episodes: usize,
    /// Step width of the summary curve.
    pub bucket: u64,
    pub output: PathBuf,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            domain: Domain::Keylock,
            board: None,
            parking_layout: ParkingLayout::Target,
            algorithms: vec![Algorithm::None],
            n_runs: 10,
            seed: 0,
            seeds: Vec::new(),
            budget: 60_000,
            threshold: None,
            threshold_slack: 40.0,
            window: 10,
            asymptote_episodes: 50,
            bucket: 1_000,
            output: PathBuf::from("results"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherSection {
    /// Saved teacher; trained on the fly when absent.
    pub path: Option<PathBuf>,
    pub budget: u64,
    pub seed: u64,
}

impl Default for TeacherSection {
    fn default() -> Self {
        Self {
            path: None,
            budget: 100_000,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegressorSection {
    pub path: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    pub agent: AgentConfig,
    pub curriculum: CurriculumConfig,
    pub baselines: BaselineConfig,
    pub teacher: TeacherSection,
    pub regressor: RegressorSection,
    /// Directory relative paths resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self, HarnessError> {
        let mut c: ExperimentConfig =
            toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        c.base_dir = base_dir.to_path_buf();
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::MissingArtifact {
            what: "config file".into(),
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        Self::from_toml(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn seeds(&self) -> Vec<u64> {
        let e = &self.experiment;
        if e.seeds.is_empty() {
            (0..e.n_runs as u64).map(|i| e.seed + i).collect()
        } else {
            e.seeds.clone()
        }
    }

    /// Checks every setting before anything runs.
    pub fn validate(&self) -> Result<(), HarnessError> {
        let e = &self.experiment;
        let bad = |m: String| Err(HarnessError::Config(m));
        if e.algorithms.is_empty() {
            return bad("no algorithms listed".into());
        }
        if e.seeds.is_empty() && e.n_runs == 0 {
            return bad("n_runs must be positive".into());
        }
        if !e.seeds.is_empty() && e.seeds.len() != e.n_runs {
            return bad(format!("{} seeds listed for {} runs", e.seeds.len(), e.n_runs));
        }
        if e.budget == 0 || e.window == 0 || e.bucket == 0 || e.asymptote_episodes == 0 {
            return bad("budget, window, bucket and asymptote_episodes must be positive".into());
        }
        if matches!(e.threshold, Some(t) if !t.is_finite()) || !e.threshold_slack.is_finite() {
            return bad("threshold must be finite".into());
        }
        let a = &self.agent;
        if !(0.0..=1.0).contains(&a.epsilon_start)
            || !(0.0..=1.0).contains(&a.epsilon_decay)
            || !(0.0..=1.0).contains(&a.epsilon_min)
        {
            return bad("epsilon settings must lie in [0, 1]".into());
        }
        if !(a.learning_rate > 0.0) || !(0.0..=1.0).contains(&a.gamma) {
            return bad("learning rate must be positive and gamma in [0, 1]".into());
        }
        if a.batch_size == 0 || a.buffer_size < a.batch_size || a.hidden.contains(&0) {
            return bad("buffer must hold a batch; batch and layer widths positive".into());
        }
        self.curriculum
            .validate()
            .map_err(|err| HarnessError::Config(err.to_string()))?;
        let b = &self.baselines;
        if b.random_step_steps == 0 || b.mpc_prior == 0 || b.mpc_per_task == 0 {
            return bad("baseline step counts must be positive".into());
        }
        match (e.domain, &e.board) {
            (Domain::Parking, Some(_)) => bad("parking takes parking_layout, not a board".into()),
            (Domain::Keylock | Domain::Flags, None) => bad("grid domains need a board".into()),
            _ => Ok(()),
        }
    }

    pub fn environment(&self) -> Result<Environment, HarnessError> {
        let e = &self.experiment;
        match (e.domain, &e.board) {
            (Domain::Parking, _) => Ok(Environment::parking(match e.parking_layout {
                ParkingLayout::Target => ParkingSpec::target(),
                ParkingLayout::Simple => ParkingSpec::simple(),
            })),
            (domain, Some(board)) => {
                let path = self.resolve(board);
                let env = Environment::grid_from_file(&path).map_err(|err| {
                    HarnessError::MissingArtifact {
                        what: "board fixture".into(),
                        path: path.clone(),
                        msg: err.to_string(),
                    }
                })?;
                let want_flags = domain == Domain::Flags;
                match &env {
                    Environment::Grid(g)
                        if (g.spec().task() == crate::env::GridTask::Flags) == want_flags =>
                    {
                        Ok(env)
                    }
                    _ => Err(HarnessError::Config(format!(
                        "board {} is not a {} board",
                        path.display(),
                        domain.name()
                    ))),
                }
            }
            (_, None) => Err(HarnessError::Config("grid domains need a board".into())),
        }
    }

    /// Convergence threshold for `env`.
    pub fn threshold(&self, env: &Environment) -> f64 {
        if let Some(t) = self.experiment.threshold {
            return t;
        }
        match env {
            Environment::Grid(g) => {
                let start = GridState::at(g.spec().default_start);
                g.optimal_return(&start) - self.experiment.threshold_slack
            }
            Environment::Parking(_) => PARKING_THRESHOLD,
        }
    }
}
