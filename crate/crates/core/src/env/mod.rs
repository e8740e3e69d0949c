//! Task domains: Key-Lock and Flags grids, and the Parking lot.
//!
//! Every domain exposes a mutable start state so curriculum steps can restart
//! episodes anywhere in the state space; dynamics, rewards and goals never change.

pub mod grid;
pub mod parking;

use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

pub use grid::{Cell, Direction, GridSpec, GridState, GridTask, GridWorld};
pub use parking::{ParkingEnv, ParkingSpec, ParkingState, Pose};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("invalid start state: {0}")]
    InvalidStart(String),
    #[error("invalid board: {0}")]
    InvalidSpec(String),
    #[error("board parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("step called on a finished episode")]
    EpisodeOver,
    #[error("action does not fit this environment's action space")]
    BadAction,
    #[error("state belongs to a different domain")]
    DomainMismatch,
    #[error("cannot read board file {path}: {msg}")]
    Io { path: String, msg: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Action {
    Discrete(usize),
    Continuous(Vec<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActionSpace {
    Discrete(usize),
    /// Box `[-1, 1]^n`.
    Continuous(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub observation: Vec<f64>,
    pub reward: f64,
    pub terminal: bool,
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum EnvState {
    Grid(GridState),
    Parking(ParkingState),
}

/// Hashable identity of an observation, used to deduplicate visited states.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct StateKey(pub Vec<i64>);

/// Lattice spacing used to key continuous observations.
pub const PARKING_KEY_LATTICE: f64 = 0.25;

#[derive(Debug, Clone)]
pub enum Environment {
    Grid(GridWorld),
    Parking(ParkingEnv),
}

impl Environment {
    pub fn grid_from_text(text: &str) -> Result<Self, EnvError> {
        Ok(Environment::Grid(GridWorld::new(GridSpec::parse(text)?)))
    }

    pub fn grid_from_file(path: &Path) -> Result<Self, EnvError> {
        let text = std::fs::read_to_string(path).map_err(|e| EnvError::Io {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        Self::grid_from_text(&text)
    }

    pub fn parking(spec: ParkingSpec) -> Self {
        Environment::Parking(ParkingEnv::new(spec))
    }

    pub fn observation_dim(&self) -> usize {
        match self {
            Environment::Grid(g) => g.observation_dim(),
            Environment::Parking(_) => ParkingEnv::OBSERVATION_DIM,
        }
    }

    pub fn action_space(&self) -> ActionSpace {
        match self {
            Environment::Grid(_) => ActionSpace::Discrete(4),
            Environment::Parking(_) => ActionSpace::Continuous(2),
        }
    }

    /// Replace the episode start state; `None` restores the domain default.
    pub fn set_start(&mut self, start: Option<EnvState>) -> Result<(), EnvError> {
        match (self, start) {
            (Environment::Grid(g), None) => g.set_start(None),
            (Environment::Grid(g), Some(EnvState::Grid(s))) => g.set_start(Some(s)),
            (Environment::Parking(p), None) => p.set_start(None),
            (Environment::Parking(p), Some(EnvState::Parking(s))) => p.set_start(Some(s)),
            _ => Err(EnvError::DomainMismatch),
        }
    }

    pub fn has_custom_start(&self) -> bool {
        match self {
            Environment::Grid(g) => g.start_state() != GridState::at(g.spec().default_start),
            Environment::Parking(p) => p.start_state().is_some(),
        }
    }

    /// Begin an episode at `start`, or at the configured start state.
    pub fn reset<R: Rng + ?Sized>(
        &mut self,
        start: Option<&EnvState>,
        rng: &mut R,
    ) -> Result<Vec<f64>, EnvError> {
        match (self, start) {
            (Environment::Grid(g), None) => g.reset(None),
            (Environment::Grid(g), Some(EnvState::Grid(s))) => g.reset(Some(s)),
            (Environment::Parking(p), None) => p.reset(None, rng),
            (Environment::Parking(p), Some(EnvState::Parking(s))) => p.reset(Some(s), rng),
            _ => Err(EnvError::DomainMismatch),
        }
    }

    pub fn step(&mut self, action: &Action) -> Result<StepResult, EnvError> {
        match self {
            Environment::Grid(g) => g.step(action),
            Environment::Parking(p) => p.step(action),
        }
    }

    pub fn state(&self) -> EnvState {
        match self {
            Environment::Grid(g) => EnvState::Grid(g.state().clone()),
            Environment::Parking(p) => EnvState::Parking(p.state().clone()),
        }
    }

    pub fn encode(&self, s: &EnvState) -> Result<Vec<f64>, EnvError> {
        match (self, s) {
            (Environment::Grid(g), EnvState::Grid(s)) => Ok(g.encode(s)),
            (Environment::Parking(p), EnvState::Parking(s)) => Ok(p.encode(s)),
            _ => Err(EnvError::DomainMismatch),
        }
    }

    pub fn positive_terminals(&self) -> Vec<EnvState> {
        match self {
            Environment::Grid(g) => g
                .positive_terminals()
                .into_iter()
                .map(EnvState::Grid)
                .collect(),
            Environment::Parking(p) => p
                .positive_terminals()
                .into_iter()
                .map(EnvState::Parking)
                .collect(),
        }
    }

    /// Planar position of the agent, used for proximity and distance heuristics.
    pub fn position(&self, s: &EnvState) -> Vec<f64> {
        match s {
            EnvState::Grid(g) => vec![g.agent.x as f64, g.agent.y as f64],
            EnvState::Parking(p) => vec![p.pose.x, p.pose.y],
        }
    }

    /// Dedup key for an observation: exact for grids, a 0.25 lattice for Parking.
    pub fn state_key(&self, obs: &[f64]) -> StateKey {
        match self {
            Environment::Grid(_) => StateKey(obs.iter().map(|v| v.round() as i64).collect()),
            Environment::Parking(_) => StateKey(
                obs.iter()
                    .map(|v| (v / PARKING_KEY_LATTICE).round() as i64)
                    .collect(),
            ),
        }
    }

    pub fn step_cap(&self) -> usize {
        match self {
            Environment::Grid(g) => g.spec().step_cap,
            Environment::Parking(p) => p.spec().step_cap,
        }
    }
}
