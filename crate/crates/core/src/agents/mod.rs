//! Learners and the generic training loop.

mod a2c;
mod buffer;
mod dqn;
mod train;

pub use a2c::{gaussian_log_density, A2cAgent};
pub use buffer::{ReplayBuffer, StateBuffer, StateEntry, Transition};
pub use dqn::{argmax, DqnAgent};
pub use train::{
    entropy_converged, train, Convergence, ConvergenceCriterion, EpisodeRecord, PhaseOutcome,
    TrainContext, TrainError,
};

use crate::env::{Action, ActionSpace, Environment};
use crate::nn::NnError;
use crate::uncertainty::{q_to_probs, PolicyDistribution, PolicySource};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AgentConfig {
    pub epsilon_start: f64,
    pub epsilon_decay: f64,
    pub epsilon_min: f64,
    pub learning_rate: f64,
    pub gamma: f64,
    pub buffer_size: usize,
    pub batch_size: usize,
    pub hidden: Vec<usize>,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            epsilon_start: 1.0,
            epsilon_decay: 0.995,
            epsilon_min: 0.01,
            learning_rate: 0.005,
            gamma: 0.99,
            buffer_size: 40_000,
            batch_size: 16,
            hidden: vec![128, 128, 128],
        }
    }
}

/// A learner for either action space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Agent {
    Dqn(DqnAgent),
    A2c(A2cAgent),
}

impl Agent {
    /// DQN for discrete action spaces, actor-critic for continuous ones.
    pub fn for_env<R: Rng + ?Sized>(
        env: &Environment,
        config: AgentConfig,
        rng: &mut R,
    ) -> Result<Self, NnError> {
        let obs = env.observation_dim();
        match env.action_space() {
            ActionSpace::Discrete(n) => Ok(Agent::Dqn(DqnAgent::new(obs, n, config, rng)?)),
            ActionSpace::Continuous(d) => Ok(Agent::A2c(A2cAgent::new(obs, d, config, rng)?)),
        }
    }

    pub fn config(&self) -> &AgentConfig {
        match self {
            Agent::Dqn(a) => &a.config,
            Agent::A2c(a) => &a.config,
        }
    }

    pub fn epsilon(&self) -> f64 {
        match self {
            Agent::Dqn(a) => a.epsilon,
            Agent::A2c(a) => a.epsilon,
        }
    }

    pub fn set_epsilon(&mut self, eps: f64) {
        match self {
            Agent::Dqn(a) => a.epsilon = eps,
            Agent::A2c(a) => a.epsilon = eps,
        }
    }

    pub fn act<R: Rng + ?Sized>(&self, obs: &[f64], rng: &mut R) -> Result<Action, NnError> {
        match self {
            Agent::Dqn(a) => a.act(obs, rng),
            Agent::A2c(a) => a.act(obs, rng),
        }
    }

    /// One optimization step; returns the (critic) loss.
    pub fn update(&mut self, batch: &[&Transition]) -> Result<f64, NnError> {
        match self {
            Agent::Dqn(a) => a.update(batch),
            Agent::A2c(a) => a.update(batch).map(|(_, critic)| critic),
        }
    }

    pub fn end_episode(&mut self) {
        match self {
            Agent::Dqn(a) => a.end_episode(),
            Agent::A2c(a) => a.end_episode(),
        }
    }

    /// Greedy action: argmax-Q, or the actor mean.
    pub fn greedy(&self, obs: &[f64]) -> Result<Action, NnError> {
        match self {
            Agent::Dqn(a) => a.greedy(obs).map(Action::Discrete),
            Agent::A2c(a) => a.policy(obs).map(|(mean, _)| Action::Continuous(mean)),
        }
    }

    /// Hash of the learned parameters (Q-network, or actor then critic).
    pub fn params_hash(&self) -> String {
        match self {
            Agent::Dqn(a) => a.learned.params_hash(),
            Agent::A2c(a) => format!("{}{}", a.actor.params_hash(), a.critic.params_hash()),
        }
    }

    pub fn is_finite(&self) -> bool {
        match self {
            Agent::Dqn(a) => a.learned.is_finite(),
            Agent::A2c(a) => a.actor.is_finite() && a.critic.is_finite(),
        }
    }
}

impl PolicySource for Agent {
    fn outputs(&self, obs: &[f64]) -> Result<Vec<f64>, NnError> {
        match self {
            Agent::Dqn(a) => a.q_values(obs),
            Agent::A2c(a) => a.policy(obs).map(|(mut m, s)| {
                m.extend(s);
                m
            }),
        }
    }

    fn distribution(&self, obs: &[f64]) -> Result<PolicyDistribution, NnError> {
        match self {
            Agent::Dqn(a) => Ok(q_to_probs(&a.q_values(obs)?).expect("Q head is nonempty")),
            Agent::A2c(a) => a
                .policy(obs)
                .map(|(mean, std)| PolicyDistribution::gaussian(mean, std)),
        }
    }
}
