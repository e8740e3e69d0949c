use super::{AgentConfig, Transition};
use crate::env::Action;
use crate::nn::{Adamax, Mlp, NnError};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Deep Q-learner with a learned network and a target copy synced per episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DqnAgent {
    pub learned: Mlp,
    pub target: Mlp,
    optimizer: Adamax,
    pub epsilon: f64,
    pub config: AgentConfig,
    n_actions: usize,
}

impl DqnAgent {
    pub fn new<R: Rng + ?Sized>(
        obs_dim: usize,
        n_actions: usize,
        config: AgentConfig,
        rng: &mut R,
    ) -> Result<Self, NnError> {
        let mut sizes = vec![obs_dim];
        sizes.extend(&config.hidden);
        sizes.push(n_actions);
        let learned = Mlp::new(&sizes, rng)?;
        Ok(Self::from_net(learned, config))
    }

    pub fn from_net(learned: Mlp, config: AgentConfig) -> Self {
        let n_actions = learned.output_dim();
        Self {
            target: learned.clone(),
            optimizer: Adamax::new(learned.param_count()),
            learned,
            epsilon: config.epsilon_start,
            config,
            n_actions,
        }
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn optimizer(&self) -> &Adamax {
        &self.optimizer
    }

    pub fn q_values(&self, obs: &[f64]) -> Result<Vec<f64>, NnError> {
        self.learned.forward(obs)
    }

    pub fn greedy(&self, obs: &[f64]) -> Result<usize, NnError> {
        Ok(argmax(&self.q_values(obs)?))
    }

    pub fn act<R: Rng + ?Sized>(&self, obs: &[f64], rng: &mut R) -> Result<Action, NnError> {
        if rng.random::<f64>() < self.epsilon {
            Ok(Action::Discrete(rng.random_range(0..self.n_actions)))
        } else {
            Ok(Action::Discrete(self.greedy(obs)?))
        }
    }

    /// One Adamax step on the mean of `1/2 (y - Q(s, a))^2` over the batch,
    /// with `y = r + gamma * max_a' Q_target(s', a')` and `y = r` on terminals.
    pub fn update(&mut self, batch: &[&Transition]) -> Result<f64, NnError> {
        let n = batch.len();
        if n == 0 {
            return Ok(0.0);
        }
        let dim = self.learned.input_dim();
        let mut states = Vec::with_capacity(n * dim);
        let mut next_states = Vec::with_capacity(n * dim);
        for t in batch {
            states.extend_from_slice(&t.state);
            next_states.extend_from_slice(&t.next_state);
        }
        let next_q = self.target.forward_batch(&next_states, n)?;
        let cache = self.learned.forward_batch(&states, n)?;
        let q = cache.output();
        let a_dim = self.n_actions;
        let mut upstream = vec![0.0; n * a_dim];
        let mut loss = 0.0;
        for (i, t) in batch.iter().enumerate() {
            let action = match t.action {
                Action::Discrete(a) => a,
                Action::Continuous(_) => panic!("continuous action in a DQN batch"),
            };
            let bootstrap = if t.terminal {
                0.0
            } else {
                next_q.output()[i * a_dim..(i + 1) * a_dim]
                    .iter()
                    .copied()
                    .fold(f64::NEG_INFINITY, f64::max)
            };
            let y = t.reward + self.config.gamma * bootstrap;
            let err = q[i * a_dim + action] - y;
            loss += 0.5 * err * err;
            upstream[i * a_dim + action] = err / n as f64;
        }
        let grads = self.learned.backward_batch(&cache, &upstream)?;
        self.optimizer
            .step(&mut self.learned, &grads, self.config.learning_rate);
        Ok(loss / n as f64)
    }

    pub fn end_episode(&mut self) {
        self.target = self.learned.clone();
        self.epsilon = (self.epsilon * self.config.epsilon_decay).max(self.config.epsilon_min);
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}
