use super::{AgentConfig, Transition};
use crate::env::Action;
use crate::nn::{Adamax, Mlp, NnError};
use crate::uncertainty::SIGMA_FLOOR;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Log-density of a diagonal Gaussian at `a`.
pub fn gaussian_log_density(a: &[f64], mean: &[f64], std: &[f64]) -> f64 {
    a.iter()
        .zip(mean)
        .zip(std)
        .map(|((a, m), s)| {
            let z = (a - m) / s;
            -0.5 * z * z - s.ln() - 0.5 * LN_2PI
        })
        .sum()
}

/// Advantage actor-critic. The actor emits a mean vector and a raw scale
/// vector; the scale passes through softplus plus a floor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct A2cAgent {
    pub actor: Mlp,
    pub critic: Mlp,
    pub target_critic: Mlp,
    actor_opt: Adamax,
    critic_opt: Adamax,
    pub epsilon: f64,
    pub config: AgentConfig,
    action_dim: usize,
}

impl A2cAgent {
    pub fn new<R: Rng + ?Sized>(
        obs_dim: usize,
        action_dim: usize,
        config: AgentConfig,
        rng: &mut R,
    ) -> Result<Self, NnError> {
        let mut actor_sizes = vec![obs_dim];
        actor_sizes.extend(&config.hidden);
        let mut critic_sizes = actor_sizes.clone();
        actor_sizes.push(2 * action_dim);
        critic_sizes.push(1);
        let actor = Mlp::new(&actor_sizes, rng)?;
        let critic = Mlp::new(&critic_sizes, rng)?;
        Ok(Self::from_nets(actor, critic, config))
    }

    pub fn from_nets(actor: Mlp, critic: Mlp, config: AgentConfig) -> Self {
        let action_dim = actor.output_dim() / 2;
        Self {
            actor_opt: Adamax::new(actor.param_count()),
            critic_opt: Adamax::new(critic.param_count()),
            target_critic: critic.clone(),
            actor,
            critic,
            epsilon: config.epsilon_start,
            config,
            action_dim,
        }
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    /// Mean and standard deviation of the action distribution at `obs`.
    pub fn policy(&self, obs: &[f64]) -> Result<(Vec<f64>, Vec<f64>), NnError> {
        let out = self.actor.forward(obs)?;
        Ok(split_head(&out, self.action_dim))
    }

    pub fn value(&self, obs: &[f64]) -> Result<f64, NnError> {
        Ok(self.critic.forward(obs)?[0])
    }

    pub fn act<R: Rng + ?Sized>(&self, obs: &[f64], rng: &mut R) -> Result<Action, NnError> {
        if rng.random::<f64>() < self.epsilon {
            return Ok(Action::Continuous(
                (0..self.action_dim)
                    .map(|_| rng.random_range(-1.0..=1.0))
                    .collect(),
            ));
        }
        let (mean, std) = self.policy(obs)?;
        Ok(Action::Continuous(
            mean.iter()
                .zip(&std)
                .map(|(m, s)| {
                    let z: f64 = StandardNormal.sample(rng);
                    m + s * z
                })
                .collect(),
        ))
    }

    /// One critic step on `1/2 (r + gamma V(s') - V(s))^2` and one actor step on
    /// `-log pi(a|s) * advantage`, advantage held constant. Returns
    /// `(actor_loss, critic_loss)` as batch means.
    pub fn update(&mut self, batch: &[&Transition]) -> Result<(f64, f64), NnError> {
        let n = batch.len();
        if n == 0 {
            return Ok((0.0, 0.0));
        }
        let dim = self.critic.input_dim();
        let mut states = Vec::with_capacity(n * dim);
        let mut next_states = Vec::with_capacity(n * dim);
        for t in batch {
            states.extend_from_slice(&t.state);
            next_states.extend_from_slice(&t.next_state);
        }
        let gamma = self.config.gamma;
        let v_next = self.critic.forward_batch(&next_states, n)?;
        let v_next_target = self.target_critic.forward_batch(&next_states, n)?;
        let critic_cache = self.critic.forward_batch(&states, n)?;
        let v = critic_cache.output().to_vec();

        let mut critic_up = vec![0.0; n];
        let mut advantages = vec![0.0; n];
        let mut critic_loss = 0.0;
        for (i, t) in batch.iter().enumerate() {
            let live = if t.terminal { 0.0 } else { 1.0 };
            let y = t.reward + gamma * live * v_next.output()[i];
            let err = v[i] - y;
            critic_loss += 0.5 * err * err;
            critic_up[i] = err / n as f64;
            advantages[i] = t.reward + gamma * live * v_next_target.output()[i] - v[i];
        }
        let critic_grads = self.critic.backward_batch(&critic_cache, &critic_up)?;
        self.critic_opt
            .step(&mut self.critic, &critic_grads, self.config.learning_rate);

        let d = self.action_dim;
        let actor_cache = self.actor.forward_batch(&states, n)?;
        let out = actor_cache.output();
        let mut actor_up = vec![0.0; n * 2 * d];
        let mut actor_loss = 0.0;
        for (i, t) in batch.iter().enumerate() {
            let a = match &t.action {
                Action::Continuous(a) => a,
                Action::Discrete(_) => panic!("discrete action in an actor-critic batch"),
            };
            let row = &out[i * 2 * d..(i + 1) * 2 * d];
            let (mean, std) = split_head(row, d);
            let adv = advantages[i];
            actor_loss -= gaussian_log_density(a, &mean, &std) * adv;
            for j in 0..d {
                let diff = a[j] - mean[j];
                let s = std[j];
                // d(-log pi * adv)/d mean and /d std
                let d_mean = -adv * diff / (s * s);
                let d_std = -adv * (diff * diff / (s * s * s) - 1.0 / s);
                actor_up[i * 2 * d + j] = d_mean / n as f64;
                actor_up[i * 2 * d + d + j] = d_std * sigmoid(row[d + j]) / n as f64;
            }
        }
        let actor_grads = self.actor.backward_batch(&actor_cache, &actor_up)?;
        self.actor_opt
            .step(&mut self.actor, &actor_grads, self.config.learning_rate);
        Ok((actor_loss / n as f64, critic_loss / n as f64))
    }

    pub fn end_episode(&mut self) {
        self.target_critic = self.critic.clone();
        self.epsilon = (self.epsilon * self.config.epsilon_decay).max(self.config.epsilon_min);
    }
}

fn split_head(out: &[f64], d: usize) -> (Vec<f64>, Vec<f64>) {
    let mean = out[..d].to_vec();
    let std = out[d..2 * d]
        .iter()
        .map(|&raw| softplus(raw) + SIGMA_FLOOR)
        .collect();
    (mean, std)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Dense;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn standard_normal_log_density_at_mode() {
        let lp = gaussian_log_density(&[0.0], &[0.0], &[1.0]);
        assert!((lp + 0.9189385332).abs() < 1e-9);
        let lp2 = gaussian_log_density(&[0.0, 0.0], &[0.0, 0.0], &[1.0, 1.0]);
        assert!((lp2 - 2.0 * lp).abs() < 1e-15);
    }

    #[test]
    fn floored_sigma_samples_stay_near_mean() {
        // raw scale -50 gives softplus ~ 0, so std is the 1e-3 floor
        let actor = Mlp::from_layers(vec![Dense::new(
            1,
            4,
            vec![0.0; 4],
            vec![0.3, -0.2, -50.0, -50.0],
        )])
        .unwrap();
        let critic = Mlp::zeros(&[1, 1]).unwrap();
        let mut agent = A2cAgent::from_nets(actor, critic, AgentConfig::default());
        agent.epsilon = 0.0;
        let (mean, std) = agent.policy(&[1.0]).unwrap();
        assert!(std.iter().all(|&s| s >= SIGMA_FLOOR && s < 1.01e-3));
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let draws = 10_000;
        let mut inside = 0;
        for _ in 0..draws {
            if let Action::Continuous(a) = agent.act(&[1.0], &mut rng).unwrap() {
                assert!(a.iter().all(|v| v.is_finite()));
                if a.iter()
                    .zip(&mean)
                    .zip(&std)
                    .all(|((a, m), s)| (a - m).abs() <= 4.0 * s)
                {
                    inside += 1;
                }
            }
        }
        assert!(inside as f64 >= 0.999 * draws as f64 - 1.0, "{inside}");
    }

    #[test]
    fn zero_advantage_leaves_actor_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let actor = Mlp::new(&[2, 4, 4], &mut rng).unwrap();
        // critic V = 0 everywhere and reward 0 gives advantage 0
        let critic = Mlp::zeros(&[2, 1]).unwrap();
        let mut agent = A2cAgent::from_nets(actor, critic, AgentConfig::default());
        let before = agent.actor.clone();
        let t = Transition {
            state: vec![0.4, 0.1],
            action: Action::Continuous(vec![0.2, -0.3]),
            reward: 0.0,
            terminal: true,
            next_state: vec![0.0, 0.0],
        };
        let (actor_loss, critic_loss) = agent.update(&[&t]).unwrap();
        assert_eq!(actor_loss, 0.0);
        assert_eq!(critic_loss, 0.0);
        assert_eq!(agent.actor, before);
    }

    #[test]
    fn terminal_critic_at_reward_has_zero_loss() {
        let critic =
            Mlp::from_layers(vec![Dense::new(1, 1, vec![0.0], vec![7.5])]).unwrap();
        let actor = Mlp::zeros(&[1, 2]).unwrap();
        let mut agent = A2cAgent::from_nets(actor, critic, AgentConfig::default());
        let t = Transition {
            state: vec![1.0],
            action: Action::Continuous(vec![0.0]),
            reward: 7.5,
            terminal: true,
            next_state: vec![3.0],
        };
        let (_, critic_loss) = agent.update(&[&t]).unwrap();
        assert_eq!(critic_loss, 0.0);
    }

    #[test]
    fn actor_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let actor = Mlp::new(&[3, 5, 4], &mut rng).unwrap();
        let critic = Mlp::new(&[3, 5, 1], &mut rng).unwrap();
        let agent = A2cAgent::from_nets(actor, critic, AgentConfig::default());
        let obs = [0.3, -0.7, 1.1];
        let a = [0.5, -0.25];
        let adv = 1.7;
        let loss = |net: &Mlp| {
            let (m, s) = split_head(&net.forward(&obs).unwrap(), 2);
            -gaussian_log_density(&a, &m, &s) * adv
        };
        let out = agent.actor.forward(&obs).unwrap();
        let (mean, std) = split_head(&out, 2);
        let mut up = vec![0.0; 4];
        for j in 0..2 {
            let diff = a[j] - mean[j];
            up[j] = -adv * diff / (std[j] * std[j]);
            up[2 + j] = -adv * (diff * diff / std[j].powi(3) - 1.0 / std[j]) * sigmoid(out[2 + j]);
        }
        let grads = agent.actor.backward(&obs, &up).unwrap();
        let analytic: Vec<f64> = grads.iter().collect();
        let h = 1e-6;
        for idx in 0..agent.actor.param_count() {
            let mut plus = agent.actor.clone();
            *plus.params_mut().nth(idx).unwrap() += h;
            let mut minus = agent.actor.clone();
            *minus.params_mut().nth(idx).unwrap() -= h;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
            let tol = 1e-4 * fd.abs().max(analytic[idx].abs()).max(1e-3);
            assert!((fd - analytic[idx]).abs() <= tol, "param {idx}: {fd} vs {}", analytic[idx]);
        }
    }
}
