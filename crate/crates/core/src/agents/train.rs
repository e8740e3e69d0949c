//! The episode loop shared by every phase of every algorithm.

use super::{Agent, ReplayBuffer, StateBuffer, Transition};
use crate::env::{EnvError, Environment};
use crate::nn::NnError;
use rand::Rng;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("non-finite loss or parameters at global step {step}")]
    NonFinite { step: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Convergence {
    /// Exactly `n` environment steps.
    FixedSteps(u64),
    /// The probed relative entropy stopped setting new minima for `window`
    /// episodes, or `max_episodes` elapsed.
    EntropyNoReduction {
        window: usize,
        max_episodes: usize,
    },
    /// `window` consecutive episodes with return at least `threshold`.
    HighestReward { window: usize, threshold: f64 },
    /// Run until the global step budget is spent.
    UntilBudget,
}

/// A convergence rule plus the rolling history it needs.
#[derive(Debug, Clone)]
pub struct ConvergenceCriterion {
    kind: Convergence,
    trace: Vec<f64>,
    steps: u64,
    episodes: usize,
    streak: usize,
}

impl ConvergenceCriterion {
    pub fn new(kind: Convergence) -> Self {
        Self {
            kind,
            trace: Vec::new(),
            steps: 0,
            episodes: 0,
            streak: 0,
        }
    }

    pub fn kind(&self) -> &Convergence {
        &self.kind
    }

    /// Entropy values recorded so far (empty unless entropy-driven).
    pub fn trace(&self) -> &[f64] {
        &self.trace
    }

    fn needs_probe(&self) -> bool {
        matches!(self.kind, Convergence::EntropyNoReduction { .. })
    }

    fn step_limit_hit(&self) -> bool {
        matches!(self.kind, Convergence::FixedSteps(n) if self.steps >= n)
    }

    fn after_episode(&mut self, ret: f64, probe: Option<f64>) -> bool {
        self.episodes += 1;
        match self.kind {
            Convergence::FixedSteps(n) => self.steps >= n,
            Convergence::EntropyNoReduction {
                window,
                max_episodes,
            } => {
                if let Some(v) = probe {
                    self.trace.push(v);
                }
                entropy_converged(&self.trace, window) || self.episodes >= max_episodes
            }
            Convergence::HighestReward { window, threshold } => {
                self.streak = if ret >= threshold { self.streak + 1 } else { 0 };
                self.streak >= window
            }
            Convergence::UntilBudget => false,
        }
    }
}

/// True when the last `window - 1` entries never undercut the running minimum
/// of everything before them, i.e. the minimum is at least `window` entries old.
pub fn entropy_converged(trace: &[f64], window: usize) -> bool {
    if window == 0 || trace.len() < window {
        return false;
    }
    let split = trace.len() + 1 - window;
    let before = trace[..split].iter().copied().fold(f64::INFINITY, f64::min);
    let recent = trace[split..].iter().copied().fold(f64::INFINITY, f64::min);
    recent >= before
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpisodeRecord {
    /// Global step count at the end of the episode.
    pub global_step: u64,
    pub episode: u64,
    pub phase: String,
    #[serde(rename = "return")]
    pub ret: f64,
    pub epsilon: f64,
    pub loss: f64,
    pub steps: u64,
    /// Episode began at the target task's own start state.
    pub on_target: bool,
    /// Cut short by a step limit rather than by the environment.
    pub interrupted: bool,
}

/// Counters and the episode log shared across the phases of one run.
#[derive(Debug, Clone)]
pub struct TrainContext {
    pub global_step: u64,
    pub budget: u64,
    pub episodes: u64,
    pub updates: u64,
    pub phase: String,
    pub on_target: bool,
    pub log: Vec<EpisodeRecord>,
}

impl TrainContext {
    pub fn new(budget: u64) -> Self {
        Self {
            global_step: 0,
            budget,
            episodes: 0,
            updates: 0,
            phase: "target".into(),
            on_target: true,
            log: Vec::new(),
        }
    }

    pub fn exhausted(&self) -> bool {
        self.global_step >= self.budget
    }

    pub fn remaining(&self) -> u64 {
        self.budget.saturating_sub(self.global_step)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PhaseOutcome {
    pub converged: bool,
    pub budget_exhausted: bool,
    pub steps: u64,
    pub episodes: u64,
}

/// Episodic training until `criterion` holds or the context budget runs out.
///
/// Each environment step stores the transition, records the pre-action state
/// in `state_buffer` (when given) and performs one minibatch update once the
/// replay buffer holds a full batch. The target network syncs at episode end.
#[allow(clippy::too_many_arguments)]
pub fn train<R: Rng + ?Sized>(
    agent: &mut Agent,
    env: &mut Environment,
    replay: &mut ReplayBuffer,
    mut state_buffer: Option<&mut StateBuffer>,
    criterion: &mut ConvergenceCriterion,
    mut probe: Option<&mut dyn FnMut(&Agent) -> f64>,
    ctx: &mut TrainContext,
    rng: &mut R,
) -> Result<PhaseOutcome, TrainError> {
    let batch_size = agent.config().batch_size;
    let start_step = ctx.global_step;
    let start_episodes = ctx.episodes;
    if criterion.needs_probe() && criterion.trace.is_empty() {
        if let Some(p) = probe.as_mut() {
            criterion.trace.push(p(agent));
        }
    }
    let mut converged = false;
    while !converged && !ctx.exhausted() && !criterion.step_limit_hit() {
        let mut obs = env.reset(None, rng)?;
        let mut ret = 0.0;
        let mut loss_sum = 0.0;
        let mut loss_n = 0u64;
        let mut steps = 0u64;
        let mut finished = false;
        while !ctx.exhausted() && !criterion.step_limit_hit() {
            let state = env.state();
            let action = agent.act(&obs, rng)?;
            let result = env.step(&action)?;
            ret += result.reward;
            if let Some(sb) = state_buffer.as_deref_mut() {
                sb.record(env.state_key(&obs), &state, &obs);
            }
            replay.push(Transition {
                state: obs,
                action,
                reward: result.reward,
                terminal: result.terminal,
                next_state: result.observation.clone(),
            });
            if replay.len() >= batch_size {
                let batch = replay.sample(batch_size, rng);
                let loss = agent.update(&batch)?;
                if !loss.is_finite() {
                    return Err(TrainError::NonFinite {
                        step: ctx.global_step,
                    });
                }
                loss_sum += loss;
                loss_n += 1;
                ctx.updates += 1;
            }
            ctx.global_step += 1;
            criterion.steps += 1;
            steps += 1;
            obs = result.observation;
            if result.terminal || result.truncated {
                finished = true;
                break;
            }
        }
        if steps == 0 {
            break;
        }
        if !agent.is_finite() {
            return Err(TrainError::NonFinite {
                step: ctx.global_step,
            });
        }
        agent.end_episode();
        ctx.episodes += 1;
        ctx.log.push(EpisodeRecord {
            global_step: ctx.global_step,
            episode: ctx.episodes,
            phase: ctx.phase.clone(),
            ret,
            epsilon: agent.epsilon(),
            loss: if loss_n > 0 { loss_sum / loss_n as f64 } else { 0.0 },
            steps,
            on_target: ctx.on_target,
            interrupted: !finished,
        });
        let probed = match (criterion.needs_probe(), probe.as_mut()) {
            (true, Some(p)) => Some(p(agent)),
            _ => None,
        };
        converged = criterion.after_episode(ret, probed);
    }
    Ok(PhaseOutcome {
        converged,
        budget_exhausted: ctx.exhausted(),
        steps: ctx.global_step - start_step,
        episodes: ctx.episodes - start_episodes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::AgentConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn entropy_window_rules() {
        assert!(!entropy_converged(&[9.0, 8.0, 7.0, 6.0, 5.0, 4.0, 3.0, 2.0, 1.0, 0.5, 0.1], 10));
        let flat = [5.0, 4.0, 4.0, 4.0, 4.0, 4.0, 4.0, 4.0, 4.0, 4.0, 4.0];
        assert!(entropy_converged(&flat, 10));
        assert!(!entropy_converged(&[1.0; 9], 10));
        assert!(entropy_converged(&[1.0; 10], 10));
        // a late new minimum restarts the wait
        let mut late = vec![3.0; 12];
        late.push(2.0);
        assert!(!entropy_converged(&late, 10));
    }

    fn small_setup(board: &str) -> (Agent, Environment, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let env = Environment::grid_from_text(board).unwrap();
        let config = AgentConfig {
            hidden: vec![32, 32, 32],
            ..AgentConfig::default()
        };
        let agent = Agent::for_env(&env, config, &mut rng).unwrap();
        (agent, env, rng)
    }

    #[test]
    fn fixed_steps_consume_exactly_that_many() {
        let (mut agent, mut env, mut rng) = small_setup("S..\n...\n.KL\n");
        let mut rb = ReplayBuffer::new(1000);
        let mut sb = StateBuffer::new();
        let mut ctx = TrainContext::new(10_000);
        let mut crit = ConvergenceCriterion::new(Convergence::FixedSteps(100));
        let out = train(
            &mut agent, &mut env, &mut rb, Some(&mut sb), &mut crit, None, &mut ctx, &mut rng,
        )
        .unwrap();
        assert_eq!(out.steps, 100);
        assert_eq!(ctx.global_step, 100);
        assert_eq!(rb.len(), 100);
        // one update per step once a batch is available
        assert_eq!(ctx.updates, 100 - 15);
        assert!(sb.iter().all(|e| e.visits >= 1));
        assert_eq!(sb.iter().map(|e| e.visits).sum::<u64>(), 100);
    }

    #[test]
    fn budget_stops_training() {
        let (mut agent, mut env, mut rng) = small_setup("S..\n...\n.KL\n");
        let mut rb = ReplayBuffer::new(1000);
        let mut ctx = TrainContext::new(250);
        let mut crit = ConvergenceCriterion::new(Convergence::UntilBudget);
        let out = train(&mut agent, &mut env, &mut rb, None, &mut crit, None, &mut ctx, &mut rng)
            .unwrap();
        assert!(out.budget_exhausted);
        assert_eq!(ctx.global_step, 250);
        assert!(ctx.log.iter().all(|r| r.steps <= 100));
    }

    #[test]
    fn target_net_synced_at_episode_end() {
        let (mut agent, mut env, mut rng) = small_setup("S..\n...\n.KL\n");
        let mut rb = ReplayBuffer::new(1000);
        let mut ctx = TrainContext::new(10_000);
        let mut crit = ConvergenceCriterion::new(Convergence::FixedSteps(300));
        train(&mut agent, &mut env, &mut rb, None, &mut crit, None, &mut ctx, &mut rng).unwrap();
        match &agent {
            Agent::Dqn(d) => assert_eq!(d.learned, d.target),
            _ => unreachable!(),
        }
        // a single further update desynchronizes them until the next episode end
        if let Agent::Dqn(d) = &mut agent {
            let batch = rb.sample(16, &mut rng);
            d.update(&batch).unwrap();
            assert_ne!(d.learned, d.target);
        }
    }
}
