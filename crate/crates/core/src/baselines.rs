//! Comparison strategies: random starts near the goal, and task sequencing by
//! the largest change in greedy policy.

use crate::agents::{
    train, Agent, Convergence, ConvergenceCriterion, StateBuffer, TrainContext,
};
use crate::curriculum::{train_final, CurriculumError, CurriculumPlan, PlanStep, RewardGoal, RunState};
use crate::env::{Action, Cell, EnvState, Environment, GridWorld, ParkingEnv, ParkingState, Pose};
use crate::uncertainty::argmax_score;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Number of generated source tasks.
pub const SOURCE_TASKS: usize = 15;
/// Continuous greedy actions count as changed above this max-norm difference.
pub const ACTION_CHANGE_TOLERANCE: f64 = 0.1;
/// Size of the fixed probe set for continuous domains.
pub const PARKING_PROBE_STATES: usize = 500;

/// Generation cost of the policy-change curriculum: the winning task's
/// training carries over and is not counted.
pub fn max_policy_change_overhead(n_steps: u64, prior: u64, n_tasks: u64, per_task: u64) -> u64 {
    if n_steps == 0 {
        return 0;
    }
    n_steps * (prior + n_tasks * per_task) - per_task
}

fn grid_near_goal(g: &GridWorld, radius: i32) -> Vec<EnvState> {
    let mut out = Vec::new();
    for t in g.positive_terminals() {
        for dy in -radius..=radius {
            for dx in -radius..=radius {
                let cell = Cell::new(t.agent.x + dx, t.agent.y + dy);
                let s = g.pre_terminal_at(&t, cell);
                if g.check_start(&s).is_ok() && !out.contains(&EnvState::Grid(s.clone())) {
                    out.push(EnvState::Grid(s));
                }
            }
        }
    }
    out
}

fn parking_near_goal<R: Rng + ?Sized>(p: &ParkingEnv, radius: f64, rng: &mut R) -> EnvState {
    let spots = p.positive_terminals();
    loop {
        let t = &spots[rng.random_range(0..spots.len())];
        let s = ParkingState {
            pose: Pose {
                x: t.pose.x + rng.random_range(-radius..=radius),
                y: t.pose.y + rng.random_range(-radius..=radius),
                heading: rng.random_range(-PI..PI),
            },
            speed: 0.0,
            angular_velocity: 0.0,
            goal: t.goal,
            step_index: 0,
        };
        if p.check_start(&s).is_ok() {
            return EnvState::Parking(s);
        }
    }
}

/// `length` start states drawn uniformly from valid non-terminal states
/// within Chebyshev distance `radius` of a goal-completing state, widening
/// the radius while no such state exists.
pub fn random_curriculum<R: Rng + ?Sized>(
    env: &Environment,
    length: usize,
    radius: i32,
    rng: &mut R,
) -> Vec<EnvState> {
    match env {
        Environment::Grid(g) => {
            let bound = g.spec().width.max(g.spec().height);
            let mut r = radius.max(1);
            let mut support = grid_near_goal(g, r);
            while support.is_empty() && r < bound {
                r += 1;
                support = grid_near_goal(g, r);
            }
            if support.is_empty() {
                return Vec::new();
            }
            (0..length)
                .map(|_| support[rng.random_range(0..support.len())].clone())
                .collect()
        }
        Environment::Parking(p) => (0..length)
            .map(|_| parking_near_goal(p, radius.max(1) as f64, rng))
            .collect(),
    }
}

/// Fifteen start states spread over the domain.
pub fn source_tasks(env: &Environment) -> Vec<EnvState> {
    match env {
        Environment::Grid(g) => {
            let default = g.spec().default_start;
            let starts: Vec<_> = g
                .fresh_starts()
                .into_iter()
                .filter(|s| s.agent != default)
                .collect();
            if starts.is_empty() {
                return Vec::new();
            }
            let k = SOURCE_TASKS.min(starts.len());
            (0..k)
                .map(|i| EnvState::Grid(starts[i * starts.len() / k].clone()))
                .collect()
        }
        Environment::Parking(p) => {
            let spots = p.spec().n_spots();
            let (x, y) = p.spec().agent_start;
            (0..SOURCE_TASKS)
                .map(|i| {
                    EnvState::Parking(ParkingState {
                        pose: Pose {
                            x,
                            y,
                            heading: -PI + 2.0 * PI * i as f64 / SOURCE_TASKS as f64,
                        },
                        speed: 0.0,
                        angular_velocity: 0.0,
                        goal: i * spots / SOURCE_TASKS,
                        step_index: 0,
                    })
                })
                .collect()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineConfig {
    pub random_length: usize,
    pub random_radius: i32,
    /// Training steps spent at each random start.
    pub random_step_steps: u64,
    pub mpc_steps: u64,
    pub mpc_prior: u64,
    pub mpc_per_task: u64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            random_length: 4,
            random_radius: 2,
            random_step_steps: 1_000,
            mpc_steps: 2,
            mpc_prior: 5_000,
            mpc_per_task: 500,
        }
    }
}

fn greedy_changed(a: &Action, b: &Action) -> bool {
    match (a, b) {
        (Action::Discrete(x), Action::Discrete(y)) => x != y,
        (Action::Continuous(x), Action::Continuous(y)) => x
            .iter()
            .zip(y)
            .any(|(p, q)| (p - q).abs() > ACTION_CHANGE_TOLERANCE),
        _ => true,
    }
}

/// Number of probe observations whose greedy action differs between agents.
pub fn policy_change(before: &Agent, after: &Agent, probes: &[Vec<f64>]) -> usize {
    probes
        .iter()
        .filter(|o| match (before.greedy(o), after.greedy(o)) {
            (Ok(a), Ok(b)) => greedy_changed(&a, &b),
            _ => true,
        })
        .count()
}

/// Trains each start state for a fixed number of steps, then the target.
pub fn run_random<R: Rng + ?Sized>(
    run: &mut RunState<'_, R>,
    config: &BaselineConfig,
    goal: RewardGoal,
) -> Result<CurriculumPlan, CurriculumError> {
    let starts = random_curriculum(run.env, config.random_length, config.random_radius, run.rng);
    let mut plan = CurriculumPlan::default();
    for (k, start) in starts.into_iter().enumerate() {
        if run.ctx.exhausted() {
            break;
        }
        run.env.set_start(Some(start.clone()))?;
        run.ctx.phase = format!("step-{}", k + 1);
        run.ctx.on_target = false;
        let mut crit = ConvergenceCriterion::new(Convergence::FixedSteps(config.random_step_steps));
        let out = train(run.agent, run.env, run.replay, None, &mut crit, None, run.ctx, run.rng)?;
        let observation = run.env.encode(&start)?;
        plan.steps.push(PlanStep {
            start,
            observation,
            steps: out.steps,
            episodes: out.episodes,
            entropy_trace: Vec::new(),
            converged: true,
        });
    }
    plan.final_phase = Some(train_final(run, goal)?);
    Ok(plan)
}

/// Chooses `mpc_steps` source tasks by largest greedy-policy change, adopting
/// the winning clone after each step, then trains the target.
///
/// Generation runs outside the main step counter; its cost is reported as
/// `overhead_steps` and the main budget shrinks by the same amount.
pub fn run_max_policy_change<R: Rng + ?Sized>(
    run: &mut RunState<'_, R>,
    config: &BaselineConfig,
    goal: RewardGoal,
) -> Result<CurriculumPlan, CurriculumError> {
    let tasks = source_tasks(run.env);
    let mut plan = CurriculumPlan {
        overhead_steps: max_policy_change_overhead(
            config.mpc_steps,
            config.mpc_prior,
            tasks.len() as u64,
            config.mpc_per_task,
        ),
        ..CurriculumPlan::default()
    };
    let fixed_probes: Option<Vec<Vec<f64>>> = match run.env {
        Environment::Parking(p) => Some(
            (0..PARKING_PROBE_STATES)
                .map(|_| p.encode(&p.sample_default(run.rng)))
                .collect(),
        ),
        Environment::Grid(_) => None,
    };
    let mut sb = StateBuffer::new();
    let mut side = TrainContext::new(u64::MAX);
    for step in 0..config.mpc_steps as usize {
        run.env.set_start(None)?;
        side.phase = format!("prior-{}", step + 1);
        let mut crit = ConvergenceCriterion::new(Convergence::FixedSteps(config.mpc_prior));
        train(run.agent, run.env, run.replay, Some(&mut sb), &mut crit, None, &mut side, run.rng)?;
        let probes: Vec<Vec<f64>> = match &fixed_probes {
            Some(p) => p.clone(),
            None => sb.iter().map(|e| e.observation.clone()).collect(),
        };
        let mut changes = Vec::with_capacity(tasks.len());
        let mut clones = Vec::with_capacity(tasks.len());
        for task in &tasks {
            let mut agent = run.agent.clone();
            let mut replay = run.replay.clone();
            let mut env = run.env.clone();
            env.set_start(Some(task.clone()))?;
            let mut crit = ConvergenceCriterion::new(Convergence::FixedSteps(config.mpc_per_task));
            train(&mut agent, &mut env, &mut replay, None, &mut crit, None, &mut side, run.rng)?;
            changes.push(policy_change(run.agent, &agent, &probes) as f64);
            clones.push((agent, replay));
        }
        let Some(best) = argmax_score(&changes) else {
            break;
        };
        let (agent, replay) = clones.swap_remove(best);
        *run.agent = agent;
        *run.replay = replay;
        let start = tasks[best].clone();
        plan.steps.push(PlanStep {
            observation: run.env.encode(&start)?,
            start,
            steps: config.mpc_per_task,
            episodes: 0,
            entropy_trace: Vec::new(),
            converged: true,
        });
    }
    run.ctx.budget = run.ctx.budget.saturating_sub(plan.overhead_steps);
    plan.final_phase = Some(train_final(run, goal)?);
    Ok(plan)
}
