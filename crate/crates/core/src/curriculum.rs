//! Uncertainty-driven curriculum over start states.
//!
//! A run warms up on the target task, then repeatedly restarts episodes from
//! the visited state whose policy is most uncertain, training there until the
//! uncertainty stops falling. The final phase returns to the target's own
//! start. One network and one replay buffer carry through every phase.

use crate::agents::{
    train, Agent, Convergence, ConvergenceCriterion, PhaseOutcome, ReplayBuffer, StateBuffer,
    TrainContext, TrainError,
};
use crate::clustering::{centroid, region_scores, ward_cluster, ward_cluster_count};
use crate::env::{EnvError, EnvState, Environment};
use crate::uncertainty::{
    argmax_score, record_for, sa_select, td_scores, teacher_kl, GaussianKlForm, SaParams,
    UncertaintyError, UncertaintyRegressor, MAX_CANDIDATES,
};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CurriculumError {
    #[error("the teacher-dependent variant needs a trained teacher")]
    MissingTeacher,
    #[error("the self-assessed variant needs a fitted regressor")]
    MissingRegressor,
    #[error("invalid curriculum setting: {0}")]
    Config(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Uncertainty(#[from] UncertaintyError),
    #[error(transparent)]
    Env(#[from] EnvError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Relative entropy against a converged teacher.
    Td,
    /// Regressor-predicted relative entropy from the learner's own history.
    Sa,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Heuristic {
    #[default]
    MaxEntropy,
    Proximity,
    MaxDistance,
}

impl Heuristic {
    pub fn name(self) -> &'static str {
        match self {
            Heuristic::MaxEntropy => "max-entropy",
            Heuristic::Proximity => "proximity",
            Heuristic::MaxDistance => "max-distance",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClusterSetting {
    /// Every candidate is its own region.
    #[default]
    Off,
    /// Merge until the Ward increase exceeds the cutoff.
    Cutoff(f64),
    /// Cut the merge history at this many clusters.
    Count(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CurriculumConfig {
    pub max_length: usize,
    pub eta: u64,
    pub beta: u64,
    pub heuristic: Heuristic,
    pub clustering: ClusterSetting,
    pub entropy_window: usize,
    /// Episode cap for one curriculum step when the entropy never settles.
    pub max_step_episodes: usize,
    pub sample_size: usize,
    pub kl_form: GaussianKlForm,
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        Self {
            max_length: 4,
            eta: 5_000,
            beta: 1_500,
            heuristic: Heuristic::MaxEntropy,
            clustering: ClusterSetting::Cutoff(3.0),
            entropy_window: 10,
            max_step_episodes: 200,
            sample_size: MAX_CANDIDATES,
            kl_form: GaussianKlForm::Standard,
        }
    }
}

impl CurriculumConfig {
    pub fn validate(&self) -> Result<(), CurriculumError> {
        let bad = |m: &str| Err(CurriculumError::Config(m.into()));
        if self.eta == 0 || self.beta == 0 {
            return bad("eta and beta must be positive");
        }
        if self.entropy_window == 0 || self.max_step_episodes == 0 || self.sample_size == 0 {
            return bad("window, episode cap and sample size must be positive");
        }
        match self.clustering {
            ClusterSetting::Cutoff(c) if !(c > 0.0) => bad("cluster cutoff must be positive"),
            ClusterSetting::Count(0) => bad("cluster count must be positive"),
            _ => Ok(()),
        }
    }
}

/// Final-phase stopping rule on the target task.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardGoal {
    pub threshold: f64,
    pub window: usize,
    /// Keep training after the goal is met until the budget is spent.
    pub continue_to_budget: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanStep {
    pub start: EnvState,
    pub observation: Vec<f64>,
    pub steps: u64,
    pub episodes: u64,
    pub entropy_trace: Vec<f64>,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelectionAudit {
    pub curriculum_step: usize,
    pub candidate_count: usize,
    pub chosen_state: String,
    pub chosen_uncertainty: f64,
    /// Largest score among all candidates, before any filter.
    pub max_uncertainty: f64,
    pub heuristic: String,
    pub regions: usize,
    pub chosen_region: usize,
    pub fallback: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CurriculumPlan {
    pub steps: Vec<PlanStep>,
    pub audits: Vec<SelectionAudit>,
    /// Environment steps spent generating the curriculum outside training.
    pub overhead_steps: u64,
    pub final_phase: Option<PhaseOutcome>,
}

/// Compact label for a state in logs.
pub fn describe_state(s: &EnvState) -> String {
    match s {
        EnvState::Grid(g) => format!(
            "({},{}) k{:b} l{:b} f{}",
            g.agent.x, g.agent.y, g.keys_collected, g.locks_collected, g.flags_captured
        ),
        EnvState::Parking(p) => format!(
            "({:.2},{:.2},{:.2}) goal {}",
            p.pose.x, p.pose.y, p.pose.heading, p.goal
        ),
    }
}

/// A candidate region: member positions and its aggregated score.
#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    pub positions: Vec<Vec<f64>>,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeuristicPick {
    /// Regions that passed the filter, ascending.
    pub survivors: Vec<usize>,
    pub chosen: usize,
    /// Max-distance had no high or no low regions and used max-entropy.
    pub fallback: bool,
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn mean_position(positions: &[Vec<f64>]) -> Vec<f64> {
    let idx: Vec<usize> = (0..positions.len()).collect();
    centroid(positions, &idx)
}

fn best_of(regions: &[Region], ids: &[usize]) -> usize {
    let scores: Vec<f64> = ids.iter().map(|&i| regions[i].score).collect();
    ids[argmax_score(&scores).expect("nonempty region set")]
}

/// Filters regions by `heuristic` and picks one.
///
/// Proximity keeps the `ceil(0.2 N)` regions with the smallest mean distance
/// from their members to the nearest goal position. Max-distance classes
/// regions above `mean + std` as high and below `mean - std` as low and
/// returns the high region whose centroid is farthest from every low centroid.
pub fn heuristic_filter(
    regions: &[Region],
    goals: &[Vec<f64>],
    heuristic: Heuristic,
) -> Option<HeuristicPick> {
    if regions.is_empty() {
        return None;
    }
    let all: Vec<usize> = (0..regions.len()).collect();
    let max_entropy = |fallback| HeuristicPick {
        chosen: best_of(regions, &all),
        survivors: all.clone(),
        fallback,
    };
    match heuristic {
        Heuristic::MaxEntropy => Some(max_entropy(false)),
        Heuristic::Proximity => {
            if goals.is_empty() {
                return Some(max_entropy(true));
            }
            let closeness: Vec<f64> = regions
                .iter()
                .map(|r| {
                    r.positions
                        .iter()
                        .map(|p| goals.iter().map(|g| euclid(p, g)).fold(f64::INFINITY, f64::min))
                        .sum::<f64>()
                        / r.positions.len() as f64
                })
                .collect();
            let keep = (regions.len() as f64 * 0.2).ceil() as usize;
            let mut order = all.clone();
            order.sort_by(|&a, &b| closeness[a].total_cmp(&closeness[b]).then(a.cmp(&b)));
            let mut survivors: Vec<usize> = order[..keep].to_vec();
            survivors.sort_unstable();
            Some(HeuristicPick {
                chosen: best_of(regions, &survivors),
                survivors,
                fallback: false,
            })
        }
        Heuristic::MaxDistance => {
            let n = regions.len() as f64;
            let mean = regions.iter().map(|r| r.score).sum::<f64>() / n;
            let std = (regions.iter().map(|r| (r.score - mean).powi(2)).sum::<f64>() / n).sqrt();
            let high: Vec<usize> = all.iter().copied().filter(|&i| regions[i].score > mean + std).collect();
            let low: Vec<usize> = all.iter().copied().filter(|&i| regions[i].score < mean - std).collect();
            if high.is_empty() || low.is_empty() {
                return Some(max_entropy(true));
            }
            let centers: Vec<Vec<f64>> = regions.iter().map(|r| mean_position(&r.positions)).collect();
            let gap: Vec<f64> = high
                .iter()
                .map(|&h| low.iter().map(|&l| euclid(&centers[h], &centers[l])).fold(f64::INFINITY, f64::min))
                .collect();
            let chosen = high[argmax_score(&gap).expect("nonempty high set")];
            Some(HeuristicPick {
                survivors: vec![chosen],
                chosen,
                fallback: false,
            })
        }
    }
}

/// Outcome of one start-state selection over scored candidates.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    /// Index into the candidate list.
    pub candidate: usize,
    pub region: usize,
    pub regions: usize,
    pub region_score: f64,
    pub fallback: bool,
}

/// Groups candidates into regions (clustering on the raw observations),
/// applies the heuristic, and draws a member of the winning region.
pub fn choose_start<R: Rng + ?Sized>(
    observations: &[Vec<f64>],
    positions: &[Vec<f64>],
    scores: &[f64],
    goals: &[Vec<f64>],
    heuristic: Heuristic,
    clustering: ClusterSetting,
    rng: &mut R,
) -> Option<Selection> {
    if scores.is_empty() {
        return None;
    }
    let groups: Vec<Vec<usize>> = match clustering {
        ClusterSetting::Off => (0..scores.len()).map(|i| vec![i]).collect(),
        ClusterSetting::Cutoff(c) => ward_cluster(observations, c).clusters,
        ClusterSetting::Count(k) => ward_cluster_count(observations, k).clusters,
    };
    let partition_scores = region_scores(
        &crate::clustering::ClusterPartition {
            clusters: groups.clone(),
            centroids: Vec::new(),
            merge_costs: Vec::new(),
        },
        scores,
    );
    let regions: Vec<Region> = groups
        .iter()
        .zip(&partition_scores)
        .map(|(g, &score)| Region {
            positions: g.iter().map(|&i| positions[i].clone()).collect(),
            score,
        })
        .collect();
    let pick = heuristic_filter(&regions, goals, heuristic)?;
    let members = &groups[pick.chosen];
    let candidate = if members.len() == 1 {
        members[0]
    } else {
        members[rng.random_range(0..members.len())]
    };
    Some(Selection {
        candidate,
        region: pick.chosen,
        regions: regions.len(),
        region_score: regions[pick.chosen].score,
        fallback: pick.fallback,
    })
}

/// Uncertainty source for a run.
pub enum Scorer<'a> {
    Teacher(&'a dyn crate::uncertainty::PolicySource),
    Regressor(&'a dyn UncertaintyRegressor),
}

/// Everything one curriculum run mutates.
pub struct RunState<'a, R: Rng + ?Sized> {
    pub agent: &'a mut Agent,
    pub env: &'a mut Environment,
    pub replay: &'a mut ReplayBuffer,
    pub ctx: &'a mut TrainContext,
    pub rng: &'a mut R,
}

/// Trains on the target's own start until the reward goal holds (and then,
/// if asked, until the budget runs out).
pub fn train_final<R: Rng + ?Sized>(
    run: &mut RunState<'_, R>,
    goal: RewardGoal,
) -> Result<PhaseOutcome, CurriculumError> {
    run.env.set_start(None)?;
    run.ctx.on_target = true;
    run.ctx.phase = "target".into();
    let mut crit = ConvergenceCriterion::new(Convergence::HighestReward {
        window: goal.window,
        threshold: goal.threshold,
    });
    let mut out = train(run.agent, run.env, run.replay, None, &mut crit, None, run.ctx, run.rng)?;
    if goal.continue_to_budget && !run.ctx.exhausted() {
        let mut rest = ConvergenceCriterion::new(Convergence::UntilBudget);
        let more = train(run.agent, run.env, run.replay, None, &mut rest, None, run.ctx, run.rng)?;
        out.steps += more.steps;
        out.episodes += more.episodes;
        out.budget_exhausted = more.budget_exhausted;
    }
    Ok(out)
}

/// Full curriculum run: warm-up, `max_length` selected start states, final
/// phase on the target.
pub fn run_readc<R: Rng + ?Sized>(
    run: &mut RunState<'_, R>,
    config: &CurriculumConfig,
    scorer: Scorer<'_>,
    goal: RewardGoal,
) -> Result<CurriculumPlan, CurriculumError> {
    config.validate()?;
    let mut plan = CurriculumPlan::default();
    let mut sb = StateBuffer::new();
    let goals: Vec<Vec<f64>> = run
        .env
        .positive_terminals()
        .iter()
        .map(|t| run.env.position(t))
        .collect();

    run.env.set_start(None)?;
    run.ctx.phase = "warmup".into();
    run.ctx.on_target = true;
    let mut warm = ConvergenceCriterion::new(Convergence::FixedSteps(config.eta));
    train(run.agent, run.env, run.replay, Some(&mut sb), &mut warm, None, run.ctx, run.rng)?;

    for step in 0..config.max_length {
        if run.ctx.exhausted() || sb.is_empty() {
            break;
        }
        // score a candidate subset of the visited states
        let (indices, scores, past) = match scorer {
            Scorer::Teacher(teacher) => {
                let idx = sb.sample_indices(config.sample_size.min(MAX_CANDIDATES), run.rng);
                let obs = idx.iter().map(|&i| sb.get(i).expect("sampled index").observation.as_slice());
                let scores = td_scores(&*run.agent, teacher, obs, config.kl_form)?;
                (idx, scores, None)
            }
            Scorer::Regressor(reg) => {
                run.ctx.phase = format!("beta-{}", step + 1);
                run.ctx.on_target = true;
                let params = SaParams {
                    beta: config.beta,
                    sample_size: config.sample_size,
                    form: config.kl_form,
                };
                let out = sa_select(run.agent, run.env, run.replay, &mut sb, run.ctx, Some(reg), params, run.rng)?;
                (out.indices, out.scores, Some(out.past))
            }
        };
        if run.ctx.exhausted() {
            break;
        }
        let observations: Vec<Vec<f64>> =
            indices.iter().map(|&i| sb.get(i).expect("sampled index").observation.clone()).collect();
        let positions: Vec<Vec<f64>> = indices
            .iter()
            .map(|&i| run.env.position(&sb.get(i).expect("sampled index").state))
            .collect();
        let Some(sel) = choose_start(
            &observations,
            &positions,
            &scores,
            &goals,
            config.heuristic,
            config.clustering,
            run.rng,
        ) else {
            break;
        };
        let entry = sb.get(indices[sel.candidate]).expect("selected index").clone();
        plan.audits.push(SelectionAudit {
            curriculum_step: step + 1,
            candidate_count: indices.len(),
            chosen_state: describe_state(&entry.state),
            chosen_uncertainty: scores[sel.candidate],
            max_uncertainty: scores.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            heuristic: config.heuristic.name().into(),
            regions: sel.regions,
            chosen_region: sel.region,
            fallback: sel.fallback,
        });

        run.env.set_start(Some(entry.state.clone()))?;
        run.ctx.phase = format!("step-{}", step + 1);
        run.ctx.on_target = false;
        let mut crit = ConvergenceCriterion::new(Convergence::EntropyNoReduction {
            window: config.entropy_window,
            max_episodes: config.max_step_episodes,
        });
        let obs = entry.observation.clone();
        let form = config.kl_form;
        let outcome = match (&scorer, &past) {
            (Scorer::Teacher(teacher), _) => {
                let mut probe = |a: &Agent| teacher_kl(a, *teacher, &obs, form).unwrap_or(f64::NAN);
                train(run.agent, run.env, run.replay, Some(&mut sb), &mut crit, Some(&mut probe), run.ctx, run.rng)?
            }
            (Scorer::Regressor(reg), Some(past)) => {
                let visits = entry.visits;
                let mut probe = |a: &Agent| {
                    record_for(past, a, &obs, visits, form)
                        .map(|r| reg.predict(&r))
                        .unwrap_or(f64::NAN)
                };
                train(run.agent, run.env, run.replay, Some(&mut sb), &mut crit, Some(&mut probe), run.ctx, run.rng)?
            }
            (Scorer::Regressor(_), None) => unreachable!("self-assessed scoring keeps a snapshot"),
        };
        plan.steps.push(PlanStep {
            start: entry.state,
            observation: entry.observation,
            steps: outcome.steps,
            episodes: outcome.episodes,
            entropy_trace: crit.trace().to_vec(),
            converged: outcome.converged,
        });
    }

    plan.final_phase = Some(train_final(run, goal)?);
    Ok(plan)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::AgentConfig;
    use crate::uncertainty::PolicySource;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn region(cells: &[(f64, f64)], score: f64) -> Region {
        Region {
            positions: cells.iter().map(|&(x, y)| vec![x, y]).collect(),
            score,
        }
    }

    #[test]
    fn proximity_keeps_a_fifth() {
        for n in 1..40 {
            let regions: Vec<Region> = (0..n).map(|i| region(&[(i as f64, 0.0)], i as f64)).collect();
            let pick = heuristic_filter(&regions, &[vec![0.0, 0.0]], Heuristic::Proximity).unwrap();
            assert_eq!(pick.survivors.len(), (0.2 * n as f64).ceil() as usize);
            assert!(pick.survivors.contains(&pick.chosen));
        }
        let regions: Vec<Region> = (0..10).map(|i| region(&[(i as f64, 0.0)], 1.0)).collect();
        let pick = heuristic_filter(&regions, &[vec![0.0, 0.0]], Heuristic::Proximity).unwrap();
        assert_eq!(pick.survivors, vec![0, 1]);
    }

    #[test]
    fn flat_scores_fall_back() {
        let regions: Vec<Region> = (0..6).map(|i| region(&[(i as f64, 1.0)], 0.3)).collect();
        let pick = heuristic_filter(&regions, &[], Heuristic::MaxDistance).unwrap();
        assert!(pick.fallback);
        assert_eq!(pick.chosen, 0);
    }

    #[test]
    fn max_distance_prefers_isolated_high_region() {
        let regions = vec![
            region(&[(0.0, 0.0)], 0.0),
            region(&[(1.0, 0.0)], 5.0),
            region(&[(9.0, 9.0)], 5.0),
            region(&[(5.0, 5.0)], 2.5),
            region(&[(5.0, 6.0)], 2.5),
            region(&[(6.0, 5.0)], 2.5),
        ];
        let pick = heuristic_filter(&regions, &[], Heuristic::MaxDistance).unwrap();
        assert!(!pick.fallback);
        assert_eq!(pick.chosen, 2);
    }

    struct Fixed(Vec<f64>);
    impl PolicySource for Fixed {
        fn outputs(&self, _: &[f64]) -> Result<Vec<f64>, crate::nn::NnError> {
            Ok(self.0.clone())
        }
        fn distribution(&self, _: &[f64]) -> Result<crate::uncertainty::PolicyDistribution, crate::nn::NnError> {
            Ok(crate::uncertainty::q_to_probs(&self.0).unwrap())
        }
    }

    fn small_run(config: &CurriculumConfig, seed: u64) -> (CurriculumPlan, TrainContext, Agent, Agent) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut env = Environment::grid_from_text("S...\n.P..\n..K.\n...L\n").unwrap();
        let agent_config = AgentConfig { hidden: vec![16, 16, 16], ..AgentConfig::default() };
        let teacher = Agent::for_env(&env, agent_config.clone(), &mut rng).unwrap();
        let mut agent = Agent::for_env(&env, agent_config.clone(), &mut rng).unwrap();
        let initial = agent.clone();
        let mut replay = ReplayBuffer::new(1000);
        let mut ctx = TrainContext::new(4_000);
        let mut run = RunState { agent: &mut agent, env: &mut env, replay: &mut replay, ctx: &mut ctx, rng: &mut rng };
        let goal = RewardGoal { threshold: 1400.0, window: 10, continue_to_budget: false };
        let plan = run_readc(&mut run, config, Scorer::Teacher(&teacher), goal).unwrap();
        (plan, ctx, initial, teacher)
    }

    #[test]
    fn selected_state_has_the_top_score() {
        let config = CurriculumConfig {
            max_length: 2,
            eta: 300,
            max_step_episodes: 20,
            clustering: ClusterSetting::Off,
            ..CurriculumConfig::default()
        };
        let (plan, ctx, _, _) = small_run(&config, 1);
        assert_eq!(plan.steps.len(), 2);
        for a in &plan.audits {
            assert_eq!(a.chosen_uncertainty, a.max_uncertainty);
        }
        // one probe before training and one after each episode, on one state
        for s in &plan.steps {
            assert_eq!(s.entropy_trace.len() as u64, s.episodes + 1);
        }
        assert!(ctx.log.iter().any(|r| !r.on_target));
        let last = ctx.log.last().unwrap();
        assert!(last.on_target);
        assert_eq!(plan.overhead_steps, 0);
    }

    #[test]
    fn zero_length_is_plain_training() {
        let config = CurriculumConfig { max_length: 0, eta: 300, ..CurriculumConfig::default() };
        let (plan, ctx, _, _) = small_run(&config, 2);
        assert!(plan.steps.is_empty());
        assert!(ctx.log.iter().all(|r| r.on_target));
    }

    #[test]
    fn same_seed_same_plan() {
        let config = CurriculumConfig { max_length: 2, eta: 300, max_step_episodes: 10, ..CurriculumConfig::default() };
        let (a, ca, _, _) = small_run(&config, 3);
        let (b, cb, _, _) = small_run(&config, 3);
        assert_eq!(a, b);
        assert_eq!(ca.log, cb.log);
    }

    #[test]
    fn teacher_equal_to_agent_gives_zero_scores() {
        let t = Fixed(vec![1.0, 2.0, 0.5, 0.0]);
        let obs = [vec![0.0], vec![1.0]];
        let s = td_scores(&t, &t, obs.iter().map(Vec::as_slice), GaussianKlForm::Standard).unwrap();
        assert_eq!(s, vec![0.0, 0.0]);
    }

    #[test]
    fn clustered_choice_draws_from_best_region() {
        let obs: Vec<Vec<f64>> = vec![vec![0.0], vec![0.1], vec![9.0], vec![9.1]];
        let scores = [0.0, 0.0, 1.0, 0.8];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let sel = choose_start(&obs, &obs, &scores, &[], Heuristic::MaxEntropy, ClusterSetting::Cutoff(3.0), &mut rng).unwrap();
            assert!(sel.candidate >= 2);
            assert_eq!(sel.regions, 2);
            assert!((sel.region_score - 0.9).abs() < 1e-12);
        }
    }

    #[test]
    fn bad_config_rejected() {
        assert!(CurriculumConfig { eta: 0, ..Default::default() }.validate().is_err());
        assert!(CurriculumConfig { clustering: ClusterSetting::Count(0), ..Default::default() }.validate().is_err());
        assert!(CurriculumConfig::default().validate().is_ok());
    }
}
