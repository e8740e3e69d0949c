//! Uncertainty measures and the two start-state scorers: teacher-dependent
//! and self-assessed (regressor-predicted).

pub mod measures;

pub use measures::*;

use crate::agents::{
    train, Agent, Convergence, ConvergenceCriterion, ReplayBuffer, StateBuffer, TrainContext,
    TrainError,
};
use crate::env::Environment;
use crate::nn::NnError;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Candidate subsets drawn from the state buffer never exceed this size.
pub const MAX_CANDIDATES: usize = 2_000;

#[derive(Debug, Error)]
pub enum UncertaintyError {
    #[error("no candidate states to score")]
    NoCandidates,
    #[error("self-assessed scoring needs a fitted regressor")]
    MissingRegressor,
    #[error(transparent)]
    Measure(#[from] MeasureError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

/// Anything that maps an observation to raw outputs and a policy.
pub trait PolicySource {
    /// Q-values, or the concatenated Gaussian mean and standard deviation.
    fn outputs(&self, obs: &[f64]) -> Result<Vec<f64>, NnError>;
    fn distribution(&self, obs: &[f64]) -> Result<PolicyDistribution, NnError>;
}

/// Maps an [`UncertaintyRecord`] to a predicted relative entropy.
pub trait UncertaintyRegressor {
    fn predict(&self, record: &UncertaintyRecord) -> f64;
}

/// (max, mean, population std) of a vector.
pub fn summarize(values: &[f64]) -> [f64; 3] {
    if values.is_empty() {
        return [0.0; 3];
    }
    let n = values.len() as f64;
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    [max, mean, var.sqrt()]
}

/// Dimension-free description of how a state's policy moved between two
/// snapshots of the same learner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyRecord {
    /// KL(current || past).
    pub rel_entropy: f64,
    pub entropy_cur: f64,
    pub entropy_past: f64,
    /// Summary of the L2-normalized past outputs.
    pub q_past: [f64; 3],
    /// Summary of the L2-normalized current outputs.
    pub q_cur: [f64; 3],
    pub visits: u64,
}

impl UncertaintyRecord {
    pub const FEATURE_NAMES: [&'static str; 10] = [
        "rel_entropy",
        "entropy_cur",
        "entropy_past",
        "q_past_max",
        "q_past_mean",
        "q_past_std",
        "q_cur_max",
        "q_cur_mean",
        "q_cur_std",
        "visits",
    ];

    pub fn features(&self) -> Vec<f64> {
        let mut f = vec![self.rel_entropy, self.entropy_cur, self.entropy_past];
        f.extend(self.q_past);
        f.extend(self.q_cur);
        f.push(self.visits as f64);
        f
    }

    pub fn is_finite(&self) -> bool {
        self.features().iter().all(|v| v.is_finite())
    }
}

/// Record for a discrete-action state from raw past and current Q-values.
pub fn extract_features(
    q_past: &[f64],
    q_cur: &[f64],
    visits: u64,
) -> Result<UncertaintyRecord, MeasureError> {
    if q_past.len() != q_cur.len() {
        return Err(MeasureError::SupportMismatch(q_past.len(), q_cur.len()));
    }
    let past = q_to_probs(q_past)?;
    let cur = q_to_probs(q_cur)?;
    build_record(q_past, q_cur, &past, &cur, visits, GaussianKlForm::Standard)
}

fn build_record(
    out_past: &[f64],
    out_cur: &[f64],
    past: &PolicyDistribution,
    cur: &PolicyDistribution,
    visits: u64,
    form: GaussianKlForm,
) -> Result<UncertaintyRecord, MeasureError> {
    Ok(UncertaintyRecord {
        rel_entropy: policy_kl(cur, past, form)?,
        entropy_cur: policy_entropy(cur),
        entropy_past: policy_entropy(past),
        q_past: summarize(&l2_normalize(out_past)),
        q_cur: summarize(&l2_normalize(out_cur)),
        visits,
    })
}

/// Record for one observation under two policy snapshots of either kind.
pub fn record_for(
    past: &dyn PolicySource,
    cur: &dyn PolicySource,
    obs: &[f64],
    visits: u64,
    form: GaussianKlForm,
) -> Result<UncertaintyRecord, UncertaintyError> {
    let out_past = past.outputs(obs)?;
    let out_cur = cur.outputs(obs)?;
    let dp = past.distribution(obs)?;
    let dc = cur.distribution(obs)?;
    Ok(build_record(&out_past, &out_cur, &dp, &dc, visits, form)?)
}

/// KL(teacher || agent) at one observation.
pub fn teacher_kl(
    agent: &dyn PolicySource,
    teacher: &dyn PolicySource,
    obs: &[f64],
    form: GaussianKlForm,
) -> Result<f64, UncertaintyError> {
    let pt = teacher.distribution(obs)?;
    let pa = agent.distribution(obs)?;
    Ok(policy_kl(&pt, &pa, form)?)
}

/// Teacher-vs-agent relative entropy for each candidate.
pub fn td_scores<'a, I>(
    agent: &dyn PolicySource,
    teacher: &dyn PolicySource,
    candidates: I,
    form: GaussianKlForm,
) -> Result<Vec<f64>, UncertaintyError>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    candidates
        .into_iter()
        .map(|obs| teacher_kl(agent, teacher, obs, form))
        .collect()
}

/// Index of the highest score; ties go to the lowest index.
pub fn argmax_score(scores: &[f64]) -> Option<usize> {
    if scores.is_empty() {
        return None;
    }
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    Some(best)
}

/// Candidate with the largest teacher-vs-agent relative entropy.
pub fn td_select(
    agent: &dyn PolicySource,
    teacher: &dyn PolicySource,
    candidates: &[Vec<f64>],
    form: GaussianKlForm,
) -> Result<usize, UncertaintyError> {
    let scores = td_scores(agent, teacher, candidates.iter().map(Vec::as_slice), form)?;
    argmax_score(&scores).ok_or(UncertaintyError::NoCandidates)
}

/// Predicted uncertainty of each state-buffer entry in `indices`, comparing
/// `past` with `cur`.
pub fn sa_scores(
    past: &dyn PolicySource,
    cur: &dyn PolicySource,
    sb: &StateBuffer,
    indices: &[usize],
    regressor: &dyn UncertaintyRegressor,
    form: GaussianKlForm,
) -> Result<Vec<f64>, UncertaintyError> {
    indices
        .iter()
        .map(|&i| {
            let e = sb.get(i).ok_or(UncertaintyError::NoCandidates)?;
            let rec = record_for(past, cur, &e.observation, e.visits, form)?;
            Ok(regressor.predict(&rec))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SaParams {
    /// Extra training steps between the past snapshot and scoring.
    pub beta: u64,
    pub sample_size: usize,
    pub form: GaussianKlForm,
}

/// Scored candidates from one self-assessed selection round.
#[derive(Debug, Clone)]
pub struct SaOutcome {
    /// Snapshot taken before the extra training.
    pub past: Agent,
    /// State-buffer indices of the scored candidates, ascending.
    pub indices: Vec<usize>,
    pub scores: Vec<f64>,
}

impl SaOutcome {
    /// State-buffer index of the top-scoring candidate.
    pub fn best(&self) -> Option<usize> {
        argmax_score(&self.scores).map(|i| self.indices[i])
    }
}

/// Snapshots the agent, trains it `beta` more steps (recording visits), then
/// scores a uniform subset of the state buffer with the regressor.
#[allow(clippy::too_many_arguments)]
pub fn sa_select<R: Rng + ?Sized>(
    agent: &mut Agent,
    env: &mut Environment,
    replay: &mut ReplayBuffer,
    sb: &mut StateBuffer,
    ctx: &mut TrainContext,
    regressor: Option<&dyn UncertaintyRegressor>,
    params: SaParams,
    rng: &mut R,
) -> Result<SaOutcome, UncertaintyError> {
    let regressor = regressor.ok_or(UncertaintyError::MissingRegressor)?;
    let past = agent.clone();
    let mut crit = ConvergenceCriterion::new(Convergence::FixedSteps(params.beta));
    train(agent, env, replay, Some(sb), &mut crit, None, ctx, rng)?;
    if sb.is_empty() {
        return Err(UncertaintyError::NoCandidates);
    }
    let indices = sb.sample_indices(params.sample_size.min(MAX_CANDIDATES), rng);
    let scores = sa_scores(&past, agent, sb, &indices, regressor, params.form)?;
    Ok(SaOutcome {
        past,
        indices,
        scores,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Fixed Q-table indexed by the first observation component.
    struct Table(Vec<Vec<f64>>);

    impl PolicySource for Table {
        fn outputs(&self, obs: &[f64]) -> Result<Vec<f64>, NnError> {
            Ok(self.0[obs[0] as usize].clone())
        }
        fn distribution(&self, obs: &[f64]) -> Result<PolicyDistribution, NnError> {
            Ok(q_to_probs(&self.0[obs[0] as usize]).unwrap())
        }
    }

    struct Constant(f64);
    impl UncertaintyRegressor for Constant {
        fn predict(&self, _: &UncertaintyRecord) -> f64 {
            self.0
        }
    }

    struct RelEntropy;
    impl UncertaintyRegressor for RelEntropy {
        fn predict(&self, r: &UncertaintyRecord) -> f64 {
            r.rel_entropy
        }
    }

    fn cands(n: usize) -> Vec<Vec<f64>> {
        (0..n).map(|i| vec![i as f64]).collect()
    }

    #[test]
    fn identical_snapshots_give_zero_shift() {
        let q = [0.3, -1.2, 2.0, 0.7];
        let r = extract_features(&q, &q, 7).unwrap();
        assert_eq!(r.rel_entropy, 0.0);
        assert_eq!(r.entropy_cur, r.entropy_past);
        assert_eq!(r.q_cur, r.q_past);
        assert_eq!(r.visits, 7);
    }

    #[test]
    fn record_matches_hand_composition() {
        let past = [3.0, 4.0];
        let cur = [4.0, 3.0];
        let r = extract_features(&past, &cur, 2).unwrap();
        // normalized [0.6, 0.8] and [0.8, 0.6]
        let e = |a: f64, b: f64| a.exp() / (a.exp() + b.exp());
        let pp = [e(0.6, 0.8), e(0.8, 0.6)];
        let pc = [e(0.8, 0.6), e(0.6, 0.8)];
        let kl = pc[0] * (pc[0] / pp[0]).ln() + pc[1] * (pc[1] / pp[1]).ln();
        assert!((r.rel_entropy - kl).abs() < 1e-12);
        let h = -(pc[0] * pc[0].ln() + pc[1] * pc[1].ln());
        assert!((r.entropy_cur - h).abs() < 1e-12);
        assert!((r.entropy_past - h).abs() < 1e-12);
        assert!((r.q_past[0] - 0.8).abs() < 1e-12);
        assert!((r.q_past[1] - 0.7).abs() < 1e-12);
        assert!((r.q_past[2] - 0.1).abs() < 1e-12);
        assert_eq!(r.q_past, r.q_cur);
        assert_eq!(r.features().len(), UncertaintyRecord::FEATURE_NAMES.len());
    }

    #[test]
    fn agent_equal_to_teacher_picks_first() {
        let t = Table(vec![vec![1.0, 2.0]; 5]);
        let scores = td_scores(&t, &t, cands(5).iter().map(Vec::as_slice), Default::default())
            .unwrap();
        assert!(scores.iter().all(|&s| s == 0.0));
        assert_eq!(td_select(&t, &t, &cands(5), Default::default()).unwrap(), 0);
    }

    #[test]
    fn disagreeing_state_is_selected() {
        let teacher = Table(vec![vec![40.0, 0.0]; 4]);
        let mut agent_q = vec![vec![40.0, 0.0]; 4];
        agent_q[2] = vec![0.0, 40.0];
        let agent = Table(agent_q);
        let c = cands(4);
        let scores = td_scores(&agent, &teacher, c.iter().map(Vec::as_slice), Default::default())
            .unwrap();
        let oracle = |pt: &[f64], pa: &[f64]| -> f64 {
            pt.iter().zip(pa).map(|(t, a)| t * (t / a).ln()).sum()
        };
        let p = |q: &[f64]| match q_to_probs(q).unwrap() {
            PolicyDistribution::Discrete(v) => v,
            _ => unreachable!(),
        };
        assert!((scores[2] - oracle(&p(&[40.0, 0.0]), &p(&[0.0, 40.0]))).abs() < 1e-12);
        assert_eq!(td_select(&agent, &teacher, &c, Default::default()).unwrap(), 2);
    }

    #[test]
    fn near_tie_goes_lowest() {
        assert_eq!(argmax_score(&[0.1, 0.5, 0.5 - 1e-13, 0.5]), Some(1));
        assert_eq!(argmax_score(&[]), None);
        let t = Table(vec![]);
        assert!(matches!(
            td_select(&t, &t, &[], Default::default()),
            Err(UncertaintyError::NoCandidates)
        ));
    }

    fn filled_buffer(n: usize) -> StateBuffer {
        use crate::env::{Cell, EnvState, GridState, StateKey};
        let mut sb = StateBuffer::new();
        for i in 0..n {
            let s = EnvState::Grid(GridState::at(Cell::new(i as i32, 0)));
            sb.record(StateKey(vec![i as i64]), &s, &[i as f64]);
        }
        sb
    }

    #[test]
    fn constant_regressor_scores_tie() {
        let sb = filled_buffer(4);
        let t = Table(vec![vec![1.0, 0.0]; 4]);
        let s = sa_scores(&t, &t, &sb, &[0, 1, 2, 3], &Constant(0.4), Default::default()).unwrap();
        assert_eq!(s, vec![0.4; 4]);
        assert_eq!(argmax_score(&s), Some(0));
    }

    #[test]
    fn shifted_state_wins_under_rel_entropy_regressor() {
        let sb = filled_buffer(5);
        let past = Table(vec![vec![1.0, 0.0]; 5]);
        let mut q = vec![vec![1.0, 0.0]; 5];
        q[3] = vec![0.0, 1.0];
        q[1] = vec![1.0, 0.2];
        let cur = Table(q);
        let s = sa_scores(&past, &cur, &sb, &[0, 1, 2, 3, 4], &RelEntropy, Default::default())
            .unwrap();
        assert_eq!(argmax_score(&s), Some(3));
    }

    proptest! {
        #[test]
        fn constant_shift_preserves_choice(
            kls in proptest::collection::vec(0.0f64..10.0, 1..40),
            k in -1e3f64..1e3,
        ) {
            let shifted: Vec<f64> = kls.iter().map(|v| v + k).collect();
            // exact ties may split under rounding, so compare against the top set
            let top = argmax_score(&kls).unwrap();
            let pick = argmax_score(&shifted).unwrap();
            prop_assert!(pick == top || (kls[pick] - kls[top]).abs() <= 1e-9 * (1.0 + k.abs()));
        }
    }
}
