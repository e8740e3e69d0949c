//! Probability transfer, entropy and relative entropy.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Probabilities are floored here before any logarithm.
pub const PROB_FLOOR: f64 = 1e-12;
/// Minimum standard deviation of a Gaussian policy.
pub const SIGMA_FLOOR: f64 = 1e-3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MeasureError {
    #[error("distributions have different support sizes ({0} vs {1})")]
    SupportMismatch(usize, usize),
    #[error("cannot compare a discrete and a Gaussian policy")]
    KindMismatch,
    #[error("empty value vector")]
    Empty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PolicyDistribution {
    Discrete(Vec<f64>),
    Gaussian { mean: Vec<f64>, std: Vec<f64> },
}

impl PolicyDistribution {
    /// Floors every entry at [`PROB_FLOOR`] and renormalizes.
    pub fn discrete(probs: Vec<f64>) -> Self {
        PolicyDistribution::Discrete(floor_and_normalize(probs))
    }

    pub fn gaussian(mean: Vec<f64>, std: Vec<f64>) -> Self {
        let std = std.into_iter().map(|s| s.max(SIGMA_FLOOR)).collect();
        PolicyDistribution::Gaussian { mean, std }
    }

    pub fn dim(&self) -> usize {
        match self {
            PolicyDistribution::Discrete(p) => p.len(),
            PolicyDistribution::Gaussian { mean, .. } => mean.len(),
        }
    }
}

fn floor_and_normalize(mut probs: Vec<f64>) -> Vec<f64> {
    probs.iter_mut().for_each(|p| *p = p.max(PROB_FLOOR));
    let total: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= total);
    probs
}

/// Divides by the L2 norm; a zero vector is returned unchanged.
pub fn l2_normalize(q: &[f64]) -> Vec<f64> {
    let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        q.to_vec()
    } else {
        q.iter().map(|v| v / norm).collect()
    }
}

/// Softmax over L2-normalized action values. A zero vector maps to uniform.
pub fn q_to_probs(q: &[f64]) -> Result<PolicyDistribution, MeasureError> {
    if q.is_empty() {
        return Err(MeasureError::Empty);
    }
    let z = l2_normalize(q);
    // normalized entries lie in [-1, 1], so exp cannot overflow
    let exps: Vec<f64> = z.iter().map(|v| v.exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(PolicyDistribution::discrete(
        exps.into_iter().map(|e| e / total).collect(),
    ))
}

/// `sum_a p(a) ln(p(a) / q(a))` with both sides floored at [`PROB_FLOOR`].
pub fn discrete_kl(p_true: &[f64], p_learnt: &[f64]) -> Result<f64, MeasureError> {
    if p_true.len() != p_learnt.len() {
        return Err(MeasureError::SupportMismatch(p_true.len(), p_learnt.len()));
    }
    let kl = p_true
        .iter()
        .zip(p_learnt)
        .map(|(&p, &q)| {
            let p = p.max(PROB_FLOOR);
            let q = q.max(PROB_FLOOR);
            p * (p / q).ln()
        })
        .sum::<f64>();
    Ok(kl.max(0.0))
}

pub fn entropy(p: &[f64]) -> f64 {
    -p.iter()
        .map(|&v| {
            let v = v.max(PROB_FLOOR);
            v * v.ln()
        })
        .sum::<f64>()
}

/// Which closed form of the diagonal-Gaussian relative entropy to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GaussianKlForm {
    /// Standard form, zero for identical distributions.
    #[default]
    Standard,
    /// Omits the `-1/2` per dimension. Differs from the standard form by a
    /// constant, so argmax selections agree.
    WithoutHalf,
}

/// Sum over dimensions of `ln(s_l/s_t) + (s_t^2 + (m_t - m_l)^2) / (2 s_l^2) - 1/2`.
pub fn gaussian_kl(
    mean_true: &[f64],
    std_true: &[f64],
    mean_learnt: &[f64],
    std_learnt: &[f64],
    form: GaussianKlForm,
) -> Result<f64, MeasureError> {
    let d = mean_true.len();
    if std_true.len() != d || mean_learnt.len() != d || std_learnt.len() != d {
        return Err(MeasureError::SupportMismatch(d, mean_learnt.len()));
    }
    let half = match form {
        GaussianKlForm::Standard => 0.5,
        GaussianKlForm::WithoutHalf => 0.0,
    };
    Ok((0..d)
        .map(|i| {
            let st = std_true[i].max(SIGMA_FLOOR);
            let sl = std_learnt[i].max(SIGMA_FLOOR);
            let dm = mean_true[i] - mean_learnt[i];
            (sl / st).ln() + (st * st + dm * dm) / (2.0 * sl * sl) - half
        })
        .sum())
}

/// Differential entropy of a diagonal Gaussian.
pub fn gaussian_entropy(std: &[f64]) -> f64 {
    let c = 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln();
    std.iter().map(|s| c + s.max(SIGMA_FLOOR).ln()).sum()
}

/// Relative entropy between two policies of the same kind.
pub fn policy_kl(
    p_true: &PolicyDistribution,
    p_learnt: &PolicyDistribution,
    form: GaussianKlForm,
) -> Result<f64, MeasureError> {
    match (p_true, p_learnt) {
        (PolicyDistribution::Discrete(a), PolicyDistribution::Discrete(b)) => discrete_kl(a, b),
        (
            PolicyDistribution::Gaussian { mean: ma, std: sa },
            PolicyDistribution::Gaussian { mean: mb, std: sb },
        ) => gaussian_kl(ma, sa, mb, sb, form),
        _ => Err(MeasureError::KindMismatch),
    }
}

pub fn policy_entropy(p: &PolicyDistribution) -> f64 {
    match p {
        PolicyDistribution::Discrete(probs) => entropy(probs),
        PolicyDistribution::Gaussian { std, .. } => gaussian_entropy(std),
    }
}
