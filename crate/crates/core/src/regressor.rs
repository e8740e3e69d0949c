//! Gradient-boosted regression trees and a ridge-stabilized linear model,
//! mapping uncertainty records to a predicted relative entropy.

use crate::agents::{
    train, Agent, AgentConfig, Convergence, ConvergenceCriterion, ReplayBuffer, StateBuffer,
    TrainContext, TrainError,
};
use crate::env::Environment;
use crate::uncertainty::{
    record_for, teacher_kl, GaussianKlForm, UncertaintyError, UncertaintyRecord,
    UncertaintyRegressor,
};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::fmt::Write as _;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RegressorError {
    #[error("need at least {needed} rows to fit, got {got}")]
    TooFewRows { needed: usize, got: usize },
    #[error("rows have inconsistent feature counts")]
    Ragged,
    #[error("non-finite feature or target")]
    NonFinite,
    #[error("invalid hyperparameter: {0}")]
    BadParam(&'static str),
    #[error("model file parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("teacher did not reach return {threshold} within {budget} steps")]
    TeacherNotConverged { threshold: f64, budget: u64 },
    #[error("i/o error on {path}: {msg}")]
    Io { path: String, msg: String },
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Uncertainty(#[from] UncertaintyError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Feature rows with nonnegative relative-entropy targets.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RegressionDataset {
    pub rows: Vec<Vec<f64>>,
    pub targets: Vec<f64>,
    /// Snapshot index each row came from.
    pub snapshot: Vec<usize>,
}

impl RegressionDataset {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn push(&mut self, snapshot: usize, record: &UncertaintyRecord, target: f64) {
        self.rows.push(record.features());
        self.targets.push(target);
        self.snapshot.push(snapshot);
    }

    fn check(&self, min_rows: usize) -> Result<usize, RegressorError> {
        if self.rows.len() < min_rows.max(1) {
            return Err(RegressorError::TooFewRows {
                needed: min_rows.max(1),
                got: self.rows.len(),
            });
        }
        let d = self.rows[0].len();
        if self.rows.iter().any(|r| r.len() != d) || self.targets.len() != self.rows.len() {
            return Err(RegressorError::Ragged);
        }
        let finite = self.rows.iter().flatten().chain(&self.targets).all(|v| v.is_finite());
        if !finite {
            return Err(RegressorError::NonFinite);
        }
        Ok(d)
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), RegressorError> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["snapshot".to_string()];
        header.extend(UncertaintyRecord::FEATURE_NAMES.iter().map(|s| s.to_string()));
        header.push("target".into());
        w.write_record(&header)?;
        for ((row, t), s) in self.rows.iter().zip(&self.targets).zip(&self.snapshot) {
            let mut rec = vec![s.to_string()];
            rec.extend(row.iter().map(f64::to_string));
            rec.push(t.to_string());
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| RegressorError::Io {
            path: path.display().to_string(),
            msg: e.to_string(),
        })
    }
}

/// Sum of values in ascending order, so the result ignores input order.
fn canonical_sum(values: &mut [f64]) -> f64 {
    values.sort_unstable_by(f64::total_cmp);
    values.iter().sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TreeNode {
    Leaf(f64),
    /// Rows with `x[feature] <= threshold` go left.
    Split {
        feature: usize,
        threshold: f64,
        left: Box<TreeNode>,
        right: Box<TreeNode>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionTree {
    pub root: TreeNode,
}

#[derive(Debug, Clone, Copy)]
struct SplitChoice {
    feature: usize,
    threshold: f64,
    gain: f64,
}

impl RegressionTree {
    /// Exact greedy least-squares tree on `targets`.
    pub fn fit(
        rows: &[Vec<f64>],
        targets: &[f64],
        max_depth: usize,
        min_samples_leaf: usize,
    ) -> Self {
        let idx: Vec<usize> = (0..rows.len()).collect();
        Self {
            root: grow(rows, targets, &idx, max_depth, min_samples_leaf.max(1)),
        }
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut node = &self.root;
        loop {
            match node {
                TreeNode::Leaf(v) => return *v,
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => node = if x[*feature] <= *threshold { left } else { right },
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn d(n: &TreeNode) -> usize {
            match n {
                TreeNode::Leaf(_) => 0,
                TreeNode::Split { left, right, .. } => 1 + d(left).max(d(right)),
            }
        }
        d(&self.root)
    }

    pub fn leaves(&self) -> usize {
        fn l(n: &TreeNode) -> usize {
            match n {
                TreeNode::Leaf(_) => 1,
                TreeNode::Split { left, right, .. } => l(left) + l(right),
            }
        }
        l(&self.root)
    }
}

fn leaf_value(targets: &[f64], idx: &[usize]) -> f64 {
    let mut vals: Vec<f64> = idx.iter().map(|&i| targets[i]).collect();
    canonical_sum(&mut vals) / idx.len() as f64
}

fn grow(
    rows: &[Vec<f64>],
    targets: &[f64],
    idx: &[usize],
    depth: usize,
    min_leaf: usize,
) -> TreeNode {
    if depth == 0 || idx.len() < 2 * min_leaf {
        return TreeNode::Leaf(leaf_value(targets, idx));
    }
    let Some(best) = best_split(rows, targets, idx, min_leaf) else {
        return TreeNode::Leaf(leaf_value(targets, idx));
    };
    let (l, r): (Vec<usize>, Vec<usize>) = idx
        .iter()
        .partition(|&&i| rows[i][best.feature] <= best.threshold);
    TreeNode::Split {
        feature: best.feature,
        threshold: best.threshold,
        left: Box::new(grow(rows, targets, &l, depth - 1, min_leaf)),
        right: Box::new(grow(rows, targets, &r, depth - 1, min_leaf)),
    }
}

/// Largest reduction of squared error; ties keep the lowest feature and then
/// the lowest threshold.
fn best_split(
    rows: &[Vec<f64>],
    targets: &[f64],
    idx: &[usize],
    min_leaf: usize,
) -> Option<SplitChoice> {
    let n = idx.len();
    let d = rows[idx[0]].len();
    let mut best: Option<SplitChoice> = None;
    let mut order: Vec<(f64, f64)> = Vec::with_capacity(n);
    for f in 0..d {
        order.clear();
        order.extend(idx.iter().map(|&i| (rows[i][f], targets[i])));
        order.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
        let total: f64 = order.iter().map(|p| p.1).sum();
        let base = total * total / n as f64;
        let mut left = 0.0;
        for k in 1..n {
            left += order[k - 1].1;
            if k < min_leaf || n - k < min_leaf || order[k - 1].0 == order[k].0 {
                continue;
            }
            let right = total - left;
            let gain = left * left / k as f64 + right * right / (n - k) as f64 - base;
            let tol = 1e-12 * base.abs().max(1e-300);
            if gain > tol && best.is_none_or(|b| gain > b.gain) {
                let (lo, hi) = (order[k - 1].0, order[k].0);
                let mut threshold = lo + (hi - lo) / 2.0;
                if threshold >= hi {
                    threshold = lo;
                }
                best = Some(SplitChoice {
                    feature: f,
                    threshold,
                    gain,
                });
            }
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GbmParams {
    pub n_trees: usize,
    pub max_depth: usize,
    pub shrinkage: f64,
    pub min_samples_leaf: usize,
}

impl Default for GbmParams {
    fn default() -> Self {
        Self {
            n_trees: 200,
            max_depth: 3,
            shrinkage: 0.1,
            min_samples_leaf: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbmModel {
    pub base: f64,
    pub shrinkage: f64,
    pub n_features: usize,
    pub trees: Vec<RegressionTree>,
    /// Training MSE with 0, 1, ... trees.
    pub training_mse: Vec<f64>,
}

fn mse(pred: &[f64], y: &[f64]) -> f64 {
    let mut sq: Vec<f64> = pred.iter().zip(y).map(|(p, t)| (p - t).powi(2)).collect();
    canonical_sum(&mut sq) / y.len() as f64
}

/// Least-squares boosting: each tree fits the residuals of the ensemble so far.
pub fn fit_gbm(data: &RegressionDataset, params: GbmParams) -> Result<GbmModel, RegressorError> {
    if !(params.shrinkage > 0.0 && params.shrinkage <= 1.0) {
        return Err(RegressorError::BadParam("shrinkage must lie in (0, 1]"));
    }
    if params.max_depth == 0 || params.min_samples_leaf == 0 {
        return Err(RegressorError::BadParam("depth and leaf size must be positive"));
    }
    let d = data.check(2 * params.min_samples_leaf)?;
    let y = &data.targets;
    let base = canonical_sum(&mut y.clone()) / y.len() as f64;
    let mut pred = vec![base; y.len()];
    let mut model = GbmModel {
        base,
        shrinkage: params.shrinkage,
        n_features: d,
        trees: Vec::new(),
        training_mse: vec![mse(&pred, y)],
    };
    for _ in 0..params.n_trees {
        let residual: Vec<f64> = y.iter().zip(&pred).map(|(t, p)| t - p).collect();
        if residual.iter().all(|&r| r == 0.0) {
            break;
        }
        let tree = RegressionTree::fit(
            &data.rows,
            &residual,
            params.max_depth,
            params.min_samples_leaf,
        );
        let next: Vec<f64> = pred
            .iter()
            .zip(&data.rows)
            .map(|(p, x)| p + params.shrinkage * tree.predict(x))
            .collect();
        let err = mse(&next, y);
        if err > *model.training_mse.last().expect("seeded with the base error") {
            break;
        }
        pred = next;
        model.trees.push(tree);
        model.training_mse.push(err);
    }
    Ok(model)
}

impl GbmModel {
    pub fn predict_raw(&self, x: &[f64]) -> f64 {
        self.base + self.shrinkage * self.trees.iter().map(|t| t.predict(x)).sum::<f64>()
    }

    /// Prediction clamped below at zero.
    pub fn predict(&self, x: &[f64]) -> f64 {
        self.predict_raw(x).max(0.0)
    }

    /// Text dump: header lines, then each tree in pre-order, one node per line
    /// (`S feature threshold` or `L value`).
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "gbm 1");
        let _ = writeln!(s, "base {}", self.base);
        let _ = writeln!(s, "shrinkage {}", self.shrinkage);
        let _ = writeln!(s, "features {}", self.n_features);
        let _ = writeln!(s, "trees {}", self.trees.len());
        fn dump(n: &TreeNode, s: &mut String) {
            match n {
                TreeNode::Leaf(v) => {
                    let _ = writeln!(s, "L {v}");
                }
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    let _ = writeln!(s, "S {feature} {threshold}");
                    dump(left, s);
                    dump(right, s);
                }
            }
        }
        for t in &self.trees {
            let _ = writeln!(s, "tree");
            dump(&t.root, &mut s);
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, RegressorError> {
        let mut lines = LineReader::new(text);
        lines.expect_words(&["gbm", "1"])?;
        let base = lines.keyed("base")?;
        let shrinkage = lines.keyed("shrinkage")?;
        let n_features = lines.keyed::<usize>("features")?;
        let n_trees = lines.keyed::<usize>("trees")?;
        let mut trees = Vec::with_capacity(n_trees);
        for _ in 0..n_trees {
            lines.expect_words(&["tree"])?;
            trees.push(RegressionTree {
                root: parse_node(&mut lines, n_features, 0)?,
            });
        }
        Ok(GbmModel {
            base,
            shrinkage,
            n_features,
            trees,
            training_mse: Vec::new(),
        })
    }
}

struct LineReader<'a> {
    lines: std::iter::Enumerate<std::str::Lines<'a>>,
    line: usize,
}

impl<'a> LineReader<'a> {
    fn new(text: &'a str) -> Self {
        Self {
            lines: text.lines().enumerate(),
            line: 0,
        }
    }

    fn err(&self, msg: impl Into<String>) -> RegressorError {
        RegressorError::Parse {
            line: self.line,
            msg: msg.into(),
        }
    }

    fn next_words(&mut self) -> Result<Vec<&'a str>, RegressorError> {
        for (i, l) in self.lines.by_ref() {
            self.line = i + 1;
            let words: Vec<&str> = l.split_whitespace().collect();
            if !words.is_empty() {
                return Ok(words);
            }
        }
        Err(self.err("unexpected end of file"))
    }

    fn expect_words(&mut self, want: &[&str]) -> Result<(), RegressorError> {
        let got = self.next_words()?;
        if got != want {
            return Err(self.err(format!("expected `{}`", want.join(" "))));
        }
        Ok(())
    }

    fn keyed<T: std::str::FromStr>(&mut self, key: &str) -> Result<T, RegressorError> {
        let w = self.next_words()?;
        match w.as_slice() {
            [k, v] if *k == key => v.parse().map_err(|_| self.err(format!("bad value for {key}"))),
            _ => Err(self.err(format!("expected `{key} <value>`"))),
        }
    }
}

fn parse_node(
    lines: &mut LineReader,
    n_features: usize,
    depth: usize,
) -> Result<TreeNode, RegressorError> {
    if depth > 64 {
        return Err(lines.err("tree too deep"));
    }
    let w = lines.next_words()?;
    match w.as_slice() {
        ["L", v] => Ok(TreeNode::Leaf(
            v.parse().map_err(|_| lines.err("bad leaf value"))?,
        )),
        ["S", f, t] => {
            let feature: usize = f.parse().map_err(|_| lines.err("bad feature index"))?;
            if feature >= n_features {
                return Err(lines.err("feature index out of range"));
            }
            let threshold = t.parse().map_err(|_| lines.err("bad threshold"))?;
            let left = Box::new(parse_node(lines, n_features, depth + 1)?);
            let right = Box::new(parse_node(lines, n_features, depth + 1)?);
            Ok(TreeNode::Split {
                feature,
                threshold,
                left,
                right,
            })
        }
        _ => Err(lines.err("expected `L value` or `S feature threshold`")),
    }
}

/// Ordinary least squares with a small ridge on the centered design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub intercept: f64,
    pub coefficients: Vec<f64>,
}

pub const LINEAR_RIDGE: f64 = 1e-6;

pub fn fit_linear(data: &RegressionDataset) -> Result<LinearModel, RegressorError> {
    let d = data.check(1)?;
    let n = data.len();
    let mean_x: Vec<f64> = (0..d)
        .map(|j| data.rows.iter().map(|r| r[j]).sum::<f64>() / n as f64)
        .collect();
    let mean_y = data.targets.iter().sum::<f64>() / n as f64;
    let x = DMatrix::from_fn(n, d, |i, j| data.rows[i][j] - mean_x[j]);
    let y = DVector::from_iterator(n, data.targets.iter().map(|t| t - mean_y));
    let mut gram = x.transpose() * &x;
    for j in 0..d {
        gram[(j, j)] += LINEAR_RIDGE;
    }
    let rhs = x.transpose() * y;
    let beta = gram
        .cholesky()
        .map(|c| c.solve(&rhs))
        .ok_or(RegressorError::BadParam("normal equations are not positive definite"))?;
    let intercept = mean_y - beta.iter().zip(&mean_x).map(|(b, m)| b * m).sum::<f64>();
    Ok(LinearModel {
        intercept,
        coefficients: beta.iter().copied().collect(),
    })
}

impl LinearModel {
    pub fn predict_raw(&self, x: &[f64]) -> f64 {
        self.intercept + self.coefficients.iter().zip(x).map(|(c, v)| c * v).sum::<f64>()
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        self.predict_raw(x).max(0.0)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("linear 1\nintercept {}\ncoefficients {}\n", self.intercept, self.coefficients.len());
        for c in &self.coefficients {
            let _ = writeln!(s, "{c}");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, RegressorError> {
        let mut lines = LineReader::new(text);
        lines.expect_words(&["linear", "1"])?;
        let intercept = lines.keyed("intercept")?;
        let n: usize = lines.keyed("coefficients")?;
        let mut coefficients = Vec::with_capacity(n);
        for _ in 0..n {
            let w = lines.next_words()?;
            let v = match w.as_slice() {
                [v] => v.parse().map_err(|_| lines.err("bad coefficient"))?,
                _ => return Err(lines.err("expected one coefficient per line")),
            };
            coefficients.push(v);
        }
        Ok(LinearModel {
            intercept,
            coefficients,
        })
    }
}

/// A fitted model of either kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Regressor {
    Gbm(GbmModel),
    Linear(LinearModel),
}

impl Regressor {
    pub fn predict_features(&self, x: &[f64]) -> f64 {
        match self {
            Regressor::Gbm(m) => m.predict(x),
            Regressor::Linear(m) => m.predict(x),
        }
    }

    pub fn to_text(&self) -> String {
        match self {
            Regressor::Gbm(m) => m.to_text(),
            Regressor::Linear(m) => m.to_text(),
        }
    }

    pub fn from_text(text: &str) -> Result<Self, RegressorError> {
        match text.split_whitespace().next() {
            Some("gbm") => GbmModel::from_text(text).map(Regressor::Gbm),
            Some("linear") => LinearModel::from_text(text).map(Regressor::Linear),
            _ => Err(RegressorError::Parse {
                line: 1,
                msg: "unknown model kind".into(),
            }),
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), RegressorError> {
        std::fs::write(path, self.to_text()).map_err(|e| RegressorError::Io {
            path: path.display().to_string(),
            msg: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, RegressorError> {
        let text = std::fs::read_to_string(path).map_err(|e| RegressorError::Io {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        Self::from_text(&text)
    }
}

impl UncertaintyRegressor for Regressor {
    fn predict(&self, record: &UncertaintyRecord) -> f64 {
        self.predict_features(&record.features())
    }
}

/// Average ranks, ties sharing the mean of their positions (1-based).
pub fn ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap_or(Ordering::Equal));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation; 0 when either side is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "spearman needs paired samples");
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        0.0
    } else {
        cov / (va * vb).sqrt()
    }
}

/// How training data is harvested from a source environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub snapshot_every: u64,
    pub snapshots: usize,
    /// Training steps between a past snapshot and its comparison.
    pub beta: u64,
    /// Step budget for training the source teacher.
    pub teacher_budget: u64,
    pub teacher_threshold: f64,
    pub teacher_window: usize,
    pub kl_form: GaussianKlForm,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            snapshot_every: 5_000,
            snapshots: 6,
            beta: 1_500,
            teacher_budget: 100_000,
            teacher_threshold: 0.0,
            teacher_window: 10,
            kl_form: GaussianKlForm::Standard,
        }
    }
}

/// Trains a learner on `env` from its default start until `window`
/// consecutive episodes return at least `threshold`.
pub fn train_teacher<R: Rng + ?Sized>(
    env: &mut Environment,
    config: &AgentConfig,
    threshold: f64,
    window: usize,
    budget: u64,
    rng: &mut R,
) -> Result<Agent, RegressorError> {
    let mut agent = Agent::for_env(env, config.clone(), rng).map_err(TrainError::from)?;
    let mut replay = ReplayBuffer::new(config.buffer_size);
    let mut ctx = TrainContext::new(budget);
    ctx.phase = "teacher".into();
    let mut crit = ConvergenceCriterion::new(Convergence::HighestReward { window, threshold });
    let out = train(&mut agent, env, &mut replay, None, &mut crit, None, &mut ctx, rng)?;
    if !out.converged {
        return Err(RegressorError::TeacherNotConverged { threshold, budget });
    }
    Ok(agent)
}

/// Rows for every visited state at each snapshot of a fresh learner, targeted
/// at the teacher-vs-learner relative entropy.
pub fn build_training_set<R: Rng + ?Sized>(
    env: &mut Environment,
    teacher: &Agent,
    agent_config: &AgentConfig,
    config: &DatasetConfig,
    rng: &mut R,
) -> Result<RegressionDataset, RegressorError> {
    let mut agent = Agent::for_env(env, agent_config.clone(), rng).map_err(TrainError::from)?;
    let mut replay = ReplayBuffer::new(agent_config.buffer_size);
    let mut sb = StateBuffer::new();
    let mut ctx = TrainContext::new(u64::MAX);
    ctx.phase = "dataset".into();
    let mut data = RegressionDataset::default();
    for snap in 0..config.snapshots {
        let mut crit = ConvergenceCriterion::new(Convergence::FixedSteps(config.snapshot_every));
        train(&mut agent, env, &mut replay, Some(&mut sb), &mut crit, None, &mut ctx, rng)?;
        let past = agent.clone();
        let mut crit = ConvergenceCriterion::new(Convergence::FixedSteps(config.beta));
        train(&mut agent, env, &mut replay, Some(&mut sb), &mut crit, None, &mut ctx, rng)?;
        for entry in sb.iter() {
            let rec = record_for(&past, &agent, &entry.observation, entry.visits, config.kl_form)?;
            let target = teacher_kl(&agent, teacher, &entry.observation, config.kl_form)?;
            data.push(snap, &rec, target);
        }
    }
    Ok(data)
}
