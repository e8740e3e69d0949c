//! Invariant checks runnable from the command line against shipped fixtures.

use crate::baselines::max_policy_change_overhead;
use crate::clustering::{ward_cluster, ward_dendrogram};
use crate::env::{Action, Environment};
use crate::regressor::{fit_gbm, GbmParams, RegressionDataset};
use crate::uncertainty::argmax_score;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &str, passed: bool, detail: impl Into<String>) -> Check {
    Check {
        name: name.into(),
        passed,
        detail: detail.into(),
    }
}

fn scripted_rewards() -> Check {
    // east twice to the key, south twice to the lock
    let mut env = Environment::grid_from_text("S.K\n.P.\n..L\n").expect("inline board");
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut rewards = Vec::new();
    let ok = env.reset(None, &mut rng).is_ok();
    for a in [1usize, 1, 2, 2] {
        match env.step(&Action::Discrete(a)) {
            Ok(s) => rewards.push(s.reward),
            Err(_) => break,
        }
    }
    let want = [-10.0, 500.0, -10.0, 1000.0];
    check(
        "scripted key-lock rewards",
        ok && rewards == want,
        format!("{rewards:?}"),
    )
}

fn overhead_identity(rng: &mut ChaCha8Rng) -> Check {
    let mut ok = max_policy_change_overhead(2, 50_000, 15, 5_000) == 245_000;
    for _ in 0..20 {
        let (n, p, t, k) = (
            rng.random_range(1..5u64),
            rng.random_range(1..100_000u64),
            rng.random_range(1..30u64),
            rng.random_range(1..10_000u64),
        );
        ok &= max_policy_change_overhead(n, p, t, k) + k == n * (p + t * k);
    }
    check("curriculum-generation overhead identity", ok, "")
}

fn ward_monotone(rng: &mut ChaCha8Rng) -> Check {
    let mut ok = true;
    for _ in 0..50 {
        let n = rng.random_range(1..9);
        let pts: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..2).map(|_| rng.random_range(-5.0..5.0)).collect())
            .collect();
        let d = ward_dendrogram(&pts);
        ok &= d.merges.windows(2).all(|w| w[0].cost <= w[1].cost);
        let p = ward_cluster(&pts, 3.0);
        let mut members: Vec<usize> = p.clusters.iter().flatten().copied().collect();
        members.sort_unstable();
        ok &= members == (0..n).collect::<Vec<_>>();
    }
    check("Ward merges nondecreasing, partitions cover", ok, "")
}

fn argmax_shift(rng: &mut ChaCha8Rng) -> Check {
    let mut ok = true;
    for _ in 0..1_000 {
        let v: Vec<f64> = (0..rng.random_range(1..40)).map(|_| rng.random_range(0.0..5.0)).collect();
        let c = rng.random_range(-100.0..100.0);
        let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
        ok &= argmax_score(&v) == argmax_score(&shifted);
    }
    check("argmax unchanged under constant shift", ok, "")
}

fn gbm_linear_fit(rng: &mut ChaCha8Rng) -> Check {
    let mut data = RegressionDataset::default();
    for _ in 0..300 {
        let x: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        data.targets.push(2.0 * x[0] + 2.0);
        data.rows.push(x);
        data.snapshot.push(0);
    }
    match fit_gbm(&data, GbmParams::default()) {
        Ok(m) => {
            let mean = data.targets.iter().sum::<f64>() / data.targets.len() as f64;
            let var = data.targets.iter().map(|y| (y - mean).powi(2)).sum::<f64>()
                / data.targets.len() as f64;
            let ok = m.training_mse.windows(2).all(|w| w[1] <= w[0])
                && m.training_mse.last().is_some_and(|&e| e < 0.01 * var);
            check("boosted trees fit a linear target", ok, format!("{:?}", m.training_mse.last()))
        }
        Err(e) => check("boosted trees fit a linear target", false, e.to_string()),
    }
}

fn fixture_boards(dir: &Path) -> Vec<Check> {
    let mut out = Vec::new();
    let Ok(entries) = std::fs::read_dir(dir) else {
        return vec![check("fixture directory", false, dir.display().to_string())];
    };
    let mut paths: Vec<_> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "txt"))
        .collect();
    paths.sort();
    for p in paths {
        let name = format!("board {}", p.file_name().unwrap_or_default().to_string_lossy());
        match Environment::grid_from_file(&p) {
            Ok(Environment::Grid(g)) => {
                let best = g.optimal_return(&g.start_state());
                out.push(check(&name, best > 0.0, format!("optimal return {best}")));
            }
            Ok(_) => out.push(check(&name, false, "not a grid board")),
            Err(e) => out.push(check(&name, false, e.to_string())),
        }
    }
    out
}

/// Runs every check; board fixtures come from `fixtures`.
pub fn run_suite(fixtures: &Path) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut out = vec![
        scripted_rewards(),
        overhead_identity(&mut rng),
        ward_monotone(&mut rng),
        argmax_shift(&mut rng),
        gbm_linear_fit(&mut rng),
    ];
    out.extend(fixture_boards(fixtures));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_fixtures_pass() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures");
        let checks = run_suite(&dir);
        for c in &checks {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
        assert!(checks.len() > 6);
    }
}
