//! Agglomerative clustering under the Ward criterion and region scoring.

use rand::Rng;
use serde::Serialize;

/// One agglomeration step. Clusters live in slots named by their lowest
/// original point; `keep < absorbed` and the merged cluster stays in `keep`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Merge {
    pub keep: usize,
    pub absorbed: usize,
    /// Ward increase `n_a n_b / (n_a + n_b) * |c_a - c_b|^2`.
    pub cost: f64,
    pub size: usize,
}

/// The full merge history of `n` points.
#[derive(Debug, Clone, PartialEq)]
pub struct Dendrogram {
    pub n: usize,
    pub merges: Vec<Merge>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterPartition {
    /// Member indices, ascending; clusters ordered by their lowest member.
    pub clusters: Vec<Vec<usize>>,
    pub centroids: Vec<Vec<f64>>,
    /// Costs of the merges that produced this partition, in order.
    pub merge_costs: Vec<f64>,
}

impl ClusterPartition {
    pub fn len(&self) -> usize {
        self.clusters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clusters.is_empty()
    }

    /// Cluster id of every point.
    pub fn labels(&self, n: usize) -> Vec<usize> {
        let mut out = vec![usize::MAX; n];
        for (c, members) in self.clusters.iter().enumerate() {
            for &m in members {
                out[m] = c;
            }
        }
        out
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Ward agglomeration of `points` down to a single cluster.
///
/// Pairwise costs are updated with the Lance-Williams recurrence. Each row
/// caches its cheapest partner among higher slots; ties resolve to the
/// lexicographically lowest pair.
pub fn ward_dendrogram(points: &[Vec<f64>]) -> Dendrogram {
    let n = points.len();
    let mut d = vec![0.0f64; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let v = 0.5 * sq_dist(&points[i], &points[j]);
            d[i * n + j] = v;
            d[j * n + i] = v;
        }
    }
    let mut size = vec![1usize; n];
    let mut active = vec![true; n];
    let mut nn = vec![usize::MAX; n];
    let mut nn_cost = vec![f64::INFINITY; n];
    let rescan = |i: usize, d: &[f64], active: &[bool], nn: &mut [usize], nn_cost: &mut [f64]| {
        nn[i] = usize::MAX;
        nn_cost[i] = f64::INFINITY;
        for j in i + 1..n {
            if active[j] && d[i * n + j] < nn_cost[i] {
                nn[i] = j;
                nn_cost[i] = d[i * n + j];
            }
        }
    };
    for i in 0..n {
        rescan(i, &d, &active, &mut nn, &mut nn_cost);
    }
    let mut merges = Vec::with_capacity(n.saturating_sub(1));
    for _ in 1..n {
        let mut a = usize::MAX;
        for i in 0..n {
            if active[i] && nn[i] != usize::MAX && (a == usize::MAX || nn_cost[i] < nn_cost[a]) {
                a = i;
            }
        }
        let b = nn[a];
        let cost = nn_cost[a];
        let (na, nb) = (size[a] as f64, size[b] as f64);
        for k in 0..n {
            if !active[k] || k == a || k == b {
                continue;
            }
            let nk = size[k] as f64;
            let v = ((na + nk) * d[k * n + a] + (nb + nk) * d[k * n + b] - nk * cost)
                / (na + nb + nk);
            d[k * n + a] = v;
            d[a * n + k] = v;
        }
        active[b] = false;
        size[a] += size[b];
        merges.push(Merge {
            keep: a,
            absorbed: b,
            cost,
            size: size[a],
        });
        for k in 0..n {
            if !active[k] {
                continue;
            }
            if k == a || nn[k] == a || nn[k] == b {
                rescan(k, &d, &active, &mut nn, &mut nn_cost);
            } else if k < a {
                let v = d[k * n + a];
                if v < nn_cost[k] || (v == nn_cost[k] && a < nn[k]) {
                    nn[k] = a;
                    nn_cost[k] = v;
                }
            }
        }
    }
    Dendrogram { n, merges }
}

impl Dendrogram {
    /// Partition after the first `steps` merges.
    pub fn partition(&self, points: &[Vec<f64>], steps: usize) -> ClusterPartition {
        let mut members: Vec<Option<Vec<usize>>> = (0..self.n).map(|i| Some(vec![i])).collect();
        let steps = steps.min(self.merges.len());
        for m in &self.merges[..steps] {
            let absorbed = members[m.absorbed].take().expect("slot merged twice");
            members[m.keep]
                .as_mut()
                .expect("merge into an empty slot")
                .extend(absorbed);
        }
        let mut clusters: Vec<Vec<usize>> = members.into_iter().flatten().collect();
        for c in clusters.iter_mut() {
            c.sort_unstable();
        }
        clusters.sort_by_key(|c| c[0]);
        let centroids = clusters.iter().map(|c| centroid(points, c)).collect();
        ClusterPartition {
            clusters,
            centroids,
            merge_costs: self.merges[..steps].iter().map(|m| m.cost).collect(),
        }
    }

    /// Merges accepted before the cheapest remaining one exceeds `cutoff`.
    pub fn steps_within(&self, cutoff: f64) -> usize {
        self.merges.iter().take_while(|m| m.cost <= cutoff).count()
    }
}

pub fn centroid(points: &[Vec<f64>], members: &[usize]) -> Vec<f64> {
    let dim = points.first().map_or(0, Vec::len);
    let mut c = vec![0.0; dim];
    for &m in members {
        for (acc, v) in c.iter_mut().zip(&points[m]) {
            *acc += v;
        }
    }
    c.iter_mut().for_each(|v| *v /= members.len() as f64);
    c
}

/// Merge until the cheapest Ward increase exceeds `cutoff`.
pub fn ward_cluster(points: &[Vec<f64>], cutoff: f64) -> ClusterPartition {
    let dendro = ward_dendrogram(points);
    dendro.partition(points, dendro.steps_within(cutoff))
}

/// Exactly `k` clusters (clamped to `1..=n`), cut from the same merge history.
pub fn ward_cluster_count(points: &[Vec<f64>], k: usize) -> ClusterPartition {
    let dendro = ward_dendrogram(points);
    let k = k.clamp(1, points.len().max(1));
    dendro.partition(points, points.len().saturating_sub(k))
}

/// Mean uncertainty of each cluster's members.
pub fn region_scores(partition: &ClusterPartition, uncertainty: &[f64]) -> Vec<f64> {
    partition
        .clusters
        .iter()
        .map(|c| c.iter().map(|&i| uncertainty[i]).sum::<f64>() / c.len() as f64)
        .collect()
}

/// Highest-scoring cluster (lowest id on ties) and a uniformly drawn member.
pub fn region_select<R: Rng + ?Sized>(
    partition: &ClusterPartition,
    uncertainty: &[f64],
    rng: &mut R,
) -> Option<(usize, usize)> {
    let scores = region_scores(partition, uncertainty);
    let best = crate::uncertainty::argmax_score(&scores)?;
    let members = &partition.clusters[best];
    Some((best, members[rng.random_range(0..members.len())]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Recomputes every pairwise Ward cost from centroids at each step.
    fn brute_force(points: &[Vec<f64>]) -> Vec<(Vec<usize>, f64)> {
        let mut clusters: Vec<Vec<usize>> = (0..points.len()).map(|i| vec![i]).collect();
        let mut out = Vec::new();
        while clusters.len() > 1 {
            let mut best = (0, 1, f64::INFINITY);
            for i in 0..clusters.len() {
                for j in i + 1..clusters.len() {
                    let (ni, nj) = (clusters[i].len() as f64, clusters[j].len() as f64);
                    let c = ni * nj / (ni + nj)
                        * sq_dist(&centroid(points, &clusters[i]), &centroid(points, &clusters[j]));
                    if c < best.2 {
                        best = (i, j, c);
                    }
                }
            }
            let absorbed = clusters.remove(best.1);
            clusters[best.0].extend(absorbed);
            clusters[best.0].sort_unstable();
            out.push((clusters[best.0].clone(), best.2));
        }
        out
    }

    #[test]
    fn identical_points_merge() {
        let p = ward_cluster(&[vec![2.0, 2.0], vec![2.0, 2.0]], 1e-9);
        assert_eq!(p.clusters, vec![vec![0, 1]]);
    }

    #[test]
    fn line_example() {
        let pts = vec![vec![0.0], vec![1.0], vec![10.0]];
        let p = ward_cluster(&pts, 3.0);
        assert_eq!(p.clusters, vec![vec![0, 1], vec![2]]);
        assert_eq!(p.merge_costs, vec![0.5]);
        let d = ward_dendrogram(&pts);
        assert!((d.merges[1].cost - 2.0 / 3.0 * 9.5f64.powi(2)).abs() < 1e-12);
    }

    #[test]
    fn matches_exhaustive_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let n = rng.random_range(2..=8);
            let pts: Vec<Vec<f64>> = (0..n)
                .map(|_| vec![rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)])
                .collect();
            let d = ward_dendrogram(&pts);
            let oracle = brute_force(&pts);
            for (step, (members, cost)) in oracle.iter().enumerate() {
                let part = d.partition(&pts, step + 1);
                assert!(part.clusters.contains(members));
                assert!((d.merges[step].cost - cost).abs() < 1e-9 * (1.0 + cost));
            }
            assert!(d.merges.windows(2).all(|w| w[1].cost >= w[0].cost));
        }
    }

    #[test]
    fn count_cut() {
        let pts: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64 * i as f64]).collect();
        for k in 1..=10 {
            assert_eq!(ward_cluster_count(&pts, k).len(), k);
        }
    }

    #[test]
    fn region_choice() {
        let pts = vec![vec![0.0], vec![0.1], vec![50.0], vec![50.2]];
        let p = ward_cluster(&pts, 1.0);
        assert_eq!(p.len(), 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (c, m) = region_select(&p, &[0.0; 4], &mut rng).unwrap();
        assert_eq!(c, 0);
        assert!(m < 2);
        let single = ward_cluster(&pts, 1e-6);
        for _ in 0..20 {
            let (c, m) = region_select(&single, &[0.0, 0.0, 10.0, 0.0], &mut rng).unwrap();
            assert_eq!((c, m), (2, 2));
        }
        let draw = |seed| region_select(&p, &[1.0; 4], &mut ChaCha8Rng::seed_from_u64(seed));
        assert_eq!(draw(5), draw(5));
    }

    proptest! {
        #[test]
        fn partition_and_cutoff_laws(
            pts in proptest::collection::vec(proptest::collection::vec(-4.0f64..4.0, 3), 1..30),
            c1 in 0.01f64..20.0,
            c2 in 0.01f64..20.0,
        ) {
            let (lo, hi) = if c1 <= c2 { (c1, c2) } else { (c2, c1) };
            let a = ward_cluster(&pts, lo);
            let b = ward_cluster(&pts, hi);
            prop_assert!(b.len() <= a.len());
            let mut all: Vec<usize> = a.clusters.iter().flatten().copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..pts.len()).collect::<Vec<_>>());
            prop_assert!(a.merge_costs.iter().all(|&c| c <= lo));
            let d = ward_dendrogram(&pts);
            prop_assert!(d.merges.windows(2).all(|w| w[1].cost >= w[0].cost - 1e-12 * (1.0 + w[0].cost)));
        }
    }
}
