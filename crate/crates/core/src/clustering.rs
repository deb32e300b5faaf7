//! Agglomerative clustering with Ward linkage, k-means, and the adjusted
//! Rand index.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusterMethod {
    WardAgglomerative,
    KMeans,
}

impl std::str::FromStr for ClusterMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ward" | "ward_agglomerative" => Ok(Self::WardAgglomerative),
            "kmeans" | "k_means" => Ok(Self::KMeans),
            other => Err(Error::InvalidConfig(format!(
                "unknown clustering method `{other}`"
            ))),
        }
    }
}

impl ClusterMethod {
    pub fn tag(&self) -> &'static str {
        match self {
            Self::WardAgglomerative => "ward",
            Self::KMeans => "kmeans",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub k: usize,
    /// One label in `[0, k)` per input point, numbered by first appearance.
    pub labels: Vec<usize>,
    pub method: ClusterMethod,
}

/// One agglomeration step. Leaves are `0..n`; the cluster created by merge
/// `s` gets id `n + s`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Merge {
    pub a: usize,
    pub b: usize,
    /// Increase in total within-cluster sum of squares.
    pub cost: f64,
    pub size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dendrogram {
    pub num_leaves: usize,
    pub merges: Vec<Merge>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_points<P: AsRef<[f64]>>(points: &[P], k: usize) -> Result<usize> {
    let n = points.len();
    if k == 0 || k > n {
        return Err(Error::Precondition(format!(
            "need 1 <= k <= n, got k={k}, n={n}"
        )));
    }
    let d = points[0].as_ref().len();
    if points.iter().any(|p| p.as_ref().len() != d) {
        return Err(Error::Shape("points have different dimensions".into()));
    }
    Ok(d)
}

/// Condensed upper-triangular storage of pairwise values.
struct Condensed {
    n: usize,
    data: Vec<f64>,
}

impl Condensed {
    fn new(n: usize) -> Self {
        Self {
            n,
            data: vec![0.0; n * n.saturating_sub(1) / 2],
        }
    }

    #[inline]
    fn idx(&self, i: usize, j: usize) -> usize {
        let (i, j) = if i < j { (i, j) } else { (j, i) };
        i * (2 * self.n - i - 1) / 2 + (j - i - 1)
    }

    #[inline]
    fn get(&self, i: usize, j: usize) -> f64 {
        self.data[self.idx(i, j)]
    }

    #[inline]
    fn set(&mut self, i: usize, j: usize, v: f64) {
        let k = self.idx(i, j);
        self.data[k] = v;
    }
}

/// Full Ward dendrogram. Each step merges the pair with the smallest
/// increase in within-cluster sum of squares; ties go to the lowest slot
/// indices. Costs are maintained with the Lance-Williams recurrence.
pub fn ward_linkage<P: AsRef<[f64]>>(points: &[P]) -> Result<Dendrogram> {
    let n = points.len();
    if n == 0 {
        return Err(Error::Precondition("no points to cluster".into()));
    }
    check_points(points, 1)?;
    let mut cost = Condensed::new(n);
    for i in 0..n {
        for j in i + 1..n {
            // singleton merge: 1*1/(1+1) * |xi - xj|^2
            cost.set(i, j, 0.5 * sq_dist(points[i].as_ref(), points[j].as_ref()));
        }
    }
    let mut active = vec![true; n];
    let mut size = vec![1usize; n];
    let mut id: Vec<usize> = (0..n).collect();
    let mut nn = vec![usize::MAX; n];
    let mut nn_cost = vec![f64::INFINITY; n];

    let refresh =
        |i: usize, active: &[bool], cost: &Condensed, nn: &mut [usize], nn_cost: &mut [f64]| {
            nn[i] = usize::MAX;
            nn_cost[i] = f64::INFINITY;
            for j in i + 1..active.len() {
                if active[j] {
                    let c = cost.get(i, j);
                    if c < nn_cost[i] {
                        nn_cost[i] = c;
                        nn[i] = j;
                    }
                }
            }
        };
    for i in 0..n {
        refresh(i, &active, &cost, &mut nn, &mut nn_cost);
    }

    let mut merges = Vec::with_capacity(n - 1);
    for step in 0..n - 1 {
        let mut i = usize::MAX;
        let mut best = f64::INFINITY;
        for s in 0..n {
            if active[s] && nn[s] != usize::MAX && nn_cost[s] < best {
                best = nn_cost[s];
                i = s;
            }
        }
        let j = nn[i];
        let (ni, nj) = (size[i] as f64, size[j] as f64);
        let cij = cost.get(i, j);
        for k in 0..n {
            if !active[k] || k == i || k == j {
                continue;
            }
            let nk = size[k] as f64;
            let updated = ((ni + nk) * cost.get(i, k) + (nj + nk) * cost.get(j, k) - nk * cij)
                / (ni + nj + nk);
            cost.set(i, k, updated);
        }
        let (a, b) = (id[i].min(id[j]), id[i].max(id[j]));
        merges.push(Merge {
            a,
            b,
            cost: cij,
            size: size[i] + size[j],
        });
        active[j] = false;
        size[i] += size[j];
        id[i] = n + step;

        for k in 0..n {
            if !active[k] {
                continue;
            }
            if k == i || nn[k] == i || nn[k] == j {
                refresh(k, &active, &cost, &mut nn, &mut nn_cost);
            } else if k < i {
                let c = cost.get(k, i);
                if c < nn_cost[k] || (c == nn_cost[k] && i < nn[k]) {
                    nn_cost[k] = c;
                    nn[k] = i;
                }
            }
        }
    }
    Ok(Dendrogram {
        num_leaves: n,
        merges,
    })
}

/// Numbers labels by order of first appearance along the input.
pub fn relabel_by_first_appearance(raw: &[usize]) -> Vec<usize> {
    let mut map: HashMap<usize, usize> = HashMap::new();
    raw.iter()
        .map(|r| {
            let next = map.len();
            *map.entry(*r).or_insert(next)
        })
        .collect()
}

/// Number of times a label comes back after a different label intervened,
/// e.g. `[0, 0, 1, 0, 2, 1]` has two repeats.
pub fn label_repeats(labels: &[usize]) -> usize {
    let mut seen = std::collections::HashSet::new();
    let mut repeats = 0;
    let mut prev = None;
    for &l in labels {
        if prev != Some(l) {
            if !seen.insert(l) {
                repeats += 1;
            }
            prev = Some(l);
        }
    }
    repeats
}

impl Dendrogram {
    /// Labels after applying the first `n - k` merges.
    pub fn cut(&self, k: usize) -> Result<Vec<usize>> {
        let n = self.num_leaves;
        if k == 0 || k > n {
            return Err(Error::Precondition(format!(
                "need 1 <= k <= n, got k={k}, n={n}"
            )));
        }
        let mut parent: Vec<usize> = (0..2 * n - 1).collect();
        fn find(parent: &mut [usize], mut x: usize) -> usize {
            while parent[x] != x {
                parent[x] = parent[parent[x]];
                x = parent[x];
            }
            x
        }
        for (s, m) in self.merges.iter().take(n - k).enumerate() {
            let ra = find(&mut parent, m.a);
            let rb = find(&mut parent, m.b);
            parent[ra] = n + s;
            parent[rb] = n + s;
        }
        let raw: Vec<usize> = (0..n).map(|i| find(&mut parent, i)).collect();
        Ok(relabel_by_first_appearance(&raw))
    }
}

/// Ward clustering cut at `k` clusters.
pub fn ward_agglomerative<P: AsRef<[f64]>>(
    points: &[P],
    k: usize,
) -> Result<(ClusterAssignment, Dendrogram)> {
    check_points(points, k)?;
    let dendrogram = ward_linkage(points)?;
    let labels = dendrogram.cut(k)?;
    Ok((
        ClusterAssignment {
            k,
            labels,
            method: ClusterMethod::WardAgglomerative,
        },
        dendrogram,
    ))
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansResult {
    pub assignment: ClusterAssignment,
    /// Centers indexed by the relabeled cluster ids.
    pub centers: Vec<Vec<f64>>,
    /// Total within-cluster squared distance after every Lloyd iteration.
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
}

impl KMeansResult {
    pub fn objective(&self) -> f64 {
        *self.objective_trace.last().expect("at least one iteration")
    }
}

/// Sum of squared distances of every point to the centroid of its label.
pub fn within_cluster_ss<P: AsRef<[f64]>>(points: &[P], labels: &[usize]) -> f64 {
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let d = points.first().map_or(0, |p| p.as_ref().len());
    let mut sums = vec![vec![0.0; d]; k];
    let mut counts = vec![0usize; k];
    for (p, &l) in points.iter().zip(labels) {
        counts[l] += 1;
        sums[l]
            .iter_mut()
            .zip(p.as_ref())
            .for_each(|(s, x)| *s += x);
    }
    let centers: Vec<Vec<f64>> = sums
        .into_iter()
        .zip(&counts)
        .map(|(s, &c)| s.into_iter().map(|v| v / c.max(1) as f64).collect())
        .collect();
    points
        .iter()
        .zip(labels)
        .map(|(p, &l)| sq_dist(p.as_ref(), &centers[l]))
        .sum()
}

fn nearest(p: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, ctr) in centers.iter().enumerate() {
        let d = sq_dist(p, ctr);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// k-means++ seeding followed by Lloyd iterations until the assignment stops
/// changing or `max_iter` is reached. An emptied cluster is re-seeded at the
/// point farthest from its current center.
pub fn kmeans<P: AsRef<[f64]>>(
    points: &[P],
    k: usize,
    seed: u64,
    max_iter: usize,
) -> Result<KMeansResult> {
    let d = check_points(points, k)?;
    let n = points.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
    centers.push(points[rng.random_range(0..n)].as_ref().to_vec());
    let mut d2: Vec<f64> = points
        .iter()
        .map(|p| sq_dist(p.as_ref(), &centers[0]))
        .collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if r < w {
                    pick = i;
                    break;
                }
                r -= w;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        let c = points[next].as_ref().to_vec();
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p.as_ref(), &c));
        }
        centers.push(c);
    }

    let mut labels = vec![usize::MAX; n];
    let mut trace = Vec::new();
    let mut iterations = 0;
    for _ in 0..max_iter.max(1) {
        iterations += 1;
        let mut changed = false;
        let mut dist = vec![0.0; n];
        for (i, p) in points.iter().enumerate() {
            let (c, dd) = nearest(p.as_ref(), &centers);
            if labels[i] != c {
                labels[i] = c;
                changed = true;
            }
            dist[i] = dd;
        }
        let mut counts = vec![0usize; k];
        labels.iter().for_each(|&l| counts[l] += 1);
        while let Some(empty) = counts.iter().position(|&c| c == 0) {
            let far = (0..n)
                .filter(|&i| counts[labels[i]] > 1)
                .max_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(b.cmp(&a)))
                .expect("k <= n leaves a cluster with two members");
            counts[labels[far]] -= 1;
            counts[empty] = 1;
            labels[far] = empty;
            dist[far] = 0.0;
            centers[empty] = points[far].as_ref().to_vec();
            changed = true;
        }
        let mut sums = vec![vec![0.0; d]; k];
        for (p, &l) in points.iter().zip(&labels) {
            sums[l]
                .iter_mut()
                .zip(p.as_ref())
                .for_each(|(s, x)| *s += x);
        }
        for (c, s) in sums.into_iter().enumerate() {
            centers[c] = s.into_iter().map(|v| v / counts[c] as f64).collect();
        }
        trace.push(
            points
                .iter()
                .zip(&labels)
                .map(|(p, &l)| sq_dist(p.as_ref(), &centers[l]))
                .sum(),
        );
        if !changed {
            break;
        }
    }

    let relabeled = relabel_by_first_appearance(&labels);
    let mut ordered = vec![Vec::new(); k];
    for (raw, new) in labels.iter().zip(&relabeled) {
        if ordered[*new].is_empty() {
            ordered[*new] = centers[*raw].clone();
        }
    }
    Ok(KMeansResult {
        assignment: ClusterAssignment {
            k,
            labels: relabeled,
            method: ClusterMethod::KMeans,
        },
        centers: ordered,
        objective_trace: trace,
        iterations,
    })
}

fn choose2(x: usize) -> f64 {
    let x = x as f64;
    x * (x - 1.0) / 2.0
}

/// Adjusted Rand index from the pair-counting contingency table.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "label lengths differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len();
    let mut table: HashMap<(usize, usize), usize> = HashMap::new();
    let mut rows: HashMap<usize, usize> = HashMap::new();
    let mut cols: HashMap<usize, usize> = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1;
        *rows.entry(x).or_default() += 1;
        *cols.entry(y).or_default() += 1;
    }
    let index: f64 = table.values().map(|&c| choose2(c)).sum();
    let sum_a: f64 = rows.values().map(|&c| choose2(c)).sum();
    let sum_b: f64 = cols.values().map(|&c| choose2(c)).sum();
    let total = choose2(n);
    if total == 0.0 {
        return Ok(1.0);
    }
    let expected = sum_a * sum_b / total;
    let max = 0.5 * (sum_a + sum_b);
    if max == expected {
        // both partitions trivial (one cluster or all singletons)
        return Ok(if sum_a == sum_b { 1.0 } else { 0.0 });
    }
    Ok((index - expected) / (max - expected))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_points_merge_the_close_pair_first() {
        let pts = vec![vec![0.0], vec![1.0], vec![10.0]];
        let (asg, dendro) = ward_agglomerative(&pts, 2).unwrap();
        assert_eq!(asg.labels, vec![0, 0, 1]);
        assert_eq!((dendro.merges[0].a, dendro.merges[0].b), (0, 1));
        assert!((dendro.merges[0].cost - 0.5).abs() < 1e-15);
        // {0,1} centroid 0.5 vs 10: 2*1/3 * 9.5^2
        assert!((dendro.merges[1].cost - 2.0 / 3.0 * 90.25).abs() < 1e-12);
    }

    #[test]
    fn k_equal_n_keeps_singletons() {
        let pts = vec![vec![3.0], vec![1.0], vec![2.0]];
        let (asg, _) = ward_agglomerative(&pts, 3).unwrap();
        assert_eq!(asg.labels, vec![0, 1, 2]);
    }

    #[test]
    fn duplicated_points_share_labels() {
        let base = [
            vec![0.0, 0.0],
            vec![5.0, 1.0],
            vec![-3.0, 4.0],
            vec![9.0, 9.0],
        ];
        let pts: Vec<Vec<f64>> = base.iter().flat_map(|p| [p.clone(), p.clone()]).collect();
        let (asg, dendro) = ward_agglomerative(&pts, 4).unwrap();
        for i in 0..4 {
            assert_eq!(asg.labels[2 * i], asg.labels[2 * i + 1]);
        }
        assert!(dendro.merges[..4].iter().all(|m| m.cost == 0.0));
    }

    #[test]
    fn k_larger_than_n_is_an_error() {
        let pts = vec![vec![0.0]];
        assert!(ward_agglomerative(&pts, 2).is_err());
        assert!(kmeans(&pts, 2, 0, 10).is_err());
    }

    #[test]
    fn kmeans_splits_symmetric_pairs() {
        let pts = vec![
            vec![0.0, 0.0],
            vec![0.0, 1.0],
            vec![10.0, 0.0],
            vec![10.0, 1.0],
        ];
        let r = kmeans(&pts, 2, 1, 100).unwrap();
        assert_eq!(r.assignment.labels, vec![0, 0, 1, 1]);
        assert_eq!(r.centers, vec![vec![0.0, 0.5], vec![10.0, 0.5]]);
    }

    #[test]
    fn single_cluster_center_is_the_mean() {
        let pts = vec![vec![1.0, 2.0], vec![3.0, 6.0], vec![5.0, 1.0]];
        let r = kmeans(&pts, 1, 4, 10).unwrap();
        assert!((r.centers[0][0] - 3.0).abs() < 1e-15);
        assert!((r.centers[0][1] - 3.0).abs() < 1e-15);
    }

    #[test]
    fn repeats_count_returning_labels() {
        assert_eq!(label_repeats(&[0, 0, 1, 0, 2, 1]), 2);
        assert_eq!(label_repeats(&[3, 3, 3]), 0);
        assert_eq!(label_repeats(&[]), 0);
    }

    #[test]
    fn ari_known_values() {
        assert_eq!(
            adjusted_rand_index(&[0, 0, 1, 1], &[0, 0, 1, 1]).unwrap(),
            1.0
        );
        assert_eq!(
            adjusted_rand_index(&[0, 0, 1, 2], &[5, 5, 3, 9]).unwrap(),
            1.0
        );
        let v = adjusted_rand_index(&[0, 0, 1, 1], &[0, 1, 0, 1]).unwrap();
        assert!((v + 0.5).abs() < 1e-12);
        assert!(adjusted_rand_index(&[0], &[0, 1]).is_err());
    }

    #[test]
    fn relabeling_follows_first_appearance() {
        assert_eq!(
            relabel_by_first_appearance(&[7, 7, 2, 9, 2]),
            vec![0, 0, 1, 2, 1]
        );
    }
}
