//! Random forest of Gini-impurity decision trees over bootstrap samples.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{majority_class, Learner, Predictor};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomForestConfig {
    pub num_trees: usize,
    pub max_depth: usize,
    pub min_leaf: usize,
    pub seed: u64,
    /// Features tried per split; defaults to `ceil(sqrt(F))`.
    #[serde(default)]
    pub max_features: Option<usize>,
}

impl Default for RandomForestConfig {
    fn default() -> Self {
        Self {
            num_trees: 100,
            max_depth: 12,
            min_leaf: 2,
            seed: 0,
            max_features: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
enum Node {
    Leaf(usize),
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecisionTree {
    nodes: Vec<Node>,
}

impl DecisionTree {
    pub fn predict(&self, x: &[f64]) -> usize {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Leaf(c) => return *c,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    i = if x[*feature] <= *threshold {
                        *left
                    } else {
                        *right
                    }
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], i: usize) -> usize {
            match &nodes[i] {
                Node::Leaf(_) => 0,
                Node::Split { left, right, .. } => 1 + walk(nodes, *left).max(walk(nodes, *right)),
            }
        }
        walk(&self.nodes, 0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RandomForest {
    pub num_classes: usize,
    pub trees: Vec<DecisionTree>,
    /// Set when training saw a single class and the model is constant.
    pub degenerate: bool,
}

impl Predictor for RandomForest {
    fn predict(&self, x: &[f64]) -> usize {
        let mut votes = vec![0usize; self.num_classes];
        for t in &self.trees {
            votes[t.predict(x)] += 1;
        }
        let mut best = 0;
        for c in 1..votes.len() {
            if votes[c] > votes[best] {
                best = c;
            }
        }
        best
    }
}

fn gini(counts: &[usize], total: usize) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let t = total as f64;
    1.0 - counts.iter().map(|&c| (c as f64 / t).powi(2)).sum::<f64>()
}

struct TreeBuilder<'a> {
    x: &'a [Vec<f64>],
    y: &'a [usize],
    num_classes: usize,
    cfg: &'a RandomForestConfig,
    max_features: usize,
    nodes: Vec<Node>,
}

impl TreeBuilder<'_> {
    fn leaf(&mut self, idx: &[usize]) -> usize {
        let labels: Vec<usize> = idx.iter().map(|&i| self.y[i]).collect();
        self.nodes
            .push(Node::Leaf(majority_class(&labels, self.num_classes)));
        self.nodes.len() - 1
    }

    fn build(&mut self, idx: &mut [usize], depth: usize, rng: &mut ChaCha8Rng) -> usize {
        let mut counts = vec![0usize; self.num_classes];
        idx.iter().for_each(|&i| counts[self.y[i]] += 1);
        let n = idx.len();
        let parent = gini(&counts, n);
        if depth >= self.cfg.max_depth || n < 2 * self.cfg.min_leaf || parent == 0.0 {
            return self.leaf(idx);
        }

        let num_features = self.x[0].len();
        let candidates = index::sample(rng, num_features, self.max_features.min(num_features));
        // (impurity, feature, threshold)
        let mut best: Option<(f64, usize, f64)> = None;
        let mut order: Vec<usize> = idx.to_vec();
        for f in candidates.iter() {
            order.sort_by(|&a, &b| self.x[a][f].total_cmp(&self.x[b][f]).then(a.cmp(&b)));
            let mut left = vec![0usize; self.num_classes];
            let mut right = counts.clone();
            for s in 1..n {
                let c = self.y[order[s - 1]];
                left[c] += 1;
                right[c] -= 1;
                let (lo, hi) = (self.x[order[s - 1]][f], self.x[order[s]][f]);
                if lo == hi || s < self.cfg.min_leaf || n - s < self.cfg.min_leaf {
                    continue;
                }
                let imp =
                    (s as f64 * gini(&left, s) + (n - s) as f64 * gini(&right, n - s)) / n as f64;
                if best.is_none_or(|(b, _, _)| imp < b) {
                    best = Some((imp, f, lo + (hi - lo) / 2.0));
                }
            }
        }
        let Some((imp, feature, threshold)) = best else {
            return self.leaf(idx);
        };
        if imp >= parent - 1e-12 {
            return self.leaf(idx);
        }
        let split = partition(idx, |&i| self.x[i][feature] <= threshold);
        let me = self.nodes.len();
        self.nodes.push(Node::Leaf(0));
        let (l, r) = idx.split_at_mut(split);
        let left = self.build(l, depth + 1, rng);
        let right = self.build(r, depth + 1, rng);
        self.nodes[me] = Node::Split {
            feature,
            threshold,
            left,
            right,
        };
        me
    }
}

/// Stable in-place partition; returns the number of elements satisfying `pred`.
fn partition(v: &mut [usize], pred: impl Fn(&usize) -> bool) -> usize {
    let (a, b): (Vec<usize>, Vec<usize>) = v.iter().partition(|x| pred(x));
    let k = a.len();
    v[..k].copy_from_slice(&a);
    v[k..].copy_from_slice(&b);
    k
}

fn tree_seed(seed: u64, tree: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (tree as u64)
            .wrapping_add(1)
            .wrapping_mul(0xD1B5_4A32_D192_ED03)
}

/// Fits `num_trees` trees in parallel; each tree's RNG is derived from the
/// master seed and the tree index, so the forest does not depend on the
/// schedule.
pub fn train_random_forest(
    x: &[Vec<f64>],
    y: &[usize],
    num_classes: usize,
    cfg: &RandomForestConfig,
) -> Result<RandomForest> {
    if x.is_empty() || x.len() != y.len() {
        return Err(Error::Shape(format!(
            "{} feature rows for {} labels",
            x.len(),
            y.len()
        )));
    }
    if cfg.num_trees == 0 || cfg.min_leaf == 0 {
        return Err(Error::InvalidConfig(
            "num_trees and min_leaf must be positive".into(),
        ));
    }
    if y.iter().any(|&c| c >= num_classes) {
        return Err(Error::Precondition("label outside [0, num_classes)".into()));
    }
    if x.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Precondition("non-finite feature".into()));
    }
    let first = y[0];
    if y.iter().all(|&c| c == first) {
        log::warn!("random forest trained on a single class; model is constant");
        return Ok(RandomForest {
            num_classes,
            trees: vec![DecisionTree {
                nodes: vec![Node::Leaf(first)],
            }],
            degenerate: true,
        });
    }
    let num_features = x[0].len();
    let max_features = cfg
        .max_features
        .unwrap_or_else(|| (num_features as f64).sqrt().ceil() as usize)
        .max(1);
    let trees = (0..cfg.num_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(tree_seed(cfg.seed, t));
            let mut idx: Vec<usize> = (0..x.len()).map(|_| rng.random_range(0..x.len())).collect();
            let mut b = TreeBuilder {
                x,
                y,
                num_classes,
                cfg,
                max_features,
                nodes: Vec::new(),
            };
            b.build(&mut idx, 0, &mut rng);
            DecisionTree { nodes: b.nodes }
        })
        .collect();
    Ok(RandomForest {
        num_classes,
        trees,
        degenerate: false,
    })
}

impl Learner for RandomForestConfig {
    type Model = RandomForest;

    fn fit(&self, x: &[Vec<f64>], y: &[usize], num_classes: usize) -> Result<RandomForest> {
        train_random_forest(x, y, num_classes, self)
    }
}
