//! Independent reference implementations shared by the integration tests.

#![allow(dead_code)]

use std::sync::Mutex;

use hemoembed::clustering::Dendrogram;
use hemoembed::encoder::{init_params, Embedding, EncoderConfig, Provenance};
use hemoembed::explain::{Learner, Predictor};
use hemoembed::sampling::{sample_placement, sample_triplets, SamplerConfig, SamplerScheme, Span};
use hemoembed::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_points(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect()
}

/// Points around `k` far-apart centers, listed cluster by cluster.
pub fn separated_points(sizes: &[usize], d: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (c, &n) in sizes.iter().enumerate() {
        for _ in 0..n {
            out.push(
                (0..d)
                    .map(|j| if j == c % d { 100.0 * (c / d + 1) as f64 } else { 0.0 } + rng.random_range(-0.5..0.5))
                    .collect(),
            );
        }
    }
    out
}

pub fn sse(points: &[Vec<f64>], members: &[usize]) -> f64 {
    let d = points[0].len();
    let n = members.len() as f64;
    let mut mean = vec![0.0; d];
    for &m in members {
        for (acc, v) in mean.iter_mut().zip(&points[m]) {
            *acc += v;
        }
    }
    mean.iter_mut().for_each(|v| *v /= n);
    members
        .iter()
        .map(|&m| {
            points[m]
                .iter()
                .zip(&mean)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
        })
        .sum()
}

/// Replays `dendrogram` against a from-scratch search over all live pairs for
/// the smallest increase in total within-cluster sum of squares. Returns the
/// first disagreement.
pub fn check_ward_merges(points: &[Vec<f64>], dendrogram: &Dendrogram) -> Result<(), String> {
    let n = points.len();
    let mut clusters: Vec<Option<Vec<usize>>> = (0..n).map(|i| Some(vec![i])).collect();
    for (step, merge) in dendrogram.merges.iter().enumerate() {
        let live: Vec<usize> = (0..clusters.len())
            .filter(|&i| clusters[i].is_some())
            .collect();
        let mut best = (f64::INFINITY, 0, 0);
        for (x, &i) in live.iter().enumerate() {
            for &j in &live[x + 1..] {
                let a = clusters[i].as_ref().unwrap();
                let b = clusters[j].as_ref().unwrap();
                let union: Vec<usize> = a.iter().chain(b).copied().collect();
                let inc = sse(points, &union) - sse(points, a) - sse(points, b);
                if inc < best.0 {
                    best = (inc, i, j);
                }
            }
        }
        let got = (merge.a.min(merge.b), merge.a.max(merge.b));
        if got != (best.1, best.2) {
            return Err(format!(
                "step {step}: merged {got:?}, oracle picks {:?}",
                (best.1, best.2)
            ));
        }
        if (merge.cost - best.0).abs() > 1e-9 * best.0.abs().max(1.0) {
            return Err(format!(
                "step {step}: cost {} vs oracle {}",
                merge.cost, best.0
            ));
        }
        let a = clusters[best.1].take().unwrap();
        let b = clusters[best.2].take().unwrap();
        clusters.push(Some(a.into_iter().chain(b).collect()));
    }
    Ok(())
}

/// Minimum total within-cluster sum of squares over every partition of the
/// points into exactly `k` non-empty groups.
pub fn optimal_partition_sse(points: &[Vec<f64>], k: usize) -> f64 {
    fn rec(
        points: &[Vec<f64>],
        k: usize,
        i: usize,
        used: usize,
        assign: &mut Vec<usize>,
        best: &mut f64,
    ) {
        let n = points.len();
        if i == n {
            if used == k {
                let total = (0..k)
                    .map(|c| {
                        let m: Vec<usize> = (0..n).filter(|&p| assign[p] == c).collect();
                        sse(points, &m)
                    })
                    .sum::<f64>();
                *best = best.min(total);
            }
            return;
        }
        if k - used > n - i {
            return;
        }
        for c in 0..(used + 1).min(k) {
            assign[i] = c;
            rec(points, k, i + 1, used.max(c + 1), assign, best);
        }
    }
    let mut best = f64::INFINITY;
    rec(points, k, 0, 0, &mut vec![0; points.len()], &mut best);
    best
}

/// Adjusted Rand index from explicit pair counting.
pub fn pairwise_ari(a: &[usize], b: &[usize]) -> f64 {
    let n = a.len();
    let (mut both, mut only_a, mut only_b, mut pairs) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..n {
        for j in i + 1..n {
            let sa = a[i] == a[j];
            let sb = b[i] == b[j];
            pairs += 1.0;
            if sa && sb {
                both += 1.0;
            }
            if sa {
                only_a += 1.0;
            }
            if sb {
                only_b += 1.0;
            }
        }
    }
    let expected = only_a * only_b / pairs;
    let max = 0.5 * (only_a + only_b);
    if max == expected {
        return 1.0;
    }
    (both - expected) / (max - expected)
}

/// Perturbs every timestep from a random cut onward and reports whether the
/// pre-pooling feature map before the cut changed in any bit.
pub fn causality_trial(trial: u64) -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(0xCA05 + trial);
    let cfg = EncoderConfig {
        hidden_channels: rng.random_range(2..6),
        num_layers: rng.random_range(1..5),
        kernel_size: rng.random_range(2..4),
        embedding_dim: 3,
        ..EncoderConfig::desk(rng.random_range(1..4))
    };
    let params = init_params(&cfg, trial).unwrap();
    let len = rng.random_range(8..64);
    let data: Vec<f64> = (0..cfg.in_channels * len)
        .map(|_| rng.random_range(-2.0..2.0))
        .collect();
    let x = Matrix::from_vec(cfg.in_channels, len, data);
    let cut = rng.random_range(1..len);
    let mut y = x.clone();
    for c in 0..cfg.in_channels {
        for v in &mut y.row_mut(c)[cut..] {
            *v += rng.random_range(-10.0..10.0);
        }
    }
    let fx = params.forward_cached(&x).unwrap().feature_map();
    let fy = params.forward_cached(&y).unwrap().feature_map();
    (0..fx.rows()).all(|r| {
        fx.row(r)[..cut]
            .iter()
            .zip(&fy.row(r)[..cut])
            .all(|(a, b)| a.to_bits() == b.to_bits())
    })
}

#[derive(Debug, Default)]
pub struct SamplerAudit {
    pub items: usize,
    pub negatives: usize,
    pub violations: Vec<String>,
}

/// Draws batches until `target` triplets are collected and checks positive
/// containment, negative disjointness from the reference of the negative's
/// source, lengths, and the scheme's source rule.
pub fn audit_sampler(scheme: SamplerScheme, target: usize, seed: u64) -> SamplerAudit {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut audit = SamplerAudit::default();
    let mut batch_seed = seed;
    while audit.items < target {
        let cfg = SamplerConfig {
            min_length: rng.random_range(1..8),
            max_length: if rng.random_bool(0.5) {
                Some(rng.random_range(8..40))
            } else {
                None
            },
        };
        let n = rng.random_range(1..12);
        let lengths: Vec<usize> = (0..n)
            .map(|_| rng.random_range(2 * cfg.min_length..120))
            .collect();
        let k = rng.random_range(1..6);
        batch_seed += 1;
        let batch = sample_triplets(&lengths, k, scheme, &cfg, batch_seed).unwrap();
        for (i, item) in batch.items.iter().enumerate() {
            audit.items += 1;
            let r = item.reference;
            let p = item.positive;
            let mut bad = |m: String| {
                audit
                    .violations
                    .push(format!("batch {batch_seed} item {i}: {m}"))
            };
            if r.source != i || p.source != i {
                bad("reference or positive not from its own source".into());
            }
            if !r.span.contains(&p.span) {
                bad(format!(
                    "positive {:?} outside reference {:?}",
                    p.span, r.span
                ));
            }
            if r.span.end() > lengths[i]
                || r.span.len < cfg.min_length
                || p.span.len < cfg.min_length
            {
                bad("reference or positive length out of range".into());
            }
            if item.negatives.len() != k {
                bad(format!("{} negatives, expected {k}", item.negatives.len()));
            }
            for neg in &item.negatives {
                audit.negatives += 1;
                let owner_ref = batch.items[neg.source].reference.span;
                if neg.span.intersects(&owner_ref) {
                    bad(format!(
                        "negative {:?} overlaps reference {:?}",
                        neg.span, owner_ref
                    ));
                }
                if neg.span.end() > lengths[neg.source] || neg.span.len < cfg.min_length {
                    bad(format!("negative {:?} out of range", neg.span));
                }
                if cfg.max_length.is_some_and(|m| neg.span.len > m) {
                    bad(format!("negative {:?} longer than the cap", neg.span));
                }
                if scheme == SamplerScheme::WithinSubject && neg.source != i {
                    bad("within-subject negative from another source".into());
                }
            }
        }
    }
    audit
}

/// Largest per-placement deviation, in binomial standard deviations, of
/// `draws` negative starts for a fixed reference.
pub fn placement_uniformity(
    source_len: usize,
    reference: Span,
    len: usize,
    draws: usize,
    seed: u64,
) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counts = vec![0usize; source_len];
    for _ in 0..draws {
        let s = sample_placement(source_len, reference, len, &mut rng);
        assert!(!Span::new(s, len).intersects(&reference) && s + len <= source_len);
        counts[s] += 1;
    }
    let valid: Vec<usize> = (0..=source_len - len)
        .filter(|&s| !Span::new(s, len).intersects(&reference))
        .collect();
    let p = 1.0 / valid.len() as f64;
    let mean = draws as f64 * p;
    let sd = (draws as f64 * p * (1.0 - p)).sqrt();
    let total_valid: usize = valid.iter().map(|&s| counts[s]).sum();
    assert_eq!(total_valid, draws, "draw landed on an invalid start");
    valid
        .iter()
        .map(|&s| (counts[s] as f64 - mean).abs() / sd)
        .fold(0.0, f64::max)
}

/// Learner that records the subject index carried in feature column 0 of
/// every training row, then predicts class 0.
#[derive(Default)]
pub struct SpyLearner {
    pub seen: Mutex<Vec<Vec<usize>>>,
}

pub struct Constant;

impl Predictor for Constant {
    fn predict(&self, _x: &[f64]) -> usize {
        0
    }
}

impl Learner for SpyLearner {
    type Model = Constant;

    fn fit(&self, x: &[Vec<f64>], _y: &[usize], _k: usize) -> hemoembed::Result<Constant> {
        let mut ids: Vec<usize> = x.iter().map(|r| r[0] as usize).collect();
        ids.sort_unstable();
        ids.dedup();
        self.seen.lock().unwrap().push(ids);
        Ok(Constant)
    }
}

/// Per subject: `run` windows of regime A, then B, then A again, each a
/// fixed center plus uniform noise.
pub fn repeat_regime_fixture(subjects: usize, run: usize, dim: usize, seed: u64) -> Vec<Embedding> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let b: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut out = Vec::new();
    for s in 0..subjects {
        for w in 0..3 * run {
            let center = if (run..2 * run).contains(&w) { &b } else { &a };
            out.push(Embedding {
                values: center
                    .iter()
                    .map(|v| v + 0.3 * rng.random_range(-1.0..1.0))
                    .collect(),
                provenance: Some(Provenance {
                    subject_id: format!("subject-{s:02}"),
                    window_start: w * 120,
                    seconds_from_bleed: (w as f64 - run as f64) * 2.4,
                    overlaps_draw: false,
                }),
            });
        }
    }
    out
}

/// Runs subject-wise CV with a learner that records which subjects it was
/// trained on, and checks that test blocks partition the subjects and never
/// appear in their own fold's training rows.
pub fn check_cv_hygiene(
    num_subjects: usize,
    folds: usize,
    windows_per_subject: usize,
) -> Result<(), String> {
    use hemoembed::explain::{per_subject_cv, subject_folds};
    use std::collections::BTreeSet;

    let names: Vec<String> = (0..num_subjects)
        .map(|s| format!("subject-{s:02}"))
        .collect();
    let mut x = Vec::new();
    let mut y = Vec::new();
    let mut ids = Vec::new();
    for (s, name) in names.iter().enumerate() {
        for w in 0..windows_per_subject {
            x.push(vec![s as f64, w as f64]);
            y.push(w % 2);
            ids.push(name.clone());
        }
    }
    let blocks = subject_folds(&names, folds).map_err(|e| e.to_string())?;
    let mut all: Vec<&String> = blocks.iter().flatten().collect();
    all.sort();
    if all.len() != num_subjects || all.iter().collect::<BTreeSet<_>>().len() != num_subjects {
        return Err("test blocks do not partition the subjects".into());
    }
    let spy = SpyLearner::default();
    let report = per_subject_cv(&x, &y, &ids, folds, 2, &spy).map_err(|e| e.to_string())?;
    if report.folds.len() != folds {
        return Err(format!("{} folds reported", report.folds.len()));
    }
    let seen = spy.seen.lock().unwrap();
    if seen.len() != folds {
        return Err(format!("learner fitted {} times", seen.len()));
    }
    let mut tested = BTreeSet::new();
    for fold in &report.folds {
        let train_ids: BTreeSet<&String> = fold.train_subjects.iter().collect();
        for t in &fold.test_subjects {
            if train_ids.contains(t) || !tested.insert(t.clone()) {
                return Err(format!("fold {}: {t} leaks or repeats", fold.fold));
            }
        }
        let fitted: BTreeSet<String> = seen
            .iter()
            .find(|s| {
                s.len() == fold.train_subjects.len()
                    && s.iter().all(|&i| train_ids.contains(&names[i]))
            })
            .ok_or_else(|| {
                format!(
                    "fold {}: no fit on exactly its training subjects",
                    fold.fold
                )
            })?
            .iter()
            .map(|&i| names[i].clone())
            .collect();
        if fold.test_subjects.iter().any(|t| fitted.contains(t)) {
            return Err(format!("fold {}: test subject in training rows", fold.fold));
        }
    }
    if tested.len() != num_subjects {
        return Err("not every subject was tested once".into());
    }
    Ok(())
}
