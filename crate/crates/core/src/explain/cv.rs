//! Subject-wise cross-validation: every window of a test subject is kept
//! out of the training fold.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{Learner, Predictor};
use crate::error::{Error, Result};

/// `k x k` counts; rows are true labels, columns predictions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub k: usize,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            counts: vec![vec![0; k]; k],
        }
    }

    pub fn record(&mut self, truth: usize, predicted: usize) {
        self.counts[truth][predicted] += 1;
    }

    pub fn add(&mut self, other: &ConfusionMatrix) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.k).map(|i| self.counts[i][i]).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("true\\predicted");
        for c in 0..self.k {
            write!(out, ",{c}").unwrap();
        }
        out.push('\n');
        for (r, row) in self.counts.iter().enumerate() {
            write!(out, "{r}").unwrap();
            for v in row {
                write!(out, ",{v}").unwrap();
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub train_subjects: Vec<String>,
    pub test_subjects: Vec<String>,
    pub accuracy: f64,
    pub test_windows: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub folds: Vec<FoldResult>,
    /// Accuracy on each subject's own windows while it was held out.
    pub per_subject: Vec<(String, f64)>,
    pub mean: f64,
    /// Population standard deviation of the per-subject accuracies.
    pub std: f64,
    pub confusion: ConfusionMatrix,
}

impl CvReport {
    /// One-row accuracy table: subjects in order, then mean and std.
    pub fn table_csv(&self, row_label: &str) -> String {
        let mut out = String::from("clusters");
        for (s, _) in &self.per_subject {
            write!(out, ",{s}").unwrap();
        }
        out.push_str(",mean,std\n");
        out.push_str(row_label);
        for (_, a) in &self.per_subject {
            write!(out, ",{a}").unwrap();
        }
        writeln!(out, ",{},{}", self.mean, self.std).unwrap();
        out
    }
}

/// Splits `subjects` (in the given order) into `num_folds` contiguous blocks.
/// Fold `f` holds out block `num_folds - 1 - f`, so the first fold trains
/// on the leading subjects; with 16 subjects and 4 folds, fold 0 trains on
/// subjects 1-12 and tests 13-16.
pub fn subject_folds(subjects: &[String], num_folds: usize) -> Result<Vec<Vec<String>>> {
    let s = subjects.len();
    if num_folds < 2 || num_folds > s {
        return Err(Error::Precondition(format!(
            "{num_folds} folds need between 2 and {s} subjects"
        )));
    }
    let unique: BTreeSet<&String> = subjects.iter().collect();
    if unique.len() != s {
        return Err(Error::Precondition(
            "subject list contains duplicates".into(),
        ));
    }
    let base = s / num_folds;
    let extra = s % num_folds;
    let mut blocks = Vec::with_capacity(num_folds);
    let mut start = 0;
    for b in 0..num_folds {
        let len = base + usize::from(b < extra);
        blocks.push(subjects[start..start + len].to_vec());
        start += len;
    }
    blocks.reverse();
    Ok(blocks)
}

/// Distinct subject ids in order of first appearance.
pub fn ordered_subjects(subjects: &[String]) -> Vec<String> {
    let mut seen = BTreeSet::new();
    subjects
        .iter()
        .filter(|s| seen.insert(s.as_str()))
        .cloned()
        .collect()
}

/// Cross-validates `learner` with folds over subjects. `subjects[i]` owns
/// row `i`. Labels must lie in `[0, num_classes)`.
pub fn per_subject_cv<L: Learner>(
    features: &[Vec<f64>],
    labels: &[usize],
    subjects: &[String],
    num_folds: usize,
    num_classes: usize,
    learner: &L,
) -> Result<CvReport> {
    if features.len() != labels.len() || features.len() != subjects.len() {
        return Err(Error::Shape(format!(
            "{} feature rows, {} labels, {} subject ids",
            features.len(),
            labels.len(),
            subjects.len()
        )));
    }
    if labels.iter().any(|&l| l >= num_classes) {
        return Err(Error::Precondition("label outside [0, num_classes)".into()));
    }
    let order = ordered_subjects(subjects);
    let folds = subject_folds(&order, num_folds)?;

    let mut seen_test: BTreeSet<&str> = BTreeSet::new();
    let mut results = Vec::with_capacity(folds.len());
    let mut confusion = ConfusionMatrix::new(num_classes);
    let mut subject_hits: BTreeMap<&str, (usize, usize)> = BTreeMap::new();

    for (f, test) in folds.iter().enumerate() {
        let test_set: BTreeSet<&str> = test.iter().map(String::as_str).collect();
        for t in &test_set {
            if !seen_test.insert(t) {
                return Err(Error::Leakage(format!(
                    "subject {t} appears in several test folds"
                )));
            }
        }
        let (mut tx, mut ty) = (Vec::new(), Vec::new());
        let mut train_subjects = BTreeSet::new();
        for i in 0..features.len() {
            if !test_set.contains(subjects[i].as_str()) {
                tx.push(features[i].clone());
                ty.push(labels[i]);
                train_subjects.insert(subjects[i].as_str());
            }
        }
        if train_subjects.iter().any(|s| test_set.contains(s)) {
            return Err(Error::Leakage(format!("fold {f} trains on a test subject")));
        }
        let model = learner.fit(&tx, &ty, num_classes)?;
        let mut fold_cm = ConfusionMatrix::new(num_classes);
        for i in 0..features.len() {
            if test_set.contains(subjects[i].as_str()) {
                let p = model.predict(&features[i]);
                fold_cm.record(labels[i], p);
                let e = subject_hits.entry(subjects[i].as_str()).or_default();
                e.0 += usize::from(p == labels[i]);
                e.1 += 1;
            }
        }
        let n = fold_cm.total();
        results.push(FoldResult {
            fold: f,
            train_subjects: order
                .iter()
                .filter(|s| train_subjects.contains(s.as_str()))
                .cloned()
                .collect(),
            test_subjects: test.clone(),
            accuracy: if n > 0 {
                fold_cm.trace() as f64 / n as f64
            } else {
                0.0
            },
            test_windows: n as usize,
        });
        confusion.add(&fold_cm);
    }
    if seen_test.len() != order.len() {
        return Err(Error::Leakage("some subject was never tested".into()));
    }

    let per_subject: Vec<(String, f64)> = order
        .iter()
        .map(|s| {
            let (hit, n) = subject_hits[s.as_str()];
            (s.clone(), hit as f64 / n as f64)
        })
        .collect();
    let m = per_subject.len() as f64;
    let mean = per_subject.iter().map(|(_, a)| a).sum::<f64>() / m;
    let std = (per_subject
        .iter()
        .map(|(_, a)| (a - mean).powi(2))
        .sum::<f64>()
        / m)
        .sqrt();
    Ok(CvReport {
        folds: results,
        per_subject,
        mean,
        std,
        confusion,
    })
}
