//! Explainable window features and classifiers that predict cluster labels
//! from them, evaluated with subject-wise cross-validation.

pub mod cv;
pub mod features;
pub mod forest;
pub mod mlp;

pub use cv::{
    ordered_subjects, per_subject_cv, subject_folds, ConfusionMatrix, CvReport, FoldResult,
};
pub use features::{
    extract_features, extract_features_with, feature_names, FeatureVector, FEATURES_PER_CHANNEL,
    POWER_BINS,
};
pub use forest::{train_random_forest, RandomForest, RandomForestConfig};
pub use mlp::{train_mlp, Mlp, MlpConfig};

use crate::error::Result;

/// A fitted model that maps one feature row to a class id.
pub trait Predictor {
    fn predict(&self, x: &[f64]) -> usize;
}

/// Something that can fit a [`Predictor`] to labeled rows.
pub trait Learner: Sync {
    type Model: Predictor;

    fn fit(&self, x: &[Vec<f64>], y: &[usize], num_classes: usize) -> Result<Self::Model>;
}

/// Most frequent class; ties go to the smaller id.
pub(crate) fn majority_class(y: &[usize], num_classes: usize) -> usize {
    let mut counts = vec![0usize; num_classes.max(1)];
    for &c in y {
        counts[c] += 1;
    }
    let mut best = 0;
    for c in 1..counts.len() {
        if counts[c] > counts[best] {
            best = c;
        }
    }
    best
}
