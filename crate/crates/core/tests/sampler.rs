mod common;

use common::{audit_sampler, placement_uniformity};
use hemoembed::sampling::{SamplerScheme, Span};
use hemoembed::training::triplet_loss;

#[test]
fn triplets_respect_containment_and_disjointness() {
    for scheme in [SamplerScheme::CrossSubject, SamplerScheme::WithinSubject] {
        let audit = audit_sampler(scheme, 2_000, 7);
        assert!(
            audit.violations.is_empty(),
            "{scheme:?}: {:?}",
            &audit.violations[..3.min(audit.violations.len())]
        );
        assert!(audit.negatives >= audit.items);
    }
}

#[test]
fn negative_placements_are_uniform() {
    for (len, reference, neg) in [
        (40, Span::new(12, 9), 5),
        (30, Span::new(0, 10), 7),
        (25, Span::new(20, 5), 1),
    ] {
        let z = placement_uniformity(len, reference, neg, 20_000, 3);
        assert!(z < 4.0, "{reference:?}: {z}");
    }
}

#[test]
fn loss_of_zero_embeddings_is_k_plus_one_ln2() {
    for k in 1..6 {
        let zero = vec![0.0; 4];
        let negs: Vec<&[f64]> = vec![zero.as_slice(); k];
        let loss = triplet_loss(&zero, &zero, &negs).unwrap();
        assert!((loss.total - (k as f64 + 1.0) * std::f64::consts::LN_2).abs() < 1e-12);
    }
}

#[test]
fn loss_stays_finite_for_large_dot_products() {
    let r = [100.0];
    let far = [-100.0];
    let near = [100.0];
    let worst = triplet_loss(&r, &far, &[&near]).unwrap();
    assert!((worst.total - 2e4).abs() < 1e-9, "{worst:?}");
    let best = triplet_loss(&r, &near, &[&far]).unwrap();
    assert!(best.total.is_finite() && best.total >= 0.0 && best.total < 1e-300);
}

#[test]
fn cross_subject_negatives_leave_their_source() {
    use hemoembed::sampling::{sample_triplets, SamplerConfig};
    let cfg = SamplerConfig::default();
    let mut crossed = 0;
    let mut draws = 0;
    for seed in 0..100 {
        let batch =
            sample_triplets(&[200, 150, 180], 4, SamplerScheme::CrossSubject, &cfg, seed).unwrap();
        for (i, item) in batch.items.iter().enumerate() {
            draws += item.negatives.len();
            crossed += item.negatives.iter().filter(|n| n.source != i).count();
        }
    }
    assert!(draws >= 1_000);
    assert!(crossed > 0);
}
