//! Property tests for the data-type invariants of the public API.

use offscan_core::audit::{record_for, scan, AuditMetadata, AuditRecord, AuditSummary, ScanOptions};
use offscan_core::embedding::{cosine_similarity, normalize, pca_project, Embedding, EmbeddingSpace, PcaOptions};
use offscan_core::prompt::{classify, PromptSet};
use offscan_core::smid::{discretize_rating, Confusion, Label, RatingClass, Thresholds};
use proptest::prelude::*;

fn vector(d: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-100.0f64..100.0, d).prop_filter("non-zero", |v| v.iter().any(|x| x.abs() > 1e-3))
}

proptest! {
    #[test]
    fn normalize_gives_unit_finite_vectors(v in vector(16)) {
        let e = normalize(&Embedding::new("x", v)).unwrap();
        prop_assert_eq!(e.dimension(), 16);
        prop_assert!(e.vector.iter().all(|x| x.is_finite()));
        prop_assert!((e.norm() - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn non_finite_components_are_rejected(mut v in vector(8), i in 0usize..8, bad in prop::sample::select(vec![f64::NAN, f64::INFINITY, f64::NEG_INFINITY])) {
        v[i] = bad;
        prop_assert!(normalize(&Embedding::new("x", v)).is_err());
    }

    #[test]
    fn mismatched_dimensions_are_rejected(a in vector(8), b in vector(9)) {
        prop_assert!(cosine_similarity(&Embedding::new("a", a), &Embedding::new("b", b)).is_err());
        prop_assert!(EmbeddingSpace::new(8, "m").ensure_same(&EmbeddingSpace::new(8, "n")).is_err());
    }

    #[test]
    fn projection_has_one_point_per_input_and_bounded_variance(
        vs in prop::collection::vec(vector(6), 3..40),
    ) {
        let embeddings: Vec<Embedding> = vs.into_iter().enumerate().map(|(i, v)| Embedding::new(format!("e{i}"), v)).collect();
        let p = pca_project(&embeddings, PcaOptions::default()).unwrap();
        prop_assert_eq!(p.points.len(), embeddings.len());
        prop_assert!(p.points.iter().zip(&embeddings).all(|(pt, e)| pt.id == e.id && pt.coords.len() == 2));
        prop_assert!(p.explained_variance.iter().all(|&v| (0.0..=1.0).contains(&v)));
        prop_assert!(p.explained_variance.iter().sum::<f64>() <= 1.0 + 1e-9);
    }

    #[test]
    fn classification_is_a_distribution_with_argmax_prediction(
        a in vector(12), b in vector(12), x in vector(12), tau in 0.5f64..200.0,
    ) {
        let space = EmbeddingSpace::new(12, "m");
        let prompts = PromptSet::binary(space, a, b, tau, offscan_core::prompt::Provenance::Random { seed: 0 }).unwrap();
        for class in prompts.classes() {
            for anchor in &class.anchors {
                let n: f64 = anchor.iter().map(|v| v * v).sum::<f64>().sqrt();
                prop_assert!((n - 1.0).abs() <= 1e-6);
            }
        }
        let c = classify(&prompts, &Embedding::new("x", x)).unwrap();
        prop_assert!(c.probabilities.iter().all(|&p| p >= 0.0));
        prop_assert!((c.probabilities.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        let first_max = c.probabilities.iter().enumerate()
            .fold(0, |best, (i, &p)| if p > c.probabilities[best] { i } else { best });
        prop_assert_eq!(c.predicted, first_max);
        prop_assert_eq!(c.offensive_score, c.probabilities[prompts.offensive_index()]);
    }

    #[test]
    fn f1_is_harmonic_mean_of_precision_and_recall(tp in 0usize..50, fp in 0usize..50, fn_ in 0usize..50, tn in 0usize..50) {
        let m = Confusion { tp, fp, fn_, tn }.metrics();
        for v in [m.accuracy, m.precision, m.recall, m.f1] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        let den = m.precision + m.recall;
        let expected = if den > 0.0 { 2.0 * m.precision * m.recall / den } else { 0.0 };
        prop_assert!((m.f1 - expected).abs() <= 1e-12);
        prop_assert_eq!(m.support_positive, tp + fn_);
        prop_assert_eq!(m.support_negative, fp + tn);
    }

    #[test]
    fn neutral_band_never_yields_a_label(r in 1.0f64..=5.0) {
        let t = Thresholds::STANDARD;
        let class = discretize_rating(r, t).unwrap();
        match class {
            RatingClass::Offensive => prop_assert!(r < t.negative),
            RatingClass::NonOffensive => prop_assert!(r > t.positive),
            RatingClass::Excluded => prop_assert!((t.negative..=t.positive).contains(&r)),
        }
        prop_assert_eq!(class.label().is_none(), (t.negative..=t.positive).contains(&r));
    }

    #[test]
    fn ratings_outside_the_scale_are_rejected(r in prop_oneof![-10.0f64..0.999, 5.001f64..10.0]) {
        prop_assert!(discretize_rating(r, Thresholds::STANDARD).is_err());
    }

    #[test]
    fn audit_flags_follow_the_threshold_and_summaries_add_up(
        xs in prop::collection::vec((0usize..4, vector(8)), 1..60),
        threshold in 0.05f64..0.95,
        seed in any::<u64>(),
    ) {
        let prompts = PromptSet::random(EmbeddingSpace::new(8, "m"), 10.0, seed).unwrap();
        let embeddings: Vec<Embedding> = xs.into_iter().enumerate()
            .map(|(i, (c, v))| Embedding::new(format!("c{c}/img{i}"), v)).collect();
        let options = ScanOptions { threshold, batch_size: 7, workers: 1 };
        let mut records: Vec<AuditRecord> = Vec::new();
        let summary = scan(embeddings.clone(), &prompts, &options, |r| { records.push(r.clone()); Ok(()) }).unwrap();
        for (r, e) in records.iter().zip(&embeddings) {
            prop_assert_eq!(r.flagged, r.offensive_score > threshold);
            prop_assert_eq!(r, &record_for(&prompts, e, threshold).unwrap());
        }
        prop_assert_eq!(summary.total_scanned, embeddings.len());
        prop_assert_eq!(summary.flagged_by_class.iter().map(|c| c.flagged).sum::<usize>(), summary.total_flagged);
        prop_assert_eq!(records.iter().filter(|r| r.flagged).count(), summary.total_flagged);
        prop_assert!(summary.flagged_by_class.windows(2).all(|w| w[0].flagged >= w[1].flagged));
        prop_assert_eq!(summary, AuditSummary::from_records(&records, AuditMetadata::new(&prompts, threshold)));
    }
}

#[test]
fn only_labeled_classes_map_to_labels() {
    assert_eq!(RatingClass::Offensive.label(), Some(Label::Offensive));
    assert_eq!(RatingClass::NonOffensive.label(), Some(Label::NonOffensive));
    assert_eq!(RatingClass::Excluded.label(), None);
}
