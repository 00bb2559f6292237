use std::collections::BTreeSet;

use ndarray::Array2;
use nvi_core::data::{load_manifest, manifest_to_string, parse_manifest, split_by_teacher, Construct, RatingTriple};
use nvi_core::fusion::{aggregate_segment_with, EmotionWeighting, FrameFeatures};
use nvi_core::perception::EmotionScores;
use nvi_core::stats::{fdr_adjust, filter_by_disagreement, icc2k, median_rating, pearson, sample_std};
use nvi_core::synth::{write_synthetic_dataset, SynthDatasetParams};
use proptest::prelude::*;

fn paired(n: std::ops::Range<usize>) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    n.prop_flat_map(|n| {
        (
            prop::collection::vec(-1e3..1e3f64, n),
            prop::collection::vec(-1e3..1e3f64, n),
        )
    })
}

fn spread(v: &[f64]) -> bool {
    sample_std(v) > 1e-3
}

fn frame() -> impl Strategy<Value = FrameFeatures> {
    (
        0.0f32..=1.0,
        0.0f32..=1.0,
        prop::option::of(prop::array::uniform8(0.01f32..1.0)),
    )
        .prop_map(|(g, d, e)| FrameFeatures {
            frame_index: 0,
            gesture: g,
            distance: d,
            emotions: e.map(|raw| EmotionScores::normalized(raw).unwrap()),
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn pearson_is_bounded_and_symmetric((x, y) in paired(3..40)) {
        prop_assume!(spread(&x) && spread(&y));
        let a = pearson(&x, &y).unwrap();
        let b = pearson(&y, &x).unwrap();
        prop_assert!(a.r.abs() <= 1.0 + 1e-12);
        prop_assert!((a.r - b.r).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&a.p_raw));
    }

    #[test]
    fn pearson_affine_invariance((x, y) in paired(3..40), scale in 0.1..10.0f64, shift in -100.0..100.0f64) {
        prop_assume!(spread(&x) && spread(&y));
        let base = pearson(&x, &y).unwrap().r;
        let moved: Vec<f64> = x.iter().map(|v| v * scale + shift).collect();
        prop_assert!((pearson(&moved, &y).unwrap().r - base).abs() < 1e-9);
        let flipped: Vec<f64> = x.iter().map(|v| -v).collect();
        prop_assert!((pearson(&flipped, &y).unwrap().r + base).abs() < 1e-9);
    }

    #[test]
    fn icc_ignores_a_common_shift(n in 3usize..12, k in 2usize..5, seed in prop::collection::vec(0.0..100.0f64, 60), shift in -50.0..50.0f64) {
        let grid = Array2::from_shape_fn((n, k), |(i, j)| seed[(i * k + j) % seed.len()] + i as f64 * 7.0);
        let base = icc2k(grid.view()).unwrap().value;
        let moved = icc2k(grid.mapv(|v| v + shift).view()).unwrap().value;
        prop_assert!((base - moved).abs() < 1e-9 || (base.is_nan() && moved.is_nan()));
    }

    #[test]
    fn icc_of_identical_raters_is_one(scores in prop::collection::vec(0.0..1e4f64, 3..20), k in 2usize..5) {
        prop_assume!(spread(&scores));
        let grid = Array2::from_shape_fn((scores.len(), k), |(i, _)| scores[i]);
        prop_assert!((icc2k(grid.view()).unwrap().value - 1.0).abs() < 1e-9);
    }

    #[test]
    fn fdr_dominates_and_preserves_order(p in prop::collection::vec(0.0..=1.0f64, 1..30)) {
        let adj = fdr_adjust(&p).unwrap();
        prop_assert_eq!(adj.len(), p.len());
        for (a, raw) in adj.iter().zip(&p) {
            prop_assert!(*a >= *raw - 1e-15 && *a <= 1.0);
        }
        for i in 0..p.len() {
            for j in 0..p.len() {
                if p[i] < p[j] {
                    prop_assert!(adj[i] <= adj[j] + 1e-15);
                }
            }
        }
    }

    #[test]
    fn filter_partitions_by_threshold(values in prop::collection::vec(prop::array::uniform3(0.0..1e4f64), 0..30), sigma in 1.0..5000.0f64) {
        let triples: Vec<_> = values
            .iter()
            .enumerate()
            .map(|(i, v)| RatingTriple::new(format!("f{i}"), Construct::PerceivedDistance, *v, ["a", "b", "c"]))
            .collect();
        let (kept, excluded) = filter_by_disagreement(&triples, sigma);
        prop_assert_eq!(kept.len() + excluded.len(), triples.len());
        prop_assert!(kept.iter().all(|t| sample_std(&t.values) < sigma));
        prop_assert!(excluded.iter().all(|t| sample_std(&t.values) >= sigma));
    }

    #[test]
    fn median_lies_within_the_triple(v in prop::array::uniform3(0.0..1e4f64)) {
        let t = RatingTriple::new("i", Construct::Nvi, v, ["a", "b", "c"]);
        let m = median_rating(&t);
        let mut s = v;
        s.sort_by(f64::total_cmp);
        prop_assert_eq!(m, s[1]);
    }

    #[test]
    fn aggregation_stays_in_range(frames in prop::collection::vec(frame(), 1..40)) {
        for weighting in [EmotionWeighting::TotalFrames, EmotionWeighting::VisibleFrames] {
            let v = aggregate_segment_with(&frames, weighting).unwrap();
            v.validate().unwrap();
            prop_assert!((0.0..=1.0).contains(&v.gesture) && (0.0..=1.0).contains(&v.distance));
            let visible = frames.iter().filter(|f| f.emotions.is_some()).count();
            prop_assert_eq!(v.visible_face_frames, visible);
            let mass: f64 = v.emotions.iter().sum();
            let expected = match (visible, weighting) {
                (0, _) => 0.0,
                (_, EmotionWeighting::TotalFrames) => visible as f64 / frames.len() as f64,
                (_, EmotionWeighting::VisibleFrames) => 1.0,
            };
            prop_assert!((mass - expected).abs() < 1e-5, "mass {} expected {}", mass, expected);
        }
    }

    #[test]
    fn aggregation_ignores_frame_order(mut frames in prop::collection::vec(frame(), 1..20)) {
        let a = aggregate_segment_with(&frames, EmotionWeighting::TotalFrames).unwrap();
        frames.reverse();
        let b = aggregate_segment_with(&frames, EmotionWeighting::TotalFrames).unwrap();
        prop_assert!((a.gesture - b.gesture).abs() < 1e-12);
        for (x, y) in a.emotions.iter().zip(&b.emotions) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn synthetic_manifest_round_trips(seed in 0u64..1000, teachers in 2usize..4, stride in 1usize..3) {
        let dir = tempfile::tempdir().unwrap();
        let params = SynthDatasetParams {
            seed,
            train_teachers: teachers,
            validation_teachers: 1,
            external_teachers: 1,
            segments_per_teacher: 2,
            frames_per_segment: 4,
            width: 32,
            height: 24,
            label_stride: stride,
            ..Default::default()
        };
        let data = write_synthetic_dataset(&params, dir.path()).unwrap();
        let manifest = load_manifest(&data.manifest).unwrap();
        let back = parse_manifest(&manifest_to_string(&manifest).unwrap()).unwrap();
        prop_assert_eq!(&back, &manifest);
        back.validate().unwrap();

        let validation: BTreeSet<String> = ["T000".to_string()].into();
        let (train, val) = split_by_teacher(&back.segments, &validation).unwrap();
        prop_assert_eq!(train.len() + val.len(), back.segments.len());
        let train_teachers: BTreeSet<_> = train.iter().map(|s| &s.teacher_id).collect();
        prop_assert!(val.iter().all(|s| !train_teachers.contains(&s.teacher_id)));
    }
}
