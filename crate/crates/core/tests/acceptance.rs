//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each,
//! and exits non-zero when a criterion fails.
//!
//! `cargo test -p nvi-core --test acceptance`

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Duration, Instant};

use ndarray::Array2;
use nvi_core::data::{Construct, RatingTriple};
use nvi_core::evaluation::{default_hypotheses, external_validation, rater_replacement_table, RaterMatrix, Variant};
use nvi_core::fusion::{
    aggregate_segment_with, build_nvi_model, nvi_parameter_count, train_nvi, EmotionWeighting, FrameFeatures,
};
use nvi_core::model::{BackboneSpec, Checkpoint, ModelKind};
use nvi_core::nn::{self, Adam, Layer, Tensor};
use nvi_core::perception::obsfile::ObservationReader;
use nvi_core::perception::{Emotion, EmotionScores};
use nvi_core::pipeline::{Run, RunConfig};
use nvi_core::regressors::make_samples;
use nvi_core::stats::{fdr_adjust, filter_by_disagreement, icc2k, pearson};
use nvi_core::synth::{
    draw_true_scores, external_fixture, linear_fusion_set, simulate_raters, write_synthetic_dataset, RaterPanelParams,
    SynthDatasetParams,
};
use nvi_core::training::{predict_samples, train_step};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
/// Name, gating flag, check.
type Criterion<'a> = (&'static str, bool, Box<dyn Fn() -> Outcome + 'a>);

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// Independent oracles.

fn icc_oracle(x: &Array2<f64>) -> f64 {
    let (n, k) = x.dim();
    let mut grand = 0.0;
    for v in x.iter() {
        grand += v;
    }
    grand /= (n * k) as f64;
    let mut sst = 0.0;
    let mut ssr = 0.0;
    let mut ssc = 0.0;
    for i in 0..n {
        let mut m = 0.0;
        for j in 0..k {
            m += x[[i, j]];
            sst += (x[[i, j]] - grand) * (x[[i, j]] - grand);
        }
        m /= k as f64;
        ssr += k as f64 * (m - grand) * (m - grand);
    }
    for j in 0..k {
        let mut m = 0.0;
        for i in 0..n {
            m += x[[i, j]];
        }
        m /= n as f64;
        ssc += n as f64 * (m - grand) * (m - grand);
    }
    let sse = sst - ssr - ssc;
    let msr = ssr / (n - 1) as f64;
    let msc = ssc / (k - 1) as f64;
    let mse = sse / ((n - 1) * (k - 1)) as f64;
    (msr - mse) / (msr + (msc - mse) / n as f64)
}

fn pearson_oracle(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}

/// Step-up reference: p_adj(i) = min over j with rank_j >= rank_i of m p_j / rank_j.
fn bh_oracle(p: &[f64]) -> Vec<f64> {
    let m = p.len();
    let mut out = vec![0.0; m];
    for i in 0..m {
        let mut best = f64::INFINITY;
        for j in 0..m {
            let rank_j = p
                .iter()
                .enumerate()
                .filter(|&(l, q)| *q < p[j] || (*q == p[j] && l <= j))
                .count();
            let rank_i = p
                .iter()
                .enumerate()
                .filter(|&(l, q)| *q < p[i] || (*q == p[i] && l <= i))
                .count();
            if rank_j >= rank_i {
                best = best.min(p[j] * m as f64 / rank_j as f64);
            }
        }
        out[i] = best.min(1.0);
    }
    out
}

fn sd_oracle(v: &[f64; 3]) -> f64 {
    let m = (v[0] + v[1] + v[2]) / 3.0;
    (((v[0] - m).powi(2) + (v[1] - m).powi(2) + (v[2] - m).powi(2)) / 2.0).sqrt()
}

// Criteria.

fn stats_oracles() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst_icc: f64 = 0.0;
    let mut worst_r: f64 = 0.0;
    for t in 0..100 {
        let n = 5 + (t * 45) / 99;
        let k = if t % 2 == 0 { 3 } else { 4 };
        let effect: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..10.0)).collect();
        let x = Array2::from_shape_fn((n, k), |(i, _)| effect[i] + rng.random_range(-2.0..2.0));
        let got = icc2k(x.view()).map_err(|e| e.to_string())?.value;
        worst_icc = worst_icc.max((got - icc_oracle(&x)).abs());

        let a: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let b: Vec<f64> = a.iter().map(|v| 0.3 * v + rng.random_range(-5.0..5.0)).collect();
        let r = pearson(&a, &b).map_err(|e| e.to_string())?.r;
        worst_r = worst_r.max((r - pearson_oracle(&a, &b)).abs());
    }
    let mut fdr_ok = true;
    for t in 0..100 {
        let m = 1 + t % 12;
        let mut p: Vec<f64> = (0..m).map(|_| rng.random_range(0.0..1.0)).collect();
        if t % 5 == 0 && m > 1 {
            p[1] = p[0];
        }
        let got = fdr_adjust(&p).map_err(|e| e.to_string())?;
        fdr_ok &= got.iter().zip(bh_oracle(&p)).all(|(a, b)| (a - b).abs() <= 1e-12);
    }
    let el = start.elapsed();
    check(
        worst_icc <= 1e-10 && worst_r <= 1e-12 && fdr_ok && el < Duration::from_secs(10),
        format!("max |icc diff| {worst_icc:.1e}, max |r diff| {worst_r:.1e}, fdr match {fdr_ok}, {el:.2?}"),
    )
}

fn reliability_monte_carlo() -> Outcome {
    let start = Instant::now();
    let mut values = Vec::new();
    for seed in 0..10 {
        let p = RaterPanelParams {
            n_items: 500,
            true_score_variance: 1.0,
            rater_bias_variance: 0.0,
            noise_variance: 1.0,
            k_raters: 3,
            seed,
            scale_max: 10_000.0,
        };
        let m = simulate_raters(&draw_true_scores(&p).map_err(|e| e.to_string())?, &p).map_err(|e| e.to_string())?;
        let grid = m.grid(&m.column_names()).map_err(|e| e.to_string())?;
        values.push(icc2k(grid.view()).map_err(|e| e.to_string())?.value);
    }
    let worst = values.iter().map(|v| (v - 0.75).abs()).fold(0.0, f64::max);
    let el = start.elapsed();
    check(
        worst <= 0.05 && el < Duration::from_secs(10),
        format!(
            "ICC(2,3) over 10 seeds in [{:.4}, {:.4}], max |dev| {worst:.4}, {el:.2?}",
            values.iter().cloned().fold(1.0, f64::min),
            values.iter().cloned().fold(0.0, f64::max)
        ),
    )
}

fn disagreement_filter() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut triples = Vec::new();
    for i in 0..1000 {
        let values = match i % 4 {
            0 => {
                let a = rng.random_range(0..6800) as f64;
                [a, a + 1600.0, a + 3200.0]
            }
            _ => [0, 0, 0].map(|_: i32| rng.random_range(0.0..10_000.0)),
        };
        triples.push(RatingTriple::new(
            format!("f{i}"),
            Construct::GestureIntensity,
            values,
            ["a", "b", "c"],
        ));
    }
    triples[0].values = [0.0, 1600.0, 3200.0];
    let (kept, excluded) = filter_by_disagreement(&triples, 1600.0);
    let oracle_excluded = triples.iter().filter(|t| sd_oracle(&t.values) >= 1600.0).count();
    let boundary_excluded = excluded.iter().any(|t| t.item_id == "f0");
    check(
        excluded.len() == oracle_excluded && kept.len() + excluded.len() == 1000 && boundary_excluded,
        format!(
            "{} excluded (oracle {oracle_excluded}), boundary (0,1600,3200) excluded: {boundary_excluded}",
            excluded.len()
        ),
    )
}

fn learnability(root: &Path) -> Outcome {
    let start = Instant::now();
    let data =
        write_synthetic_dataset(&SynthDatasetParams::default(), &root.join("learn")).map_err(|e| e.to_string())?;
    let mut config = RunConfig::new(&data.manifest);
    config.output_dir = root.join("learn-runs");
    config.backbones.gesture = BackboneSpec::TinyCnn;
    config.backbones.distance = BackboneSpec::TinyCnn;
    config.train.gesture.epochs = 10;
    config.train.distance.epochs = 10;
    let run = Run::open(config).map_err(|e| e.to_string())?;
    run.extract(false).map_err(|e| e.to_string())?;
    let g = run.train(ModelKind::Gesture).map_err(|e| e.to_string())?;
    let d = run.train(ModelKind::Distance).map_err(|e| e.to_string())?;
    let frames_time = start.elapsed();

    let nvi_start = Instant::now();
    let train = linear_fusion_set(300, 0.03, 21);
    let validation = linear_fusion_set(100, 0.03, 22);
    let mut cfg = nvi_core::training::TrainConfig {
        epochs: 150,
        batch_size: 16,
        ..Default::default()
    };
    cfg.seed = 3;
    let ckpt = train_nvi(build_nvi_model(3), &train, &validation, &cfg, 10_000.0).map_err(|e| e.to_string())?;
    let nvi_r = ckpt.header.metrics.final_validation_r().unwrap_or(f64::NAN);
    let nvi_time = nvi_start.elapsed();

    let gr = g.final_validation_r().unwrap_or(f64::NAN);
    let dr = d.final_validation_r().unwrap_or(f64::NAN);
    let sizes_ok = g.n_train >= 500 && g.n_validation >= 100 && d.n_train >= 500 && d.n_validation >= 100;
    check(
        gr >= 0.8 && dr >= 0.6 && nvi_r >= 0.6 && sizes_ok && frames_time < Duration::from_secs(600) && nvi_time < Duration::from_secs(120),
        format!(
            "gesture r {gr:.3}, distance r {dr:.3} ({} train / {} val frames, {frames_time:.1?}); nvi r {nvi_r:.3} ({nvi_time:.1?})",
            g.n_train, g.n_validation
        ),
    )
}

fn aggregation_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut failures = Vec::new();
    let close = |a: &[f64; 10], b: &[f64; 10]| a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 1e-9);
    for case in 0..1000 {
        let n = rng.random_range(1..40);
        let visibility = match case % 3 {
            0 => 1.0,
            1 => 0.0,
            _ => rng.random_range(0.0..1.0),
        };
        let frames: Vec<FrameFeatures> = (0..n)
            .map(|i| FrameFeatures {
                frame_index: i,
                gesture: rng.random_range(0.0..1.0),
                distance: rng.random_range(0.0..1.0),
                emotions: rng.random_bool(visibility).then(|| {
                    let raw = [0; 8].map(|_| rng.random_range(0.0..1.0f32));
                    EmotionScores::normalized(raw).unwrap()
                }),
            })
            .collect();
        for weighting in [EmotionWeighting::TotalFrames, EmotionWeighting::VisibleFrames] {
            let base = aggregate_segment_with(&frames, weighting).unwrap();
            let mut shuffled = frames.clone();
            shuffled.shuffle(&mut rng);
            let doubled: Vec<_> = frames.iter().chain(&frames).cloned().collect();
            if !close(
                &base.flatten(),
                &aggregate_segment_with(&shuffled, weighting).unwrap().flatten(),
            ) {
                failures.push(format!("case {case}: order"));
            }
            if !close(
                &base.flatten(),
                &aggregate_segment_with(&doubled, weighting).unwrap().flatten(),
            ) {
                failures.push(format!("case {case}: duplication"));
            }
            let visible = frames.iter().filter(|f| f.emotions.is_some()).count();
            if visible == n {
                for e in Emotion::ALL {
                    let plain = frames
                        .iter()
                        .map(|f| f.emotions.as_ref().unwrap().get(e) as f64)
                        .sum::<f64>()
                        / n as f64;
                    if (base.emotion(e) - plain).abs() > 1e-9 {
                        failures.push(format!("case {case}: all-visible mean"));
                    }
                }
            }
            if visible == 0 && base.emotions.iter().any(|v| *v != 0.0) {
                failures.push(format!("case {case}: zero-visible"));
            }
        }
    }
    check(
        failures.is_empty(),
        format!(
            "1000 segments x 2 weightings, {} violations {:?}",
            failures.len(),
            failures.iter().take(3).collect::<Vec<_>>()
        ),
    )
}

fn substitution_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut bad = 0;
    for t in 0..100 {
        let n = rng.random_range(3..40);
        let truth: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..10_000.0)).collect();
        let mut columns: Vec<(String, Vec<f64>)> = (0..3)
            .map(|j| {
                (
                    format!("Rater{j}"),
                    truth.iter().map(|v| v + rng.random_range(-1500.0..1500.0)).collect(),
                )
            })
            .collect();
        let k = t % 3;
        columns.push(("Model".into(), columns[k].1.clone()));
        let m = RaterMatrix::new((0..n).map(|i| format!("i{i}")).collect(), columns).unwrap();
        let table = rater_replacement_table(&m, "Model").unwrap();
        if table[k].icc != table[3].icc || table[k].icc.is_none() {
            bad += 1;
        }
    }
    check(bad == 0, format!("100 matrices, {bad} mismatches (exact equality)"))
}

fn pipeline_once(root: &Path, name: &str) -> Result<Run, String> {
    let params = SynthDatasetParams {
        seed: 17,
        train_teachers: 4,
        validation_teachers: 3,
        external_teachers: 3,
        segments_per_teacher: 2,
        frames_per_segment: 6,
        ..Default::default()
    };
    let dir = root.join(name);
    write_synthetic_dataset(&params, &dir).map_err(|e| e.to_string())?;
    let toml = r#"
manifest = "manifest.jsonl"
run_id = "det"
seed = 17
[backbones]
gesture = "tiny-cnn"
distance = "tiny-cnn"
[train.gesture]
epochs = 2
[train.distance]
epochs = 2
[train.nvi]
epochs = 20
batch_size = 8
[external]
teacher_measures = "external/teacher_measures.csv"
video_measures = "external/video_measures.csv"
"#;
    let config = RunConfig::from_toml(toml, &dir).map_err(|e| e.to_string())?;
    let run = Run::open(config).map_err(|e| e.to_string())?;
    run.run_all(false).map_err(|e| e.to_string())?;
    Ok(run)
}

fn fixed_batch_predictions(run: &Run) -> Result<Vec<Vec<u32>>, String> {
    let seg = &run.manifest.segments[0].segment_id;
    let obs = ObservationReader::open(run.observation_path(seg))
        .and_then(|mut r| r.read_all())
        .map_err(|e| e.to_string())?;
    let mut out = Vec::new();
    for kind in [ModelKind::Gesture, ModelKind::Distance] {
        let ckpt = Checkpoint::load(&run.checkpoint_path(kind)).map_err(|e| e.to_string())?;
        let s = make_samples(&ckpt.model, obs.iter().map(|o| (o, 0.0))).map_err(|e| e.to_string())?;
        out.push(
            predict_samples(&ckpt.model, &s, 8)
                .map_err(|e| e.to_string())?
                .iter()
                .map(|v| v.to_bits())
                .collect(),
        );
    }
    let nvi = Checkpoint::load(&run.checkpoint_path(ModelKind::Nvi)).map_err(|e| e.to_string())?;
    let batch: Vec<Tensor> = (0..4)
        .map(|i| Tensor::from_elem(ndarray::IxDyn(&[10]), 0.1 * i as f32))
        .collect();
    out.push(
        nvi.model
            .predict(&batch)
            .map_err(|e| e.to_string())?
            .iter()
            .map(|v| v.to_bits())
            .collect(),
    );
    Ok(out)
}

fn determinism(root: &Path) -> Outcome {
    let a = pipeline_once(root, "det-a")?;
    let b = pipeline_once(root, "det-b")?;
    let mut diffs = Vec::new();
    let mut files = vec![
        a.report_dir().join("summary.json"),
        a.scores_path(),
        a.evaluation_path(),
    ];
    files.extend([ModelKind::Gesture, ModelKind::Distance, ModelKind::Nvi].map(|k| a.metrics_path(k)));
    for f in &files {
        let rel = f.strip_prefix(&a.dir).unwrap();
        let (x, y) = (std::fs::read(f), std::fs::read(b.dir.join(rel)));
        if x.is_err() || x.ok() != y.ok() {
            diffs.push(rel.display().to_string());
        }
    }
    if fixed_batch_predictions(&a)? != fixed_batch_predictions(&b)? {
        diffs.push("fixed-batch predictions".into());
    }
    check(
        diffs.is_empty(),
        format!(
            "two seeded runs: {} files + predictions compared, differing: {diffs:?}",
            files.len()
        ),
    )
}

fn perceptron_structure() -> Outcome {
    let mut model = build_nvi_model(0);
    let count = model.parameter_count();
    let closed = nvi_parameter_count();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = Tensor::from_shape_fn(ndarray::IxDyn(&[16, 10]), |_| rng.random_range(0.0..1.0f32));
    let t = Tensor::from_shape_fn(ndarray::IxDyn(&[16, 1]), |_| rng.random_range(0.0..1.0f32));
    let mut opt = Adam::new(1e-4);
    let before = train_step(&mut model, &x, &t, &mut opt);
    let after = nn::mse(&model.net().forward(&x), &t).0;
    check(
        count == closed && after < before,
        format!("parameters {count}, closed form (10*300+300)+(300*100+100)+(100*10+10)+(10*1+1) = {closed}; MSE {before:.6} -> {after:.6}"),
    )
}

fn perceptron_stated_count() -> Outcome {
    let count = build_nvi_model(0).parameter_count();
    check(count == 34_521, format!("parameters {count} vs stated 34,521"))
}

fn external_harness() -> Outcome {
    let (scores, teacher, video) = external_fixture(200, 0.5, 31);
    let hyps: Vec<_> = default_hypotheses();
    let report = external_validation(&scores, &[&teacher, &video], &hyps, Variant::Full).map_err(|e| e.to_string())?;
    let rs: Vec<f64> = report.results.iter().map(|r| r.r.unwrap_or(f64::NAN)).collect();
    let within = rs.iter().all(|r| (r - 0.5).abs() <= 0.15);
    let mut pairs: Vec<(f64, f64)> = report
        .results
        .iter()
        .map(|r| (r.p_raw.unwrap(), r.p_adjusted.unwrap()))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let monotone = pairs.windows(2).all(|w| w[0].1 <= w[1].1) && pairs.iter().all(|(p, q)| q >= p);
    let n_ok = report.results.iter().all(|r| r.n == 200);
    check(
        within && monotone && n_ok,
        format!("r = {rs:.3?} at n = 200, adjusted p monotone: {monotone}"),
    )
}

fn main() {
    let root = tempfile::tempdir().expect("tempdir");
    let criteria: Vec<Criterion> = vec![
        ("stats oracle equivalence", true, Box::new(stats_oracles)),
        ("reliability Monte Carlo", true, Box::new(reliability_monte_carlo)),
        ("disagreement filter", true, Box::new(disagreement_filter)),
        (
            "synthetic end-to-end learnability",
            true,
            Box::new(|| learnability(root.path())),
        ),
        ("aggregation invariants", true, Box::new(aggregation_invariants)),
        (
            "rater-replacement substitution identity",
            true,
            Box::new(substitution_identity),
        ),
        ("determinism", true, Box::new(|| determinism(root.path()))),
        (
            "perceptron structure: closed form and descent step",
            true,
            Box::new(perceptron_structure),
        ),
        // The stated constant disagrees with its own layer widths; reported, not gating.
        (
            "perceptron structure: stated count 34,521",
            false,
            Box::new(perceptron_stated_count),
        ),
        ("external-validation harness", true, Box::new(external_harness)),
    ];
    let mut failed = 0;
    let mut summary = BTreeMap::new();
    for (name, gating, f) in &criteria {
        let start = Instant::now();
        let outcome =
            std::panic::catch_unwind(std::panic::AssertUnwindSafe(f)).unwrap_or_else(|_| Err("panicked".into()));
        let (tag, detail) = match &outcome {
            Ok(d) => ("PASS", d.clone()),
            Err(d) if *gating => {
                failed += 1;
                ("FAIL", d.clone())
            }
            Err(d) => ("FAIL (known, non-gating)", d.clone()),
        };
        println!("{tag}: {name}: {detail} [{:.1?}]", start.elapsed());
        summary.insert(*name, tag);
    }
    println!("{} criteria, {failed} gating failure(s)", summary.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
