//! Whole synthetic datasets: manifest, scene files, rater labels and
//! external measures, plus small fixtures for the fusion and external
//! validation stages.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::scene::SceneParams;
use crate::data::{write_manifest, Construct, DatasetManifest, FrameLabelRecord, RatingTriple, SegmentRecord, Split};
use crate::error::{Error, Result};
use crate::evaluation::{ExternalMeasures, Level};
use crate::fusion::{aggregate_segment, ScoreRow, SegmentFeatureVector};
use crate::perception::Emotion;

pub const SCENE_SUFFIX: &str = ".scene.json";
pub const RATER_IDS: [&str; 3] = ["R1", "R2", "R3"];
pub const MEASURE_COLUMNS: [&str; 4] = [
    "interest_math",
    "cognitive_activation",
    "perceived_enthusiasm",
    "socio_emotional_support",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthDatasetParams {
    pub seed: u64,
    pub train_teachers: usize,
    pub validation_teachers: usize,
    pub external_teachers: usize,
    pub segments_per_teacher: usize,
    pub frames_per_segment: usize,
    pub fps: f64,
    pub width: usize,
    pub height: usize,
    /// Label every n-th frame.
    pub label_stride: usize,
    pub scale_max: f64,
    /// Rating units.
    pub rater_bias_sd: f64,
    pub rater_noise_sd: f64,
    /// Population correlation between teacher NVI and each external measure.
    pub measure_correlation: f64,
    pub low_quality_fraction: f64,
}

impl Default for SynthDatasetParams {
    fn default() -> Self {
        SynthDatasetParams {
            seed: 0,
            train_teachers: 12,
            validation_teachers: 4,
            external_teachers: 8,
            segments_per_teacher: 3,
            frames_per_segment: 16,
            fps: 1.0,
            width: 96,
            height: 72,
            label_stride: 1,
            scale_max: 10_000.0,
            rater_bias_sd: 200.0,
            rater_noise_sd: 500.0,
            measure_correlation: 0.5,
            low_quality_fraction: 0.0,
        }
    }
}

impl SynthDatasetParams {
    pub fn validate(&self) -> Result<()> {
        if self.train_teachers == 0 || self.segments_per_teacher == 0 || self.frames_per_segment == 0 {
            return Err(Error::Config(
                "need at least one train teacher, segment and frame".into(),
            ));
        }
        if self.label_stride == 0 {
            return Err(Error::Config("label_stride must be at least 1".into()));
        }
        if !(self.fps > 0.0 && self.scale_max > 0.0) {
            return Err(Error::Config("fps and scale_max must be positive".into()));
        }
        if !(self.rater_bias_sd >= 0.0 && self.rater_noise_sd >= 0.0) {
            return Err(Error::Config("rater deviations must be non-negative".into()));
        }
        if !(-1.0..=1.0).contains(&self.measure_correlation) {
            return Err(Error::Config("measure_correlation must lie in [-1, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.low_quality_fraction) {
            return Err(Error::Config("low_quality_fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// NVI ground truth in `[0, 1]` as a linear function of the aggregated
/// segment features.
pub fn nvi_truth(v: &SegmentFeatureVector) -> f64 {
    let negative = v.emotion(Emotion::Anger) + v.emotion(Emotion::Contempt) + v.emotion(Emotion::Disgust);
    (0.1 + 0.4 * v.gesture + 0.3 * (1.0 - v.distance) + 0.2 * v.emotion(Emotion::Happiness) - 0.1 * negative)
        .clamp(0.0, 1.0)
}

/// Paths written by [`write_synthetic_dataset`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthDataset {
    pub manifest: PathBuf,
    pub teacher_measures: PathBuf,
    pub video_measures: PathBuf,
    /// Segment id to noise-free NVI in rating units.
    pub nvi_truth: BTreeMap<String, f64>,
}

struct Panel {
    biases: [f64; 3],
    noise: Normal<f64>,
    scale_max: f64,
}

impl Panel {
    fn rate(&self, item: &str, construct: Construct, truth01: f64, rng: &mut impl Rng) -> RatingTriple {
        let t = truth01 * self.scale_max;
        let values = self
            .biases
            .map(|b| (t + b + self.noise.sample(rng)).clamp(0.0, self.scale_max));
        RatingTriple::new(item, construct, values, RATER_IDS)
    }
}

fn correlated(z: f64, rho: f64, rng: &mut impl Rng) -> f64 {
    let e: f64 = StandardNormal.sample(rng);
    rho * z + (1.0 - rho * rho).sqrt() * e
}

fn measures_from(level: Level, keys: &BTreeMap<String, f64>, rho: f64, rng: &mut impl Rng) -> ExternalMeasures {
    let n = keys.len() as f64;
    let mean = keys.values().sum::<f64>() / n;
    let sd = (keys.values().map(|v| (v - mean).powi(2)).sum::<f64>() / n)
        .sqrt()
        .max(1e-12);
    ExternalMeasures {
        level,
        measures: MEASURE_COLUMNS.iter().map(|s| s.to_string()).collect(),
        rows: keys
            .iter()
            .map(|(k, v)| {
                let z = (v - mean) / sd;
                (
                    k.clone(),
                    (0..MEASURE_COLUMNS.len())
                        .map(|_| 3.0 + 0.5 * correlated(z, rho, rng))
                        .collect(),
                )
            })
            .collect(),
    }
}

/// Writes a complete synthetic dataset under `out_dir`: `manifest.jsonl`,
/// one `scenes/<segment>.scene.json` per segment, and teacher- and
/// video-level measure CSVs under `external/`.
pub fn write_synthetic_dataset(params: &SynthDatasetParams, out_dir: &Path) -> Result<SynthDataset> {
    params.validate()?;
    let scenes_dir = out_dir.join("scenes");
    let external_dir = out_dir.join("external");
    for d in [&scenes_dir, &external_dir] {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let noise = Normal::new(0.0, params.rater_noise_sd).map_err(|e| Error::Config(e.to_string()))?;
    let bias = Normal::new(0.0, params.rater_bias_sd).map_err(|e| Error::Config(e.to_string()))?;
    let panel = Panel {
        biases: [(); 3].map(|_| bias.sample(&mut rng)),
        noise,
        scale_max: params.scale_max,
    };

    let duration = params.frames_per_segment as f64 / params.fps;
    let mut manifest = DatasetManifest::new(params.scale_max, params.fps);
    manifest.segment_duration = duration;
    let mut truth = BTreeMap::new();
    let mut teacher_nvi: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut video_nvi: BTreeMap<String, Vec<f64>> = BTreeMap::new();

    let groups = [
        (Split::Train, params.train_teachers),
        (Split::Validation, params.validation_teachers),
        (Split::External, params.external_teachers),
    ];
    let mut teacher_no = 0;
    for (split, count) in groups {
        for _ in 0..count {
            let teacher_id = format!("T{teacher_no:03}");
            teacher_no += 1;
            for s in 0..params.segments_per_teacher {
                let segment_id = format!("{teacher_id}_S{s:02}");
                let video_id = format!("{teacher_id}_V{}", s % 2);
                let scene_seed = rng.random::<u64>();
                let scene = SceneParams::random(scene_seed, params.frames_per_segment, params.width, params.height);
                let file = format!("{segment_id}{SCENE_SUFFIX}");
                scene.save(&scenes_dir.join(&file))?;

                let frames: Vec<_> = (0..scene.n_frames).map(|i| scene.frame_truth(i)).collect();
                let nvi = nvi_truth(&aggregate_segment(&frames)?);
                truth.insert(segment_id.clone(), nvi * params.scale_max);
                teacher_nvi.entry(teacher_id.clone()).or_default().push(nvi);
                video_nvi.entry(video_id.clone()).or_default().push(nvi);

                if split != Split::External {
                    for f in frames.iter().step_by(params.label_stride) {
                        let frame_id = format!("{segment_id}_F{:04}", f.frame_index);
                        let ratings = [
                            (Construct::GestureIntensity, f.gesture as f64),
                            (Construct::PerceivedDistance, f.distance as f64),
                        ]
                        .into_iter()
                        .map(|(c, t)| (c, panel.rate(&frame_id, c, t, &mut rng)))
                        .collect();
                        manifest.frame_labels.push(FrameLabelRecord {
                            frame_id,
                            segment_id: segment_id.clone(),
                            frame_index: f.frame_index,
                            ratings,
                        });
                    }
                    manifest
                        .segment_labels
                        .push(panel.rate(&segment_id, Construct::Nvi, nvi, &mut rng));
                }
                manifest.segments.push(SegmentRecord {
                    segment_id,
                    teacher_id: teacher_id.clone(),
                    video_id,
                    start: 0.0,
                    duration,
                    source_path: PathBuf::from("scenes").join(file),
                    split,
                    teacher_box: None,
                    low_quality: split == Split::Train && rng.random_bool(params.low_quality_fraction),
                });
            }
        }
    }

    let mean_of = |m: BTreeMap<String, Vec<f64>>| -> BTreeMap<String, f64> {
        m.into_iter()
            .map(|(k, v)| (k, v.iter().sum::<f64>() / v.len() as f64))
            .collect()
    };
    let teacher = measures_from(
        Level::Teacher,
        &mean_of(teacher_nvi),
        params.measure_correlation,
        &mut rng,
    );
    let video = measures_from(Level::Video, &mean_of(video_nvi), params.measure_correlation, &mut rng);
    let out = SynthDataset {
        manifest: out_dir.join("manifest.jsonl"),
        teacher_measures: external_dir.join("teacher_measures.csv"),
        video_measures: external_dir.join("video_measures.csv"),
        nvi_truth: truth,
    };
    teacher.write_csv(&out.teacher_measures)?;
    video.write_csv(&out.video_measures)?;
    manifest.validate()?;
    write_manifest(&manifest, &out.manifest)?;
    Ok(out)
}

/// Random segment vectors with a linear NVI target in `[0, 1]` plus
/// Gaussian noise of standard deviation `noise_sd`.
pub fn linear_fusion_set(n: usize, noise_sd: f64, seed: u64) -> Vec<(SegmentFeatureVector, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, noise_sd).expect("noise_sd must be non-negative");
    (0..n)
        .map(|_| {
            let visible: f64 = rng.random_range(0.0..=1.0);
            let mut raw = [0.0f64; 8];
            for r in &mut raw {
                *r = rng.random_range(0.0..1.0f64).powi(2);
            }
            let sum: f64 = raw.iter().sum();
            let emotions = raw.map(|r| visible * r / sum);
            let total = 30usize;
            let v = SegmentFeatureVector {
                gesture: rng.random_range(0.1..0.9),
                distance: rng.random_range(0.0..1.0),
                emotions,
                visible_face_frames: (visible * total as f64).round() as usize,
                total_frames: total,
                layout: crate::fusion::feature_layout(Default::default()),
            };
            let y = nvi_truth(&v) + noise.sample(&mut rng);
            (v, y.clamp(0.0, 1.0))
        })
        .collect()
}

/// Teacher-level scores and four measures, each drawn with population
/// correlation `rho` to the teacher mean score. Every teacher has two
/// segments in one video named after the teacher.
pub fn external_fixture(n_teachers: usize, rho: f64, seed: u64) -> (Vec<ScoreRow>, ExternalMeasures, ExternalMeasures) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut scores = Vec::with_capacity(2 * n_teachers);
    let mut teacher = ExternalMeasures {
        level: Level::Teacher,
        measures: MEASURE_COLUMNS.iter().map(|s| s.to_string()).collect(),
        rows: BTreeMap::new(),
    };
    let mut video = ExternalMeasures {
        level: Level::Video,
        ..teacher.clone()
    };
    for t in 0..n_teachers {
        let id = format!("T{t:04}");
        let z: f64 = StandardNormal.sample(&mut rng);
        let spread = rng.random_range(0.0..500.0);
        for (s, d) in [-spread, spread].into_iter().enumerate() {
            scores.push(ScoreRow {
                segment_id: format!("{id}_S{s}"),
                teacher_id: id.clone(),
                video_id: id.clone(),
                split: if t % 2 == 0 { Split::External } else { Split::Validation },
                score: 5000.0 + 1000.0 * z + d,
            });
        }
        let row: Vec<f64> = (0..MEASURE_COLUMNS.len())
            .map(|_| correlated(z, rho, &mut rng))
            .collect();
        teacher.rows.insert(id.clone(), row.clone());
        video.rows.insert(id, row);
    }
    (scores, teacher, video)
}
