//! Segment-level aggregation of frame features and the NVI perceptron.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Split;
use crate::error::{Error, Result};
use crate::model::{Checkpoint, CheckpointHeader, Model, ModelSpec, CHECKPOINT_SCHEMA_VERSION, NVI_WIDTHS};
use crate::nn::Tensor;
use crate::perception::{Emotion, EmotionScores};
use crate::training::{fit, CachedSamples, TrainConfig};

/// Order of the flattened segment vector.
pub const FEATURE_NAMES: [&str; 10] = [
    "gesture",
    "distance",
    "anger",
    "contempt",
    "disgust",
    "fear",
    "happiness",
    "neutral",
    "sadness",
    "surprise",
];

/// Per-frame model outputs on the normalized `[0, 1]` scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameFeatures {
    pub frame_index: usize,
    pub gesture: f32,
    pub distance: f32,
    /// `None` when no teacher face was found.
    pub emotions: Option<EmotionScores>,
}

impl FrameFeatures {
    pub fn face_visible(&self) -> bool {
        self.emotions.is_some()
    }
}

/// How emotion confidences are pooled over a segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmotionWeighting {
    /// Sum over face-visible frames divided by all frames.
    #[default]
    TotalFrames,
    /// Plain mean over face-visible frames.
    VisibleFrames,
}

impl EmotionWeighting {
    pub fn as_str(self) -> &'static str {
        match self {
            EmotionWeighting::TotalFrames => "total_frames",
            EmotionWeighting::VisibleFrames => "visible_frames",
        }
    }
}

/// Tag identifying vector order and emotion weighting. Checkpoints refuse
/// vectors carrying a different tag.
pub fn feature_layout(weighting: EmotionWeighting) -> String {
    format!("v1:{};emotions={}", FEATURE_NAMES.join(","), weighting.as_str())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentFeatureVector {
    pub gesture: f64,
    pub distance: f64,
    /// In [`Emotion::ALL`] order.
    pub emotions: [f64; 8],
    pub visible_face_frames: usize,
    pub total_frames: usize,
    pub layout: String,
}

impl SegmentFeatureVector {
    pub fn flatten(&self) -> [f64; 10] {
        let mut v = [0.0; 10];
        v[0] = self.gesture;
        v[1] = self.distance;
        v[2..].copy_from_slice(&self.emotions);
        v
    }

    pub fn emotion(&self, e: Emotion) -> f64 {
        self.emotions[e.index()]
    }

    pub fn validate(&self) -> Result<()> {
        if self.flatten().iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("segment feature vector contains a non-finite value"));
        }
        if self.total_frames == 0 || self.visible_face_frames > self.total_frames {
            return Err(Error::invalid(format!(
                "inconsistent frame counts: {} visible of {}",
                self.visible_face_frames, self.total_frames
            )));
        }
        Ok(())
    }
}

pub fn aggregate_segment(frames: &[FrameFeatures]) -> Result<SegmentFeatureVector> {
    aggregate_segment_with(frames, EmotionWeighting::default())
}

/// Gesture and distance are means over all frames; emotions follow
/// `weighting`. A segment without any visible face gets a zero emotion
/// sub-vector.
pub fn aggregate_segment_with(frames: &[FrameFeatures], weighting: EmotionWeighting) -> Result<SegmentFeatureVector> {
    if frames.is_empty() {
        return Err(Error::EmptyDataset("segment has no frames".into()));
    }
    let n = frames.len() as f64;
    let mut gesture = 0.0;
    let mut distance = 0.0;
    let mut emotions = [0.0; 8];
    let mut visible = 0;
    for f in frames {
        gesture += f.gesture as f64;
        distance += f.distance as f64;
        if let Some(e) = &f.emotions {
            visible += 1;
            for (acc, v) in emotions.iter_mut().zip(e.values()) {
                *acc += *v as f64;
            }
        }
    }
    let denom = match weighting {
        EmotionWeighting::TotalFrames => n,
        EmotionWeighting::VisibleFrames => visible.max(1) as f64,
    };
    for e in &mut emotions {
        *e /= denom;
    }
    Ok(SegmentFeatureVector {
        gesture: gesture / n,
        distance: distance / n,
        emotions,
        visible_face_frames: visible,
        total_frames: frames.len(),
        layout: feature_layout(weighting),
    })
}

pub fn build_nvi_model(seed: u64) -> Model {
    Model::build(ModelSpec::Nvi, seed).expect("the perceptron has no external weights")
}

/// Weights plus biases of a fully connected stack with the given widths.
pub fn dense_parameter_count(widths: &[usize]) -> usize {
    widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

pub fn nvi_parameter_count() -> usize {
    dense_parameter_count(&NVI_WIDTHS)
}

fn vector_tensor(v: &SegmentFeatureVector) -> Tensor {
    Tensor::from_shape_vec(ndarray::IxDyn(&[10]), v.flatten().iter().map(|x| *x as f32).collect()).unwrap()
}

fn samples(pairs: &[(SegmentFeatureVector, f64)]) -> Result<CachedSamples> {
    let mut s = CachedSamples::default();
    for (v, t) in pairs {
        v.validate()?;
        if !t.is_finite() {
            return Err(Error::invalid("non-finite NVI target"));
        }
        s.inputs.push(vector_tensor(v));
        s.targets.push(*t as f32);
    }
    Ok(s)
}

fn common_layout<'a>(sets: impl IntoIterator<Item = &'a (SegmentFeatureVector, f64)>) -> Result<String> {
    let mut layout: Option<&str> = None;
    for (v, _) in sets {
        match layout {
            None => layout = Some(&v.layout),
            Some(l) if l != v.layout => {
                return Err(Error::invalid(format!("mixed feature layouts: {l} and {}", v.layout)));
            }
            _ => {}
        }
    }
    layout
        .map(str::to_string)
        .ok_or_else(|| Error::EmptyDataset("no NVI training vectors".into()))
}

/// Trains the perceptron on `(vector, normalized target)` pairs.
pub fn train_nvi(
    mut model: Model,
    train: &[(SegmentFeatureVector, f64)],
    validation: &[(SegmentFeatureVector, f64)],
    config: &TrainConfig,
    scale_max: f64,
) -> Result<Checkpoint> {
    if model.spec != ModelSpec::Nvi {
        return Err(Error::Config("train_nvi needs an nvi model".into()));
    }
    let layout = common_layout(train.iter().chain(validation))?;
    let train_s = samples(train)?;
    let val_s = samples(validation)?;
    let metrics = fit(&mut model, &train_s, Some(&val_s), config)?;
    Ok(Checkpoint {
        header: CheckpointHeader {
            schema_version: CHECKPOINT_SCHEMA_VERSION,
            spec: ModelSpec::Nvi,
            config: config.clone(),
            metrics,
            scale_max,
            feature_layout: Some(layout),
        },
        model,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NviScore {
    /// In rating units.
    pub value: f64,
}

pub fn predict_nvi(checkpoint: &Checkpoint, vector: &SegmentFeatureVector) -> Result<NviScore> {
    predict_nvi_batch(checkpoint, std::slice::from_ref(vector)).map(|v| v[0])
}

pub fn predict_nvi_batch(checkpoint: &Checkpoint, vectors: &[SegmentFeatureVector]) -> Result<Vec<NviScore>> {
    if checkpoint.header.spec != ModelSpec::Nvi {
        return Err(Error::Checkpoint(format!(
            "expected an nvi checkpoint, found {}",
            checkpoint.kind()
        )));
    }
    let expected = checkpoint.header.feature_layout.as_deref().unwrap_or_default();
    for v in vectors {
        v.validate()?;
        if v.layout != expected {
            return Err(Error::Checkpoint(format!(
                "feature layout {:?} does not match the checkpoint's {:?}",
                v.layout, expected
            )));
        }
    }
    let out = checkpoint
        .model
        .predict(&vectors.iter().map(vector_tensor).collect::<Vec<_>>())?;
    Ok(out
        .into_iter()
        .map(|y| NviScore {
            value: y as f64 * checkpoint.header.scale_max,
        })
        .collect())
}

/// Frame features and their aggregate for one segment, as stored on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentFeatures {
    pub segment_id: String,
    pub frames: Vec<FrameFeatures>,
    pub vector: SegmentFeatureVector,
}

impl SegmentFeatures {
    pub fn new(segment_id: impl Into<String>, frames: Vec<FrameFeatures>, weighting: EmotionWeighting) -> Result<Self> {
        let vector = aggregate_segment_with(&frames, weighting)?;
        Ok(SegmentFeatures {
            segment_id: segment_id.into(),
            frames,
            vector,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let features: SegmentFeatures = serde_json::from_str(&text)?;
        features.vector.validate()?;
        Ok(features)
    }
}

/// One row of an NVI score table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub segment_id: String,
    pub teacher_id: String,
    pub video_id: String,
    pub split: Split,
    pub score: f64,
}

pub fn write_scores(path: &Path, rows: &[ScoreRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_scores(path: &Path) -> Result<Vec<ScoreRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let rows = r.deserialize().collect::<std::result::Result<Vec<ScoreRow>, _>>()?;
    if let Some(bad) = rows.iter().find(|r| !r.score.is_finite()) {
        return Err(Error::invalid(format!(
            "{}: non-finite score for segment {}",
            path.display(),
            bad.segment_id
        )));
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(i: usize, gesture: f32, emotion: Option<Emotion>) -> FrameFeatures {
        FrameFeatures {
            frame_index: i,
            gesture,
            distance: 0.3,
            emotions: emotion.map(|e| EmotionScores::peaked(e, 1.0)),
        }
    }

    #[test]
    fn constant_frames() {
        let frames: Vec<_> = (0..4).map(|i| frame(i, 0.5, Some(Emotion::Happiness))).collect();
        let v = aggregate_segment(&frames).unwrap();
        assert_eq!(v.emotion(Emotion::Happiness), 1.0);
        assert_eq!(v.gesture, 0.5);
        assert_eq!(v.visible_face_frames, 4);
    }

    #[test]
    fn no_faces_gives_zero_emotions() {
        let frames: Vec<_> = (0..4).map(|i| frame(i, 0.5, None)).collect();
        for w in [EmotionWeighting::TotalFrames, EmotionWeighting::VisibleFrames] {
            let v = aggregate_segment_with(&frames, w).unwrap();
            assert_eq!(v.emotions, [0.0; 8]);
            assert_eq!(v.visible_face_frames, 0);
        }
    }

    #[test]
    fn half_visible_halves_emotions() {
        let frames = vec![
            frame(0, 0.5, Some(Emotion::Happiness)),
            frame(1, 0.5, Some(Emotion::Happiness)),
            frame(2, 0.5, None),
            frame(3, 0.5, None),
        ];
        assert_eq!(aggregate_segment(&frames).unwrap().emotion(Emotion::Happiness), 0.5);
        let alt = aggregate_segment_with(&frames, EmotionWeighting::VisibleFrames).unwrap();
        assert_eq!(alt.emotion(Emotion::Happiness), 1.0);
        assert_ne!(alt.layout, aggregate_segment(&frames).unwrap().layout);
    }

    #[test]
    fn empty_segment_is_an_error() {
        assert!(matches!(aggregate_segment(&[]), Err(Error::EmptyDataset(_))));
    }

    #[test]
    fn flatten_order() {
        let frames = vec![frame(0, 0.25, Some(Emotion::Surprise))];
        let v = aggregate_segment(&frames).unwrap().flatten();
        assert_eq!(v[0], 0.25);
        assert_eq!(v[1], 0.3f32 as f64);
        assert_eq!(v[9], 1.0);
        assert_eq!(FEATURE_NAMES[2 + Emotion::Surprise.index()], "surprise");
    }

    #[test]
    fn nvi_model_structure() {
        let m = build_nvi_model(0);
        assert_eq!(m.parameter_count(), nvi_parameter_count());
        assert_eq!(
            nvi_parameter_count(),
            (10 * 300 + 300) + (300 * 100 + 100) + (100 * 10 + 10) + (10 + 1)
        );
        let x = Tensor::zeros(ndarray::IxDyn(&[10]));
        let a = m.predict(std::slice::from_ref(&x)).unwrap();
        assert!(a[0].is_finite());
        assert_eq!(a, build_nvi_model(0).predict(&[x]).unwrap());
    }

    fn vector(g: f64) -> SegmentFeatureVector {
        aggregate_segment(&[frame(0, g as f32, Some(Emotion::Neutral))]).unwrap()
    }

    #[test]
    fn single_sample_is_memorized() {
        let config = TrainConfig {
            epochs: 300,
            batch_size: 1,
            ..Default::default()
        };
        let ck = train_nvi(build_nvi_model(1), &[(vector(0.4), 0.7)], &[], &config, 10_000.0).unwrap();
        assert!(ck.header.metrics.final_train_loss().unwrap() < 1e-6);
        let score = predict_nvi(&ck, &vector(0.4)).unwrap();
        assert!((score.value - 7000.0).abs() < 10.0, "{score:?}");
        assert_eq!(score, predict_nvi(&ck, &vector(0.4)).unwrap());
    }

    #[test]
    fn prediction_rejects_bad_vectors() {
        let config = TrainConfig {
            epochs: 1,
            ..Default::default()
        };
        let ck = train_nvi(build_nvi_model(1), &[(vector(0.4), 0.7)], &[], &config, 10_000.0).unwrap();
        let mut v = vector(0.4);
        v.gesture = f64::NAN;
        assert!(matches!(predict_nvi(&ck, &v), Err(Error::InvalidInput(_))));
        let mut v = vector(0.4);
        v.layout = feature_layout(EmotionWeighting::VisibleFrames);
        assert!(matches!(predict_nvi(&ck, &v), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn score_table_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scores.csv");
        let rows = vec![ScoreRow {
            segment_id: "S1".into(),
            teacher_id: "T1".into(),
            video_id: "V1".into(),
            split: Split::External,
            score: 5123.5,
        }];
        write_scores(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(
            text,
            "segment_id,teacher_id,video_id,split,score\nS1,T1,V1,external,5123.5\n"
        );
        assert_eq!(read_scores(&path).unwrap(), rows);
    }
}
