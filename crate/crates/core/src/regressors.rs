//! Frame-level gesture-intensity and perceived-distance regressors.
//!
//! Model inputs are channel-first `3 x 360 x 360` tensors:
//! * gesture: the RGB frame with everything outside the teacher mask zeroed;
//! * distance: normalized depth, teacher mask, student mask.

use ndarray::{Array2, Array3, ArrayView2, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::data::{Construct, DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::model::{
    BackboneSpec, Checkpoint, CheckpointHeader, Model, ModelKind, ModelSpec, CHECKPOINT_SCHEMA_VERSION, INPUT_SIZE,
};
use crate::nn::Tensor;
use crate::perception::{FrameObservation, Mask};
use crate::stats::{exceeds_disagreement, median_rating, pearson, CorrelationResult};
use crate::training::{fit, predict_samples, CachedSamples, Samples, TrainConfig};

/// Default decision threshold on the normalized scale.
pub const DEFAULT_BINARY_THRESHOLD: f64 = 0.5;

pub fn construct_for(kind: ModelKind) -> Result<Construct> {
    match kind {
        ModelKind::Gesture => Ok(Construct::GestureIntensity),
        ModelKind::Distance => Ok(Construct::PerceivedDistance),
        ModelKind::Nvi => Err(Error::Config("nvi is not a frame regressor".into())),
    }
}

/// Bilinear resampling with half-pixel centers (the convention of most
/// image libraries), applied per channel of an `H x W x C` image.
pub fn bilinear_resize(img: ArrayView3<'_, f32>, out_h: usize, out_w: usize) -> Array3<f32> {
    let (h, w, c) = img.dim();
    let axis = |out: usize, size: usize| -> Vec<(usize, usize, f32)> {
        let scale = size as f32 / out as f32;
        (0..out)
            .map(|o| {
                let src = ((o as f32 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(size - 1);
                let i1 = (i0 + 1).min(size - 1);
                (i0, i1, src - i0 as f32)
            })
            .collect()
    };
    let (ys, xs) = (axis(out_h, h), axis(out_w, w));
    Array3::from_shape_fn((out_h, out_w, c), |(y, x, ch)| {
        let (y0, y1, fy) = ys[y];
        let (x0, x1, fx) = xs[x];
        let top = img[[y0, x0, ch]] * (1.0 - fx) + img[[y0, x1, ch]] * fx;
        let bottom = img[[y1, x0, ch]] * (1.0 - fx) + img[[y1, x1, ch]] * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

/// Nearest-neighbour resampling for binary masks.
pub fn nearest_resize(mask: ArrayView2<'_, bool>, out_h: usize, out_w: usize) -> Mask {
    let (h, w) = mask.dim();
    Array2::from_shape_fn((out_h, out_w), |(y, x)| {
        let sy = ((y as f64 + 0.5) * h as f64 / out_h as f64).floor() as usize;
        let sx = ((x as f64 + 0.5) * w as f64 / out_w as f64).floor() as usize;
        mask[[sy.min(h - 1), sx.min(w - 1)]]
    })
}

fn to_chw(hwc: &Array3<f32>) -> Tensor {
    hwc.view()
        .permuted_axes([2, 0, 1])
        .as_standard_layout()
        .into_owned()
        .into_dyn()
}

/// Teacher-masked RGB at 360x360, channel-first. The background is zeroed
/// before and after resampling, so no background value reaches the output.
pub fn gesture_input(obs: &FrameObservation) -> Tensor {
    let mut rgb = obs.rgb.clone();
    for ((y, x, _), v) in rgb.indexed_iter_mut() {
        if !obs.teacher_mask[[y, x]] {
            *v = 0.0;
        }
    }
    let mut big = bilinear_resize(rgb.view(), INPUT_SIZE, INPUT_SIZE);
    let mask = nearest_resize(obs.teacher_mask.view(), INPUT_SIZE, INPUT_SIZE);
    for ((y, x, _), v) in big.indexed_iter_mut() {
        if !mask[[y, x]] {
            *v = 0.0;
        }
    }
    to_chw(&big)
}

/// Depth, teacher mask and student mask at 360x360, channel-first.
pub fn distance_input(obs: &FrameObservation) -> Tensor {
    let depth = obs.depth.view().insert_axis(ndarray::Axis(2));
    let depth = bilinear_resize(depth, INPUT_SIZE, INPUT_SIZE);
    let teacher = nearest_resize(obs.teacher_mask.view(), INPUT_SIZE, INPUT_SIZE);
    let students = nearest_resize(obs.student_mask.view(), INPUT_SIZE, INPUT_SIZE);
    let hwc = Array3::from_shape_fn((INPUT_SIZE, INPUT_SIZE, 3), |(y, x, c)| match c {
        0 => depth[[y, x, 0]].clamp(0.0, 1.0),
        1 => teacher[[y, x]] as u8 as f32,
        _ => students[[y, x]] as u8 as f32,
    });
    to_chw(&hwc)
}

pub fn regressor_input(kind: ModelKind, obs: &FrameObservation) -> Result<Tensor> {
    match kind {
        ModelKind::Gesture => Ok(gesture_input(obs)),
        ModelKind::Distance => Ok(distance_input(obs)),
        ModelKind::Nvi => Err(Error::Config("nvi is not a frame regressor".into())),
    }
}

pub fn build_regressor(kind: ModelKind, backbone: &BackboneSpec, seed: u64) -> Result<Model> {
    construct_for(kind)?;
    Model::build(
        ModelSpec::Regressor {
            kind,
            backbone: backbone.clone(),
        },
        seed,
    )
}

/// One labeled frame with its normalized target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingPair {
    pub frame_id: String,
    pub segment_id: String,
    pub frame_index: usize,
    pub target: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreparedTargets {
    pub construct: Construct,
    pub train: Vec<TrainingPair>,
    pub validation: Vec<TrainingPair>,
    /// Training frames dropped for rater disagreement.
    pub excluded: Vec<String>,
    pub sigma_max: f64,
}

impl PreparedTargets {
    /// Human-readable filter summary.
    pub fn report(&self) -> String {
        format!(
            "{}: {} training labels kept, {} excluded at sigma_max = {}, {} validation labels",
            self.construct.as_str(),
            self.train.len(),
            self.excluded.len(),
            self.sigma_max,
            self.validation.len()
        )
    }
}

/// Median-of-three targets scaled to `[0, 1]`. The disagreement filter only
/// touches training-split frames; validation keeps every label. Frames from
/// external-split segments are ignored.
pub fn prepare_targets(
    manifest: &DatasetManifest,
    construct: Construct,
    config: &TrainConfig,
) -> Result<PreparedTargets> {
    if construct == Construct::Nvi {
        return Err(Error::Config(
            "frame targets exist only for gesture and distance".into(),
        ));
    }
    let mut out = PreparedTargets {
        construct,
        train: Vec::new(),
        validation: Vec::new(),
        excluded: Vec::new(),
        sigma_max: config.sigma_max,
    };
    for label in &manifest.frame_labels {
        let Some(triple) = label.rating(construct) else {
            continue;
        };
        let Some(segment) = manifest.segment(&label.segment_id) else {
            return Err(Error::DanglingLabel {
                label: label.frame_id.clone(),
                segment_id: label.segment_id.clone(),
            });
        };
        let pair = TrainingPair {
            frame_id: label.frame_id.clone(),
            segment_id: label.segment_id.clone(),
            frame_index: label.frame_index,
            target: median_rating(triple) / manifest.scale_max,
        };
        match segment.split {
            Split::Train if exceeds_disagreement(&triple.values, config.sigma_max) => out.excluded.push(pair.frame_id),
            Split::Train => out.train.push(pair),
            Split::Validation => out.validation.push(pair),
            Split::External => {}
        }
    }
    if out.train.is_empty() {
        return Err(Error::EmptyDataset(out.report()));
    }
    Ok(out)
}

/// Builds cached, preprocessed samples from observations and targets.
pub fn make_samples<'a>(
    model: &Model,
    frames: impl IntoIterator<Item = (&'a FrameObservation, f64)>,
) -> Result<CachedSamples> {
    let kind = model.spec.kind();
    let mut samples = CachedSamples::default();
    for (obs, target) in frames {
        samples.inputs.push(model.prepare(&regressor_input(kind, obs)?)?);
        samples.targets.push(target as f32);
    }
    Ok(samples)
}

pub fn train_regressor(
    mut model: Model,
    train: &dyn Samples,
    validation: Option<&dyn Samples>,
    config: &TrainConfig,
    scale_max: f64,
    n_excluded: usize,
) -> Result<Checkpoint> {
    if model.spec.kind() == ModelKind::Nvi {
        return Err(Error::Config("use the fusion trainer for nvi models".into()));
    }
    let mut metrics = fit(&mut model, train, validation, config)?;
    metrics.n_excluded = n_excluded;
    Ok(Checkpoint {
        header: CheckpointHeader {
            schema_version: CHECKPOINT_SCHEMA_VERSION,
            spec: model.spec.clone(),
            config: config.clone(),
            metrics,
            scale_max,
            feature_layout: None,
        },
        model,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressorEvaluation {
    /// `None` when the correlation is undefined (n < 3 or constant input).
    pub pearson: Option<CorrelationResult>,
    pub n: usize,
    #[serde(default)]
    pub accuracy: Option<f64>,
    #[serde(default)]
    pub threshold: Option<f64>,
}

/// Pearson r of predictions against targets and, with a threshold, the
/// fraction of samples on the same side of it.
pub fn evaluate_predictions(pred: &[f64], targets: &[f64], threshold: Option<f64>) -> Result<RegressorEvaluation> {
    if pred.is_empty() {
        return Err(Error::EmptyDataset("no evaluation samples".into()));
    }
    if pred.len() != targets.len() {
        return Err(Error::LengthMismatch {
            left: pred.len(),
            right: targets.len(),
        });
    }
    let accuracy = threshold.map(|t| binary_accuracy(pred, targets, t));
    Ok(RegressorEvaluation {
        pearson: pearson(pred, targets).ok(),
        n: pred.len(),
        accuracy,
        threshold,
    })
}

/// Fraction of samples where `pred >= t` and `target >= t` agree.
pub fn binary_accuracy(pred: &[f64], targets: &[f64], t: f64) -> f64 {
    let agree = pred
        .iter()
        .zip(targets)
        .filter(|(p, y)| (**p >= t) == (**y >= t))
        .count();
    agree as f64 / pred.len().max(1) as f64
}

pub fn evaluate_regressor(
    checkpoint: &Checkpoint,
    samples: &dyn Samples,
    threshold: Option<f64>,
) -> Result<RegressorEvaluation> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset("no evaluation samples".into()));
    }
    let pred: Vec<f64> = predict_samples(&checkpoint.model, samples, 64)?
        .into_iter()
        .map(f64::from)
        .collect();
    let targets: Vec<f64> = (0..samples.len()).map(|i| samples.target(i) as f64).collect();
    evaluate_predictions(&pred, &targets, threshold)
}
