//! Perception stages: teacher/student segmentation with tracking, monocular
//! depth and facial emotion. Concrete models sit behind the backend traits in
//! [`backend`]; this module wraps them with the normalization and validation
//! every downstream consumer relies on.

pub mod backend;
pub mod external;
pub mod obsfile;
pub mod synthetic;
pub mod video;

use std::sync::Arc;

use ndarray::{Array2, Array3, Zip};
use serde::{Deserialize, Serialize};

use crate::data::BBox;
use crate::error::{Error, Result, Stage};

pub use backend::{BackendConfig, BackendSet, BackendSpec, DepthBackend, EmotionBackend, SegmentationBackend};
pub use synthetic::SceneAnnotation;
pub use video::{ImageSequence, VideoSource};

/// Fixed emotion order used by every emotion vector in the crate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Emotion {
    Anger,
    Contempt,
    Disgust,
    Fear,
    Happiness,
    Neutral,
    Sadness,
    Surprise,
}

impl Emotion {
    pub const ALL: [Emotion; 8] = [
        Emotion::Anger,
        Emotion::Contempt,
        Emotion::Disgust,
        Emotion::Fear,
        Emotion::Happiness,
        Emotion::Neutral,
        Emotion::Sadness,
        Emotion::Surprise,
    ];

    pub fn index(self) -> usize {
        Emotion::ALL.iter().position(|e| *e == self).unwrap()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Emotion::Anger => "anger",
            Emotion::Contempt => "contempt",
            Emotion::Disgust => "disgust",
            Emotion::Fear => "fear",
            Emotion::Happiness => "happiness",
            Emotion::Neutral => "neutral",
            Emotion::Sadness => "sadness",
            Emotion::Surprise => "surprise",
        }
    }
}

/// Eight non-negative confidences summing to one, in [`Emotion::ALL`] order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f32; 8]", into = "[f32; 8]")]
pub struct EmotionScores([f32; 8]);

impl EmotionScores {
    pub const SUM_TOLERANCE: f64 = 1e-6;

    pub fn new(values: [f32; 8]) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::invalid(format!(
                "emotion confidences must be finite and >= 0: {values:?}"
            )));
        }
        let sum: f64 = values.iter().map(|v| *v as f64).sum();
        if (sum - 1.0).abs() > Self::SUM_TOLERANCE {
            return Err(Error::invalid(format!("emotion confidences sum to {sum}, expected 1")));
        }
        Ok(EmotionScores(values))
    }

    /// Rescales arbitrary non-negative scores to sum to one.
    pub fn normalized(raw: [f32; 8]) -> Result<Self> {
        if raw.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::invalid(format!(
                "emotion scores must be finite and >= 0: {raw:?}"
            )));
        }
        let sum: f64 = raw.iter().map(|v| *v as f64).sum();
        if sum <= 0.0 {
            return Err(Error::invalid("emotion scores sum to zero"));
        }
        let mut out = raw.map(|v| (v as f64 / sum) as f32);
        // push the f32 rounding residue into the largest entry
        let residue = 1.0 - out.iter().map(|v| *v as f64).sum::<f64>();
        let top = argmax(&out);
        out[top] = (out[top] as f64 + residue).max(0.0) as f32;
        Self::new(out)
    }

    /// A distribution peaked on `emotion`.
    pub fn peaked(emotion: Emotion, peak: f32) -> Self {
        let rest = (1.0 - peak) / 7.0;
        let mut v = [rest; 8];
        v[emotion.index()] = peak;
        Self::normalized(v).expect("valid peak")
    }

    pub fn values(&self) -> &[f32; 8] {
        &self.0
    }

    pub fn get(&self, emotion: Emotion) -> f32 {
        self.0[emotion.index()]
    }

    pub fn dominant(&self) -> Emotion {
        Emotion::ALL[argmax(&self.0)]
    }
}

impl TryFrom<[f32; 8]> for EmotionScores {
    type Error = Error;
    fn try_from(v: [f32; 8]) -> Result<Self> {
        EmotionScores::new(v)
    }
}

impl From<EmotionScores> for [f32; 8] {
    fn from(s: EmotionScores) -> Self {
        s.0
    }
}

fn argmax(v: &[f32; 8]) -> usize {
    let mut best = 0;
    for i in 1..8 {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

/// One decoded video frame. `annotation` is only populated by synthetic
/// sources and is what the synthetic backends read.
#[derive(Debug, Clone)]
pub struct VideoFrame {
    pub index: usize,
    /// H×W×3, values in [0, 1].
    pub rgb: Array3<f32>,
    pub annotation: Option<Arc<SceneAnnotation>>,
}

impl VideoFrame {
    pub fn new(index: usize, rgb: Array3<f32>) -> Self {
        VideoFrame {
            index,
            rgb,
            annotation: None,
        }
    }

    pub fn height(&self) -> usize {
        self.rgb.dim().0
    }

    pub fn width(&self) -> usize {
        self.rgb.dim().1
    }
}

/// Binary H×W mask.
pub type Mask = Array2<bool>;

#[derive(Debug, Clone, PartialEq)]
pub struct MaskPair {
    pub teacher: Mask,
    /// Union of all students.
    pub students: Mask,
}

impl MaskPair {
    /// Removes student pixels that overlap the teacher.
    pub fn make_disjoint(&mut self) {
        Zip::from(&mut self.students)
            .and(&self.teacher)
            .for_each(|s, &t| *s = *s && !t);
    }

    pub fn is_disjoint(&self) -> bool {
        Zip::from(&self.students).and(&self.teacher).all(|&s, &t| !(s && t))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameObservation {
    pub frame_index: usize,
    pub rgb: Array3<f32>,
    pub teacher_mask: Mask,
    pub student_mask: Mask,
    /// Min–max normalized to [0, 1].
    pub depth: Array2<f32>,
    /// `None` when no teacher face was found.
    pub emotions: Option<EmotionScores>,
}

impl FrameObservation {
    pub fn dims(&self) -> (usize, usize) {
        self.teacher_mask.dim()
    }

    /// Checks shape agreement, mask disjointness and the depth range.
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.dims();
        if self.rgb.dim() != (h, w, 3) || self.student_mask.dim() != (h, w) || self.depth.dim() != (h, w) {
            return Err(Error::invalid(format!(
                "frame {} has inconsistent plane shapes",
                self.frame_index
            )));
        }
        let pair_disjoint = Zip::from(&self.teacher_mask)
            .and(&self.student_mask)
            .all(|&t, &s| !(t && s));
        if !pair_disjoint {
            return Err(Error::invalid(format!("frame {} masks overlap", self.frame_index)));
        }
        if self.depth.iter().any(|d| !(0.0..=1.0).contains(d)) {
            return Err(Error::invalid(format!(
                "frame {} depth outside [0, 1]",
                self.frame_index
            )));
        }
        Ok(())
    }
}

/// Manually marked teacher position in the first frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrackInit {
    pub frame_index: usize,
    pub region: BBox,
}

impl TrackInit {
    pub fn new(region: BBox) -> Self {
        TrackInit { frame_index: 0, region }
    }
}

/// Tight bounding box of the set pixels, if any.
pub fn mask_bbox(mask: &Mask) -> Option<BBox> {
    let (mut y0, mut x0, mut y1, mut x1) = (usize::MAX, usize::MAX, 0, 0);
    for ((y, x), &on) in mask.indexed_iter() {
        if on {
            y0 = y0.min(y);
            x0 = x0.min(x);
            y1 = y1.max(y);
            x1 = x1.max(x);
        }
    }
    (y0 != usize::MAX).then(|| BBox {
        x: x0 as u32,
        y: y0 as u32,
        width: (x1 - x0 + 1) as u32,
        height: (y1 - y0 + 1) as u32,
    })
}

/// Sequential teacher tracker over one video. Every produced mask pair is
/// made disjoint before it is returned.
pub struct Tracker<'a> {
    backend: &'a mut dyn SegmentationBackend,
    dims: (usize, usize),
}

impl<'a> Tracker<'a> {
    pub fn start(backend: &'a mut dyn SegmentationBackend, first: &VideoFrame, init: TrackInit) -> Result<Self> {
        if init.frame_index != 0 || first.index != init.frame_index {
            return Err(Error::invalid(format!(
                "track init must refer to the first frame (init {}, frame {})",
                init.frame_index, first.index
            )));
        }
        if init.region.area() == 0 {
            return Err(Error::invalid("track init region has zero area"));
        }
        if !init.region.fits_within(first.width(), first.height()) {
            return Err(Error::invalid(format!(
                "track init region {:?} exceeds {}x{} frame",
                init.region,
                first.width(),
                first.height()
            )));
        }
        backend.start(first, init.region).map_err(|message| Error::Pipeline {
            stage: Stage::Tracking,
            frame_index: first.index,
            message,
        })?;
        Ok(Tracker {
            backend,
            dims: (first.height(), first.width()),
        })
    }

    pub fn track(&mut self, frame: &VideoFrame) -> Result<MaskPair> {
        let fail = |message: String| Error::Pipeline {
            stage: Stage::Tracking,
            frame_index: frame.index,
            message,
        };
        let mut pair = self.backend.track(frame).map_err(fail)?;
        if pair.teacher.dim() != self.dims || pair.students.dim() != self.dims {
            return Err(fail(format!(
                "backend returned masks of shape {:?}",
                pair.teacher.dim()
            )));
        }
        pair.make_disjoint();
        Ok(pair)
    }
}

/// Tracks the teacher through `frames`, returning one mask pair per frame.
pub fn segment_and_track(
    frames: &[VideoFrame],
    init: TrackInit,
    backend: &mut dyn SegmentationBackend,
) -> Result<Vec<MaskPair>> {
    let Some(first) = frames.first() else {
        return Ok(Vec::new());
    };
    let mut tracker = Tracker::start(backend, first, init)?;
    frames.iter().map(|f| tracker.track(f)).collect()
}

/// Runs the depth backend and min–max normalizes its output. A constant map
/// becomes all zeros.
pub fn estimate_depth(frame: &VideoFrame, backend: &mut dyn DepthBackend) -> Result<Array2<f32>> {
    let fail = |message: String| Error::Pipeline {
        stage: Stage::Depth,
        frame_index: frame.index,
        message,
    };
    let raw = backend.estimate(frame).map_err(fail)?;
    if raw.dim() != (frame.height(), frame.width()) {
        return Err(fail(format!(
            "depth map {:?} does not match frame {}x{}",
            raw.dim(),
            frame.height(),
            frame.width()
        )));
    }
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(fail("depth map contains non-finite values".into()));
    }
    Ok(normalize_min_max(&raw))
}

pub fn normalize_min_max(raw: &Array2<f32>) -> Array2<f32> {
    let (lo, hi) = raw.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    });
    let range = hi - lo;
    if !(range > 0.0) {
        return Array2::zeros(raw.dim());
    }
    raw.mapv(|v| ((v - lo) / range).clamp(0.0, 1.0))
}

/// Teacher facial emotion. Faces are only searched inside the bounding box of
/// the teacher mask; an empty mask yields `None` without calling the backend.
pub fn detect_emotions(
    frame: &VideoFrame,
    teacher_mask: &Mask,
    backend: &mut dyn EmotionBackend,
) -> Result<Option<EmotionScores>> {
    let Some(region) = mask_bbox(teacher_mask) else {
        return Ok(None);
    };
    let fail = |message: String| Error::Pipeline {
        stage: Stage::Emotion,
        frame_index: frame.index,
        message,
    };
    match backend.detect(frame, region).map_err(fail)? {
        None => Ok(None),
        Some(raw) => EmotionScores::normalized(raw)
            .map(Some)
            .map_err(|e| fail(e.to_string())),
    }
}

/// Runs depth and emotion on a tracked frame.
pub fn observe_frame(
    frame: VideoFrame,
    masks: MaskPair,
    depth: &mut dyn DepthBackend,
    emotion: &mut dyn EmotionBackend,
) -> Result<FrameObservation> {
    let depth = estimate_depth(&frame, depth)?;
    let emotions = detect_emotions(&frame, &masks.teacher, emotion)?;
    Ok(FrameObservation {
        frame_index: frame.index,
        rgb: frame.rgb,
        teacher_mask: masks.teacher,
        student_mask: masks.students,
        depth,
        emotions,
    })
}

/// Streams one segment through tracking, depth and emotion, handing each
/// observation to `sink` in frame order. Frame indices are rebased to the
/// segment start. Returns the number of frames.
pub fn extract_observations(
    source: &mut dyn VideoSource,
    init: TrackInit,
    backends: &mut BackendSet,
    mut sink: impl FnMut(FrameObservation) -> Result<()>,
) -> Result<usize> {
    let Some(mut frame) = source.next_frame()? else {
        return Err(Error::EmptyDataset("video source yielded no frames".into()));
    };
    let offset = frame.index;
    frame.index = 0;

    let BackendSet {
        segmentation,
        depth,
        emotion,
    } = backends;
    let mut tracker = Tracker::start(segmentation.as_mut(), &frame, init)?;
    let mut count = 0;
    loop {
        let masks = tracker.track(&frame)?;
        sink(observe_frame(frame, masks, depth.as_mut(), emotion.as_mut())?)?;
        count += 1;
        match source.next_frame()? {
            Some(mut next) => {
                next.index -= offset;
                frame = next;
            }
            None => return Ok(count),
        }
    }
}
