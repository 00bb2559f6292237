//! Backends that read the ground truth attached to synthetic frames.

use ndarray::{Array2, Axis};

use super::backend::{BackendResult, DepthBackend, EmotionBackend, SegmentationBackend};
use super::{EmotionScores, Mask, MaskPair, VideoFrame};
use crate::data::BBox;

/// Ground truth carried by a rendered synthetic frame.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneAnnotation {
    pub teacher_mask: Mask,
    pub student_mask: Mask,
    /// Generator depth, arbitrary positive scale.
    pub depth: Array2<f32>,
    pub face_box: Option<BBox>,
    pub emotions: Option<EmotionScores>,
}

fn annotation(frame: &VideoFrame) -> BackendResult<&SceneAnnotation> {
    frame
        .annotation
        .as_deref()
        .ok_or_else(|| "frame carries no synthetic annotation".to_string())
}

#[derive(Debug, Default)]
pub struct SyntheticSegmentation {
    started: bool,
}

impl SegmentationBackend for SyntheticSegmentation {
    fn start(&mut self, first: &VideoFrame, region: BBox) -> BackendResult<()> {
        let truth = annotation(first)?;
        let covers_teacher = truth.teacher_mask.indexed_iter().any(|((y, x), &on)| {
            on && (region.x as usize..(region.x + region.width) as usize).contains(&x)
                && (region.y as usize..(region.y + region.height) as usize).contains(&y)
        });
        if !covers_teacher {
            return Err(format!("init region {region:?} does not cover the teacher"));
        }
        self.started = true;
        Ok(())
    }

    fn track(&mut self, frame: &VideoFrame) -> BackendResult<MaskPair> {
        if !self.started {
            return Err("tracker used before start".into());
        }
        let truth = annotation(frame)?;
        Ok(MaskPair {
            teacher: truth.teacher_mask.clone(),
            students: truth.student_mask.clone(),
        })
    }
}

/// Generator depth when annotated; otherwise pixel luminance stands in.
#[derive(Debug, Default, Clone, Copy)]
pub struct SyntheticDepth;

impl DepthBackend for SyntheticDepth {
    fn estimate(&mut self, frame: &VideoFrame) -> BackendResult<Array2<f32>> {
        match &frame.annotation {
            Some(truth) => Ok(truth.depth.clone()),
            None => Ok(frame
                .rgb
                .map_axis(Axis(2), |px| 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2])),
        }
    }
}

/// Echoes the annotated emotion when the annotated face lies inside the
/// searched region.
#[derive(Debug, Default, Clone, Copy)]
pub struct SyntheticEmotion;

impl EmotionBackend for SyntheticEmotion {
    fn detect(&mut self, frame: &VideoFrame, region: BBox) -> BackendResult<Option<[f32; 8]>> {
        let Some(truth) = &frame.annotation else {
            return Ok(None);
        };
        let (Some(face), Some(scores)) = (truth.face_box, truth.emotions) else {
            return Ok(None);
        };
        let cx = face.x + face.width / 2;
        let cy = face.y + face.height / 2;
        let inside =
            (region.x..region.x + region.width).contains(&cx) && (region.y..region.y + region.height).contains(&cy);
        Ok(inside.then(|| *scores.values()))
    }
}
