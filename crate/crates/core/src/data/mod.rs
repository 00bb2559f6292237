//! Dataset schema: segments, rater triples, frame labels and the manifest
//! that ties them together.

mod manifest;
mod split;

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use manifest::{load_manifest, manifest_to_string, parse_manifest, write_manifest, MANIFEST_FORMAT_VERSION};
pub use split::split_by_teacher;

/// Default raw rating ceiling; the disagreement threshold of 1600 is
/// expressed on this scale.
pub const DEFAULT_SCALE_MAX: f64 = 10_000.0;
/// Default segment length in seconds.
pub const DEFAULT_SEGMENT_DURATION: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    External,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Construct {
    GestureIntensity,
    PerceivedDistance,
    Nvi,
}

impl Construct {
    pub fn as_str(self) -> &'static str {
        match self {
            Construct::GestureIntensity => "gesture_intensity",
            Construct::PerceivedDistance => "perceived_distance",
            Construct::Nvi => "nvi",
        }
    }
}

impl std::fmt::Display for Construct {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Axis-aligned pixel box: `x`, `y` is the top-left corner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub x: u32,
    pub y: u32,
    pub width: u32,
    pub height: u32,
}

impl BBox {
    pub fn area(&self) -> u64 {
        self.width as u64 * self.height as u64
    }

    pub fn fits_within(&self, width: usize, height: usize) -> bool {
        (self.x as usize + self.width as usize) <= width && (self.y as usize + self.height as usize) <= height
    }
}

/// One clip cut out of a classroom video.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentRecord {
    pub segment_id: String,
    pub teacher_id: String,
    pub video_id: String,
    /// Offset into the source video, seconds.
    pub start: f64,
    /// Seconds.
    pub duration: f64,
    pub source_path: PathBuf,
    pub split: Split,
    /// Manually marked teacher region in the first frame.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher_box: Option<BBox>,
    /// Excluded from NVI training when set.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub low_quality: bool,
}

/// Three trained-rater values for one item on one construct.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingTriple {
    pub item_id: String,
    pub construct: Construct,
    pub values: [f64; 3],
    pub rater_ids: [String; 3],
}

impl RatingTriple {
    pub fn new(item_id: impl Into<String>, construct: Construct, values: [f64; 3], rater_ids: [&str; 3]) -> Self {
        RatingTriple {
            item_id: item_id.into(),
            construct,
            values,
            rater_ids: rater_ids.map(str::to_owned),
        }
    }

    pub(crate) fn validate(&self, scale_max: f64) -> Result<()> {
        for v in self.values {
            if !(0.0..=scale_max).contains(&v) {
                return Err(Error::Manifest(format!(
                    "rating {v} for {} ({}) outside [0, {scale_max}]",
                    self.item_id, self.construct
                )));
            }
        }
        let ids: HashSet<&str> = self.rater_ids.iter().map(String::as_str).collect();
        if ids.len() != 3 {
            return Err(Error::Manifest(format!(
                "rater ids for {} ({}) are not distinct",
                self.item_id, self.construct
            )));
        }
        Ok(())
    }
}

/// Per-frame labels for the frame-level regressors.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameLabelRecord {
    pub frame_id: String,
    pub segment_id: String,
    pub frame_index: usize,
    pub ratings: BTreeMap<Construct, RatingTriple>,
}

impl FrameLabelRecord {
    pub fn rating(&self, construct: Construct) -> Option<&RatingTriple> {
        self.ratings.get(&construct)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub scale_max: f64,
    pub fps: f64,
    pub segment_duration: f64,
    pub segments: Vec<SegmentRecord>,
    pub frame_labels: Vec<FrameLabelRecord>,
    /// Segment-level triples (NVI), keyed by `item_id == segment_id`.
    pub segment_labels: Vec<RatingTriple>,
}

impl DatasetManifest {
    pub fn new(scale_max: f64, fps: f64) -> Self {
        DatasetManifest {
            scale_max,
            fps,
            segment_duration: DEFAULT_SEGMENT_DURATION,
            segments: Vec::new(),
            frame_labels: Vec::new(),
            segment_labels: Vec::new(),
        }
    }

    pub fn segment(&self, segment_id: &str) -> Option<&SegmentRecord> {
        self.segments.iter().find(|s| s.segment_id == segment_id)
    }

    /// Number of frames a segment spans at the manifest frame rate.
    pub fn frame_count(&self, segment: &SegmentRecord) -> usize {
        (segment.duration * self.fps).round() as usize
    }

    pub fn teachers(&self, split: Split) -> BTreeSet<&str> {
        self.segments
            .iter()
            .filter(|s| s.split == split)
            .map(|s| s.teacher_id.as_str())
            .collect()
    }

    pub fn segments_in(&self, split: Split) -> impl Iterator<Item = &SegmentRecord> {
        self.segments.iter().filter(move |s| s.split == split)
    }

    pub fn segment_label(&self, segment_id: &str, construct: Construct) -> Option<&RatingTriple> {
        self.segment_labels
            .iter()
            .find(|t| t.item_id == segment_id && t.construct == construct)
    }

    /// Checks every manifest invariant.
    pub fn validate(&self) -> Result<()> {
        if !(self.scale_max > 0.0 && self.scale_max.is_finite()) {
            return Err(Error::Manifest(format!(
                "scale_max must be positive, got {}",
                self.scale_max
            )));
        }
        if !(self.fps > 0.0 && self.fps.is_finite()) {
            return Err(Error::Manifest(format!("fps must be positive, got {}", self.fps)));
        }
        if !(self.segment_duration > 0.0) {
            return Err(Error::Manifest("segment_duration must be positive".into()));
        }

        let mut ids = HashSet::new();
        for s in &self.segments {
            if !ids.insert(s.segment_id.as_str()) {
                return Err(Error::Manifest(format!("duplicate segment_id {}", s.segment_id)));
            }
            if !(s.start >= 0.0) {
                return Err(Error::Manifest(format!("segment {} has negative start", s.segment_id)));
            }
            if (s.duration - self.segment_duration).abs() > 1e-9 {
                return Err(Error::Manifest(format!(
                    "segment {} lasts {} s, dataset requires {} s",
                    s.segment_id, s.duration, self.segment_duration
                )));
            }
            if let Some(b) = s.teacher_box {
                if b.area() == 0 {
                    return Err(Error::Manifest(format!(
                        "segment {} has an empty teacher_box",
                        s.segment_id
                    )));
                }
            }
        }

        let validation = self.teachers(Split::Validation);
        if let Some(t) = self.teachers(Split::Train).intersection(&validation).next() {
            return Err(Error::Leakage {
                teacher_id: t.to_string(),
            });
        }

        let mut frame_ids = HashSet::new();
        for label in &self.frame_labels {
            let Some(segment) = self.segment(&label.segment_id) else {
                return Err(Error::DanglingLabel {
                    label: label.frame_id.clone(),
                    segment_id: label.segment_id.clone(),
                });
            };
            if !frame_ids.insert(label.frame_id.as_str()) {
                return Err(Error::Manifest(format!("duplicate frame_id {}", label.frame_id)));
            }
            let count = self.frame_count(segment);
            if label.frame_index >= count {
                return Err(Error::Manifest(format!(
                    "frame label {} has index {} but segment {} has {count} frames",
                    label.frame_id, label.frame_index, label.segment_id
                )));
            }
            for (construct, triple) in &label.ratings {
                if *construct == Construct::Nvi || triple.construct != *construct {
                    return Err(Error::Manifest(format!(
                        "frame label {} carries an invalid {} rating",
                        label.frame_id, construct
                    )));
                }
                triple.validate(self.scale_max)?;
            }
        }

        let mut seen = HashSet::new();
        for triple in &self.segment_labels {
            if self.segment(&triple.item_id).is_none() {
                return Err(Error::DanglingLabel {
                    label: format!("{} ({})", triple.item_id, triple.construct),
                    segment_id: triple.item_id.clone(),
                });
            }
            if !seen.insert((triple.item_id.as_str(), triple.construct)) {
                return Err(Error::Manifest(format!(
                    "duplicate {} label for segment {}",
                    triple.construct, triple.item_id
                )));
            }
            triple.validate(self.scale_max)?;
        }
        Ok(())
    }
}
