//! Backend traits and name-based selection.
//!
//! Backends report failures as plain messages; the wrappers in the parent
//! module attach the stage and frame index.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::external::{ExternalDepth, ExternalEmotion, ExternalSegmentation};
use super::synthetic::{SyntheticDepth, SyntheticEmotion, SyntheticSegmentation};
use super::{MaskPair, VideoFrame};
use crate::data::BBox;
use crate::error::{Error, Result};

pub type BackendResult<T> = std::result::Result<T, String>;

/// Teacher tracking plus segmentation of every person in the frame.
pub trait SegmentationBackend: Send {
    /// Locks onto the teacher inside `region` of the first frame.
    fn start(&mut self, first: &VideoFrame, region: BBox) -> BackendResult<()>;
    /// Teacher mask and the union of all other people.
    fn track(&mut self, frame: &VideoFrame) -> BackendResult<MaskPair>;
}

/// Relative monocular depth; any scale, normalized by the caller.
pub trait DepthBackend: Send {
    fn estimate(&mut self, frame: &VideoFrame) -> BackendResult<Array2<f32>>;
}

/// Face emotion scores for a face inside `region`, or `None` when no face is
/// found there. Scores need not be normalized.
pub trait EmotionBackend: Send {
    fn detect(&mut self, frame: &VideoFrame, region: BBox) -> BackendResult<Option<[f32; 8]>>;
}

/// Backend selection as written in config: either the name `"synthetic"` or
/// an external adapter process `{ command = ["prog", "arg", ...] }`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BackendSpec {
    Named(String),
    Command { command: Vec<String> },
}

impl Default for BackendSpec {
    fn default() -> Self {
        BackendSpec::Named("synthetic".into())
    }
}

impl BackendSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            BackendSpec::Named(name) if name == "synthetic" => Ok(()),
            BackendSpec::Named(name) => Err(Error::Config(format!(
                "unknown backend {name:?}; use \"synthetic\" or {{ command = [...] }}"
            ))),
            BackendSpec::Command { command } if command.is_empty() => {
                Err(Error::Config("external backend command is empty".into()))
            }
            BackendSpec::Command { .. } => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendConfig {
    #[serde(default)]
    pub segmentation: BackendSpec,
    #[serde(default)]
    pub depth: BackendSpec,
    #[serde(default)]
    pub emotion: BackendSpec,
}

impl BackendConfig {
    pub fn validate(&self) -> Result<()> {
        self.segmentation.validate()?;
        self.depth.validate()?;
        self.emotion.validate()
    }
}

/// One instance of each backend; owned by a single worker.
pub struct BackendSet {
    pub segmentation: Box<dyn SegmentationBackend>,
    pub depth: Box<dyn DepthBackend>,
    pub emotion: Box<dyn EmotionBackend>,
}

impl BackendSet {
    pub fn synthetic() -> Self {
        BackendSet {
            segmentation: Box::new(SyntheticSegmentation::default()),
            depth: Box::new(SyntheticDepth),
            emotion: Box::new(SyntheticEmotion),
        }
    }

    pub fn from_config(config: &BackendConfig) -> Result<Self> {
        config.validate()?;
        let segmentation: Box<dyn SegmentationBackend> = match &config.segmentation {
            BackendSpec::Command { command } => Box::new(ExternalSegmentation::spawn(command)?),
            BackendSpec::Named(_) => Box::new(SyntheticSegmentation::default()),
        };
        let depth: Box<dyn DepthBackend> = match &config.depth {
            BackendSpec::Command { command } => Box::new(ExternalDepth::spawn(command)?),
            BackendSpec::Named(_) => Box::new(SyntheticDepth),
        };
        let emotion: Box<dyn EmotionBackend> = match &config.emotion {
            BackendSpec::Command { command } => Box::new(ExternalEmotion::spawn(command)?),
            BackendSpec::Named(_) => Box::new(SyntheticEmotion),
        };
        Ok(BackendSet {
            segmentation,
            depth,
            emotion,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_parsing() {
        #[derive(Deserialize)]
        struct Wrap {
            backends: BackendConfig,
        }
        let w: Wrap = toml::from_str(
            r#"
            [backends]
            segmentation = "synthetic"
            depth = { command = ["python3", "depth.py"] }
            "#,
        )
        .unwrap();
        assert_eq!(w.backends.segmentation, BackendSpec::Named("synthetic".into()));
        assert_eq!(w.backends.emotion, BackendSpec::default());
        assert!(matches!(w.backends.depth, BackendSpec::Command { ref command } if command.len() == 2));
        assert!(w.backends.validate().is_ok());
    }

    #[test]
    fn unknown_name_is_a_config_error() {
        let cfg = BackendConfig {
            depth: BackendSpec::Named("dinov2".into()),
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        assert!(BackendSet::from_config(&cfg).is_err());
    }
}
