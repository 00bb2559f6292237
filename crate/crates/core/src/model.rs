//! Model specifications, construction and checkpoint files.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::Axis;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, AvgPool2d, Layer, Linear, Relu, Sequential, Tensor};
use crate::training::{TrainConfig, TrainingMetrics};

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;
const METADATA_KEY: &str = "nvi_checkpoint";

/// Side length of regressor input images.
pub const INPUT_SIZE: usize = 360;
/// The test backbone first averages 4x4 blocks (360 -> 90).
const TINY_STEM: usize = 4;
const HEAD_WIDTH: usize = 256;
pub const NVI_WIDTHS: [usize; 5] = [10, 300, 100, 10, 1];

const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Gesture,
    Distance,
    Nvi,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Gesture => "gesture",
            ModelKind::Distance => "distance",
            ModelKind::Nvi => "nvi",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gesture" => Ok(ModelKind::Gesture),
            "distance" => Ok(ModelKind::Distance),
            "nvi" => Ok(ModelKind::Nvi),
            other => Err(Error::Config(format!(
                "unknown model kind {other:?} (expected gesture, distance or nvi)"
            ))),
        }
    }
}

/// Image feature extractor. Written as `tiny-cnn`, `resnet18` or
/// `resnet18:<path to torchvision weights in safetensors>`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum BackboneSpec {
    TinyCnn,
    ResNet18 { weights: Option<PathBuf> },
}

impl FromStr for BackboneSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            None if s == "tiny-cnn" => Ok(BackboneSpec::TinyCnn),
            None if s == "resnet18" => Ok(BackboneSpec::ResNet18 { weights: None }),
            Some(("resnet18", path)) if !path.is_empty() => Ok(BackboneSpec::ResNet18 {
                weights: Some(PathBuf::from(path)),
            }),
            _ => Err(Error::Config(format!(
                "unknown backbone {s:?} (expected tiny-cnn or resnet18[:weights])"
            ))),
        }
    }
}

impl TryFrom<String> for BackboneSpec {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<BackboneSpec> for String {
    fn from(spec: BackboneSpec) -> String {
        spec.to_string()
    }
}

impl fmt::Display for BackboneSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BackboneSpec::TinyCnn => f.write_str("tiny-cnn"),
            BackboneSpec::ResNet18 { weights: None } => f.write_str("resnet18"),
            BackboneSpec::ResNet18 { weights: Some(p) } => write!(f, "resnet18:{}", p.display()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ModelSpec {
    Regressor { kind: ModelKind, backbone: BackboneSpec },
    Nvi,
}

impl ModelSpec {
    pub fn kind(&self) -> ModelKind {
        match self {
            ModelSpec::Regressor { kind, .. } => *kind,
            ModelSpec::Nvi => ModelKind::Nvi,
        }
    }
}

/// A network plus the parameter-free preprocessing in front of it.
pub struct Model {
    pub spec: ModelSpec,
    net: Sequential,
}

impl Model {
    /// Builds a freshly initialized model. Pretrained backbone weights named
    /// in the spec are loaded here.
    pub fn build(spec: ModelSpec, seed: u64) -> Result<Self> {
        let mut model = Self::skeleton(spec, seed)?;
        if let ModelSpec::Regressor {
            backbone: BackboneSpec::ResNet18 { weights: Some(path) },
            ..
        } = &model.spec
        {
            let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
            let (state, _) = nn::read_safetensors(&bytes)?;
            let prefixed = state.into_iter().map(|(k, v)| (format!("backbone.{k}"), v)).collect();
            let loaded = nn::load_state(&mut model.net, &prefixed, false)?;
            let expected = nn::state_dict(&model.net)
                .iter()
                .filter(|(k, _)| k.starts_with("backbone."))
                .count();
            if loaded != expected {
                return Err(Error::Checkpoint(format!(
                    "{}: only {loaded} of {expected} backbone tensors matched torchvision resnet18 names",
                    path.display()
                )));
            }
        }
        Ok(model)
    }

    fn skeleton(spec: ModelSpec, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = match &spec {
            ModelSpec::Regressor { backbone, .. } => {
                let (body, features) = match backbone {
                    BackboneSpec::TinyCnn => (nn::tiny_cnn(&mut rng), nn::TINY_CNN_FEATURES),
                    BackboneSpec::ResNet18 { .. } => (nn::resnet18(&mut rng), nn::RESNET18_FEATURES),
                };
                let head = Sequential::indexed(vec![
                    Box::new(Linear::new(features, HEAD_WIDTH, &mut rng)) as Box<dyn Layer>,
                    Box::new(Relu::new()),
                    Box::new(Linear::new(HEAD_WIDTH, 1, &mut rng)),
                ]);
                Sequential::new().push("backbone", body).push("head", head)
            }
            ModelSpec::Nvi => nn::mlp(&NVI_WIDTHS, &mut rng),
        };
        Ok(Model { spec, net })
    }

    pub fn net(&self) -> &Sequential {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Sequential {
        &mut self.net
    }

    pub fn parameter_count(&self) -> usize {
        nn::parameter_count(&self.net)
    }

    /// Shape of one raw sample: `[3, 360, 360]` for images, `[10]` for NVI.
    pub fn input_shape(&self) -> Vec<usize> {
        match self.spec {
            ModelSpec::Regressor { .. } => vec![3, INPUT_SIZE, INPUT_SIZE],
            ModelSpec::Nvi => vec![NVI_WIDTHS[0]],
        }
    }

    /// Deterministic, parameter-free transform applied to each raw sample
    /// before the network. Training caches its output.
    pub fn prepare(&self, sample: &Tensor) -> Result<Tensor> {
        if sample.shape() != self.input_shape().as_slice() {
            return Err(Error::invalid(format!(
                "model input must have shape {:?}, got {:?}",
                self.input_shape(),
                sample.shape()
            )));
        }
        match &self.spec {
            ModelSpec::Regressor {
                backbone: BackboneSpec::TinyCnn,
                ..
            } => {
                let x = sample.clone().insert_axis(Axis(0));
                Ok(AvgPool2d::new(TINY_STEM).forward(&x).index_axis_move(Axis(0), 0))
            }
            ModelSpec::Regressor {
                backbone: BackboneSpec::ResNet18 { .. },
                kind,
            } => {
                let mut x = sample.clone();
                // the distance input is not an RGB photograph
                if *kind == ModelKind::Gesture {
                    for (c, mut plane) in x.axis_iter_mut(Axis(0)).enumerate() {
                        plane.mapv_inplace(|v| (v - IMAGENET_MEAN[c]) / IMAGENET_STD[c]);
                    }
                }
                Ok(x)
            }
            ModelSpec::Nvi => Ok(sample.clone()),
        }
    }

    /// Network output for a batch of prepared samples, one scalar each.
    pub fn forward_prepared(&self, batch: &Tensor) -> Vec<f32> {
        self.net.forward(batch).iter().copied().collect()
    }

    pub fn predict(&self, samples: &[Tensor]) -> Result<Vec<f32>> {
        let prepared = samples.iter().map(|s| self.prepare(s)).collect::<Result<Vec<_>>>()?;
        let views: Vec<_> = prepared.iter().map(|t| t.view()).collect();
        if views.is_empty() {
            return Ok(Vec::new());
        }
        let batch = ndarray::stack(Axis(0), &views).map_err(|e| Error::invalid(e.to_string()))?;
        Ok(self.forward_prepared(&batch))
    }
}

/// Trained weights plus everything needed to rebuild and audit the model.
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub model: Model,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub schema_version: u32,
    pub spec: ModelSpec,
    pub config: TrainConfig,
    pub metrics: TrainingMetrics,
    /// Rating scale used to normalize targets; predictions times this value
    /// are in rating units.
    pub scale_max: f64,
    /// Segment vector layout tag, for NVI models.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_layout: Option<String>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_string(&self.header)?;
        nn::write_safetensors(&nn::state_dict(self.model.net()), Some((METADATA_KEY, header)))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (state, meta) = nn::read_safetensors(bytes)?;
        let header: CheckpointHeader = serde_json::from_str(
            meta.get(METADATA_KEY)
                .ok_or_else(|| Error::Checkpoint("file carries no checkpoint header".into()))?,
        )?;
        if header.schema_version != CHECKPOINT_SCHEMA_VERSION {
            return Err(Error::Checkpoint(format!(
                "checkpoint schema version {} is not supported (expected {CHECKPOINT_SCHEMA_VERSION})",
                header.schema_version
            )));
        }
        let mut model = Model::skeleton(header.spec.clone(), 0)?;
        nn::load_state(model.net_mut(), &state, true)?;
        Ok(Checkpoint { header, model })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.header.spec.kind()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zeros_sample(shape: &[usize]) -> Tensor {
        Tensor::zeros(ndarray::IxDyn(shape))
    }

    #[test]
    fn backbone_spec_parsing() {
        assert_eq!("tiny-cnn".parse::<BackboneSpec>().unwrap(), BackboneSpec::TinyCnn);
        assert_eq!(
            "resnet18:w.safetensors".parse::<BackboneSpec>().unwrap(),
            BackboneSpec::ResNet18 {
                weights: Some("w.safetensors".into())
            }
        );
        assert!(matches!("vgg16".parse::<BackboneSpec>(), Err(Error::Config(_))));
        assert!(matches!("resnet18:".parse::<BackboneSpec>(), Err(Error::Config(_))));
    }

    #[test]
    fn regressors_map_images_to_one_scalar() {
        for kind in [ModelKind::Gesture, ModelKind::Distance] {
            let m = Model::build(
                ModelSpec::Regressor {
                    kind,
                    backbone: BackboneSpec::TinyCnn,
                },
                3,
            )
            .unwrap();
            let y = m.predict(&[zeros_sample(&[3, INPUT_SIZE, INPUT_SIZE])]).unwrap();
            assert_eq!(y.len(), 1);
            assert!(y[0].is_finite());
        }
    }

    #[test]
    fn wrong_input_shape_is_rejected() {
        let m = Model::build(ModelSpec::Nvi, 0).unwrap();
        assert!(m.predict(&[zeros_sample(&[9])]).is_err());
    }

    #[test]
    fn resnet_weights_with_foreign_names_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.safetensors");
        let bytes = nn::write_safetensors(&[("fc.weight".into(), zeros_sample(&[2, 2]))], None).unwrap();
        std::fs::write(&path, bytes).unwrap();
        let spec = ModelSpec::Regressor {
            kind: ModelKind::Gesture,
            backbone: BackboneSpec::ResNet18 { weights: Some(path) },
        };
        assert!(matches!(Model::build(spec, 0), Err(Error::Checkpoint(_))));
    }
}
