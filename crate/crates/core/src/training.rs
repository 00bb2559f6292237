//! Mini-batch training loop shared by the frame regressors and the NVI
//! perceptron.
//!
//! Training is single-threaded. Sample order per epoch comes from a ChaCha
//! stream seeded by the config, so a fixed seed gives bit-identical weights
//! and metrics.

use ndarray::{Axis, IxDyn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelKind, ModelSpec};
use crate::nn::{self, Adam, Layer, Tensor};
use crate::stats::{pearson, DEFAULT_SIGMA_MAX};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    #[default]
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    #[default]
    Mse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub loss: Loss,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Rater-disagreement threshold in rating units.
    pub sigma_max: f64,
    /// Train only the regression head.
    pub freeze_backbone: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.001,
            optimizer: Optimizer::Adam,
            loss: Loss::Mse,
            epochs: 30,
            batch_size: 32,
            seed: 0,
            sigma_max: DEFAULT_SIGMA_MAX,
            freeze_backbone: false,
        }
    }
}

impl TrainConfig {
    /// A zero learning rate is allowed (it is a useful null-update check).
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Config(format!(
                "learning_rate must be a finite non-negative number, got {}",
                self.learning_rate
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.sigma_max > 0.0) {
            return Err(Error::Config(format!(
                "sigma_max must be positive, got {}",
                self.sigma_max
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    #[serde(default)]
    pub validation_loss: Option<f64>,
    /// `None` when the correlation is undefined (fewer than three samples or
    /// constant predictions).
    #[serde(default)]
    pub validation_r: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMetrics {
    pub kind: ModelKind,
    pub seed: u64,
    pub n_train: usize,
    pub n_validation: usize,
    /// Training labels dropped by the disagreement filter.
    pub n_excluded: usize,
    pub epochs: Vec<EpochRecord>,
}

impl TrainingMetrics {
    pub fn final_validation_r(&self) -> Option<f64> {
        self.epochs.last().and_then(|e| e.validation_r)
    }

    pub fn final_train_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.train_loss)
    }
}

/// Prepared model inputs with normalized targets.
pub trait Samples: Sync {
    fn len(&self) -> usize;
    fn input(&self, i: usize) -> Result<Tensor>;
    fn target(&self, i: usize) -> f32;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Default)]
pub struct CachedSamples {
    pub inputs: Vec<Tensor>,
    pub targets: Vec<f32>,
}

impl Samples for CachedSamples {
    fn len(&self) -> usize {
        self.inputs.len()
    }

    fn input(&self, i: usize) -> Result<Tensor> {
        Ok(self.inputs[i].clone())
    }

    fn target(&self, i: usize) -> f32 {
        self.targets[i]
    }
}

fn batch(samples: &dyn Samples, idx: &[usize]) -> Result<(Tensor, Tensor)> {
    let inputs = idx.iter().map(|&i| samples.input(i)).collect::<Result<Vec<_>>>()?;
    let views: Vec<_> = inputs.iter().map(|t| t.view()).collect();
    let x = ndarray::stack(Axis(0), &views).map_err(|e| Error::invalid(e.to_string()))?;
    let t = Tensor::from_shape_vec(IxDyn(&[idx.len(), 1]), idx.iter().map(|&i| samples.target(i)).collect())
        .expect("target batch shape");
    Ok((x, t))
}

/// One optimizer step on a fixed batch; returns the loss before the step.
pub fn train_step(model: &mut Model, x: &Tensor, targets: &Tensor, opt: &mut Adam) -> f32 {
    let net = model.net_mut();
    nn::zero_grad(net);
    let y = net.forward_train(x);
    let (loss, grad) = nn::mse(&y, targets);
    net.backward(&grad);
    opt.step(net);
    loss
}

/// Predictions for every sample, evaluated in chunks of `batch_size`.
pub fn predict_samples(model: &Model, samples: &dyn Samples, batch_size: usize) -> Result<Vec<f32>> {
    let idx: Vec<usize> = (0..samples.len()).collect();
    let mut out = Vec::with_capacity(idx.len());
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, _) = batch(samples, chunk)?;
        out.extend(model.forward_prepared(&x));
    }
    Ok(out)
}

fn validation_stats(model: &Model, val: &dyn Samples, batch_size: usize) -> Result<(f64, Option<f64>)> {
    let pred = predict_samples(model, val, batch_size)?;
    let targets: Vec<f64> = (0..val.len()).map(|i| val.target(i) as f64).collect();
    let pred: Vec<f64> = pred.into_iter().map(f64::from).collect();
    let loss = pred.iter().zip(&targets).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / targets.len() as f64;
    Ok((loss, pearson(&pred, &targets).ok().map(|c| c.r)))
}

/// Trains `model` in place and returns per-epoch metrics. The epoch train
/// loss is the mean of per-sample squared errors seen during that epoch.
pub fn fit(
    model: &mut Model,
    train: &dyn Samples,
    validation: Option<&dyn Samples>,
    config: &TrainConfig,
) -> Result<TrainingMetrics> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyDataset("no training samples".into()));
    }
    if config.freeze_backbone && matches!(model.spec, ModelSpec::Regressor { .. }) {
        nn::freeze(model.net_mut(), "backbone.");
    }
    let validation = validation.filter(|v| !v.is_empty());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = Adam::new(config.learning_rate as f32);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut sq_err = vec![0f64; train.len()];
    let mut epochs = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let (x, t) = batch(train, chunk)?;
            let net = model.net_mut();
            nn::zero_grad(net);
            let y = net.forward_train(&x);
            let (loss, grad) = nn::mse(&y, &t);
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: b,
                    loss: loss as f64,
                });
            }
            for ((&i, yv), tv) in chunk.iter().zip(y.iter()).zip(t.iter()) {
                sq_err[i] = ((yv - tv) as f64).powi(2);
            }
            net.backward(&grad);
            opt.step(net);
        }
        let train_loss = sq_err.iter().sum::<f64>() / train.len() as f64;
        let (validation_loss, validation_r) = match validation {
            Some(v) => {
                let (l, r) = validation_stats(model, v, config.batch_size)?;
                (Some(l), r)
            }
            None => (None, None),
        };
        epochs.push(EpochRecord {
            epoch,
            train_loss,
            validation_loss,
            validation_r,
        });
    }

    Ok(TrainingMetrics {
        kind: model.spec.kind(),
        seed: config.seed,
        n_train: train.len(),
        n_validation: validation.map_or(0, |v| v.len()),
        n_excluded: 0,
        epochs,
    })
}
