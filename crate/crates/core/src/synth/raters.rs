//! Simulated rater panels with known variance components.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::RaterMatrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RaterPanelParams {
    pub n_items: usize,
    pub true_score_variance: f64,
    pub rater_bias_variance: f64,
    pub noise_variance: f64,
    pub k_raters: usize,
    pub seed: u64,
    pub scale_max: f64,
}

impl RaterPanelParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("true_score_variance", self.true_score_variance),
            ("rater_bias_variance", self.rater_bias_variance),
            ("noise_variance", self.noise_variance),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid(format!(
                    "{name} must be a finite non-negative number, got {v}"
                )));
            }
        }
        if self.k_raters < 2 {
            return Err(Error::invalid(format!("need at least 2 raters, got {}", self.k_raters)));
        }
        if !(self.scale_max.is_finite() && self.scale_max > 0.0) {
            return Err(Error::invalid("scale_max must be positive"));
        }
        Ok(())
    }

    /// Closed-form ICC(2,k) of the unclipped model.
    pub fn expected_icc(&self) -> f64 {
        let k = self.k_raters as f64;
        self.true_score_variance / (self.true_score_variance + (self.rater_bias_variance + self.noise_variance) / k)
    }
}

fn normal(variance: f64) -> Normal<f64> {
    Normal::new(0.0, variance.sqrt()).expect("validated variance")
}

/// `n_items` true scores centred on the middle of the scale.
pub fn draw_true_scores(params: &RaterPanelParams) -> Result<Vec<f64>> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    rng.set_stream(1);
    let d = normal(params.true_score_variance);
    Ok((0..params.n_items)
        .map(|_| params.scale_max / 2.0 + d.sample(&mut rng))
        .collect())
}

/// `rating[i][j] = truth[i] + bias[j] + noise[i][j]`, clipped to
/// `[0, scale_max]`. Columns are named `Rater0`, `Rater1`, ...
pub fn simulate_raters(truth: &[f64], params: &RaterPanelParams) -> Result<RaterMatrix> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    rng.set_stream(2);
    let bias_d = normal(params.rater_bias_variance);
    let noise_d = normal(params.noise_variance);
    let biases: Vec<f64> = (0..params.k_raters).map(|_| bias_d.sample(&mut rng)).collect();
    let mut columns: Vec<(String, Vec<f64>)> = (0..params.k_raters)
        .map(|j| (format!("Rater{j}"), Vec::with_capacity(truth.len())))
        .collect();
    for &t in truth {
        for (j, (_, col)) in columns.iter_mut().enumerate() {
            col.push((t + biases[j] + noise_d.sample(&mut rng)).clamp(0.0, params.scale_max));
        }
    }
    let item_ids = (0..truth.len()).map(|i| format!("item{i:05}")).collect();
    RaterMatrix::new(item_ids, columns)
}
