use ndarray::{ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const ICC_MODEL: &str = "ICC(2,k) two-way random, average measures, absolute agreement";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IccResult {
    pub value: f64,
    pub n_subjects: usize,
    pub k_raters: usize,
    pub model: String,
}

/// ICC(2,k) from two-way ANOVA mean squares; rows are subjects, columns raters.
///
/// `(MSR - MSE) / (MSR + (MSC - MSE) / n)`
pub fn icc2k(ratings: ArrayView2<'_, f64>) -> Result<IccResult> {
    let (n, k) = ratings.dim();
    if n < 2 || k < 2 {
        return Err(Error::invalid(format!(
            "icc2k needs at least 2 subjects and 2 raters, got {n}x{k}"
        )));
    }
    if let Some(((i, j), _)) = ratings.indexed_iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::invalid(format!(
            "missing or non-finite rating at subject {i}, rater {j}"
        )));
    }

    let row_means = ratings.mean_axis(Axis(1)).expect("k >= 2");
    let col_means = ratings.mean_axis(Axis(0)).expect("n >= 2");
    let grand = row_means.mean().expect("n >= 2");

    let ss_rows = k as f64 * row_means.iter().map(|m| (m - grand).powi(2)).sum::<f64>();
    let ss_cols = n as f64 * col_means.iter().map(|m| (m - grand).powi(2)).sum::<f64>();
    let ss_err: f64 = ratings
        .indexed_iter()
        .map(|((i, j), x)| (x - row_means[i] - col_means[j] + grand).powi(2))
        .sum();

    let msr = ss_rows / (n - 1) as f64;
    let msc = ss_cols / (k - 1) as f64;
    let mse = ss_err / ((n - 1) * (k - 1)) as f64;

    let numer = msr - mse;
    let denom = msr + (msc - mse) / n as f64;
    let scale = msr.abs() + msc.abs() + mse.abs();
    if denom == 0.0 || denom.abs() <= 1e-14 * scale {
        return Err(Error::UndefinedReliability(format!(
            "zero ANOVA denominator (MSR={msr}, MSC={msc}, MSE={mse})"
        )));
    }
    Ok(IccResult {
        value: numer / denom,
        n_subjects: n,
        k_raters: k,
        model: ICC_MODEL.to_string(),
    })
}
