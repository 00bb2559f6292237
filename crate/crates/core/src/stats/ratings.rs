use crate::data::RatingTriple;

/// Rater-disagreement threshold in raw rating units.
pub const DEFAULT_SIGMA_MAX: f64 = 1600.0;

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Median; an even count averages the two middle values. NaN for empty input.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    if v.len().is_multiple_of(2) {
        (v[mid - 1] + v[mid]) / 2.0
    } else {
        v[mid]
    }
}

/// Sample standard deviation (divisor `n - 1`).
pub fn sample_std(values: &[f64]) -> f64 {
    let m = mean(values);
    let ss: f64 = values.iter().map(|v| (v - m) * (v - m)).sum();
    (ss / (values.len() - 1) as f64).sqrt()
}

pub fn median_rating(triple: &RatingTriple) -> f64 {
    let [a, b, c] = triple.values;
    a.max(b).min(a.min(b).max(c))
}

/// True when the triple's sample standard deviation reaches `sigma_max`.
pub fn exceeds_disagreement(values: &[f64; 3], sigma_max: f64) -> bool {
    sample_std(values) >= sigma_max
}

/// Splits triples into (kept, excluded); a triple is excluded when its sample
/// standard deviation is at or above `sigma_max`. Input order is preserved.
pub fn filter_by_disagreement(labels: &[RatingTriple], sigma_max: f64) -> (Vec<RatingTriple>, Vec<RatingTriple>) {
    labels
        .iter()
        .cloned()
        .partition(|t| !exceeds_disagreement(&t.values, sigma_max))
}
