//! Rater and model statistics: correlation, intraclass correlation, rating
//! aggregation and multiple-testing correction.

mod correlation;
mod fdr;
mod icc;
mod ratings;

pub use correlation::{pearson, CorrelationResult};
pub use fdr::fdr_adjust;
pub use icc::{icc2k, IccResult, ICC_MODEL};
pub use ratings::{
    exceeds_disagreement, filter_by_disagreement, mean, median, median_rating, sample_std, DEFAULT_SIGMA_MAX,
};
