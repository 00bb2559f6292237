use crate::error::{Error, Result};

/// Benjamini–Hochberg step-up adjusted p-values, aligned with the input order.
pub fn fdr_adjust(p_values: &[f64]) -> Result<Vec<f64>> {
    if let Some((i, p)) = p_values.iter().enumerate().find(|(_, p)| !(0.0..=1.0).contains(*p)) {
        return Err(Error::invalid(format!("p-value {p} at index {i} outside [0, 1]")));
    }
    let m = p_values.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p_values[a].total_cmp(&p_values[b]));

    let mut adjusted = vec![0.0; m];
    let mut running = 1.0_f64;
    for (rank, &idx) in order.iter().enumerate().rev() {
        let candidate = p_values[idx] * m as f64 / (rank + 1) as f64;
        running = running.min(candidate);
        adjusted[idx] = running;
    }
    Ok(adjusted)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64]) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12)
    }

    #[test]
    fn single_test_is_unchanged() {
        assert!(close(&fdr_adjust(&[0.05]).unwrap(), &[0.05]));
    }

    #[test]
    fn two_tests() {
        assert!(close(&fdr_adjust(&[0.01, 0.04]).unwrap(), &[0.02, 0.04]));
    }

    #[test]
    fn monotonicity_is_enforced() {
        // sorted: 0.01 -> 0.03, 0.03 -> 0.045, 0.04 -> 0.04; step-up min gives 0.04 for rank 2
        assert!(close(&fdr_adjust(&[0.03, 0.01, 0.04]).unwrap(), &[0.04, 0.03, 0.04]));
    }

    #[test]
    fn clipped_to_one() {
        let adj = fdr_adjust(&[0.9, 0.95, 1.0]).unwrap();
        assert!(adj.iter().all(|p| *p <= 1.0));
    }

    #[test]
    fn empty_and_invalid() {
        assert!(fdr_adjust(&[]).unwrap().is_empty());
        assert!(fdr_adjust(&[0.5, 1.5]).is_err());
        assert!(fdr_adjust(&[f64::NAN]).is_err());
    }
}
