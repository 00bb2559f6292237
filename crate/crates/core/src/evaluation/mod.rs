//! Reliability tables, median-fusion correlations, external validation and
//! report bundles.

mod external;
mod report;

pub use external::{
    aggregate_scores, default_hypotheses, external_validation, CorrelationReport, ExternalMeasures, Hypothesis,
    HypothesisResult, Level, UnmatchedKeys, Variant, MIN_UNITS, SMALL_SAMPLE_N,
};
pub use report::{draw_histogram, render_report, EvaluationSummary, ReportInputs, ReportOutputs, REPORT_SUMMARY_KEYS};

use std::collections::BTreeSet;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::{icc2k, median, pearson, CorrelationResult};

/// Items by rating sources. Columns are named; every column has one value
/// per item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RaterMatrix {
    pub item_ids: Vec<String>,
    pub columns: Vec<(String, Vec<f64>)>,
}

impl RaterMatrix {
    pub fn new(item_ids: Vec<String>, columns: Vec<(String, Vec<f64>)>) -> Result<Self> {
        let m = RaterMatrix { item_ids, columns };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let mut names = BTreeSet::new();
        for (name, values) in &self.columns {
            if !names.insert(name) {
                return Err(Error::invalid(format!("duplicate column {name}")));
            }
            if values.len() != self.item_ids.len() {
                return Err(Error::LengthMismatch {
                    left: self.item_ids.len(),
                    right: values.len(),
                });
            }
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!(
                    "column {name} has a missing or non-finite value"
                )));
            }
        }
        Ok(())
    }

    pub fn n_items(&self) -> usize {
        self.item_ids.len()
    }

    pub fn column_names(&self) -> Vec<&str> {
        self.columns.iter().map(|(n, _)| n.as_str()).collect()
    }

    pub fn column(&self, name: &str) -> Result<&[f64]> {
        self.columns
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
            .ok_or_else(|| Error::invalid(format!("missing column {name}")))
    }

    /// Items x selected columns, in the given column order.
    pub fn grid(&self, names: &[&str]) -> Result<Array2<f64>> {
        let cols = names.iter().map(|n| self.column(n)).collect::<Result<Vec<_>>>()?;
        Ok(Array2::from_shape_fn((self.n_items(), cols.len()), |(i, j)| cols[j][i]))
    }

    /// Restricts the matrix to `items` (in matrix order). Unknown ids are an
    /// error so item-set choices stay explicit.
    pub fn select_items(&self, items: &BTreeSet<String>) -> Result<Self> {
        let known: BTreeSet<&String> = self.item_ids.iter().collect();
        if let Some(missing) = items.iter().find(|i| !known.contains(i)) {
            return Err(Error::invalid(format!("unknown item {missing}")));
        }
        let keep: Vec<usize> = (0..self.n_items())
            .filter(|&i| items.contains(&self.item_ids[i]))
            .collect();
        Ok(RaterMatrix {
            item_ids: keep.iter().map(|&i| self.item_ids[i].clone()).collect(),
            columns: self
                .columns
                .iter()
                .map(|(n, v)| (n.clone(), keep.iter().map(|&i| v[i]).collect()))
                .collect(),
        })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["item_id".to_string()];
        header.extend(self.columns.iter().map(|(n, _)| n.clone()));
        w.write_record(&header)?;
        for (i, id) in self.item_ids.iter().enumerate() {
            let mut row = vec![id.clone()];
            row.extend(self.columns.iter().map(|(_, v)| v[i].to_string()));
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
        if header.first().map(String::as_str) != Some("item_id") || header.len() < 2 {
            return Err(Error::invalid(format!(
                "{}: header must be item_id followed by rating columns",
                path.display()
            )));
        }
        let mut items = Vec::new();
        let mut columns: Vec<(String, Vec<f64>)> = header[1..].iter().map(|n| (n.clone(), Vec::new())).collect();
        for (line, rec) in r.records().enumerate() {
            let rec = rec?;
            items.push(rec[0].to_string());
            for (j, (name, col)) in columns.iter_mut().enumerate() {
                let cell = &rec[j + 1];
                let v: f64 = cell.trim().parse().map_err(|_| Error::Parse {
                    path: path.display().to_string(),
                    line: line + 2,
                    message: format!("column {name}: {cell:?} is not a number"),
                })?;
                col.push(v);
            }
        }
        RaterMatrix::new(items, columns)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IccRow {
    pub columns: Vec<String>,
    /// `None` when ICC is undefined for this combination.
    pub icc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

/// Five ICC(2,k) rows: the model standing in for each rater in turn, the
/// three humans, and all four sources together. The model takes the
/// replaced rater's column position.
pub fn rater_replacement_table(matrix: &RaterMatrix, model_column: &str) -> Result<Vec<IccRow>> {
    matrix.column(model_column)?;
    let raters: Vec<&str> = matrix
        .column_names()
        .into_iter()
        .filter(|n| *n != model_column)
        .collect();
    if raters.len() != 3 {
        return Err(Error::invalid(format!(
            "expected three rater columns besides {model_column}, found {}",
            raters.len()
        )));
    }
    let mut combos: Vec<Vec<&str>> = (0..3)
        .map(|k| {
            let mut c = raters.clone();
            c[k] = model_column;
            c
        })
        .collect();
    combos.push(raters.clone());
    let mut all = raters.clone();
    all.push(model_column);
    combos.push(all);

    combos
        .into_iter()
        .map(|cols| {
            let grid = matrix.grid(&cols)?;
            let (icc, note) = match icc2k(grid.view()) {
                Ok(r) => (Some(r.value), None),
                Err(Error::UndefinedReliability(msg)) => (None, Some(msg)),
                Err(e) => return Err(e),
            };
            Ok(IccRow {
                columns: cols.iter().map(|s| s.to_string()).collect(),
                icc,
                note,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnCorrelation {
    pub column: String,
    pub result: Option<CorrelationResult>,
    /// Set when the column (or the fused median) has no variance.
    pub zero_variance: bool,
}

/// Correlates each column with the per-item median over all columns (for an
/// even number of columns, the mean of the middle two).
pub fn median_fusion_correlations(matrix: &RaterMatrix) -> Result<Vec<ColumnCorrelation>> {
    matrix.validate()?;
    if matrix.n_items() < 3 {
        return Err(Error::invalid(format!(
            "need at least 3 items, got {}",
            matrix.n_items()
        )));
    }
    let fused: Vec<f64> = (0..matrix.n_items())
        .map(|i| median(&matrix.columns.iter().map(|(_, v)| v[i]).collect::<Vec<_>>()))
        .collect();
    matrix
        .columns
        .iter()
        .map(|(name, values)| match pearson(values, &fused) {
            Ok(r) => Ok(ColumnCorrelation {
                column: name.clone(),
                result: Some(r),
                zero_variance: false,
            }),
            Err(Error::ZeroVariance) => Ok(ColumnCorrelation {
                column: name.clone(),
                result: None,
                zero_variance: true,
            }),
            Err(e) => Err(e),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matrix(cols: [[f64; 5]; 4]) -> RaterMatrix {
        RaterMatrix::new(
            (0..5).map(|i| format!("i{i}")).collect(),
            ["Rater0", "Rater1", "Rater2", "Model"]
                .iter()
                .zip(cols)
                .map(|(n, c)| (n.to_string(), c.to_vec()))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn substitution_identity() {
        let r0 = [1.0, 4.0, 2.0, 8.0, 5.0];
        let m = matrix([r0, [2.0, 5.0, 2.5, 7.0, 6.0], [1.5, 3.0, 3.0, 9.0, 4.0], r0]);
        let t = rater_replacement_table(&m, "Model").unwrap();
        assert_eq!(t.len(), 5);
        assert_eq!(t[0].columns, ["Model", "Rater1", "Rater2"]);
        assert_eq!(t[3].columns, ["Rater0", "Rater1", "Rater2"]);
        assert_eq!(t[0].icc, t[3].icc);
        assert_eq!(t[4].columns.len(), 4);
    }

    #[test]
    fn identical_columns_give_perfect_rows() {
        let c = [1.0, 2.0, 3.0, 4.0, 5.0];
        let t = rater_replacement_table(&matrix([c; 4]), "Model").unwrap();
        assert!(t.iter().all(|row| (row.icc.unwrap() - 1.0).abs() < 1e-12));
    }

    #[test]
    fn missing_model_column() {
        let c = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert!(rater_replacement_table(&matrix([c; 4]), "Nope").is_err());
    }

    #[test]
    fn median_fusion_examples() {
        let c = [1.0, 2.0, 3.0, 4.0, 5.0];
        let all = median_fusion_correlations(&matrix([c; 4])).unwrap();
        assert!(all.iter().all(|r| (r.result.as_ref().unwrap().r - 1.0).abs() < 1e-12));

        let out = median_fusion_correlations(&matrix([
            c,
            [2.0, 3.0, 5.0, 4.0, 6.0],
            [3.0; 5],
            [1.0, 3.0, 2.0, 5.0, 4.0],
        ]))
        .unwrap();
        assert!(out[2].zero_variance && out[2].result.is_none());
        assert!(!out[0].zero_variance);
    }

    #[test]
    fn csv_round_trip_and_item_selection() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let m = matrix([[1.0, 2.0, 3.0, 4.0, 5.5]; 4]);
        m.write_csv(&path).unwrap();
        assert_eq!(RaterMatrix::read_csv(&path).unwrap(), m);
        let sub = m.select_items(&["i1".to_string(), "i3".to_string()].into()).unwrap();
        assert_eq!(sub.item_ids, ["i1", "i3"]);
        assert_eq!(sub.column("Model").unwrap(), &[2.0, 4.0]);
        assert!(m.select_items(&["zz".to_string()].into()).is_err());
    }
}
