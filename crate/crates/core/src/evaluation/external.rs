//! Correlating NVI scores with questionnaire and observer measures.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Split;
use crate::error::{Error, Result};
use crate::fusion::ScoreRow;
use crate::stats::{fdr_adjust, pearson};

/// Below this many matched units a report carries a small-sample warning.
pub const SMALL_SAMPLE_N: usize = 10;
/// Fewest matched units a correlation is computed on.
pub const MIN_UNITS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Teacher,
    Video,
}

impl Level {
    pub fn key_column(self) -> &'static str {
        match self {
            Level::Teacher => "teacher_id",
            Level::Video => "video_id",
        }
    }

    fn key(self, row: &ScoreRow) -> &str {
        match self {
            Level::Teacher => &row.teacher_id,
            Level::Video => &row.video_id,
        }
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Level::Teacher => "teacher",
            Level::Video => "video",
        })
    }
}

/// Which scored segments enter the analysis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Every scored segment.
    #[default]
    Full,
    /// Only segments from the external split.
    AdditionalOnly,
}

impl Variant {
    fn includes(self, row: &ScoreRow) -> bool {
        match self {
            Variant::Full => true,
            Variant::AdditionalOnly => row.split == Split::External,
        }
    }
}

/// Aggregated measures keyed by teacher or video.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalMeasures {
    pub level: Level,
    pub measures: Vec<String>,
    pub rows: BTreeMap<String, Vec<f64>>,
}

impl ExternalMeasures {
    /// Reads a CSV whose first column is `teacher_id` or `video_id` and whose
    /// other columns are numeric measures.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_csv(&text, &path.display().to_string())
    }

    pub fn parse_csv(text: &str, origin: &str) -> Result<Self> {
        let parse_err = |line: usize, message: String| Error::Parse {
            path: origin.to_string(),
            line,
            message,
        };
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let header: Vec<String> = r.headers()?.iter().map(|h| h.trim().to_string()).collect();
        let level = match header.first().map(String::as_str) {
            Some("teacher_id") => Level::Teacher,
            Some("video_id") => Level::Video,
            other => {
                return Err(parse_err(
                    1,
                    format!("first column must be teacher_id or video_id, found {other:?}"),
                ))
            }
        };
        if header.len() < 2 {
            return Err(parse_err(1, "no measure columns".into()));
        }
        let measures = header[1..].to_vec();
        let mut rows = BTreeMap::new();
        for (i, rec) in r.records().enumerate() {
            let line = i + 2;
            let rec = rec?;
            let key = rec[0].trim().to_string();
            let values = (1..header.len())
                .map(|j| {
                    let cell = rec.get(j).unwrap_or("").trim();
                    cell.parse::<f64>()
                        .ok()
                        .filter(|v| v.is_finite())
                        .ok_or_else(|| parse_err(line, format!("{}: {cell:?} is not numeric", header[j])))
                })
                .collect::<Result<Vec<_>>>()?;
            if rows.insert(key.clone(), values).is_some() {
                return Err(parse_err(line, format!("duplicate key {key}")));
            }
        }
        Ok(ExternalMeasures { level, measures, rows })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec![self.level.key_column().to_string()];
        header.extend(self.measures.iter().cloned());
        w.write_record(&header)?;
        for (key, values) in &self.rows {
            let mut rec = vec![key.clone()];
            rec.extend(values.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    fn measure_index(&self, name: &str) -> Option<usize> {
        self.measures.iter().position(|m| m == name)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub id: String,
    pub measure: String,
    pub level: Level,
}

/// Interest, cognitive activation and enthusiasm at teacher level;
/// socio-emotional support at video level.
pub fn default_hypotheses() -> Vec<Hypothesis> {
    [
        ("H1", "interest_math", Level::Teacher),
        ("H2", "cognitive_activation", Level::Teacher),
        ("H3", "perceived_enthusiasm", Level::Teacher),
        ("H4", "socio_emotional_support", Level::Video),
    ]
    .into_iter()
    .map(|(id, measure, level)| Hypothesis {
        id: id.into(),
        measure: measure.into(),
        level,
    })
    .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypothesisResult {
    pub hypothesis_id: String,
    pub measure: String,
    pub level: Level,
    /// `None` when undefined (zero variance on either side).
    pub r: Option<f64>,
    pub p_raw: Option<f64>,
    pub p_adjusted: Option<f64>,
    pub n: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct UnmatchedKeys {
    pub scores_only: Vec<String>,
    pub measures_only: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub variant: Variant,
    pub results: Vec<HypothesisResult>,
    pub unmatched: BTreeMap<Level, UnmatchedKeys>,
    pub warnings: Vec<String>,
}

/// Mean NVI score per teacher or video over the rows in `variant`.
pub fn aggregate_scores(scores: &[ScoreRow], level: Level, variant: Variant) -> BTreeMap<String, f64> {
    let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for row in scores.iter().filter(|r| variant.includes(r)) {
        let e = acc.entry(level.key(row).to_string()).or_default();
        e.0 += row.score;
        e.1 += 1;
    }
    acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}

/// Pearson correlation per hypothesis between aggregated scores and the
/// matching measure, with Benjamini–Hochberg adjustment across the
/// hypotheses that have a defined p-value.
pub fn external_validation(
    scores: &[ScoreRow],
    measures: &[&ExternalMeasures],
    hypotheses: &[Hypothesis],
    variant: Variant,
) -> Result<CorrelationReport> {
    let mut results = Vec::new();
    let mut unmatched = BTreeMap::new();
    let mut warnings = Vec::new();

    for h in hypotheses {
        let table = measures
            .iter()
            .find(|m| m.level == h.level && m.measure_index(&h.measure).is_some())
            .ok_or_else(|| {
                Error::Config(format!(
                    "{}: no {}-level measures with column {}",
                    h.id, h.level, h.measure
                ))
            })?;
        let col = table.measure_index(&h.measure).unwrap();
        let agg = aggregate_scores(scores, h.level, variant);

        let (mut x, mut y) = (Vec::new(), Vec::new());
        for (key, score) in &agg {
            if let Some(values) = table.rows.get(key) {
                x.push(*score);
                y.push(values[col]);
            }
        }
        unmatched.entry(h.level).or_insert_with(|| {
            let score_keys: BTreeSet<&String> = agg.keys().collect();
            let measure_keys: BTreeSet<&String> = table.rows.keys().collect();
            UnmatchedKeys {
                scores_only: score_keys.difference(&measure_keys).map(|k| k.to_string()).collect(),
                measures_only: measure_keys.difference(&score_keys).map(|k| k.to_string()).collect(),
            }
        });
        if x.is_empty() {
            return Err(Error::EmptyDataset(format!(
                "{}: no {} ids shared by scores and measures",
                h.id, h.level
            )));
        }
        if x.len() < MIN_UNITS {
            return Err(Error::invalid(format!(
                "{}: only {} matched {} units, need at least {MIN_UNITS}",
                h.id,
                x.len(),
                h.level
            )));
        }
        if x.len() < SMALL_SAMPLE_N {
            warnings.push(format!(
                "{}: small sample (n = {}); estimates are unstable",
                h.id,
                x.len()
            ));
        }
        let (r, p_raw) = match pearson(&x, &y) {
            Ok(c) => (Some(c.r), Some(c.p_raw)),
            Err(Error::ZeroVariance) => {
                warnings.push(format!("{}: zero variance, correlation undefined", h.id));
                (None, None)
            }
            Err(e) => return Err(e),
        };
        results.push(HypothesisResult {
            hypothesis_id: h.id.clone(),
            measure: h.measure.clone(),
            level: h.level,
            r,
            p_raw,
            p_adjusted: None,
            n: x.len(),
        });
    }

    let defined: Vec<usize> = (0..results.len()).filter(|&i| results[i].p_raw.is_some()).collect();
    let raw: Vec<f64> = defined.iter().map(|&i| results[i].p_raw.unwrap()).collect();
    for (&i, adj) in defined.iter().zip(fdr_adjust(&raw)?) {
        results[i].p_adjusted = Some(adj);
    }

    Ok(CorrelationReport {
        variant,
        results,
        unmatched,
        warnings,
    })
}
