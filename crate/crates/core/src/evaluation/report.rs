//! Report bundle: a JSON summary plus rating histograms.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::external::CorrelationReport;
use super::{ColumnCorrelation, IccRow};
use crate::data::{load_manifest, Construct, DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::regressors::RegressorEvaluation;
use crate::stats::median_rating;
use crate::training::TrainingMetrics;

/// Keys every summary carries.
pub const REPORT_SUMMARY_KEYS: [&str; 5] = ["gesture_r", "distance_r", "nvi_r", "icc_table", "external_validation"];

const HIST_BINS: usize = 20;
const HIST_W: u32 = 640;
const HIST_H: u32 = 400;
const MARGIN: u32 = 40;

/// Output of the evaluate stage, read back by the report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationSummary {
    pub gesture: Option<RegressorEvaluation>,
    pub distance: Option<RegressorEvaluation>,
    pub nvi: Option<RegressorEvaluation>,
    /// Model against the three NVI raters on validation segments.
    pub icc_table: Vec<IccRow>,
    pub median_fusion: Vec<ColumnCorrelation>,
}

impl EvaluationSummary {
    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

#[derive(Debug, Clone, Default)]
pub struct ReportInputs {
    pub manifest: PathBuf,
    pub config: PathBuf,
    pub evaluation: PathBuf,
    /// External-validation reports, one per dataset variant.
    pub external: Vec<PathBuf>,
    pub metrics: Vec<PathBuf>,
}

impl ReportInputs {
    fn all(&self) -> Vec<(&'static str, &PathBuf)> {
        let mut v = vec![
            ("manifest", &self.manifest),
            ("config", &self.config),
            ("evaluation", &self.evaluation),
        ];
        v.extend(self.external.iter().map(|p| ("external", p)));
        v.extend(self.metrics.iter().map(|p| ("metrics", p)));
        v
    }
}

#[derive(Debug, Clone)]
pub struct ReportOutputs {
    pub summary: PathBuf,
    pub histograms: Vec<PathBuf>,
}

#[derive(Debug, Serialize)]
struct InputRecord {
    role: &'static str,
    file: String,
    sha256: String,
}

#[derive(Debug, Serialize)]
struct Histogram {
    file: String,
    construct: Construct,
    bin_width: f64,
    counts: Vec<usize>,
}

#[derive(Debug, Serialize)]
struct DatasetCounts {
    segments: BTreeMap<Split, usize>,
    teachers: BTreeMap<Split, usize>,
    frame_labels: usize,
    segment_labels: usize,
    low_quality_segments: usize,
}

#[derive(Debug, Serialize)]
struct Summary<'a> {
    gesture_r: Option<f64>,
    distance_r: Option<f64>,
    nvi_r: Option<f64>,
    icc_table: &'a [IccRow],
    external_validation: &'a [CorrelationReport],
    gesture_accuracy: Option<f64>,
    median_fusion: &'a [ColumnCorrelation],
    evaluation: &'a EvaluationSummary,
    training: &'a [TrainingMetrics],
    dataset: DatasetCounts,
    histograms: Vec<Histogram>,
    config: serde_json::Value,
    config_hash: String,
    inputs: Vec<InputRecord>,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn file_name(path: &Path) -> String {
    path.file_name()
        .map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned())
}

/// Bin counts over `[0, scale_max]`; the top edge falls in the last bin.
fn bin_counts(values: &[f64], scale_max: f64, bins: usize) -> Vec<usize> {
    let mut counts = vec![0; bins];
    for &v in values {
        let b = ((v / scale_max) * bins as f64).floor().clamp(0.0, (bins - 1) as f64) as usize;
        counts[b] += 1;
    }
    counts
}

/// Renders a bar histogram of `values` over `[0, scale_max]` to a PNG and
/// returns the bin counts.
pub fn draw_histogram(values: &[f64], scale_max: f64, path: &Path) -> Result<Vec<usize>> {
    if values.is_empty() {
        return Err(Error::EmptyDataset(format!("no ratings for {}", file_name(path))));
    }
    let counts = bin_counts(values, scale_max, HIST_BINS);
    let peak = *counts.iter().max().unwrap() as f64;
    let mut img = RgbImage::from_pixel(HIST_W, HIST_H, Rgb([255, 255, 255]));
    let plot_w = HIST_W - 2 * MARGIN;
    let plot_h = HIST_H - 2 * MARGIN;
    let bar_w = plot_w / HIST_BINS as u32;
    for (b, &c) in counts.iter().enumerate() {
        let h = ((c as f64 / peak) * plot_h as f64).round() as u32;
        let x0 = MARGIN + b as u32 * bar_w;
        for x in x0 + 1..x0 + bar_w - 1 {
            for y in HIST_H - MARGIN - h..HIST_H - MARGIN {
                img.put_pixel(x, y, Rgb([70, 110, 170]));
            }
        }
    }
    for x in MARGIN - 1..HIST_W - MARGIN {
        img.put_pixel(x, HIST_H - MARGIN, Rgb([0, 0, 0]));
    }
    for y in MARGIN..=HIST_H - MARGIN {
        img.put_pixel(MARGIN - 1, y, Rgb([0, 0, 0]));
    }
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(counts)
}

fn frame_medians(manifest: &DatasetManifest, construct: Construct) -> Vec<f64> {
    manifest
        .frame_labels
        .iter()
        .filter_map(|f| f.rating(construct))
        .map(median_rating)
        .collect()
}

fn dataset_counts(m: &DatasetManifest) -> DatasetCounts {
    let mut segments = BTreeMap::new();
    let mut teachers = BTreeMap::new();
    for split in [Split::Train, Split::Validation, Split::External] {
        segments.insert(split, m.segments_in(split).count());
        teachers.insert(split, m.teachers(split).len());
    }
    DatasetCounts {
        segments,
        teachers,
        frame_labels: m.frame_labels.len(),
        segment_labels: m.segment_labels.len(),
        low_quality_segments: m.segments.iter().filter(|s| s.low_quality).count(),
    }
}

/// Writes `summary.json` and three histogram PNGs into `out_dir`. Input
/// files are recorded by name and SHA-256 so the summary does not depend on
/// where the run directory lives.
pub fn render_report(inputs: &ReportInputs, out_dir: &Path) -> Result<ReportOutputs> {
    let missing: Vec<PathBuf> = inputs
        .all()
        .into_iter()
        .filter(|(_, p)| !p.is_file())
        .map(|(_, p)| p.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingInputs(missing));
    }

    let manifest = load_manifest(&inputs.manifest)?;
    let evaluation = EvaluationSummary::load(&inputs.evaluation)?;
    let external = inputs
        .external
        .iter()
        .map(|p| read_json(p))
        .collect::<Result<Vec<CorrelationReport>>>()?;
    let training = inputs
        .metrics
        .iter()
        .map(|p| read_json(p))
        .collect::<Result<Vec<TrainingMetrics>>>()?;

    let config_bytes = std::fs::read(&inputs.config).map_err(|e| Error::io(&inputs.config, e))?;
    let config_text = String::from_utf8_lossy(&config_bytes);
    let config: serde_json::Value =
        toml::from_str(&config_text).map_err(|e| Error::Config(format!("{}: {e}", inputs.config.display())))?;

    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let series = [
        (
            Construct::GestureIntensity,
            "hist_gesture.png",
            frame_medians(&manifest, Construct::GestureIntensity),
        ),
        (
            Construct::PerceivedDistance,
            "hist_distance.png",
            frame_medians(&manifest, Construct::PerceivedDistance),
        ),
        (
            Construct::Nvi,
            "hist_nvi.png",
            manifest
                .segment_labels
                .iter()
                .filter(|t| t.construct == Construct::Nvi)
                .map(median_rating)
                .collect(),
        ),
    ];
    let mut histograms = Vec::new();
    let mut paths = Vec::new();
    for (construct, name, values) in &series {
        let path = out_dir.join(name);
        let counts = draw_histogram(values, manifest.scale_max, &path)?;
        histograms.push(Histogram {
            file: name.to_string(),
            construct: *construct,
            bin_width: manifest.scale_max / HIST_BINS as f64,
            counts,
        });
        paths.push(path);
    }

    let mut input_records = Vec::new();
    for (role, p) in inputs.all() {
        let bytes = std::fs::read(p).map_err(|e| Error::io(p, e))?;
        input_records.push(InputRecord {
            role,
            file: file_name(p),
            sha256: sha256_hex(&bytes),
        });
    }

    let r_of = |e: &Option<RegressorEvaluation>| e.as_ref().and_then(|e| e.pearson.map(|c| c.r));
    let summary = Summary {
        gesture_r: r_of(&evaluation.gesture),
        distance_r: r_of(&evaluation.distance),
        nvi_r: r_of(&evaluation.nvi),
        icc_table: &evaluation.icc_table,
        external_validation: &external,
        gesture_accuracy: evaluation.gesture.as_ref().and_then(|g| g.accuracy),
        median_fusion: &evaluation.median_fusion,
        evaluation: &evaluation,
        training: &training,
        dataset: dataset_counts(&manifest),
        histograms,
        config,
        config_hash: sha256_hex(&config_bytes),
        inputs: input_records,
    };
    let summary_path = out_dir.join("summary.json");
    write_json(&summary_path, &summary)?;
    Ok(ReportOutputs {
        summary: summary_path,
        histograms: paths,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bins_cover_the_scale() {
        assert_eq!(bin_counts(&[0.0, 499.0, 500.0, 10_000.0], 10_000.0, 20), {
            let mut c = vec![0; 20];
            c[0] = 2;
            c[1] = 1;
            c[19] = 1;
            c
        });
    }

    #[test]
    fn empty_histogram_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let err = draw_histogram(&[], 10_000.0, &dir.path().join("h.png")).unwrap_err();
        assert!(matches!(err, Error::EmptyDataset(_)));
    }

    #[test]
    fn histogram_png_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.png"), dir.path().join("b.png"));
        let values: Vec<f64> = (0..200).map(|i| (i * 37 % 100) as f64 * 100.0).collect();
        draw_histogram(&values, 10_000.0, &a).unwrap();
        draw_histogram(&values, 10_000.0, &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        let img = image::open(&a).unwrap();
        assert_eq!((img.width(), img.height()), (HIST_W, HIST_H));
    }

    #[test]
    fn missing_inputs_are_listed() {
        let dir = tempfile::tempdir().unwrap();
        let inputs = ReportInputs {
            manifest: dir.path().join("manifest.json"),
            config: dir.path().join("run.toml"),
            evaluation: dir.path().join("evaluation.json"),
            external: vec![],
            metrics: vec![],
        };
        match render_report(&inputs, dir.path()).unwrap_err() {
            Error::MissingInputs(v) => assert_eq!(v.len(), 3),
            e => panic!("{e}"),
        }
    }
}
