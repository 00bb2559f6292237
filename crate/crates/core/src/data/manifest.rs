//! Line-delimited manifest reader/writer. See `docs/dataset-format.md`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{
    Construct, DatasetManifest, FrameLabelRecord, RatingTriple, SegmentRecord, DEFAULT_SCALE_MAX,
    DEFAULT_SEGMENT_DURATION,
};
use crate::error::{Error, Result};

pub const MANIFEST_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum Record {
    Header(Header),
    Segment(SegmentRecord),
    FrameLabel(FrameLabelWire),
    SegmentLabel(RatingTriple),
    Include { path: PathBuf },
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    #[serde(default = "default_scale_max")]
    scale_max: f64,
    fps: f64,
    #[serde(default = "default_duration")]
    segment_duration: f64,
}

fn default_scale_max() -> f64 {
    DEFAULT_SCALE_MAX
}

fn default_duration() -> f64 {
    DEFAULT_SEGMENT_DURATION
}

#[derive(Debug, Serialize, Deserialize)]
struct TripleWire {
    values: [f64; 3],
    rater_ids: [String; 3],
}

#[derive(Debug, Serialize, Deserialize)]
struct FrameLabelWire {
    frame_id: String,
    segment_id: String,
    frame_index: usize,
    ratings: BTreeMap<Construct, TripleWire>,
}

impl From<FrameLabelWire> for FrameLabelRecord {
    fn from(w: FrameLabelWire) -> Self {
        let ratings = w
            .ratings
            .into_iter()
            .map(|(construct, t)| {
                let triple = RatingTriple {
                    item_id: w.frame_id.clone(),
                    construct,
                    values: t.values,
                    rater_ids: t.rater_ids,
                };
                (construct, triple)
            })
            .collect();
        FrameLabelRecord {
            frame_id: w.frame_id,
            segment_id: w.segment_id,
            frame_index: w.frame_index,
            ratings,
        }
    }
}

impl From<&FrameLabelRecord> for FrameLabelWire {
    fn from(r: &FrameLabelRecord) -> Self {
        FrameLabelWire {
            frame_id: r.frame_id.clone(),
            segment_id: r.segment_id.clone(),
            frame_index: r.frame_index,
            ratings: r
                .ratings
                .iter()
                .map(|(c, t)| {
                    (
                        *c,
                        TripleWire {
                            values: t.values,
                            rater_ids: t.rater_ids.clone(),
                        },
                    )
                })
                .collect(),
        }
    }
}

/// Reads and validates a manifest file. `include` records are resolved
/// relative to the manifest's directory.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let manifest = parse_records(&text, &path.display().to_string(), Some(base))?;
    manifest.validate()?;
    Ok(manifest)
}

/// Parses manifest text that has no `include` records.
pub fn parse_manifest(text: &str) -> Result<DatasetManifest> {
    let manifest = parse_records(text, "<manifest>", None)?;
    manifest.validate()?;
    Ok(manifest)
}

fn parse_records(text: &str, origin: &str, base: Option<&Path>) -> Result<DatasetManifest> {
    let mut manifest: Option<DatasetManifest> = None;
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: origin.to_string(),
            line: line_no,
            message,
        };
        let record: Record = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
        match (record, manifest.as_mut()) {
            (Record::Header(h), None) => {
                if h.format_version != MANIFEST_FORMAT_VERSION {
                    return Err(parse_err(format!(
                        "unsupported format_version {} (expected {MANIFEST_FORMAT_VERSION})",
                        h.format_version
                    )));
                }
                let mut m = DatasetManifest::new(h.scale_max, h.fps);
                m.segment_duration = h.segment_duration;
                manifest = Some(m);
            }
            (Record::Header(_), Some(_)) => return Err(parse_err("duplicate header record".into())),
            (_, None) => return Err(parse_err("first record must be the header".into())),
            (Record::Segment(s), Some(m)) => m.segments.push(s),
            (Record::FrameLabel(l), Some(m)) => m.frame_labels.push(l.into()),
            (Record::SegmentLabel(t), Some(m)) => m.segment_labels.push(t),
            (Record::Include { path }, Some(m)) => {
                let Some(base) = base else {
                    return Err(parse_err("include records are only allowed in manifest files".into()));
                };
                let included = base.join(&path);
                let text = std::fs::read_to_string(&included).map_err(|e| Error::io(&included, e))?;
                parse_labels(&text, &included.display().to_string(), m)?;
            }
        }
    }
    manifest.ok_or_else(|| Error::Parse {
        path: origin.to_string(),
        line: 0,
        message: "missing header record".into(),
    })
}

/// Included files may only carry label records.
fn parse_labels(text: &str, origin: &str, manifest: &mut DatasetManifest) -> Result<()> {
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: origin.to_string(),
            line: idx + 1,
            message,
        };
        match serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))? {
            Record::FrameLabel(l) => manifest.frame_labels.push(l.into()),
            Record::SegmentLabel(t) => manifest.segment_labels.push(t),
            _ => return Err(parse_err("included label files may only contain label records".into())),
        }
    }
    Ok(())
}

/// Serializes a manifest with every label embedded.
pub fn manifest_to_string(manifest: &DatasetManifest) -> Result<String> {
    let mut out = String::new();
    let header = Record::Header(Header {
        format_version: MANIFEST_FORMAT_VERSION,
        scale_max: manifest.scale_max,
        fps: manifest.fps,
        segment_duration: manifest.segment_duration,
    });
    writeln!(out, "{}", serde_json::to_string(&header)?).unwrap();
    for s in &manifest.segments {
        writeln!(out, "{}", serde_json::to_string(&Record::Segment(s.clone()))?).unwrap();
    }
    for l in &manifest.frame_labels {
        writeln!(out, "{}", serde_json::to_string(&Record::FrameLabel(l.into()))?).unwrap();
    }
    for t in &manifest.segment_labels {
        writeln!(out, "{}", serde_json::to_string(&Record::SegmentLabel(t.clone()))?).unwrap();
    }
    Ok(out)
}

pub fn write_manifest(manifest: &DatasetManifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = manifest_to_string(manifest)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
