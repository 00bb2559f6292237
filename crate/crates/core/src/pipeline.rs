//! File-based pipeline stages driven by a run config.
//!
//! Every stage reads its inputs from and writes its outputs into the run
//! directory `<output_dir>/<run_id>`:
//!
//! ```text
//! config.toml               effective config
//! observations/<seg>.nvobs  per-frame perception output
//! checkpoints/<kind>.safetensors
//! metrics/<kind>.json
//! features/<seg>.json       frame features and segment vector
//! scores.csv
//! evaluation/evaluation.json, evaluation/rater_matrix.csv
//! external/<variant>.json
//! report/summary.json, report/hist_*.png
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{load_manifest, Construct, DatasetManifest, SegmentRecord, Split};
use crate::error::{Error, Result, Stage};
use crate::evaluation::{
    default_hypotheses, external_validation, median_fusion_correlations, rater_replacement_table, render_report,
    CorrelationReport, EvaluationSummary, ExternalMeasures, RaterMatrix, ReportInputs, ReportOutputs, Variant,
    MIN_UNITS,
};
use crate::fusion::{
    build_nvi_model, predict_nvi_batch, read_scores, train_nvi, write_scores, EmotionWeighting, FrameFeatures,
    ScoreRow, SegmentFeatureVector, SegmentFeatures,
};
use crate::model::{BackboneSpec, Checkpoint, ModelKind};
use crate::perception::obsfile::{ObservationReader, ObservationWriter};
use crate::perception::{
    extract_observations, BackendConfig, BackendSet, FrameObservation, ImageSequence, TrackInit, VideoSource,
};
use crate::regressors::{
    build_regressor, construct_for, evaluate_predictions, make_samples, prepare_targets, train_regressor, TrainingPair,
    DEFAULT_BINARY_THRESHOLD,
};
use crate::stats::{exceeds_disagreement, median_rating};
use crate::synth::{render_frame, teacher_init, SceneParams, SceneVideo, SCENE_SUFFIX};
use crate::training::{predict_samples, TrainConfig, TrainingMetrics};

/// Environment variable naming the default config file.
pub const CONFIG_ENV: &str = "NVI_CONFIG";
pub const MODEL_COLUMN: &str = "Model";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Backbones {
    #[serde(default = "default_backbone")]
    pub gesture: BackboneSpec,
    #[serde(default = "default_backbone")]
    pub distance: BackboneSpec,
}

fn default_backbone() -> BackboneSpec {
    BackboneSpec::ResNet18 { weights: None }
}

impl Default for Backbones {
    fn default() -> Self {
        Backbones {
            gesture: default_backbone(),
            distance: default_backbone(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainBlocks {
    pub gesture: TrainConfig,
    pub distance: TrainConfig,
    pub nvi: TrainConfig,
}

impl TrainBlocks {
    pub fn get(&self, kind: ModelKind) -> &TrainConfig {
        match kind {
            ModelKind::Gesture => &self.gesture,
            ModelKind::Distance => &self.distance,
            ModelKind::Nvi => &self.nvi,
        }
    }

    fn all_mut(&mut self) -> [&mut TrainConfig; 3] {
        [&mut self.gesture, &mut self.distance, &mut self.nvi]
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExternalConfig {
    pub teacher_measures: Option<PathBuf>,
    pub video_measures: Option<PathBuf>,
}

/// Run configuration. Relative paths are resolved against `base_dir`, the
/// directory of the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub manifest: PathBuf,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "default_run_id")]
    pub run_id: String,
    /// Overrides the seed of every training block when set.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub emotion_weighting: EmotionWeighting,
    #[serde(default = "default_threshold")]
    pub binary_threshold: f64,
    /// Extraction worker threads; 0 uses one per core.
    #[serde(default)]
    pub workers: usize,
    #[serde(default)]
    pub backends: BackendConfig,
    #[serde(default)]
    pub backbones: Backbones,
    #[serde(default)]
    pub train: TrainBlocks,
    #[serde(default)]
    pub external: ExternalConfig,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

fn default_run_id() -> String {
    "default".into()
}

fn default_threshold() -> f64 {
    DEFAULT_BINARY_THRESHOLD
}

impl RunConfig {
    pub fn new(manifest: impl Into<PathBuf>) -> Self {
        RunConfig {
            manifest: manifest.into(),
            output_dir: default_output_dir(),
            run_id: default_run_id(),
            seed: None,
            emotion_weighting: EmotionWeighting::default(),
            binary_threshold: DEFAULT_BINARY_THRESHOLD,
            workers: 0,
            backends: BackendConfig::default(),
            backbones: Backbones::default(),
            train: TrainBlocks::default(),
            external: ExternalConfig::default(),
            base_dir: PathBuf::from("."),
        }
    }

    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self> {
        let mut c: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.base_dir = base_dir.to_path_buf();
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::Config(format!("config file {} not found", path.display())),
            _ => Error::io(path, e),
        })?;
        Self::from_toml(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn run_dir(&self) -> PathBuf {
        self.resolve(&self.output_dir).join(&self.run_id)
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.resolve(&self.manifest)
    }

    /// The training config for `kind` with the run seed applied.
    pub fn train_config(&self, kind: ModelKind) -> TrainConfig {
        let mut c = self.train.get(kind).clone();
        if let Some(seed) = self.seed {
            c.seed = seed;
        }
        c
    }

    pub fn backbone(&self, kind: ModelKind) -> Result<&BackboneSpec> {
        match kind {
            ModelKind::Gesture => Ok(&self.backbones.gesture),
            ModelKind::Distance => Ok(&self.backbones.distance),
            ModelKind::Nvi => Err(Error::Config("the nvi model has no backbone".into())),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.run_id.is_empty() || self.run_id.contains(['/', '\\']) {
            return Err(Error::Config(format!(
                "run_id {:?} must be a plain directory name",
                self.run_id
            )));
        }
        if !(0.0..=1.0).contains(&self.binary_threshold) {
            return Err(Error::Config(format!(
                "binary_threshold must lie in [0, 1], got {}",
                self.binary_threshold
            )));
        }
        self.backends.validate()?;
        let mut blocks = self.train.clone();
        for c in blocks.all_mut() {
            c.validate()?;
        }
        let manifest = self.manifest_path();
        if !manifest.is_file() {
            return Err(Error::Config(format!("manifest {} does not exist", manifest.display())));
        }
        for p in [&self.external.teacher_measures, &self.external.video_measures]
            .into_iter()
            .flatten()
        {
            if !self.resolve(p).is_file() {
                return Err(Error::Config(format!(
                    "external measures file {} does not exist",
                    self.resolve(p).display()
                )));
            }
        }
        Ok(())
    }
}

/// A validated config bound to its run directory.
pub struct Run {
    pub config: RunConfig,
    pub dir: PathBuf,
    pub manifest: DatasetManifest,
}

fn mkdir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn require(paths: &[PathBuf]) -> Result<()> {
    let missing: Vec<PathBuf> = paths.iter().filter(|p| !p.exists()).cloned().collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Error::MissingInputs(missing))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExtractSummary {
    pub extracted: usize,
    pub skipped: usize,
    /// Segment id and stage-tagged message.
    pub failed: Vec<(String, String)>,
}

impl Run {
    /// Validates the config, loads the manifest and writes `config.toml`
    /// into the run directory.
    pub fn open(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let manifest = load_manifest(config.manifest_path())?;
        let dir = config.run_dir();
        mkdir(&dir)?;
        let path = dir.join("config.toml");
        std::fs::write(&path, config.to_toml()?).map_err(|e| Error::io(&path, e))?;
        Ok(Run { config, dir, manifest })
    }

    pub fn observation_path(&self, segment_id: &str) -> PathBuf {
        self.dir.join("observations").join(format!("{segment_id}.nvobs"))
    }

    pub fn checkpoint_path(&self, kind: ModelKind) -> PathBuf {
        self.dir
            .join("checkpoints")
            .join(format!("{}.safetensors", kind.as_str()))
    }

    pub fn metrics_path(&self, kind: ModelKind) -> PathBuf {
        self.dir.join("metrics").join(format!("{}.json", kind.as_str()))
    }

    pub fn features_path(&self, segment_id: &str) -> PathBuf {
        self.dir.join("features").join(format!("{segment_id}.json"))
    }

    pub fn scores_path(&self) -> PathBuf {
        self.dir.join("scores.csv")
    }

    pub fn evaluation_path(&self) -> PathBuf {
        self.dir.join("evaluation").join("evaluation.json")
    }

    pub fn external_path(&self, variant: Variant) -> PathBuf {
        let name = match variant {
            Variant::Full => "full",
            Variant::AdditionalOnly => "additional_only",
        };
        self.dir.join("external").join(format!("{name}.json"))
    }

    pub fn report_dir(&self) -> PathBuf {
        self.dir.join("report")
    }

    /// Source paths are relative to the manifest's directory.
    fn source_path(&self, seg: &SegmentRecord) -> PathBuf {
        let manifest = self.config.manifest_path();
        manifest.parent().unwrap_or(Path::new(".")).join(&seg.source_path)
    }

    /// Runs perception on every segment. Segments with an existing
    /// observation file are skipped unless `force` is set. A failing segment
    /// does not stop the others.
    pub fn extract(&self, force: bool) -> Result<ExtractSummary> {
        mkdir(&self.dir.join("observations"))?;
        let work = |seg: &SegmentRecord| -> Option<Result<()>> {
            let out = self.observation_path(&seg.segment_id);
            if out.exists() && !force {
                return None;
            }
            Some(self.extract_segment(seg, &out))
        };
        let results: Vec<(String, Option<Result<()>>)> = if self.config.workers == 1 {
            self.manifest
                .segments
                .iter()
                .map(|s| (s.segment_id.clone(), work(s)))
                .collect()
        } else {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(self.config.workers)
                .build()
                .map_err(|e| Error::Config(e.to_string()))?;
            pool.install(|| {
                self.manifest
                    .segments
                    .par_iter()
                    .map(|s| (s.segment_id.clone(), work(s)))
                    .collect()
            })
        };
        let mut summary = ExtractSummary::default();
        for (id, r) in results {
            match r {
                None => summary.skipped += 1,
                Some(Ok(())) => summary.extracted += 1,
                Some(Err(e)) => summary.failed.push((id, e.to_string())),
            }
        }
        Ok(summary)
    }

    fn extract_segment(&self, seg: &SegmentRecord, out: &Path) -> Result<()> {
        let src = self.source_path(seg);
        let fps = self.manifest.fps;
        let expected = self.manifest.frame_count(seg);
        let is_scene = src.to_string_lossy().ends_with(SCENE_SUFFIX);
        let (mut video, init): (Box<dyn VideoSource>, TrackInit) = if is_scene {
            let params = SceneParams::load(&src)?;
            let first = (seg.start * fps).round() as usize;
            if first + expected > params.n_frames {
                return Err(Error::Pipeline {
                    stage: Stage::Decode,
                    frame_index: first,
                    message: format!(
                        "scene has {} frames, segment needs {}",
                        params.n_frames,
                        first + expected
                    ),
                });
            }
            let init = match seg.teacher_box {
                Some(b) => TrackInit::new(b),
                None => teacher_init(&render_frame(&params, first).frame)?,
            };
            let mut v = SceneVideo::new(params, fps)?;
            for _ in 0..first {
                v.next_frame()?;
            }
            (
                Box::new(Take {
                    inner: v,
                    left: expected,
                }),
                init,
            )
        } else {
            let seq = ImageSequence::open(&src, fps)?.window(seg.start, seg.duration)?;
            let b = seg.teacher_box.ok_or_else(|| Error::Pipeline {
                stage: Stage::Tracking,
                frame_index: 0,
                message: format!("segment {} has no teacher_box", seg.segment_id),
            })?;
            (Box::new(seq), TrackInit::new(b))
        };
        let mut backends = BackendSet::from_config(&self.config.backends)?;
        let mut writer: Option<ObservationWriter> = None;
        extract_observations(video.as_mut(), init, &mut backends, |obs| {
            if writer.is_none() {
                let (h, w) = obs.dims();
                writer = Some(ObservationWriter::create(out, &seg.segment_id, w, h, fps)?);
            }
            writer.as_mut().unwrap().write(&obs)
        })
        .map_err(|e| match e {
            e @ Error::Pipeline { .. } => e,
            other => Error::Pipeline {
                stage: Stage::Extraction,
                frame_index: 0,
                message: format!("{}: {other}", seg.segment_id),
            },
        })?;
        writer.expect("at least one frame").finish()?;
        Ok(())
    }

    fn observations(&self, segment_id: &str) -> Result<Vec<FrameObservation>> {
        let path = self.observation_path(segment_id);
        require(std::slice::from_ref(&path))?;
        ObservationReader::open(&path)?.read_all()
    }

    fn frame_samples(
        &self,
        model: &crate::model::Model,
        pairs: &[TrainingPair],
    ) -> Result<crate::training::CachedSamples> {
        let mut by_segment: BTreeMap<&str, Vec<&TrainingPair>> = BTreeMap::new();
        for p in pairs {
            by_segment.entry(&p.segment_id).or_default().push(p);
        }
        let mut cache: BTreeMap<&str, Vec<FrameObservation>> = BTreeMap::new();
        for seg in by_segment.keys() {
            cache.insert(seg, self.observations(seg)?);
        }
        let mut frames = Vec::with_capacity(pairs.len());
        for p in pairs {
            let obs = cache[p.segment_id.as_str()]
                .iter()
                .find(|o| o.frame_index == p.frame_index)
                .ok_or_else(|| {
                    Error::invalid(format!("{}: frame {} not in observations", p.segment_id, p.frame_index))
                })?;
            frames.push((obs, p.target));
        }
        make_samples(model, frames)
    }

    fn save_checkpoint(&self, kind: ModelKind, ckpt: &Checkpoint) -> Result<TrainingMetrics> {
        mkdir(&self.dir.join("checkpoints"))?;
        mkdir(&self.dir.join("metrics"))?;
        ckpt.save(&self.checkpoint_path(kind))?;
        write_json(&self.metrics_path(kind), &ckpt.header.metrics)?;
        Ok(ckpt.header.metrics.clone())
    }

    /// Trains one model and writes its checkpoint and metrics. Training the
    /// NVI model first computes segment features with the frame regressors.
    pub fn train(&self, kind: ModelKind) -> Result<TrainingMetrics> {
        let config = self.config.train_config(kind);
        match kind {
            ModelKind::Nvi => {
                self.featurize()?;
                let (train, validation, excluded) = self.nvi_pairs(&config)?;
                if train.is_empty() {
                    return Err(Error::EmptyDataset(format!(
                        "nvi: 0 training segments kept, {excluded} excluded at sigma_max = {}",
                        config.sigma_max
                    )));
                }
                let model = build_nvi_model(config.seed);
                let mut ckpt = train_nvi(model, &train, &validation, &config, self.manifest.scale_max)?;
                ckpt.header.metrics.n_excluded = excluded;
                self.save_checkpoint(kind, &ckpt)
            }
            _ => {
                let targets = prepare_targets(&self.manifest, construct_for(kind)?, &config)?;
                let model = build_regressor(kind, self.config.backbone(kind)?, config.seed)?;
                let train = self.frame_samples(&model, &targets.train)?;
                let validation = self.frame_samples(&model, &targets.validation)?;
                let ckpt = train_regressor(
                    model,
                    &train,
                    Some(&validation),
                    &config,
                    self.manifest.scale_max,
                    targets.excluded.len(),
                )?;
                self.save_checkpoint(kind, &ckpt)
            }
        }
    }

    fn load_checkpoint(&self, kind: ModelKind) -> Result<Checkpoint> {
        let path = self.checkpoint_path(kind);
        require(std::slice::from_ref(&path))?;
        let ckpt = Checkpoint::load(&path)?;
        if ckpt.kind() != kind {
            return Err(Error::Checkpoint(format!(
                "{} holds a {} model",
                path.display(),
                ckpt.kind()
            )));
        }
        Ok(ckpt)
    }

    /// Frame features for every segment from the trained frame regressors
    /// (predictions clamped to `[0, 1]`) and the stored emotion scores.
    pub fn featurize(&self) -> Result<()> {
        let gesture = self.load_checkpoint(ModelKind::Gesture)?;
        let distance = self.load_checkpoint(ModelKind::Distance)?;
        mkdir(&self.dir.join("features"))?;
        for seg in &self.manifest.segments {
            let obs = self.observations(&seg.segment_id)?;
            let predict = |ckpt: &Checkpoint| -> Result<Vec<f32>> {
                let samples = make_samples(&ckpt.model, obs.iter().map(|o| (o, 0.0)))?;
                predict_samples(&ckpt.model, &samples, 64)
            };
            let g = predict(&gesture)?;
            let d = predict(&distance)?;
            let frames = obs
                .iter()
                .zip(g.iter().zip(&d))
                .map(|(o, (g, d))| FrameFeatures {
                    frame_index: o.frame_index,
                    gesture: g.clamp(0.0, 1.0),
                    distance: d.clamp(0.0, 1.0),
                    emotions: o.emotions,
                })
                .collect();
            SegmentFeatures::new(&seg.segment_id, frames, self.config.emotion_weighting)?
                .save(&self.features_path(&seg.segment_id))?;
        }
        Ok(())
    }

    fn segment_vector(&self, segment_id: &str) -> Result<SegmentFeatureVector> {
        let path = self.features_path(segment_id);
        require(std::slice::from_ref(&path))?;
        Ok(SegmentFeatures::load(&path)?.vector)
    }

    /// Training pairs (low-quality segments and disagreeing labels dropped),
    /// validation pairs and the excluded count. Targets are scaled to `[0, 1]`.
    #[allow(clippy::type_complexity)]
    fn nvi_pairs(
        &self,
        config: &TrainConfig,
    ) -> Result<(
        Vec<(SegmentFeatureVector, f64)>,
        Vec<(SegmentFeatureVector, f64)>,
        usize,
    )> {
        let (mut train, mut validation, mut excluded) = (Vec::new(), Vec::new(), 0);
        for seg in &self.manifest.segments {
            let Some(label) = self.manifest.segment_label(&seg.segment_id, Construct::Nvi) else {
                continue;
            };
            let target = median_rating(label) / self.manifest.scale_max;
            match seg.split {
                Split::Train if seg.low_quality || exceeds_disagreement(&label.values, config.sigma_max) => {
                    excluded += 1
                }
                Split::Train => train.push((self.segment_vector(&seg.segment_id)?, target)),
                Split::Validation => validation.push((self.segment_vector(&seg.segment_id)?, target)),
                Split::External => {}
            }
        }
        Ok((train, validation, excluded))
    }

    /// NVI scores for every segment, written to `scores.csv`.
    pub fn score(&self) -> Result<Vec<ScoreRow>> {
        let ckpt = self.load_checkpoint(ModelKind::Nvi)?;
        let vectors = self
            .manifest
            .segments
            .iter()
            .map(|s| self.segment_vector(&s.segment_id))
            .collect::<Result<Vec<_>>>()?;
        let scores = predict_nvi_batch(&ckpt, &vectors)?;
        let rows: Vec<ScoreRow> = self
            .manifest
            .segments
            .iter()
            .zip(scores)
            .map(|(s, v)| ScoreRow {
                segment_id: s.segment_id.clone(),
                teacher_id: s.teacher_id.clone(),
                video_id: s.video_id.clone(),
                split: s.split,
                score: v.value,
            })
            .collect();
        write_scores(&self.scores_path(), &rows)?;
        Ok(rows)
    }

    fn evaluate_frames(&self, kind: ModelKind) -> Result<crate::regressors::RegressorEvaluation> {
        let ckpt = self.load_checkpoint(kind)?;
        let targets = prepare_targets(&self.manifest, construct_for(kind)?, &self.config.train_config(kind))?;
        if targets.validation.is_empty() {
            return Err(Error::EmptyDataset(format!("{}: no validation frames", kind.as_str())));
        }
        let samples = self.frame_samples(&ckpt.model, &targets.validation)?;
        let pred: Vec<f64> = predict_samples(&ckpt.model, &samples, 64)?
            .into_iter()
            .map(f64::from)
            .collect();
        let truth: Vec<f64> = targets.validation.iter().map(|p| p.target).collect();
        evaluate_predictions(&pred, &truth, Some(self.config.binary_threshold))
    }

    /// Validation metrics for all three models plus the rater-replacement
    /// ICC table and median-fusion correlations on validation segments.
    pub fn evaluate(&self) -> Result<EvaluationSummary> {
        let gesture = self.evaluate_frames(ModelKind::Gesture)?;
        let distance = self.evaluate_frames(ModelKind::Distance)?;
        let rows = read_scores(&self.scores_path())?;
        let score: BTreeMap<&str, f64> = rows.iter().map(|r| (r.segment_id.as_str(), r.score)).collect();

        let mut items = Vec::new();
        let mut columns: Vec<(String, Vec<f64>)> = (0..3).map(|j| (format!("Rater{j}"), Vec::new())).collect();
        let mut model_col = Vec::new();
        for seg in self.manifest.segments_in(Split::Validation) {
            let Some(label) = self.manifest.segment_label(&seg.segment_id, Construct::Nvi) else {
                continue;
            };
            let s = *score
                .get(seg.segment_id.as_str())
                .ok_or_else(|| Error::invalid(format!("no score for segment {}", seg.segment_id)))?;
            items.push(seg.segment_id.clone());
            for (j, (_, col)) in columns.iter_mut().enumerate() {
                col.push(label.values[j]);
            }
            model_col.push(s);
        }
        if items.is_empty() {
            return Err(Error::EmptyDataset("no labeled validation segments".into()));
        }
        let scale = self.manifest.scale_max;
        let medians: Vec<f64> = (0..items.len())
            .map(|i| crate::stats::median(&[columns[0].1[i], columns[1].1[i], columns[2].1[i]]) / scale)
            .collect();
        let nvi = evaluate_predictions(&model_col.iter().map(|v| v / scale).collect::<Vec<_>>(), &medians, None)?;
        columns.push((MODEL_COLUMN.into(), model_col));
        let matrix = RaterMatrix::new(items, columns)?;

        mkdir(&self.dir.join("evaluation"))?;
        matrix.write_csv(&self.dir.join("evaluation").join("rater_matrix.csv"))?;
        let summary = EvaluationSummary {
            gesture: Some(gesture),
            distance: Some(distance),
            nvi: Some(nvi),
            icc_table: rater_replacement_table(&matrix, MODEL_COLUMN)?,
            median_fusion: if matrix.n_items() >= 3 {
                median_fusion_correlations(&matrix)?
            } else {
                Vec::new()
            },
        };
        summary.save(&self.evaluation_path())?;
        Ok(summary)
    }

    /// `Full`, plus `AdditionalOnly` when the external split has enough
    /// teachers and videos to correlate.
    pub fn default_variants(rows: &[ScoreRow]) -> Vec<Variant> {
        let mut v = vec![Variant::Full];
        let ext = rows.iter().filter(|r| r.split == Split::External);
        let teachers: BTreeSet<&str> = ext.clone().map(|r| r.teacher_id.as_str()).collect();
        let videos: BTreeSet<&str> = ext.map(|r| r.video_id.as_str()).collect();
        if teachers.len() >= MIN_UNITS && videos.len() >= MIN_UNITS {
            v.push(Variant::AdditionalOnly);
        }
        v
    }

    /// External validation for each variant; each report is written to
    /// `external/<variant>.json`.
    pub fn validate_external(&self, variants: &[Variant]) -> Result<Vec<CorrelationReport>> {
        let ext = &self.config.external;
        let paths: Vec<PathBuf> = [&ext.teacher_measures, &ext.video_measures]
            .into_iter()
            .flatten()
            .map(|p| self.config.resolve(p))
            .collect();
        if paths.is_empty() {
            return Err(Error::Config("no external measures configured".into()));
        }
        let mut all = paths.clone();
        all.push(self.scores_path());
        require(&all)?;
        let measures = paths
            .iter()
            .map(|p| ExternalMeasures::read_csv(p))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&ExternalMeasures> = measures.iter().collect();
        let present: BTreeSet<_> = measures
            .iter()
            .flat_map(|m| m.measures.iter().map(move |c| (m.level, c.clone())))
            .collect();
        let hypotheses: Vec<_> = default_hypotheses()
            .into_iter()
            .filter(|h| present.contains(&(h.level, h.measure.clone())))
            .collect();
        let rows = read_scores(&self.scores_path())?;
        mkdir(&self.dir.join("external"))?;
        let mut out = Vec::new();
        for &variant in variants {
            let report = external_validation(&rows, &refs, &hypotheses, variant)?;
            write_json(&self.external_path(variant), &report)?;
            out.push(report);
        }
        Ok(out)
    }

    /// Summary and histograms from the files the earlier stages wrote.
    pub fn report(&self) -> Result<ReportOutputs> {
        let external = [Variant::Full, Variant::AdditionalOnly]
            .into_iter()
            .map(|v| self.external_path(v))
            .filter(|p| p.exists())
            .collect();
        let inputs = ReportInputs {
            manifest: self.config.manifest_path(),
            config: self.dir.join("config.toml"),
            evaluation: self.evaluation_path(),
            external,
            metrics: [ModelKind::Gesture, ModelKind::Distance, ModelKind::Nvi]
                .iter()
                .map(|&k| self.metrics_path(k))
                .collect(),
        };
        render_report(&inputs, &self.report_dir())
    }

    /// Every stage in order. External validation runs only when measures
    /// are configured.
    pub fn run_all(&self, force: bool) -> Result<ReportOutputs> {
        let ex = self.extract(force)?;
        if let Some((id, msg)) = ex.failed.first() {
            return Err(Error::invalid(format!(
                "extraction failed for {} segment(s), first {id}: {msg}",
                ex.failed.len()
            )));
        }
        for kind in [ModelKind::Gesture, ModelKind::Distance, ModelKind::Nvi] {
            self.train(kind)?;
        }
        let rows = self.score()?;
        self.evaluate()?;
        if self.config.external.teacher_measures.is_some() || self.config.external.video_measures.is_some() {
            self.validate_external(&Self::default_variants(&rows))?;
        }
        self.report()
    }
}

/// Limits a video source to its first `n` frames.
struct Take<V> {
    inner: V,
    left: usize,
}

impl<V: VideoSource> VideoSource for Take<V> {
    fn fps(&self) -> f64 {
        self.inner.fps()
    }

    fn next_frame(&mut self) -> Result<Option<crate::perception::VideoFrame>> {
        if self.left == 0 {
            return Ok(None);
        }
        self.left -= 1;
        self.inner.next_frame()
    }
}

/// Reads `metrics/<kind>.json`.
pub fn load_metrics(path: &Path) -> Result<TrainingMetrics> {
    read_json(path)
}
