//! Deterministic synthetic scenes, rater panels and datasets.

pub mod dataset;
pub mod raters;
pub mod scene;

pub use dataset::{
    external_fixture, linear_fusion_set, nvi_truth, write_synthetic_dataset, SynthDataset, SynthDatasetParams,
    MEASURE_COLUMNS, RATER_IDS, SCENE_SUFFIX,
};
pub use raters::{draw_true_scores, simulate_raters, RaterPanelParams};
pub use scene::{generate_scene, render_frame, teacher_init, SceneParams, SceneVideo, SyntheticScene};
