//! Blob-rendered classroom scenes with analytic ground truth.
//!
//! Geometry is expressed in normalized image coordinates (`0..1` on both
//! axes, origin top-left). The camera looks from the back of the room: the
//! teacher stands in the upper-middle band, students occupy the bottom rows.

use std::path::Path;
use std::sync::Arc;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::BBox;
use crate::error::{Error, Result};
use crate::fusion::FrameFeatures;
use crate::perception::video::VideoSource;
use crate::perception::{mask_bbox, Emotion, EmotionScores, Mask, SceneAnnotation, TrackInit, VideoFrame};

const BODY_HEIGHT: f32 = 0.30;
const BODY_WIDTH: f32 = 0.09;
const HEAD_RADIUS: f32 = 0.035;
const ARM_THICKNESS: f32 = 0.028;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StudentBlob {
    pub x: f32,
    /// Top of the blob.
    pub y: f32,
    pub radius: f32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Desk {
    pub x: f32,
    pub y: f32,
    pub width: f32,
    pub height: f32,
}

/// Depth along the floor: `far` at the top image row, `near` at the bottom.
/// Objects take the depth of the row they stand on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthLaw {
    pub near: f32,
    pub far: f32,
}

impl DepthLaw {
    pub fn at(&self, y: f32) -> f32 {
        self.far - (self.far - self.near) * y.clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneParams {
    pub seed: u64,
    pub n_frames: usize,
    pub width: usize,
    pub height: usize,
    /// Per-frame teacher position: horizontal center and feet row.
    pub teacher_path: Vec<[f32; 2]>,
    /// Per-frame arm spread in [0, 1].
    pub arm_spread: Vec<f32>,
    pub students: Vec<StudentBlob>,
    pub desks: Vec<Desk>,
    /// Per-frame expressed emotion; `None` means the face is not visible.
    pub emotion_tag: Vec<Option<Emotion>>,
    pub depth_plane: DepthLaw,
    /// RGB of the teacher's clothing.
    pub teacher_color: [f32; 3],
}

/// Gesture label as a function of arm spread.
pub fn gesture_label(arm_spread: f32) -> f32 {
    0.1 + 0.8 * arm_spread.clamp(0.0, 1.0)
}

/// Perceived distance label from the teacher–student gap (normalized rows)
/// and whether a desk sits between them.
pub fn distance_label(gap: f32, desk_between: bool) -> f32 {
    (0.1 + 1.6 * (gap - 0.1) + if desk_between { 0.25 } else { 0.0 }).clamp(0.0, 1.0)
}

impl SceneParams {
    /// Draws a plausible scene from `seed`.
    pub fn random(seed: u64, n_frames: usize, width: usize, height: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let student_top = rng.random_range(0.78..0.86);
        let n_students = rng.random_range(3..=6);
        let students = (0..n_students)
            .map(|k| {
                let slot = (k as f32 + 0.5) / n_students as f32;
                StudentBlob {
                    x: (slot + rng.random_range(-0.04..0.04)).clamp(0.05, 0.95),
                    y: student_top + rng.random_range(0.0..0.04),
                    radius: rng.random_range(0.05..0.07),
                }
            })
            .collect::<Vec<_>>();
        let desks = if rng.random_bool(0.5) {
            let x = rng.random_range(0.05..0.55);
            vec![Desk {
                x,
                y: student_top - 0.075,
                width: 0.4,
                height: 0.055,
            }]
        } else {
            Vec::new()
        };

        let y_max = student_top - 0.10;
        let mut x = rng.random_range(0.25..0.75);
        let mut y = rng.random_range(0.45..y_max);
        let step = Normal::new(0.0, 1.0).unwrap();
        let mut teacher_path = Vec::with_capacity(n_frames);
        for _ in 0..n_frames {
            teacher_path.push([x, y]);
            x = (x + 0.04 * step.sample(&mut rng) as f32).clamp(0.15, 0.85);
            y = (y + 0.025 * step.sample(&mut rng) as f32).clamp(0.45, y_max);
        }

        let base = rng.random_range(0.0..1.0f32);
        let phase = rng.random_range(0.0..std::f32::consts::TAU);
        let arm_spread = (0..n_frames)
            .map(|i| {
                let wave = 0.35 * (phase + 0.7 * i as f32).sin();
                (base + wave + 0.15 * step.sample(&mut rng) as f32).clamp(0.0, 1.0)
            })
            .collect();

        let dominant = match rng.random_range(0..10) {
            0..=3 => Emotion::Happiness,
            4..=7 => Emotion::Neutral,
            _ => Emotion::ALL[rng.random_range(0..8)],
        };
        let visibility = rng.random_range(0.3..1.0);
        let emotion_tag = (0..n_frames)
            .map(|_| {
                rng.random_bool(visibility).then(|| {
                    if rng.random_bool(0.8) {
                        dominant
                    } else {
                        Emotion::ALL[rng.random_range(0..8)]
                    }
                })
            })
            .collect();

        let palette = [
            [0.15, 0.25, 0.7],
            [0.7, 0.15, 0.15],
            [0.2, 0.55, 0.25],
            [0.35, 0.3, 0.4],
        ];
        SceneParams {
            seed,
            n_frames,
            width,
            height,
            teacher_path,
            arm_spread,
            students,
            desks,
            emotion_tag,
            depth_plane: DepthLaw { near: 2.0, far: 10.0 },
            teacher_color: palette[rng.random_range(0..palette.len())],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_frames;
        if n == 0 || self.width < 8 || self.height < 8 {
            return Err(Error::invalid("scene needs at least one frame and 8x8 pixels"));
        }
        if self.teacher_path.len() != n || self.arm_spread.len() != n || self.emotion_tag.len() != n {
            return Err(Error::invalid(format!(
                "per-frame scene sequences must all have length {n}"
            )));
        }
        if self.arm_spread.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::invalid("arm_spread must lie in [0, 1]"));
        }
        if self.teacher_path.iter().flatten().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::invalid("teacher positions must lie in [0, 1]"));
        }
        if !(self.depth_plane.near > 0.0 && self.depth_plane.far > self.depth_plane.near) {
            return Err(Error::invalid("depth plane needs 0 < near < far"));
        }
        Ok(())
    }

    fn student_top(&self) -> f32 {
        self.students.iter().map(|s| s.y).fold(1.0, f32::min)
    }

    fn desk_between(&self, frame: usize) -> bool {
        let [tx, ty] = self.teacher_path[frame];
        let top = self.student_top();
        self.desks.iter().any(|d| {
            d.y >= ty
                && d.y + d.height <= top + 1e-6
                && tx + BODY_WIDTH / 2.0 > d.x
                && tx - BODY_WIDTH / 2.0 < d.x + d.width
        })
    }

    /// Analytic labels for one frame (no rendering needed).
    pub fn frame_truth(&self, frame: usize) -> FrameFeatures {
        let [_, ty] = self.teacher_path[frame];
        let gap = if self.students.is_empty() {
            1.0
        } else {
            self.student_top() - ty
        };
        FrameFeatures {
            frame_index: frame,
            gesture: gesture_label(self.arm_spread[frame]),
            distance: distance_label(gap, self.desk_between(frame)),
            emotions: self.emotion_tag[frame].map(|e| tag_scores(self.seed, frame, e)),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let params: SceneParams = serde_json::from_str(&text)?;
        params.validate()?;
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?).map_err(|e| Error::io(path, e))
    }
}

/// Confidence vector for a tagged frame: peaked on the tag with a
/// per-frame deterministic peak height.
fn tag_scores(seed: u64, frame: usize, tag: Emotion) -> EmotionScores {
    let mut rng = frame_rng(seed ^ 0x5eed_e307, frame);
    EmotionScores::peaked(tag, rng.random_range(0.55..0.9))
}

fn frame_rng(seed: u64, frame: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(frame as u64);
    rng
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Owner {
    Background,
    Teacher,
    Desk,
    Student,
}

fn capsule_contains(p: (f32, f32), a: (f32, f32), b: (f32, f32), radius: f32) -> bool {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (cx, cy) = (a.0 + t * dx, a.1 + t * dy);
    (p.0 - cx).powi(2) + (p.1 - cy).powi(2) <= radius * radius
}

/// One rendered frame plus its labels.
pub struct RenderedFrame {
    pub frame: VideoFrame,
    pub truth: FrameFeatures,
}

/// Renders frame `i` of a scene. Pixel aspect is corrected so blobs stay
/// round on non-square canvases.
pub fn render_frame(params: &SceneParams, i: usize) -> RenderedFrame {
    let (w, h) = (params.width, params.height);
    let aspect = w as f32 / h as f32;
    let mut rng = frame_rng(params.seed, i);
    let [tx, ty] = params.teacher_path[i];
    let spread = params.arm_spread[i];

    let body_top = ty - BODY_HEIGHT;
    let head = (tx, body_top - HEAD_RADIUS);
    let shoulder_y = body_top + 0.03;
    let angle = spread * 100f32.to_radians();
    let arm_len = 0.09 + 0.10 * spread;
    let reach = (arm_len * angle.sin(), arm_len * angle.cos());
    let left = (
        (tx - BODY_WIDTH / 2.0, shoulder_y),
        (tx - BODY_WIDTH / 2.0 - reach.0, shoulder_y + reach.1),
    );
    let right = (
        (tx + BODY_WIDTH / 2.0, shoulder_y),
        (tx + BODY_WIDTH / 2.0 + reach.0, shoulder_y + reach.1),
    );

    let skin = [0.9, 0.75, 0.62];
    let mut rgb = Array3::<f32>::zeros((h, w, 3));
    let mut depth = Array2::<f32>::zeros((h, w));
    let mut owner = Array2::from_elem((h, w), Owner::Background);

    for y in 0..h {
        for x in 0..w {
            let p = ((x as f32 + 0.5) / w as f32, (y as f32 + 0.5) / h as f32);
            // x measured in units of image height for circular shapes
            let pa = (p.0 * aspect, p.1);
            let mut color = if p.1 < 0.4 {
                if (0.2..0.8).contains(&p.0) && (0.05..0.3).contains(&p.1) {
                    [0.12, 0.3, 0.2]
                } else {
                    [0.85, 0.82, 0.75]
                }
            } else {
                [0.55, 0.5, 0.45]
            };
            let mut d = params.depth_plane.at(p.1.max(0.4));
            let mut who = Owner::Background;

            let in_body = (p.0 - tx).abs() <= BODY_WIDTH / 2.0 && (body_top..=ty).contains(&p.1);
            let in_head = (pa.0 - head.0 * aspect).powi(2) + (pa.1 - head.1).powi(2) <= HEAD_RADIUS.powi(2);
            let scale = |q: (f32, f32)| (q.0 * aspect, q.1);
            let in_arm = capsule_contains(pa, scale(left.0), scale(left.1), ARM_THICKNESS / 2.0)
                || capsule_contains(pa, scale(right.0), scale(right.1), ARM_THICKNESS / 2.0);
            if in_body || in_head || in_arm {
                color = if in_body { params.teacher_color } else { skin };
                d = params.depth_plane.at(ty);
                who = Owner::Teacher;
            }
            for desk in &params.desks {
                if (desk.x..desk.x + desk.width).contains(&p.0) && (desk.y..desk.y + desk.height).contains(&p.1) {
                    color = [0.5, 0.35, 0.2];
                    d = params.depth_plane.at(desk.y + desk.height);
                    who = Owner::Desk;
                }
            }
            for (k, s) in params.students.iter().enumerate() {
                let c = (s.x * aspect, s.y + s.radius);
                if (pa.0 - c.0).powi(2) + (pa.1 - c.1).powi(2) <= s.radius.powi(2)
                    || (p.1 >= c.1 && (pa.0 - c.0).abs() <= s.radius)
                {
                    let shade = 0.3 + 0.1 * (k % 4) as f32;
                    color = [shade, 0.45, 0.6 - 0.1 * (k % 3) as f32];
                    d = params.depth_plane.at(1.0);
                    who = Owner::Student;
                }
            }

            let noise: f32 = rng.random_range(-0.03..0.03);
            for c in 0..3 {
                rgb[[y, x, c]] = (color[c] + noise).clamp(0.0, 1.0);
            }
            depth[[y, x]] = d;
            owner[[y, x]] = who;
        }
    }

    let teacher_mask: Mask = owner.mapv(|o| o == Owner::Teacher);
    let student_mask: Mask = owner.mapv(|o| o == Owner::Student);
    let truth = params.frame_truth(i);
    let face_box = {
        let x0 = ((head.0 - HEAD_RADIUS / aspect) * w as f32).floor().max(0.0) as u32;
        let y0 = ((head.1 - HEAD_RADIUS) * h as f32).floor().max(0.0) as u32;
        let side_w = ((2.0 * HEAD_RADIUS / aspect) * w as f32).ceil().max(1.0) as u32;
        let side_h = ((2.0 * HEAD_RADIUS) * h as f32).ceil().max(1.0) as u32;
        BBox {
            x: x0,
            y: y0,
            width: side_w,
            height: side_h,
        }
    };
    let annotation = SceneAnnotation {
        teacher_mask,
        student_mask,
        depth,
        face_box: truth.emotions.is_some().then_some(face_box),
        emotions: truth.emotions,
    };
    RenderedFrame {
        frame: VideoFrame {
            index: i,
            rgb,
            annotation: Some(Arc::new(annotation)),
        },
        truth,
    }
}

/// A fully rendered scene.
pub struct SyntheticScene {
    pub frames: Vec<VideoFrame>,
    pub truth: Vec<FrameFeatures>,
    pub init: TrackInit,
}

impl SyntheticScene {
    pub fn masks(&self, i: usize) -> (&Mask, &Mask) {
        let a = self.frames[i].annotation.as_ref().expect("synthetic frame");
        (&a.teacher_mask, &a.student_mask)
    }

    pub fn depth(&self, i: usize) -> &Array2<f32> {
        &self.frames[i].annotation.as_ref().expect("synthetic frame").depth
    }
}

pub fn generate_scene(params: &SceneParams) -> Result<SyntheticScene> {
    params.validate()?;
    let (frames, truth): (Vec<_>, Vec<_>) = (0..params.n_frames)
        .map(|i| {
            let r = render_frame(params, i);
            (r.frame, r.truth)
        })
        .unzip();
    let init = teacher_init(&frames[0])?;
    Ok(SyntheticScene { frames, truth, init })
}

/// The "manually marked" first-frame teacher box, taken from the annotation.
pub fn teacher_init(first: &VideoFrame) -> Result<TrackInit> {
    let mask = &first
        .annotation
        .as_ref()
        .ok_or_else(|| Error::invalid("frame is not synthetic"))?
        .teacher_mask;
    let region = mask_bbox(mask).ok_or_else(|| Error::invalid("teacher is not visible in the first frame"))?;
    Ok(TrackInit::new(region))
}

/// Lazily renders a scene as a video source.
pub struct SceneVideo {
    params: SceneParams,
    fps: f64,
    next: usize,
}

impl SceneVideo {
    pub fn new(params: SceneParams, fps: f64) -> Result<Self> {
        params.validate()?;
        Ok(SceneVideo { params, fps, next: 0 })
    }

    pub fn params(&self) -> &SceneParams {
        &self.params
    }
}

impl VideoSource for SceneVideo {
    fn fps(&self) -> f64 {
        self.fps
    }

    fn next_frame(&mut self) -> Result<Option<VideoFrame>> {
        if self.next >= self.params.n_frames {
            return Ok(None);
        }
        let frame = render_frame(&self.params, self.next).frame;
        self.next += 1;
        Ok(Some(frame))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(seed: u64) -> SceneParams {
        SceneParams::random(seed, 6, 48, 40)
    }

    #[test]
    fn zero_spread_gives_floor_gesture() {
        let mut p = params(3);
        p.arm_spread = vec![0.0; p.n_frames];
        let scene = generate_scene(&p).unwrap();
        assert!(scene.truth.iter().all(|t| t.gesture == gesture_label(0.0)));
    }

    #[test]
    fn larger_spread_gives_larger_labels() {
        let mut a = params(4);
        a.arm_spread = vec![0.2; a.n_frames];
        let mut b = a.clone();
        b.arm_spread = vec![0.8; b.n_frames];
        let (ta, tb) = (generate_scene(&a).unwrap(), generate_scene(&b).unwrap());
        assert!(ta.truth.iter().zip(&tb.truth).all(|(x, y)| y.gesture > x.gesture));
        // the wider pose also has more teacher pixels
        let area = |s: &SyntheticScene| s.masks(0).0.iter().filter(|v| **v).count();
        assert!(area(&tb) > area(&ta));
    }

    #[test]
    fn same_seed_same_pixels() {
        let (a, b) = (generate_scene(&params(9)).unwrap(), generate_scene(&params(9)).unwrap());
        for (fa, fb) in a.frames.iter().zip(&b.frames) {
            assert_eq!(fa.rgb, fb.rgb);
            assert_eq!(fa.annotation, fb.annotation);
        }
        let c = generate_scene(&params(10)).unwrap();
        assert_ne!(a.frames[0].rgb, c.frames[0].rgb);
    }

    #[test]
    fn masks_are_disjoint_and_teacher_visible() {
        for seed in 0..10 {
            let scene = generate_scene(&params(seed)).unwrap();
            for i in 0..scene.frames.len() {
                let (t, s) = scene.masks(i);
                assert!(t.iter().any(|v| *v));
                assert!(t.iter().zip(s).all(|(a, b)| !(a & b)));
            }
        }
    }

    #[test]
    fn distance_grows_with_gap_and_desk() {
        assert!(distance_label(0.3, false) > distance_label(0.15, false));
        assert!(distance_label(0.2, true) > distance_label(0.2, false));
    }

    #[test]
    fn invalid_params_are_rejected() {
        let mut p = params(1);
        p.arm_spread.pop();
        assert!(generate_scene(&p).is_err());
        let mut p = params(1);
        p.arm_spread[0] = 1.5;
        assert!(generate_scene(&p).is_err());
    }

    #[test]
    fn scene_video_matches_generate() {
        let p = params(5);
        let scene = generate_scene(&p).unwrap();
        let mut video = SceneVideo::new(p, 1.0).unwrap();
        let mut n = 0;
        while let Some(f) = video.next_frame().unwrap() {
            assert_eq!(f.rgb, scene.frames[f.index].rgb);
            n += 1;
        }
        assert_eq!(n, scene.frames.len());
    }
}
