//! Frame sources. Decoding of container formats is left to external tools;
//! the pipeline consumes image sequences (one file per frame) or rendered
//! synthetic scenes.

use std::path::{Path, PathBuf};

use ndarray::Array3;

use super::VideoFrame;
use crate::error::{Error, Result, Stage};

pub trait VideoSource {
    fn fps(&self) -> f64;
    fn next_frame(&mut self) -> Result<Option<VideoFrame>>;
}

/// Frames stored as numbered image files in a directory, sorted by name.
pub struct ImageSequence {
    files: Vec<PathBuf>,
    fps: f64,
    cursor: usize,
    end: usize,
}

impl ImageSequence {
    pub fn open(dir: impl AsRef<Path>, fps: f64) -> Result<Self> {
        let dir = dir.as_ref();
        let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|entry| entry.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
            })
            .collect();
        files.sort();
        let end = files.len();
        Ok(ImageSequence {
            files,
            fps,
            cursor: 0,
            end,
        })
    }

    /// Restricts iteration to `[start_s, start_s + duration_s)`.
    pub fn window(mut self, start_s: f64, duration_s: f64) -> Result<Self> {
        let first = (start_s * self.fps).round() as usize;
        let count = (duration_s * self.fps).round() as usize;
        if first + count > self.files.len() {
            return Err(Error::Pipeline {
                stage: Stage::Decode,
                frame_index: first,
                message: format!(
                    "segment needs frames {first}..{} but only {} exist",
                    first + count,
                    self.files.len()
                ),
            });
        }
        self.cursor = first;
        self.end = first + count;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.end - self.cursor
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl VideoSource for ImageSequence {
    fn fps(&self) -> f64 {
        self.fps
    }

    fn next_frame(&mut self) -> Result<Option<VideoFrame>> {
        if self.cursor >= self.end {
            return Ok(None);
        }
        let index = self.cursor;
        self.cursor += 1;
        let rgb = load_rgb(&self.files[index]).map_err(|e| Error::Pipeline {
            stage: Stage::Decode,
            frame_index: index,
            message: e.to_string(),
        })?;
        Ok(Some(VideoFrame::new(index, rgb)))
    }
}

/// In-memory frames, mostly for tests and adapters.
pub struct FrameVec {
    frames: std::vec::IntoIter<VideoFrame>,
    fps: f64,
}

impl FrameVec {
    pub fn new(frames: Vec<VideoFrame>, fps: f64) -> Self {
        FrameVec {
            frames: frames.into_iter(),
            fps,
        }
    }
}

impl VideoSource for FrameVec {
    fn fps(&self) -> f64 {
        self.fps
    }

    fn next_frame(&mut self) -> Result<Option<VideoFrame>> {
        Ok(self.frames.next())
    }
}

pub fn load_rgb(path: &Path) -> Result<Array3<f32>> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
        img.get_pixel(x as u32, y as u32)[c] as f32 / 255.0
    }))
}

pub fn save_rgb(rgb: &Array3<f32>, path: &Path) -> Result<()> {
    let (h, w, _) = rgb.dim();
    let img = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c| (rgb[[y as usize, x as usize, c]].clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    });
    img.save(path)?;
    Ok(())
}
