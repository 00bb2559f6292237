//! Per-segment observation files (`*.nvobs`), version 1.
//!
//! All integers are little-endian. Header:
//!
//! | bytes | field |
//! |-------|-------|
//! | 4 | magic `NVOB` |
//! | 2 | format version (1) |
//! | 2 | reserved, 0 |
//! | 4 | width |
//! | 4 | height |
//! | 4 | frame count |
//! | 8 | fps, f64 |
//! | 2 | segment id length `L` |
//! | L | segment id, UTF-8 |
//!
//! followed by fixed-size frame records:
//!
//! | bytes | field |
//! |-------|-------|
//! | 4 | frame index |
//! | H·W·3 | RGB, u8, row-major interleaved, `round(v * 255)` |
//! | ⌈H·W/8⌉ | teacher mask, bit-packed row-major, LSB first |
//! | ⌈H·W/8⌉ | student mask, same packing |
//! | H·W·2 | depth, u16, `round(v * 65535)` |
//! | 1 | 1 if emotions present, else 0 |
//! | 32 | 8 × f32 emotion confidences (zero when absent) |

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};

use super::{EmotionScores, FrameObservation};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"NVOB";
pub const FORMAT_VERSION: u16 = 1;
pub const EXTENSION: &str = "nvobs";
const FRAME_COUNT_OFFSET: u64 = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct ObsHeader {
    pub segment_id: String,
    pub width: usize,
    pub height: usize,
    pub frame_count: usize,
    pub fps: f64,
}

impl ObsHeader {
    fn record_len(&self) -> usize {
        let px = self.width * self.height;
        4 + px * 3 + 2 * px.div_ceil(8) + px * 2 + 1 + 32
    }
}

fn bad(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::invalid(format!("{}: {msg}", path.display()))
}

/// Streams observations into `<path>.tmp`, renamed to `path` on [`finish`].
///
/// [`finish`]: ObservationWriter::finish
pub struct ObservationWriter {
    header: ObsHeader,
    tmp: PathBuf,
    path: PathBuf,
    out: BufWriter<File>,
}

impl ObservationWriter {
    pub fn create(path: impl AsRef<Path>, segment_id: &str, width: usize, height: usize, fps: f64) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let tmp = path.with_extension(format!("{EXTENSION}.tmp"));
        let file = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let mut out = BufWriter::new(file);
        let header = ObsHeader {
            segment_id: segment_id.to_string(),
            width,
            height,
            frame_count: 0,
            fps,
        };
        let id = segment_id.as_bytes();
        let mut buf = Vec::with_capacity(32 + id.len());
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        buf.extend_from_slice(&0u16.to_le_bytes());
        buf.extend_from_slice(&(width as u32).to_le_bytes());
        buf.extend_from_slice(&(height as u32).to_le_bytes());
        buf.extend_from_slice(&0u32.to_le_bytes());
        buf.extend_from_slice(&fps.to_le_bytes());
        buf.extend_from_slice(&(id.len() as u16).to_le_bytes());
        buf.extend_from_slice(id);
        out.write_all(&buf).map_err(|e| Error::io(&tmp, e))?;
        Ok(ObservationWriter { header, tmp, path, out })
    }

    pub fn write(&mut self, obs: &FrameObservation) -> Result<()> {
        if obs.dims() != (self.header.height, self.header.width) {
            return Err(bad(
                &self.path,
                format!("frame {} has shape {:?}", obs.frame_index, obs.dims()),
            ));
        }
        let mut buf = Vec::with_capacity(self.header.record_len());
        buf.extend_from_slice(&(obs.frame_index as u32).to_le_bytes());
        buf.extend(obs.rgb.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        pack_bits(obs.teacher_mask.iter().copied(), &mut buf);
        pack_bits(obs.student_mask.iter().copied(), &mut buf);
        for d in &obs.depth {
            buf.extend_from_slice(&((d.clamp(0.0, 1.0) * 65535.0).round() as u16).to_le_bytes());
        }
        match &obs.emotions {
            Some(e) => {
                buf.push(1);
                e.values().iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes()));
            }
            None => {
                buf.push(0);
                buf.extend_from_slice(&[0u8; 32]);
            }
        }
        debug_assert_eq!(buf.len(), self.header.record_len());
        self.out.write_all(&buf).map_err(|e| Error::io(&self.tmp, e))?;
        self.header.frame_count += 1;
        Ok(())
    }

    pub fn finish(self) -> Result<ObsHeader> {
        let ObservationWriter { header, tmp, path, out } = self;
        let mut file = out.into_inner().map_err(|e| Error::io(&tmp, e.into_error()))?;
        file.seek(SeekFrom::Start(FRAME_COUNT_OFFSET))
            .and_then(|_| file.write_all(&(header.frame_count as u32).to_le_bytes()))
            .and_then(|_| file.sync_all())
            .map_err(|e| Error::io(&tmp, e))?;
        drop(file);
        std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
        Ok(header)
    }
}

fn pack_bits(bits: impl Iterator<Item = bool>, out: &mut Vec<u8>) {
    let mut byte = 0u8;
    let mut n = 0;
    for b in bits {
        byte |= (b as u8) << n;
        n += 1;
        if n == 8 {
            out.push(byte);
            byte = 0;
            n = 0;
        }
    }
    if n > 0 {
        out.push(byte);
    }
}

pub struct ObservationReader {
    path: PathBuf,
    header: ObsHeader,
    data_start: u64,
    input: BufReader<File>,
}

impl ObservationReader {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
        let mut input = BufReader::new(file);
        let mut fixed = [0u8; 30];
        input.read_exact(&mut fixed).map_err(|e| Error::io(&path, e))?;
        if &fixed[0..4] != MAGIC {
            return Err(bad(&path, "not an observation file"));
        }
        let version = u16::from_le_bytes([fixed[4], fixed[5]]);
        if version != FORMAT_VERSION {
            return Err(bad(&path, format!("unsupported version {version}")));
        }
        let u32_at = |o: usize| u32::from_le_bytes(fixed[o..o + 4].try_into().unwrap()) as usize;
        let fps = f64::from_le_bytes(fixed[20..28].try_into().unwrap());
        let id_len = u16::from_le_bytes([fixed[28], fixed[29]]) as usize;
        let mut id = vec![0u8; id_len];
        input.read_exact(&mut id).map_err(|e| Error::io(&path, e))?;
        let segment_id = String::from_utf8(id).map_err(|_| bad(&path, "segment id is not UTF-8"))?;
        let header = ObsHeader {
            segment_id,
            width: u32_at(8),
            height: u32_at(12),
            frame_count: u32_at(16),
            fps,
        };
        let data_start = 30 + id_len as u64;
        let expected = data_start + (header.record_len() * header.frame_count) as u64;
        let actual = input.get_ref().metadata().map_err(|e| Error::io(&path, e))?.len();
        if actual != expected {
            return Err(bad(&path, format!("truncated: {actual} bytes, expected {expected}")));
        }
        Ok(ObservationReader {
            path,
            header,
            data_start,
            input,
        })
    }

    pub fn header(&self) -> &ObsHeader {
        &self.header
    }

    /// Reads the `i`-th stored record (not necessarily `frame_index == i`).
    pub fn read(&mut self, i: usize) -> Result<FrameObservation> {
        if i >= self.header.frame_count {
            return Err(bad(&self.path, format!("record {i} out of range")));
        }
        let len = self.header.record_len();
        let offset = self.data_start + (i * len) as u64;
        let mut buf = vec![0u8; len];
        self.input
            .seek(SeekFrom::Start(offset))
            .and_then(|_| self.input.read_exact(&mut buf))
            .map_err(|e| Error::io(&self.path, e))?;
        self.decode(&buf)
    }

    pub fn read_all(&mut self) -> Result<Vec<FrameObservation>> {
        (0..self.header.frame_count).map(|i| self.read(i)).collect()
    }

    fn decode(&self, buf: &[u8]) -> Result<FrameObservation> {
        let (h, w) = (self.header.height, self.header.width);
        let px = h * w;
        let mask_len = px.div_ceil(8);
        let frame_index = u32::from_le_bytes(buf[0..4].try_into().unwrap()) as usize;
        let mut at = 4;
        let rgb = Array3::from_shape_vec(
            (h, w, 3),
            buf[at..at + px * 3].iter().map(|b| *b as f32 / 255.0).collect(),
        )
        .expect("shape");
        at += px * 3;
        let unpack = |bytes: &[u8]| {
            Array2::from_shape_fn((h, w), |(y, x)| {
                let i = y * w + x;
                bytes[i / 8] >> (i % 8) & 1 == 1
            })
        };
        let teacher_mask = unpack(&buf[at..at + mask_len]);
        at += mask_len;
        let student_mask = unpack(&buf[at..at + mask_len]);
        at += mask_len;
        let depth = Array2::from_shape_vec(
            (h, w),
            buf[at..at + px * 2]
                .chunks_exact(2)
                .map(|c| u16::from_le_bytes([c[0], c[1]]) as f32 / 65535.0)
                .collect(),
        )
        .expect("shape");
        at += px * 2;
        let emotions = match buf[at] {
            0 => None,
            1 => {
                let mut v = [0f32; 8];
                for (k, c) in buf[at + 1..at + 33].chunks_exact(4).enumerate() {
                    v[k] = f32::from_le_bytes(c.try_into().unwrap());
                }
                Some(EmotionScores::new(v).map_err(|e| bad(&self.path, e))?)
            }
            flag => return Err(bad(&self.path, format!("bad emotion flag {flag}"))),
        };
        Ok(FrameObservation {
            frame_index,
            rgb,
            teacher_mask,
            student_mask,
            depth,
            emotions,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::perception::Emotion;
    use proptest::prelude::*;

    fn observation(seed: u64, h: usize, w: usize, emotions: bool) -> FrameObservation {
        let v = |i: usize, k: u64| (((i as u64 * 2654435761 + seed * 97 + k) % 1000) as f32) / 999.0;
        let teacher = Array2::from_shape_fn((h, w), |(y, x)| v(y * w + x, 1) > 0.7);
        let students = Array2::from_shape_fn((h, w), |(y, x)| v(y * w + x, 1) < 0.2);
        FrameObservation {
            frame_index: seed as usize,
            rgb: Array3::from_shape_fn((h, w, 3), |(y, x, c)| v(y * w + x, 3 + c as u64)),
            teacher_mask: teacher,
            student_mask: students,
            depth: Array2::from_shape_fn((h, w), |(y, x)| v(y * w + x, 11)),
            emotions: emotions.then(|| EmotionScores::peaked(Emotion::Sadness, 0.6)),
        }
    }

    fn quantized(obs: &FrameObservation) -> FrameObservation {
        let mut q = obs.clone();
        q.rgb.mapv_inplace(|v| (v * 255.0).round() / 255.0);
        q.depth.mapv_inplace(|v| (v * 65535.0).round() as u16 as f32 / 65535.0);
        q
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn round_trip_up_to_quantization(h in 1usize..9, w in 1usize..9, n in 0usize..4, seed in 0u64..1000) {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("seg.nvobs");
            let frames: Vec<_> = (0..n).map(|i| observation(seed + i as u64, h, w, i % 2 == 0)).collect();
            let mut writer = ObservationWriter::create(&path, "seg-7", w, h, 25.0).unwrap();
            for f in &frames {
                writer.write(f).unwrap();
            }
            let header = writer.finish().unwrap();
            prop_assert!(!path.with_extension("nvobs.tmp").exists());

            let mut reader = ObservationReader::open(&path).unwrap();
            prop_assert_eq!(reader.header(), &header);
            prop_assert_eq!(reader.header().frame_count, n);
            let back = reader.read_all().unwrap();
            for (orig, got) in frames.iter().zip(&back) {
                let q = quantized(orig);
                prop_assert_eq!(&q.teacher_mask, &got.teacher_mask);
                prop_assert_eq!(&q.student_mask, &got.student_mask);
                prop_assert_eq!(q.emotions, got.emotions);
                prop_assert!(q.rgb.iter().zip(&got.rgb).all(|(a, b)| (a - b).abs() < 1e-6));
                prop_assert!(q.depth.iter().zip(&got.depth).all(|(a, b)| (a - b).abs() < 1e-6));
            }
        }
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("seg.nvobs");
        let mut writer = ObservationWriter::create(&path, "s", 3, 2, 1.0).unwrap();
        writer.write(&observation(1, 2, 3, true)).unwrap();
        writer.finish().unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        assert!(ObservationReader::open(&path).is_err());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut writer = ObservationWriter::create(dir.path().join("x.nvobs"), "s", 3, 2, 1.0).unwrap();
        assert!(writer.write(&observation(1, 4, 4, false)).is_err());
    }
}
