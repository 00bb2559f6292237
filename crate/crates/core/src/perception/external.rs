//! Adapters that bridge to perception models running in a child process.
//!
//! Each adapter keeps one long-lived process and talks to it over
//! stdin/stdout. A request is one JSON line followed by the frame as
//! `height * width * 3` interleaved RGB bytes; a response is one JSON line
//! (`{"ok": true, ...}` or `{"ok": false, "error": "..."}`) optionally
//! followed by a binary payload. The full protocol is in
//! `docs/backend-protocol.md`.

use std::io::{BufRead, BufReader, Read, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};

use ndarray::Array2;
use serde_json::{json, Value};

use super::backend::{BackendResult, DepthBackend, EmotionBackend, SegmentationBackend};
use super::{MaskPair, VideoFrame};
use crate::data::BBox;
use crate::error::{Error, Result};

struct AdapterProcess {
    program: String,
    child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
}

impl AdapterProcess {
    fn spawn(command: &[String]) -> Result<Self> {
        let (program, args) = command
            .split_first()
            .ok_or_else(|| Error::Config("external backend command is empty".into()))?;
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::Config(format!("cannot start backend {program:?}: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        Ok(AdapterProcess {
            program: program.clone(),
            child,
            stdin,
            stdout,
        })
    }

    fn request(&mut self, header: Value, frame: &VideoFrame) -> BackendResult<Value> {
        let io = |e: std::io::Error| format!("{}: {e}", self.program);
        let mut line = serde_json::to_vec(&header).expect("json header");
        line.push(b'\n');
        self.stdin.write_all(&line).map_err(io)?;
        self.stdin.write_all(&rgb_bytes(frame)).map_err(io)?;
        self.stdin.flush().map_err(io)?;

        let mut reply = String::new();
        let n = self.stdout.read_line(&mut reply).map_err(io)?;
        if n == 0 {
            return Err(format!("{} closed its output", self.program));
        }
        let value: Value = serde_json::from_str(&reply).map_err(|e| format!("{}: bad reply: {e}", self.program))?;
        if value.get("ok").and_then(Value::as_bool) != Some(true) {
            let msg = value
                .get("error")
                .and_then(Value::as_str)
                .unwrap_or("unspecified failure");
            return Err(format!("{}: {msg}", self.program));
        }
        Ok(value)
    }

    fn read_payload(&mut self, len: usize) -> BackendResult<Vec<u8>> {
        let mut buf = vec![0u8; len];
        self.stdout
            .read_exact(&mut buf)
            .map_err(|e| format!("{}: short payload: {e}", self.program))?;
        Ok(buf)
    }
}

impl Drop for AdapterProcess {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn rgb_bytes(frame: &VideoFrame) -> Vec<u8> {
    frame
        .rgb
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

fn frame_header(op: &str, frame: &VideoFrame) -> Value {
    json!({
        "op": op,
        "frame_index": frame.index,
        "width": frame.width(),
        "height": frame.height(),
    })
}

fn region_json(r: BBox) -> Value {
    json!([r.x, r.y, r.width, r.height])
}

pub struct ExternalSegmentation(AdapterProcess);

impl ExternalSegmentation {
    pub fn spawn(command: &[String]) -> Result<Self> {
        AdapterProcess::spawn(command).map(ExternalSegmentation)
    }
}

impl SegmentationBackend for ExternalSegmentation {
    fn start(&mut self, first: &VideoFrame, region: BBox) -> BackendResult<()> {
        let mut header = frame_header("init", first);
        header["region"] = region_json(region);
        self.0.request(header, first).map(|_| ())
    }

    /// Reply payload: one label byte per pixel, 0 background, 1 teacher,
    /// 2 student.
    fn track(&mut self, frame: &VideoFrame) -> BackendResult<MaskPair> {
        self.0.request(frame_header("track", frame), frame)?;
        let (h, w) = (frame.height(), frame.width());
        let labels = self.0.read_payload(h * w)?;
        let teacher = Array2::from_shape_fn((h, w), |(y, x)| labels[y * w + x] == 1);
        let students = Array2::from_shape_fn((h, w), |(y, x)| labels[y * w + x] == 2);
        Ok(MaskPair { teacher, students })
    }
}

pub struct ExternalDepth(AdapterProcess);

impl ExternalDepth {
    pub fn spawn(command: &[String]) -> Result<Self> {
        AdapterProcess::spawn(command).map(ExternalDepth)
    }
}

impl DepthBackend for ExternalDepth {
    /// Reply payload: `height * width` little-endian f32.
    fn estimate(&mut self, frame: &VideoFrame) -> BackendResult<Array2<f32>> {
        self.0.request(frame_header("depth", frame), frame)?;
        let (h, w) = (frame.height(), frame.width());
        let bytes = self.0.read_payload(h * w * 4)?;
        let values: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Array2::from_shape_vec((h, w), values).map_err(|e| e.to_string())
    }
}

pub struct ExternalEmotion(AdapterProcess);

impl ExternalEmotion {
    pub fn spawn(command: &[String]) -> Result<Self> {
        AdapterProcess::spawn(command).map(ExternalEmotion)
    }
}

impl EmotionBackend for ExternalEmotion {
    /// Reply: `{"ok": true, "face": false}` or
    /// `{"ok": true, "face": true, "confidences": [8 numbers]}`.
    fn detect(&mut self, frame: &VideoFrame, region: BBox) -> BackendResult<Option<[f32; 8]>> {
        let mut header = frame_header("emotion", frame);
        header["region"] = region_json(region);
        let reply = self.0.request(header, frame)?;
        if reply.get("face").and_then(Value::as_bool) != Some(true) {
            return Ok(None);
        }
        let values: Vec<f32> = reply
            .get("confidences")
            .and_then(Value::as_array)
            .ok_or("reply lacks confidences")?
            .iter()
            .map(|v| v.as_f64().map(|f| f as f32).ok_or("non-numeric confidence"))
            .collect::<std::result::Result<_, _>>()?;
        let arr: [f32; 8] = values
            .try_into()
            .map_err(|v: Vec<f32>| format!("expected 8 confidences, got {}", v.len()))?;
        Ok(Some(arr))
    }
}
