//! Feature-matrix files: the inference and calibration input format.
//!
//! Binary layout, little-endian: `u32` frame count, `u32` feature width,
//! `f32` frame duration in seconds, then the frames as row-major `f32`.

use std::io::{self, Write};
use std::path::Path;

use thiserror::Error;

pub const DEFAULT_FRAME_DURATION: f32 = 0.01;
const HEADER_LEN: usize = 12;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error(transparent)]
    Io(#[from] io::Error),

    #[error("feature file: {0}")]
    Format(String),

    #[error("non-finite feature at frame {frame}, column {col}")]
    NonFinite { frame: usize, col: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: Option<String>,
    pub frames: Vec<Vec<f32>>,
    pub frame_duration: f32,
}

impl Utterance {
    pub fn new(frames: Vec<Vec<f32>>, frame_duration: f32) -> Result<Self, FeatureError> {
        let u = Self { id: None, frames, frame_duration };
        u.validate()?;
        Ok(u)
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = Some(id.into());
        self
    }

    pub fn width(&self) -> usize {
        self.frames.first().map_or(0, Vec::len)
    }

    /// Audio length in seconds.
    pub fn duration(&self) -> f64 {
        self.frames.len() as f64 * self.frame_duration as f64
    }

    pub fn validate(&self) -> Result<(), FeatureError> {
        if !(self.frame_duration.is_finite() && self.frame_duration > 0.0) {
            return Err(FeatureError::Format(format!("frame duration must be positive, got {}", self.frame_duration)));
        }
        let w = self.width();
        for (t, f) in self.frames.iter().enumerate() {
            if f.len() != w {
                return Err(FeatureError::Format(format!("frame {t} has {} values, expected {w}", f.len())));
            }
            if let Some(col) = f.iter().position(|v| !v.is_finite()) {
                return Err(FeatureError::NonFinite { frame: t, col });
            }
        }
        Ok(())
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<(), FeatureError> {
        let frames = u32::try_from(self.frames.len()).map_err(|_| FeatureError::Format("too many frames".into()))?;
        w.write_all(&frames.to_le_bytes())?;
        w.write_all(&(self.width() as u32).to_le_bytes())?;
        w.write_all(&self.frame_duration.to_le_bytes())?;
        let mut buf = Vec::with_capacity(4 * self.width());
        for f in &self.frames {
            buf.clear();
            for v in f {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self, FeatureError> {
        if b.len() < HEADER_LEN {
            return Err(FeatureError::Format(format!("{} bytes is shorter than the header", b.len())));
        }
        let word = |i: usize| [b[i], b[i + 1], b[i + 2], b[i + 3]];
        let frames = u32::from_le_bytes(word(0)) as usize;
        let width = u32::from_le_bytes(word(4)) as usize;
        let frame_duration = f32::from_le_bytes(word(8));
        let expected = frames
            .checked_mul(width)
            .and_then(|n| n.checked_mul(4))
            .and_then(|n| n.checked_add(HEADER_LEN))
            .ok_or_else(|| FeatureError::Format("header dimensions overflow".into()))?;
        if b.len() != expected {
            return Err(FeatureError::Format(format!(
                "{frames} frames of width {width} need {expected} bytes, file has {}",
                b.len()
            )));
        }
        let body = &b[HEADER_LEN..];
        let rows = if width == 0 {
            vec![Vec::new(); frames]
        } else {
            body.chunks_exact(4 * width)
                .map(|row| row.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
                .collect()
        };
        Self::new(rows, frame_duration)
    }

    pub fn load(path: &Path) -> Result<Self, FeatureError> {
        let u = Self::from_bytes(&std::fs::read(path)?)?;
        Ok(u.with_id(path.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned())))
    }

    pub fn save(&self, path: &Path) -> Result<(), FeatureError> {
        self.write(io::BufWriter::new(std::fs::File::create(path)?))
    }

    /// Parses whitespace-separated rows, one frame per line. Blank lines and
    /// lines starting with `#` are ignored.
    pub fn from_text(text: &str, frame_duration: f32) -> Result<Self, FeatureError> {
        let mut frames = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let row = line
                .split_whitespace()
                .map(|tok| {
                    tok.parse::<f32>()
                        .map_err(|_| FeatureError::Format(format!("line {}: cannot parse {tok:?}", n + 1)))
                })
                .collect::<Result<Vec<_>, _>>()?;
            frames.push(row);
        }
        Self::new(frames, frame_duration)
    }
}
