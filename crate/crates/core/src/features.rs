//! Per-video feature streams and their binary file format.
//!
//! Layout: `HRIG`, a version byte, then `N`, `D_a`, `D_m`, `D_o` as u32 LE,
//! then the appearance, motion and object blocks as row-major f32 LE.

use std::fs;
use std::path::Path;

use hrig_autodiff::Tensor;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"HRIG";
pub const VERSION: u8 = 1;
const HEADER_LEN: usize = 4 + 1 + 4 * 4;

#[derive(Clone, Debug, PartialEq)]
pub struct VideoFeatures {
    pub video_id: String,
    /// N x D_a
    pub appearance: Tensor,
    /// N x D_m
    pub motion: Tensor,
    /// N x D_o
    pub object: Tensor,
}

impl VideoFeatures {
    pub fn new(video_id: impl Into<String>, appearance: Tensor, motion: Tensor, object: Tensor) -> Result<Self> {
        let vf = Self {
            video_id: video_id.into(),
            appearance,
            motion,
            object,
        };
        vf.validate()?;
        Ok(vf)
    }

    fn validate(&self) -> Result<()> {
        let n = self.frames();
        for (name, t) in [
            ("appearance", &self.appearance),
            ("motion", &self.motion),
            ("object", &self.object),
        ] {
            if t.shape().len() != 2 || t.shape()[1] == 0 {
                return Err(Error::Features(format!("{name} stream must be a non-empty matrix")));
            }
            if t.shape()[0] != n {
                return Err(Error::Features(format!(
                    "{name} stream has {} frames, expected {n}",
                    t.shape()[0]
                )));
            }
            if !t.all_finite() {
                return Err(Error::NonFinite(format!("{name} features of {}", self.video_id)));
            }
        }
        if n < 2 {
            return Err(Error::Features(format!(
                "{}: need at least 2 frames, got {n}",
                self.video_id
            )));
        }
        Ok(())
    }

    pub fn frames(&self) -> usize {
        self.appearance.shape().first().copied().unwrap_or(0)
    }

    /// `(D_a, D_m, D_o)`
    pub fn dims(&self) -> (usize, usize, usize) {
        (
            self.appearance.shape()[1],
            self.motion.shape()[1],
            self.object.shape()[1],
        )
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let (da, dm, d_o) = self.dims();
        let n = self.frames();
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * n * (da + dm + d_o));
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        for v in [n, da, dm, d_o] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for t in [&self.appearance, &self.motion, &self.object] {
            for &x in t.data() {
                out.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(video_id: &str, bytes: &[u8]) -> Result<Self> {
        let bad = |msg: String| Error::Features(format!("{video_id}: {msg}"));
        if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
            return Err(bad("not a HRIG feature file".into()));
        }
        if bytes[4] != VERSION {
            return Err(bad(format!("unsupported version {}", bytes[4])));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[5 + 4 * i..9 + 4 * i].try_into().unwrap()) as usize;
        let (n, da, dm, d_o) = (word(0), word(1), word(2), word(3));
        let expected = n
            .checked_mul(da + dm + d_o)
            .and_then(|c| c.checked_mul(4))
            .and_then(|c| c.checked_add(HEADER_LEN))
            .ok_or_else(|| bad("header sizes overflow".into()))?;
        if bytes.len() != expected {
            return Err(bad(format!("expected {expected} bytes, found {}", bytes.len())));
        }
        let mut offset = HEADER_LEN;
        let mut block = |d: usize| {
            let len = n * d;
            let data = bytes[offset..offset + 4 * len]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            offset += 4 * len;
            Tensor::new(vec![n, d], data)
        };
        let a = block(da).map_err(|e| bad(e.to_string()))?;
        let m = block(dm).map_err(|e| bad(e.to_string()))?;
        let o = block(d_o).map_err(|e| bad(e.to_string()))?;
        Self::new(video_id, a, m, o)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(video_id: &str, path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(video_id, &bytes)
    }
}
