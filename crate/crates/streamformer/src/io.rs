//! Binary feature container used for both input features and emitted
//! posteriors (log-posterior files simply set the feature dimension to the
//! class count).
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic            8 bytes  "STRMFEAT"
//! version          u32      1
//! frame_count      u64
//! feature_dim      u32
//! frame_period_ms  u32
//! payload          frame_count * feature_dim * f32, row-major
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const FEATURE_MAGIC: &[u8; 8] = b"STRMFEAT";
pub const FEATURE_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct FeatureFile {
    pub frame_period_ms: u32,
    /// `[T, d]` frames as f32, the container's payload precision.
    pub frames: Tensor<f32>,
}

impl FeatureFile {
    pub fn new(frames: Tensor<f32>, frame_period_ms: u32) -> Result<Self> {
        if frames.rank() != 2 {
            return Err(Error::config(
                "feature_file",
                format!("expected [T, d] frames, got shape {:?}", frames.shape()),
            ));
        }
        if frames.shape()[1] == 0 || frame_period_ms == 0 {
            return Err(Error::config(
                "feature_file",
                "feature dimension and frame period must be positive",
            ));
        }
        Ok(FeatureFile {
            frame_period_ms,
            frames,
        })
    }

    pub fn frame_count(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn feature_dim(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = Vec::with_capacity(28 + self.frames.numel() * 4);
        out.extend_from_slice(FEATURE_MAGIC);
        out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.frame_count() as u64).to_le_bytes());
        out.extend_from_slice(&(self.feature_dim() as u32).to_le_bytes());
        out.extend_from_slice(&self.frame_period_ms.to_le_bytes());
        for &v in self.frames.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::File::create(path)?.write_all(&out)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let path_str = path.display().to_string();
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        if bytes.len() < 28 {
            return Err(Error::file(&path_str, "truncated header"));
        }
        if &bytes[0..8] != FEATURE_MAGIC {
            return Err(Error::file(&path_str, "bad magic bytes, not a feature file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FEATURE_VERSION {
            return Err(Error::file(
                &path_str,
                format!("unsupported version {version}"),
            ));
        }
        let t = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let d = u32::from_le_bytes(bytes[20..24].try_into().unwrap()) as usize;
        let period = u32::from_le_bytes(bytes[24..28].try_into().unwrap());
        if d == 0 || period == 0 {
            return Err(Error::file(&path_str, "zero feature dim or frame period"));
        }
        let want = t
            .checked_mul(d)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::file(&path_str, "header sizes overflow"))?;
        let payload = &bytes[28..];
        if payload.len() != want {
            return Err(Error::file(
                &path_str,
                format!("payload is {} bytes, header implies {want}", payload.len()),
            ));
        }
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(FeatureFile {
            frame_period_ms: period,
            frames: Tensor::new(vec![t, d], data).unwrap(),
        })
    }

    pub fn to_tensor<S: Scalar>(&self) -> Tensor<S> {
        self.frames.cast()
    }
}
