//! Pool-layer feature maps (MFM1 files) and the text-conditioned image
//! encoding filter.
//!
//! The filter scores every (word, region) pair through a learned bilinear
//! affinity, attends over words for each region, and rescales each region by
//! its cosine distance to that attended text vector. Regions that merely
//! repeat the text are suppressed; regions orthogonal to it pass unchanged.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, FeatureMapError, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const MFM_MAGIC: &[u8; 4] = b"MFM1";
/// 7×7 spatial grid of the last pooling layer.
pub const REGIONS: usize = 49;
pub const FEATURE_DIM: usize = 512;

/// m×f matrix of per-region visual descriptors.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap(Tensor);

impl FeatureMap {
    pub fn new(t: Tensor) -> Result<Self> {
        t.dims2()?;
        Ok(FeatureMap(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn regions(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[1]
    }

    /// Parses MFM1 bytes, requiring `rows × cols` extents.
    pub fn from_bytes(bytes: &[u8], rows: usize, cols: usize, origin: &Path) -> Result<Self> {
        let err = |kind| Error::FeatureMap {
            path: origin.to_path_buf(),
            kind,
        };
        if bytes.len() < 12 {
            let mut magic = [0u8; 4];
            magic[..bytes.len().min(4)].copy_from_slice(&bytes[..bytes.len().min(4)]);
            if bytes.len() < 4 || &magic != MFM_MAGIC {
                return Err(err(FeatureMapError::BadMagic(magic)));
            }
            return Err(err(FeatureMapError::Truncated {
                got: bytes.len(),
                expected: 12 + rows * cols * 4,
            }));
        }
        let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
        if &magic != MFM_MAGIC {
            return Err(err(FeatureMapError::BadMagic(magic)));
        }
        let r = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        let c = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if r as usize != rows || c as usize != cols {
            return Err(err(FeatureMapError::WrongExtents {
                rows: r,
                cols: c,
                expected_rows: rows,
                expected_cols: cols,
            }));
        }
        let payload = &bytes[12..];
        let expected = rows * cols * 4;
        if payload.len() < expected {
            return Err(err(FeatureMapError::Truncated {
                got: payload.len(),
                expected,
            }));
        }
        if payload.len() > expected {
            return Err(err(FeatureMapError::TrailingBytes(payload.len() - expected)));
        }
        let mut values = Vec::with_capacity(rows * cols);
        for (k, chunk) in payload.chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
            if !v.is_finite() {
                return Err(err(FeatureMapError::NonFinite {
                    row: k / cols,
                    col: k % cols,
                }));
            }
            values.push(f64::from(v));
        }
        Ok(FeatureMap(Tensor::matrix(rows, cols, values)?))
    }

    /// MFM1 encoding; values are narrowed to 32-bit floats.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + self.0.numel() * 4);
        out.extend_from_slice(MFM_MAGIC);
        out.extend_from_slice(&(self.regions() as u32).to_le_bytes());
        out.extend_from_slice(&(self.width() as u32).to_le_bytes());
        for &v in self.0.values() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Loads a 49×512 MFM1 file.
pub fn load_feature_map(path: &Path) -> Result<FeatureMap> {
    load_feature_map_with_extents(path, REGIONS, FEATURE_DIM)
}

pub fn load_feature_map_with_extents(path: &Path, rows: usize, cols: usize) -> Result<FeatureMap> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    FeatureMap::from_bytes(&bytes, rows, cols, path)
}

/// Names of the filter's learnable tensors.
#[derive(Debug, Clone)]
pub struct FilterParams {
    /// f×f bilinear affinity matrix.
    pub w_b: String,
}

impl FilterParams {
    pub fn named(prefix: &str) -> Self {
        FilterParams {
            w_b: format!("{prefix}.w_b"),
        }
    }
}

/// Filtered visual encoding plus the intermediates kept for inspection.
#[derive(Debug, Clone, Copy)]
pub struct FilteredVisual {
    /// m×f rescaled regions.
    pub u: Var,
    /// m×1 per-region relevance (cosine distance).
    pub relevance: Var,
    /// m×n word attention per region (each row is a distribution over words).
    pub word_attention: Var,
    /// n×m affinity.
    pub affinity: Var,
}

/// Applies the filter to text encoding `h` (n×f) and feature map `features` (m×f).
pub fn image_encoding_filter(tape: &mut Tape, h: Var, features: Var, params: &FilterParams) -> Result<FilteredVisual> {
    let (_, hw) = tape.shape(h);
    let (_, fw) = tape.shape(features);
    if hw != fw {
        return Err(Error::dim(
            "image_encoding_filter",
            format!("text width {hw} does not match feature width {fw}"),
        ));
    }
    let w_b = tape.param(&params.w_b)?;
    let hw_b = tape.matmul(h, w_b)?;
    let ft = tape.transpose(features)?;
    let scores = tape.matmul(hw_b, ft)?;
    let affinity = tape.tanh(scores)?;
    // normalise over words for each region
    let ct = tape.transpose(affinity)?;
    let word_attention = tape.softmax_rows(ct)?;
    let attended = tape.matmul(word_attention, h)?;
    let relevance = tape.cosine_distance_rows(features, attended)?;
    let u = tape.scale_rows(features, relevance)?;
    Ok(FilteredVisual {
        u,
        relevance,
        word_attention,
        affinity,
    })
}
