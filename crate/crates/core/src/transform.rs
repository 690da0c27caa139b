//! Columnar-to-row-major decode and the affine per-element transform.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::dataset::{RawRowGroup, FORMAT_VERSION, HEADER_LEN, MAGIC};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DecodeError {
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported version {0}")]
    BadVersion(u32),
    #[error("truncated header: {0} bytes")]
    TruncatedHeader(usize),
    #[error("bad length: expected {expected} bytes, got {actual}")]
    BadLength { expected: usize, actual: usize },
    #[error("empty shape {rows}x{cols}")]
    EmptyShape { rows: u32, cols: u32 },
}

/// Dense row-major `f32` block decoded from one row group.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub num_rows: u32,
    pub num_cols: u32,
    pub data: Vec<f32>,
    pub origin_group: u64,
}

impl Tensor {
    pub fn new(num_rows: u32, num_cols: u32, data: Vec<f32>, origin_group: u64) -> Self {
        assert_eq!(
            data.len(),
            num_rows as usize * num_cols as usize,
            "tensor data length must equal rows * cols"
        );
        Self {
            num_rows,
            num_cols,
            data,
            origin_group,
        }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.num_cols as usize + col]
    }

    pub fn row(&self, row: usize) -> &[f32] {
        let c = self.num_cols as usize;
        &self.data[row * c..(row + 1) * c]
    }

    pub fn byte_len(&self) -> usize {
        8 + self.data.len() * 4
    }

    /// Cache serialization: `u32 rows | u32 cols | f32 data...`, little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.byte_len());
        out.extend_from_slice(&self.num_rows.to_le_bytes());
        out.extend_from_slice(&self.num_cols.to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin_group: u64) -> Result<Self, DecodeError> {
        if bytes.len() < 8 {
            return Err(DecodeError::TruncatedHeader(bytes.len()));
        }
        let num_rows = read_u32(bytes, 0);
        let num_cols = read_u32(bytes, 4);
        let expected = 8 + 4 * num_rows as usize * num_cols as usize;
        if bytes.len() != expected {
            return Err(DecodeError::BadLength {
                expected,
                actual: bytes.len(),
            });
        }
        let data = bytes[8..]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Ok(Self::new(num_rows, num_cols, data, origin_group))
    }
}

#[inline]
fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]])
}

/// Affine transform `x -> scale * x + offset`, applied `spin_iterations + 1` times.
///
/// The repetition only exists to dial CPU cost.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransformSpec {
    pub scale: f32,
    pub offset: f32,
    pub spin_iterations: u32,
}

impl Default for TransformSpec {
    fn default() -> Self {
        Self::identity()
    }
}

impl TransformSpec {
    pub const fn identity() -> Self {
        Self {
            scale: 1.0,
            offset: 0.0,
            spin_iterations: 0,
        }
    }

    pub fn is_identity_map(&self) -> bool {
        self.scale == 1.0 && self.offset == 0.0
    }

    /// Scalar reference of the transform for one element.
    #[inline]
    pub fn apply_scalar(&self, x: f32) -> f32 {
        if self.is_identity_map() {
            return x;
        }
        let mut v = x;
        for _ in 0..=self.spin_iterations {
            v = self.scale * v + self.offset;
        }
        v
    }
}

/// Transposes RGC1 column blocks into a row-major tensor.
pub fn decode_columnar(raw: &RawRowGroup, group_id: u64) -> Result<Tensor, DecodeError> {
    let b = raw.as_bytes();
    if b.len() < HEADER_LEN {
        if b.len() >= 4 && &b[..4] != MAGIC {
            return Err(DecodeError::BadMagic);
        }
        return Err(DecodeError::TruncatedHeader(b.len()));
    }
    if &b[..4] != MAGIC {
        return Err(DecodeError::BadMagic);
    }
    let version = read_u32(b, 4);
    if version != FORMAT_VERSION {
        return Err(DecodeError::BadVersion(version));
    }
    let rows = read_u32(b, 8);
    let cols = read_u32(b, 12);
    if rows == 0 || cols == 0 {
        return Err(DecodeError::EmptyShape { rows, cols });
    }
    let (r, c) = (rows as usize, cols as usize);
    let expected = HEADER_LEN + 4 * r * c;
    if b.len() != expected {
        return Err(DecodeError::BadLength {
            expected,
            actual: b.len(),
        });
    }
    let mut data = vec![0.0f32; r * c];
    let body = &b[HEADER_LEN..];
    for (col, block) in body.chunks_exact(4 * r).enumerate() {
        for (row, v) in block.chunks_exact(4).enumerate() {
            data[row * c + col] = f32::from_le_bytes([v[0], v[1], v[2], v[3]]);
        }
    }
    Ok(Tensor::new(rows, cols, data, group_id))
}

pub fn apply_row_transform(mut tensor: Tensor, spec: &TransformSpec) -> Tensor {
    if spec.is_identity_map() {
        // 1*x + 0 would turn -0.0 into +0.0; identity must be bit-exact.
        return tensor;
    }
    let (scale, offset) = (spec.scale, spec.offset);
    for v in tensor.data.iter_mut() {
        let mut x = *v;
        for _ in 0..=spec.spin_iterations {
            x = scale * x + offset;
        }
        *v = x;
    }
    tensor
}

/// Picks `spin_iterations` so that transforming one `rows x cols` tensor with
/// `spec`'s scale and offset takes about `target` on this machine.
///
/// Returns 0 for an identity map, which is skipped entirely.
pub fn calibrate_spin(rows: u32, cols: u32, spec: &TransformSpec, target: Duration) -> u32 {
    if spec.is_identity_map() || target.is_zero() {
        return 0;
    }
    let probe = Tensor::new(rows, cols, vec![0.5; rows as usize * cols as usize], 0);
    let mut spin = 0u32;
    loop {
        let trial = TransformSpec {
            spin_iterations: spin,
            ..*spec
        };
        let elapsed = (0..3)
            .map(|_| {
                let t = Instant::now();
                let out = apply_row_transform(probe.clone(), &trial);
                std::hint::black_box(&out);
                t.elapsed()
            })
            .min()
            .unwrap_or_default();
        let passes = spin as f64 + 1.0;
        if elapsed >= Duration::from_millis(2) || spin >= 1 << 20 {
            let per_pass = elapsed.as_secs_f64() / passes;
            let wanted = target.as_secs_f64() / per_pass.max(1e-12);
            return (wanted.round() as u32).saturating_sub(1);
        }
        spin = spin * 2 + 1;
    }
}
