//! Dense row-major f32 tensors, seeded random generation, and the AKV1
//! binary file format.
//!
//! AKV1 layout (all integers little-endian):
//!
//! ```text
//! offset  size        field
//! 0       4           magic "AKV1"
//! 4       1           dtype code (0 = f32 little-endian)
//! 5       1           ndim (1..=8)
//! 6       8 * ndim    dims, u64 each, every dim >= 1
//! ...     4 * numel   payload, f32 little-endian, row-major
//! ```
//!
//! The payload length must match the header exactly; trailing bytes are
//! rejected so round-trips are bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::distributions::Distribution as _;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// File magic for the AKV1 tensor format.
pub const AKV1_MAGIC: [u8; 4] = *b"AKV1";
/// Dtype code for little-endian f32 payloads.
pub const AKV1_DTYPE_F32: u8 = 0;
/// Maximum number of dimensions a file header may declare.
pub const AKV1_MAX_NDIM: usize = 8;

/// Storage tag for tensor values.
///
/// All arithmetic is f32; `F16AsF32` marks values that have been rounded
/// to the IEEE binary16 grid and widened back, so 16-bit storage effects
/// stay observable without a native half type.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DtypeTag {
    #[default]
    F32,
    F16AsF32,
}

/// Dense row-major tensor of 32-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    dtype: DtypeTag,
}

impl Tensor {
    /// Builds a tensor, checking that `shape` and `data` agree.
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Self {
            shape,
            data,
            dtype: DtypeTag::F32,
        })
    }

    /// All-zero tensor of the given shape.
    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; numel],
            dtype: DtypeTag::F32,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn dtype(&self) -> DtypeTag {
        self.dtype
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Dimension size along axis `i`.
    pub fn dim(&self, i: usize) -> usize {
        self.shape[i]
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Row `i` of a 2-D tensor.
    pub fn row(&self, i: usize) -> &[f32] {
        debug_assert_eq!(self.ndim(), 2);
        let w = self.shape[1];
        &self.data[i * w..(i + 1) * w]
    }

    /// Mutable row `i` of a 2-D tensor.
    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        debug_assert_eq!(self.ndim(), 2);
        let w = self.shape[1];
        &mut self.data[i * w..(i + 1) * w]
    }

    /// Checks that every value is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Rounds every value to the IEEE binary16 grid (round-to-nearest-even)
    /// and widens back to f32, tagging the tensor as `F16AsF32`.
    pub fn to_f16_grid(mut self) -> Self {
        for v in &mut self.data {
            *v = f16_round(*v);
        }
        self.dtype = DtypeTag::F16AsF32;
        self
    }
}

/// Rounds one f32 to the nearest binary16 value and widens it back.
#[inline]
pub fn f16_round(x: f32) -> f32 {
    half::f16::from_f32(x).to_f32()
}

/// Reads an AKV1 tensor from `path`.
pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let mut r = BufReader::new(File::open(path)?);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != AKV1_MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:02x?}, expected {:02x?}",
            magic, AKV1_MAGIC
        )));
    }

    let mut byte = [0u8; 1];
    r.read_exact(&mut byte)?;
    if byte[0] != AKV1_DTYPE_F32 {
        return Err(Error::Format(format!("unsupported dtype code {}", byte[0])));
    }

    r.read_exact(&mut byte)?;
    let ndim = byte[0] as usize;
    if ndim == 0 || ndim > AKV1_MAX_NDIM {
        return Err(Error::Format(format!(
            "ndim {} out of range [1, {}]",
            ndim, AKV1_MAX_NDIM
        )));
    }

    let mut shape = Vec::with_capacity(ndim);
    let mut numel: usize = 1;
    for _ in 0..ndim {
        let mut buf = [0u8; 8];
        r.read_exact(&mut buf)?;
        let d = u64::from_le_bytes(buf);
        if d == 0 {
            return Err(Error::Format("zero dimension in header".into()));
        }
        let d: usize = d
            .try_into()
            .map_err(|_| Error::Size(format!("dimension {} exceeds addressable size", d)))?;
        numel = numel
            .checked_mul(d)
            .ok_or_else(|| Error::Size("dims product overflows usize".into()))?;
        shape.push(d);
    }
    let payload_len = numel
        .checked_mul(4)
        .ok_or_else(|| Error::Size("payload byte count overflows usize".into()))?;

    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    if payload.len() < payload_len {
        return Err(Error::Length(format!(
            "payload truncated: expected {} bytes, got {}",
            payload_len,
            payload.len()
        )));
    }
    if payload.len() > payload_len {
        return Err(Error::Length(format!(
            "trailing bytes after payload: expected {} bytes, got {}",
            payload_len,
            payload.len()
        )));
    }

    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(shape, data)
}

/// Writes `t` to `path` in the AKV1 format.
pub fn save_tensor(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    if t.ndim() == 0 || t.ndim() > AKV1_MAX_NDIM {
        return Err(Error::Param(format!(
            "ndim {} not encodable, must be in [1, {}]",
            t.ndim(),
            AKV1_MAX_NDIM
        )));
    }
    if t.shape.iter().any(|&d| d == 0) {
        return Err(Error::Param("zero dimension not encodable".into()));
    }

    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&AKV1_MAGIC)?;
    w.write_all(&[AKV1_DTYPE_F32, t.ndim() as u8])?;
    for &d in &t.shape {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for &v in &t.data {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Sampling distribution for [`gen_random`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Dist {
    Gaussian { mean: f32, std: f32 },
    Uniform { lo: f32, hi: f32 },
}

/// Deterministic pseudo-random tensor: a pure function of
/// `(seed, shape, dist)`. The same seed reproduces the same tensor on
/// every run.
pub fn gen_random(shape: Vec<usize>, seed: u64, dist: Dist) -> Result<Tensor> {
    let numel: usize = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(numel);
    match dist {
        Dist::Gaussian { mean, std } => {
            if !std.is_finite() || std < 0.0 {
                return Err(Error::Param(format!("gaussian std {} must be >= 0", std)));
            }
            if std == 0.0 {
                data.resize(numel, mean);
            } else {
                let normal = rand_distr::Normal::new(mean, std)
                    .map_err(|e| Error::Param(format!("gaussian params: {}", e)))?;
                data.extend((0..numel).map(|_| normal.sample(&mut rng)));
            }
        }
        Dist::Uniform { lo, hi } => {
            if !(lo.is_finite() && hi.is_finite()) || lo > hi {
                return Err(Error::Param(format!(
                    "uniform bounds [{}, {}] must satisfy lo <= hi",
                    lo, hi
                )));
            }
            let uniform = rand::distributions::Uniform::new_inclusive(lo, hi);
            data.extend((0..numel).map(|_| uniform.sample(&mut rng)));
        }
    }
    Tensor::new(shape, data)
}
