//! Per-token, group-wise dynamic asymmetric integer quantization with
//! clipping, plus 2-bit/4-bit code packing.
//!
//! For a group of values X and bit width n:
//!
//! ```text
//! scale = (clipped_max(X) - clipped_min(X)) / (2^n - 1)
//! zero  = -round(clipped_min(X) / scale)
//! Q(x)  = clamp(round(x / scale) + zero, 0, 2^n - 1)
//! x'    = scale * (Q(x) - zero)
//! ```
//!
//! `clipped_max`/`clipped_min` scale both extremes by the clip ratio,
//! trading saturation of outliers for finer in-range resolution. Rounding
//! is round-half-to-even throughout. A group whose clipped range is
//! narrower than 1e-12 is stored with the degenerate convention
//! `scale = c, zero = 0, codes = 1` (c the group midpoint), so constant
//! groups reconstruct exactly, including c = 0 and negative c.

use crate::error::{Error, Result};

/// Width threshold below which a group is treated as constant.
const DEGENERATE_WIDTH: f32 = 1e-12;

/// Quantization bit width.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuantBits {
    Int2,
    Int4,
}

impl QuantBits {
    pub fn bits(self) -> u32 {
        match self {
            QuantBits::Int2 => 2,
            QuantBits::Int4 => 4,
        }
    }

    /// Largest representable code, `2^n - 1`.
    pub fn max_code(self) -> u8 {
        match self {
            QuantBits::Int2 => 3,
            QuantBits::Int4 => 15,
        }
    }

    pub fn codes_per_byte(self) -> usize {
        match self {
            QuantBits::Int2 => 4,
            QuantBits::Int4 => 2,
        }
    }
}

/// Parameters for group quantization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantParams {
    bits: QuantBits,
    clip_ratio: f32,
    group_size: usize,
}

impl QuantParams {
    /// Validates `0 < clip_ratio <= 1` and `group_size >= 1`.
    pub fn new(bits: QuantBits, clip_ratio: f32, group_size: usize) -> Result<Self> {
        if !clip_ratio.is_finite() || clip_ratio <= 0.0 || clip_ratio > 1.0 {
            return Err(Error::Param(format!(
                "clip_ratio {} must be in (0, 1]",
                clip_ratio
            )));
        }
        if group_size == 0 {
            return Err(Error::Param("group_size must be >= 1".into()));
        }
        Ok(Self {
            bits,
            clip_ratio,
            group_size,
        })
    }

    pub fn bits(&self) -> QuantBits {
        self.bits
    }

    pub fn clip_ratio(&self) -> f32 {
        self.clip_ratio
    }

    pub fn group_size(&self) -> usize {
        self.group_size
    }
}

/// One quantized group: packed codes plus its scale and zero point.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedGroup {
    packed: Vec<u8>,
    scale: f32,
    zero_point: i32,
    bits: QuantBits,
    len: usize,
}

impl QuantizedGroup {
    /// Builds a group from unpacked codes. Each code must fit in `bits`.
    pub fn from_codes(codes: &[u8], scale: f32, zero_point: i32, bits: QuantBits) -> Result<Self> {
        let packed = pack_codes(codes, bits)?;
        Ok(Self {
            packed,
            scale,
            zero_point,
            bits,
            len: codes.len(),
        })
    }

    pub fn scale(&self) -> f32 {
        self.scale
    }

    pub fn zero_point(&self) -> i32 {
        self.zero_point
    }

    pub fn bits(&self) -> QuantBits {
        self.bits
    }

    /// Number of codes stored (the group size, padding included).
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Packed code bytes, bit-exact per the layout of [`pack_codes`].
    pub fn packed(&self) -> &[u8] {
        &self.packed
    }

    /// Unpacked codes, one per element.
    pub fn codes(&self) -> Vec<u8> {
        unpack_codes(&self.packed, self.len, self.bits).expect("stored packing is consistent")
    }
}

/// One token's channel vector as a sequence of quantized groups.
///
/// The last group is zero-padded to the group size before packing;
/// `original_len` governs how many elements dequantization returns.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedRow {
    groups: Vec<QuantizedGroup>,
    original_len: usize,
}

impl QuantizedRow {
    /// Quantizes `values` group by group.
    pub fn quantize(values: &[f32], p: &QuantParams) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Param("cannot quantize an empty row".into()));
        }
        let groups = values
            .chunks(p.group_size)
            .map(|chunk| quantize_group(chunk, p))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            groups,
            original_len: values.len(),
        })
    }

    /// Reconstructs the row, trimming group padding.
    pub fn dequantize(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.original_len);
        for g in &self.groups {
            out.extend(dequantize_group(g));
        }
        out.truncate(self.original_len);
        out
    }

    pub fn groups(&self) -> &[QuantizedGroup] {
        &self.groups
    }

    pub fn original_len(&self) -> usize {
        self.original_len
    }
}

/// Clipped extremes of a group: `(clip_ratio * min, clip_ratio * max)`.
pub fn clipped_range(group: &[f32], clip_ratio: f32) -> Result<(f32, f32)> {
    if group.is_empty() {
        return Err(Error::Param("clipped_range of an empty group".into()));
    }
    let mut min = f32::INFINITY;
    let mut max = f32::NEG_INFINITY;
    for &x in group {
        min = min.min(x);
        max = max.max(x);
    }
    Ok((clip_ratio * min, clip_ratio * max))
}

/// Quantizes one group of at most `p.group_size` values.
///
/// Statistics come from the given elements only; codes are padded to the
/// group size with the code for value 0 (all-ones for degenerate groups).
pub fn quantize_group(group: &[f32], p: &QuantParams) -> Result<QuantizedGroup> {
    if group.len() > p.group_size {
        return Err(Error::Param(format!(
            "group of {} exceeds group_size {}",
            group.len(),
            p.group_size
        )));
    }
    if group.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("non-finite value in group".into()));
    }
    let (cmin, cmax) = clipped_range(group, p.clip_ratio)?;

    if cmax - cmin < DEGENERATE_WIDTH {
        // Degenerate convention: dequantization returns the midpoint of the
        // raw range exactly, which is the constant itself for constant groups.
        let (rmin, rmax) = clipped_range(group, 1.0)?;
        let c = rmin + (rmax - rmin) / 2.0;
        let codes = vec![1u8; p.group_size];
        return QuantizedGroup::from_codes(&codes, c, 0, p.bits);
    }

    let max_code = p.bits.max_code() as i64;
    let scale = (cmax - cmin) / (max_code as f32);
    // Code assignment runs in f64 so the round/clamp path agrees with the
    // exact nearest-level argmin everywhere except true half-way ties.
    let zero_point = -((cmin as f64 / scale as f64).round_ties_even()) as i32;
    let encode = |x: f32| -> u8 {
        let q = (x as f64 / scale as f64).round_ties_even() as i64 + zero_point as i64;
        q.clamp(0, max_code) as u8
    };
    let mut codes: Vec<u8> = group.iter().map(|&x| encode(x)).collect();
    codes.resize(p.group_size, encode(0.0));
    QuantizedGroup::from_codes(&codes, scale, zero_point, p.bits)
}

/// Reconstructs `scale * (code - zero)` for every stored code.
pub fn dequantize_group(g: &QuantizedGroup) -> Vec<f32> {
    g.codes()
        .iter()
        .map(|&c| g.scale * ((c as i64 - g.zero_point as i64) as f32))
        .collect()
}

/// Packs small integer codes into bytes.
///
/// 2-bit: code `i` occupies bits `[2*(i%4), 2*(i%4)+1]` of byte `i/4`.
/// 4-bit: code `i` occupies the low nibble of byte `i/2` when `i` is even,
/// the high nibble when odd. Trailing bits are zero.
pub fn pack_codes(codes: &[u8], bits: QuantBits) -> Result<Vec<u8>> {
    let max = bits.max_code();
    if let Some(bad) = codes.iter().find(|&&c| c > max) {
        return Err(Error::Param(format!(
            "code {} out of range for {}-bit packing",
            bad,
            bits.bits()
        )));
    }
    let per = bits.codes_per_byte();
    let mut out = vec![0u8; codes.len().div_ceil(per)];
    let width = bits.bits() as usize;
    for (i, &c) in codes.iter().enumerate() {
        out[i / per] |= c << (width * (i % per));
    }
    Ok(out)
}

/// Inverse of [`pack_codes`] for the first `count` codes.
pub fn unpack_codes(bytes: &[u8], count: usize, bits: QuantBits) -> Result<Vec<u8>> {
    let per = bits.codes_per_byte();
    let needed = count.div_ceil(per);
    if bytes.len() < needed {
        return Err(Error::Length(format!(
            "{} bytes hold fewer than {} {}-bit codes",
            bytes.len(),
            count,
            bits.bits()
        )));
    }
    let width = bits.bits() as usize;
    let mask = bits.max_code();
    Ok((0..count)
        .map(|i| (bytes[i / per] >> (width * (i % per))) & mask)
        .collect())
}
