//! Attention-aware mixed-precision KV-cache quantization (AKVQ) with
//! Walsh-Hadamard outlier suppression, plus a reference attention
//! simulator for verifying exactness and error properties on synthetic
//! or dumped tensors.
//!
//! The pipeline: classify tokens into 16/4/2-bit tiers from per-layer
//! attention patterns ([`saliency`]), rotate Keys/Values with the
//! Walsh-Hadamard transform to kill channel outliers ([`wht`]), quantize
//! per token with clipping ([`quant`]), store everything in a
//! mixed-precision cache with exact memory accounting ([`kvcache`]), and
//! measure the end-to-end effect against an exact baseline ([`sim`]).

pub mod error;
pub mod kvcache;
pub mod quant;
pub mod saliency;
pub mod sim;
pub mod tensor;
pub mod wht;

pub use error::{Error, Result};

/// Reference configuration constants for the AKVQ method.
pub mod defaults {
    /// Quantization group size (elements per scale/zero pair).
    pub const GROUP_SIZE: usize = 128;
    /// Clip ratio for 2-bit groups.
    pub const CLIP_INT2: f32 = 0.8;
    /// Clip ratio for 4-bit groups.
    pub const CLIP_INT4: f32 = 1.0;
    /// Trailing tokens always kept at 16-bit.
    pub const RECENT_WINDOW: usize = 128;
    /// Maximum pivot tokens protected per PSA layer.
    pub const N_PIVOT_MAX: usize = 15;
    /// Massive-activation threshold as a multiple of the median score.
    pub const TAU: f32 = 50.0;
    /// Text/vision dominance ratio for TSA detection.
    pub const GAMMA: f32 = 2.0;
    /// Rotary position encoding base.
    pub const ROPE_BASE: f32 = 10000.0;
}
