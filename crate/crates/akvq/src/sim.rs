//! Reference attention pipeline: RoPE, causal scaled-dot-product
//! attention, and a multi-layer prefill+decode simulation run twice —
//! exact f32 baseline vs. the mixed-precision cache — producing
//! per-layer, per-step error metrics.
//!
//! Synthetic K/V streams carry the phenomena the method targets: a few
//! Key channels scaled far above the rest (channel outliers), and
//! injected massive-activation tokens whose Keys attract concentrated
//! attention and whose residual rows drive the pivot detector. With the
//! transform enabled, Q and K rows are rotated after RoPE and V rows are
//! rotated as folded value weights would produce; the quantized side's
//! attention output is rotated back before comparison, so any deviation
//! from the baseline is due to storage precision alone.

use std::io::{self, Write};

use rand::distributions::Distribution as _;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;

use crate::error::{Error, Result};
use crate::kvcache::{CacheConfig, MemoryReport, MixedPrecisionKVCache};
use crate::saliency::{detect_pivot_tokens, AttentionPattern, LayerPolicy, Modality};
use crate::tensor::Tensor;
use crate::wht::fwht_inplace;

/// How prefill tokens split into modalities: the vision span starts at
/// `start_fraction * prefill_len` and covers `vision_fraction` of the
/// prompt; everything else (and every decoded token) is text.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModalitySplit {
    pub vision_fraction: f32,
    pub start_fraction: f32,
}

impl Default for ModalitySplit {
    fn default() -> Self {
        Self {
            vision_fraction: 0.5,
            start_fraction: 0.25,
        }
    }
}

impl ModalitySplit {
    pub fn labels(&self, prefill_len: usize) -> Vec<Modality> {
        let start = (self.start_fraction.max(0.0) * prefill_len as f32) as usize;
        let count = (self.vision_fraction.max(0.0) * prefill_len as f32) as usize;
        let end = (start + count).min(prefill_len);
        (0..prefill_len)
            .map(|i| {
                if i >= start && i < end {
                    Modality::Vision
                } else {
                    Modality::Text
                }
            })
            .collect()
    }
}

/// Full configuration of one simulation run.
#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub cache: CacheConfig,
    pub seq_len_prefill: usize,
    pub decode_steps: usize,
    pub rope_base: f32,
    pub seed: u64,
    pub modality: ModalitySplit,
    /// Key channels scaled by `hot_channel_gain` (channel outliers).
    pub hot_channel_count: usize,
    pub hot_channel_gain: f32,
    /// Tokens injected as massive activations / attention pivots.
    pub massive_token_count: usize,
    /// Residual-row magnitude of injected tokens relative to background.
    pub massive_token_gain: f32,
    /// Query magnitude multiplier; raises logit spread so the synthetic
    /// attention is peaked rather than near-uniform.
    pub query_gain: f32,
    /// When false the mixed-precision cache is bypassed and the rotated
    /// side stores exact f32 rows (isolates transform error).
    pub quantization_enabled: bool,
    /// Number of trailing prefill queries compared at step 0; 0 = all.
    pub prefill_query_sample: usize,
}

impl SimConfig {
    pub fn new(cache: CacheConfig) -> Self {
        Self {
            cache,
            seq_len_prefill: 512,
            decode_steps: 64,
            rope_base: crate::defaults::ROPE_BASE,
            seed: 0,
            modality: ModalitySplit::default(),
            hot_channel_count: 2,
            hot_channel_gain: 20.0,
            massive_token_count: 2,
            massive_token_gain: 600.0,
            query_gain: 2.0,
            quantization_enabled: true,
            prefill_query_sample: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.cache.validate()?;
        if self.seq_len_prefill == 0 {
            return Err(Error::Param("seq_len_prefill must be >= 1".into()));
        }
        if self.cache.head_dim % 2 != 0 {
            return Err(Error::Param("head_dim must be even for RoPE".into()));
        }
        if !self.rope_base.is_finite() || self.rope_base <= 0.0 {
            return Err(Error::Param(format!(
                "rope_base {} must be > 0",
                self.rope_base
            )));
        }
        Ok(())
    }
}

/// One baseline-vs-quantized comparison of attention outputs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricRecord {
    pub layer: usize,
    /// 0 = prefill; 1..=decode_steps for decode queries.
    pub step: usize,
    pub cosine: f64,
    pub max_abs_err: f64,
    pub rel_frobenius: f64,
}

/// Aggregated error metrics for one simulation run.
#[derive(Debug, Clone, PartialEq)]
pub struct SimMetrics {
    pub records: Vec<MetricRecord>,
    pub per_layer_mean_cosine: Vec<f64>,
    pub per_layer_max_abs_err: Vec<f64>,
    pub mean_cosine: f64,
    pub max_abs_err: f64,
    pub rel_frobenius: f64,
    /// Mean squared Key reconstruction error vs. the baseline stream,
    /// measured over the prefill span in the baseline's (unrotated) basis.
    pub key_mse: f64,
    pub value_mse: f64,
    pub memory: Option<MemoryReport>,
}

/// Rotates channel pairs `(2i, 2i+1)` of each row by
/// `position * base^(-2i / head_dim)` radians.
pub fn rope_apply(rows: &Tensor, positions: &[usize], base: f32) -> Result<Tensor> {
    if rows.ndim() != 2 {
        return Err(Error::Shape("expected (tokens x head_dim)".into()));
    }
    let d = rows.dim(1);
    if d % 2 != 0 {
        return Err(Error::Param(format!("head_dim {} must be even", d)));
    }
    if positions.len() != rows.dim(0) {
        return Err(Error::Shape(format!(
            "{} positions for {} rows",
            positions.len(),
            rows.dim(0)
        )));
    }
    let mut out = rows.clone();
    for (t, &pos) in positions.iter().enumerate() {
        rope_row(out.row_mut(t), pos, base);
    }
    Ok(out)
}

fn rope_row(row: &mut [f32], position: usize, base: f32) {
    let d = row.len();
    for i in 0..d / 2 {
        let freq = base.powf(-2.0 * i as f32 / d as f32);
        let angle = position as f32 * freq;
        let (sin, cos) = angle.sin_cos();
        let x = row[2 * i];
        let y = row[2 * i + 1];
        row[2 * i] = x * cos - y * sin;
        row[2 * i + 1] = x * sin + y * cos;
    }
}

/// Softmax attention for one query row over the first `visible` keys,
/// stabilized by row-max subtraction.
fn sdpa_row(q: &[f32], keys: &[f32], values: &[f32], visible: usize, out: &mut [f32]) {
    let d = q.len();
    let scale = 1.0 / (d as f32).sqrt();
    let mut logits = vec![0.0f32; visible];
    let mut max_logit = f32::NEG_INFINITY;
    for (j, logit) in logits.iter_mut().enumerate() {
        let k_row = &keys[j * d..(j + 1) * d];
        let mut dot = 0.0f32;
        for i in 0..d {
            dot += q[i] * k_row[i];
        }
        *logit = dot * scale;
        max_logit = max_logit.max(*logit);
    }
    let mut denom = 0.0f32;
    for logit in &mut logits {
        *logit = (*logit - max_logit).exp();
        denom += *logit;
    }
    out.fill(0.0);
    for (j, &w) in logits.iter().enumerate() {
        let a = w / denom;
        let v_row = &values[j * d..(j + 1) * d];
        for i in 0..d {
            out[i] += a * v_row[i];
        }
    }
}

/// Causal scaled-dot-product attention.
///
/// `q` is (heads x q_tokens x head_dim); `keys`/`values` hold one
/// (tokens x head_dim) view per kv head, and query heads map onto kv
/// heads by integer division. The query at row `r` sits at absolute
/// position `causal_offset + r` and attends keys `0..=causal_offset + r`.
pub fn attention_forward(
    q: &Tensor,
    keys: &[Tensor],
    values: &[Tensor],
    causal_offset: usize,
) -> Result<Tensor> {
    if q.ndim() != 3 {
        return Err(Error::Shape("expected (heads x q_tokens x head_dim)".into()));
    }
    let (heads, q_tokens, d) = (q.dim(0), q.dim(1), q.dim(2));
    if keys.is_empty() || keys.len() != values.len() || heads % keys.len() != 0 {
        return Err(Error::Shape(format!(
            "{} query heads cannot map onto {} kv views",
            heads,
            keys.len()
        )));
    }
    let n_keys = keys[0].dim(0);
    for view in keys.iter().chain(values.iter()) {
        if view.ndim() != 2 || view.dim(0) != n_keys || view.dim(1) != d {
            return Err(Error::Shape("key/value views disagree in shape".into()));
        }
    }
    if q_tokens + causal_offset > n_keys {
        return Err(Error::Shape(format!(
            "{} queries at offset {} exceed {} cached tokens",
            q_tokens, causal_offset, n_keys
        )));
    }

    let group = heads / keys.len();
    let mut out = vec![0.0f32; heads * q_tokens * d];
    for h in 0..heads {
        let kv = &keys[h / group];
        let vv = &values[h / group];
        for r in 0..q_tokens {
            let q_row = &q.data()[(h * q_tokens + r) * d..(h * q_tokens + r + 1) * d];
            let visible = causal_offset + r + 1;
            let dst = &mut out[(h * q_tokens + r) * d..(h * q_tokens + r + 1) * d];
            sdpa_row(q_row, kv.data(), vv.data(), visible, dst);
        }
    }
    Tensor::new(vec![heads, q_tokens, d], out)
}

const LAYER_SALT: u64 = 0x616b_7671_5f6c_7972; // per-layer stream seeds
const PIVOT_SALT: u64 = 0x616b_7671_5f70_6976; // pivot index choice
const RESIDUAL_SALT: u64 = 0x616b_7671_5f72_6573; // residual stream
const QUERY_BIAS: f32 = 1.5;
const KEY_ATTRACT: f32 = 3.0;
const PIVOT_VALUE_GAIN: f32 = 4.0;

fn stream_seed(seed: u64, salt: u64, index: u64) -> u64 {
    seed ^ salt.wrapping_add((index + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    let normal = Normal::new(0.0f32, 1.0).expect("unit normal");
    (0..n).map(|_| normal.sample(rng)).collect()
}

/// Token indices injected as massive activations, drawn from the
/// non-recent prefill span so pivot protection stays observable.
pub fn injected_pivot_indices(cfg: &SimConfig) -> Vec<usize> {
    let span = cfg
        .seq_len_prefill
        .saturating_sub(cfg.cache.recent_window)
        .max(1)
        .min(cfg.seq_len_prefill);
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, PIVOT_SALT, 0));
    let mut picked = Vec::new();
    let uniform = rand::distributions::Uniform::new(0, span);
    while picked.len() < cfg.massive_token_count.min(span) {
        let t = uniform.sample(&mut rng);
        if !picked.contains(&t) {
            picked.push(t);
        }
    }
    picked.sort_unstable();
    picked
}

/// Synthetic residual stream (tokens x hidden) whose rows at the injected
/// pivot indices are scaled by `massive_token_gain`.
pub fn synthesize_residual(cfg: &SimConfig) -> Tensor {
    let hidden = cfg.cache.head_dim * 4;
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, RESIDUAL_SALT, 0));
    let mut data = gaussian_vec(&mut rng, cfg.seq_len_prefill * hidden);
    for &t in &injected_pivot_indices(cfg) {
        for v in &mut data[t * hidden..(t + 1) * hidden] {
            *v *= cfg.massive_token_gain;
        }
    }
    Tensor::new(vec![cfg.seq_len_prefill, hidden], data).expect("consistent shape")
}

/// Builds per-layer policies: the given layers are TSA, the rest PSA with
/// pivots detected from the synthetic residual stream.
pub fn synthesize_policies(cfg: &SimConfig, tsa_layers: &[usize]) -> Result<Vec<LayerPolicy>> {
    let residual = synthesize_residual(cfg);
    let pivots = detect_pivot_tokens(&residual, crate::defaults::TAU, cfg.cache.n_pivot_max)?;
    configured_policies(cfg, tsa_layers, &pivots)
}

/// Builds per-layer policies with an explicit pivot set.
pub fn configured_policies(
    cfg: &SimConfig,
    tsa_layers: &[usize],
    pivots: &[usize],
) -> Result<Vec<LayerPolicy>> {
    (0..cfg.cache.n_layers)
        .map(|l| {
            if tsa_layers.contains(&l) {
                LayerPolicy::new(
                    l,
                    AttentionPattern::Tsa,
                    vec![],
                    cfg.cache.recent_window,
                    cfg.cache.n_pivot_max,
                )
            } else {
                LayerPolicy::new(
                    l,
                    AttentionPattern::Psa,
                    pivots.to_vec(),
                    cfg.cache.recent_window,
                    cfg.cache.n_pivot_max,
                )
            }
        })
        .collect()
}

/// Per-layer synthetic Q/K/V streams, token-major per head, post-RoPE.
struct LayerStream {
    /// (n_heads x total x d), RoPE applied.
    q: Vec<f32>,
    /// (n_kv_heads x total x d), RoPE applied.
    k: Vec<f32>,
    /// (n_kv_heads x total x d).
    v: Vec<f32>,
}

fn generate_layer_stream(cfg: &SimConfig, layer: usize, pivots: &[usize]) -> LayerStream {
    let d = cfg.cache.head_dim;
    let total = cfg.seq_len_prefill + cfg.decode_steps;
    let heads = cfg.cache.n_heads;
    let kv_heads = cfg.cache.n_kv_heads;
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, LAYER_SALT, layer as u64));

    let mut q = gaussian_vec(&mut rng, heads * total * d);
    let mut k = gaussian_vec(&mut rng, kv_heads * total * d);
    let mut v = gaussian_vec(&mut rng, kv_heads * total * d);

    // Channel outliers on the Keys: fixed channels carry a large constant
    // bias, the way massive-activation channels do. They inflate every
    // token's quantization range while adding the same offset to every
    // logit, so they carry almost no attention signal themselves. Drawn
    // from the slowest RoPE pairs so position rotation keeps them
    // near-constant.
    let slow_start = d - (d / 4).max(2).min(d);
    let uniform = rand::distributions::Uniform::new(slow_start, d);
    let mut hot = Vec::new();
    while hot.len() < cfg.hot_channel_count.min(d - slow_start) {
        let c = uniform.sample(&mut rng);
        if !hot.contains(&c) {
            hot.push(c);
        }
    }
    let signs = gaussian_vec(&mut rng, hot.len());
    for h in 0..kv_heads {
        for t in 0..total {
            for (&c, s) in hot.iter().zip(&signs) {
                k[(h * total + t) * d + c] += cfg.hot_channel_gain * s.signum();
            }
        }
    }

    // Pivot attraction: a shared direction on the slowest RoPE pairs so
    // positional rotation does not wash out the alignment.
    let slow_channels = (d / 4).max(2).min(d);
    let mut direction = vec![0.0f32; d];
    let noise = gaussian_vec(&mut rng, slow_channels);
    direction[d - slow_channels..].copy_from_slice(&noise);
    let norm: f32 = direction.iter().map(|x| x * x).sum::<f32>().sqrt();
    for x in &mut direction {
        *x /= norm;
    }

    for h in 0..heads {
        for t in 0..total {
            for i in 0..d {
                let idx = (h * total + t) * d + i;
                q[idx] = cfg.query_gain * (q[idx] + QUERY_BIAS * direction[i]);
            }
        }
    }
    let key_gain = KEY_ATTRACT * (d as f32).sqrt();
    for h in 0..kv_heads {
        for &p in pivots {
            for i in 0..d {
                k[(h * total + p) * d + i] += key_gain * direction[i];
            }
            for i in 0..d {
                v[(h * total + p) * d + i] *= PIVOT_VALUE_GAIN;
            }
        }
    }

    // RoPE by absolute position.
    for h in 0..heads {
        for t in 0..total {
            rope_row(
                &mut q[(h * total + t) * d..(h * total + t + 1) * d],
                t,
                cfg.rope_base,
            );
        }
    }
    for h in 0..kv_heads {
        for t in 0..total {
            rope_row(
                &mut k[(h * total + t) * d..(h * total + t + 1) * d],
                t,
                cfg.rope_base,
            );
        }
    }

    LayerStream { q, k, v }
}

/// The rotated-side storage: either the mixed-precision cache or, with
/// quantization disabled, exact f32 rows.
enum QuantSide {
    Cache(Box<MixedPrecisionKVCache>),
    Exact,
}

#[derive(Clone)]
struct Accumulator {
    sum_cosine: f64,
    count: usize,
    max_abs: f64,
    diff_sq: f64,
    base_sq: f64,
}

impl Accumulator {
    fn new() -> Self {
        Self {
            sum_cosine: 0.0,
            count: 0,
            max_abs: 0.0,
            diff_sq: 0.0,
            base_sq: 0.0,
        }
    }

    fn push(&mut self, cosine: f64, max_abs: f64, diff_sq: f64, base_sq: f64) {
        self.sum_cosine += cosine;
        self.count += 1;
        self.max_abs = self.max_abs.max(max_abs);
        self.diff_sq += diff_sq;
        self.base_sq += base_sq;
    }
}

fn compare(base: &[f32], other: &[f32]) -> (f64, f64, f64, f64, f64) {
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    let mut max_abs = 0.0f64;
    let mut diff_sq = 0.0f64;
    for (&a, &b) in base.iter().zip(other) {
        let (a, b) = (a as f64, b as f64);
        dot += a * b;
        na += a * a;
        nb += b * b;
        let delta = (a - b).abs();
        max_abs = max_abs.max(delta);
        diff_sq += delta * delta;
    }
    let cosine = if na == 0.0 && nb == 0.0 {
        1.0
    } else if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na.sqrt() * nb.sqrt())
    };
    let rel_frob = if na > 0.0 { (diff_sq / na).sqrt() } else { 0.0 };
    (cosine, max_abs, rel_frob, diff_sq, na)
}

/// Runs the simulation: seeded synthetic streams through prefill plus
/// `decode_steps` single-token queries, comparing the attention output of
/// the exact baseline against the mixed-precision (and optionally
/// rotated) cache at every layer and step.
pub fn run_pipeline(cfg: &SimConfig, policies: &[LayerPolicy]) -> Result<SimMetrics> {
    cfg.validate()?;
    if policies.len() != cfg.cache.n_layers {
        return Err(Error::Param(format!(
            "{} policies for {} layers",
            policies.len(),
            cfg.cache.n_layers
        )));
    }

    let d = cfg.cache.head_dim;
    let n_layers = cfg.cache.n_layers;
    let kv_heads = cfg.cache.n_kv_heads;
    let heads = cfg.cache.n_heads;
    let prefill = cfg.seq_len_prefill;
    let total = prefill + cfg.decode_steps;
    let wht = cfg.cache.wht_enabled;
    let group = heads / kv_heads;

    let pivots = injected_pivot_indices(cfg);
    let streams: Vec<LayerStream> = (0..n_layers)
        .map(|l| generate_layer_stream(cfg, l, &pivots))
        .collect();

    // Rotated-side streams: Q/K rotated after RoPE, V rotated as the
    // folded value weights would produce.
    let mut q_star: Vec<Vec<f32>> = Vec::with_capacity(n_layers);
    let mut k_star: Vec<Vec<f32>> = Vec::with_capacity(n_layers);
    let mut v_star: Vec<Vec<f32>> = Vec::with_capacity(n_layers);
    for stream in &streams {
        let mut q = stream.q.clone();
        let mut k = stream.k.clone();
        let mut v = stream.v.clone();
        if wht {
            for row in q.chunks_mut(d) {
                fwht_inplace(row)?;
            }
            for row in k.chunks_mut(d) {
                fwht_inplace(row)?;
            }
            for row in v.chunks_mut(d) {
                fwht_inplace(row)?;
            }
        }
        q_star.push(q);
        k_star.push(k);
        v_star.push(v);
    }

    let labels = cfg.modality.labels(prefill);

    // Prefill the rotated side.
    let mut side = if cfg.quantization_enabled {
        let mut cache = MixedPrecisionKVCache::new(cfg.cache.clone(), policies.to_vec())?;
        let shape = vec![n_layers, kv_heads, prefill, d];
        let mut kd = Vec::with_capacity(n_layers * kv_heads * prefill * d);
        let mut vd = Vec::with_capacity(kd.capacity());
        for l in 0..n_layers {
            for h in 0..kv_heads {
                kd.extend_from_slice(&k_star[l][h * total * d..(h * total + prefill) * d]);
                vd.extend_from_slice(&v_star[l][h * total * d..(h * total + prefill) * d]);
            }
        }
        cache.prefill(
            &Tensor::new(shape.clone(), kd)?,
            &Tensor::new(shape, vd)?,
            &labels,
        )?;
        QuantSide::Cache(Box::new(cache))
    } else {
        QuantSide::Exact
    };

    // Materialized views of the rotated side, kept in sync with the cache.
    let mut view_k: Vec<Vec<f32>> = Vec::with_capacity(n_layers * kv_heads);
    let mut view_v: Vec<Vec<f32>> = Vec::with_capacity(n_layers * kv_heads);
    for l in 0..n_layers {
        for h in 0..kv_heads {
            match &side {
                QuantSide::Cache(cache) => {
                    let (k, v) = cache.dequantized_view(l, h)?;
                    view_k.push(k.into_data());
                    view_v.push(v.into_data());
                }
                QuantSide::Exact => {
                    view_k.push(k_star[l][h * total * d..(h * total + prefill) * d].to_vec());
                    view_v.push(v_star[l][h * total * d..(h * total + prefill) * d].to_vec());
                }
            }
        }
    }

    // Key/Value reconstruction error over the prefill span, measured in
    // the baseline's basis (rotate the view back when the transform is on).
    let mut key_err = 0.0f64;
    let mut value_err = 0.0f64;
    let mut row_buf = vec![0.0f32; d];
    for l in 0..n_layers {
        for h in 0..kv_heads {
            let idx = l * kv_heads + h;
            for t in 0..prefill {
                for (view, stream, err) in [
                    (&view_k[idx], &streams[l].k, &mut key_err),
                    (&view_v[idx], &streams[l].v, &mut value_err),
                ] {
                    row_buf.copy_from_slice(&view[t * d..(t + 1) * d]);
                    if wht {
                        fwht_inplace(&mut row_buf)?;
                    }
                    let base = &stream[(h * total + t) * d..(h * total + t + 1) * d];
                    for i in 0..d {
                        *err += ((base[i] - row_buf[i]) as f64).powi(2);
                    }
                }
            }
        }
    }
    let kv_elements = (n_layers * kv_heads * prefill * d) as f64;
    let key_mse = key_err / kv_elements;
    let value_mse = value_err / kv_elements;

    let mut records = Vec::new();
    let mut per_layer = vec![Accumulator::new(); n_layers];
    let mut overall = Accumulator::new();

    // Step 0: prefill queries (a trailing sample, or all of them).
    let sample = if cfg.prefill_query_sample == 0 {
        prefill
    } else {
        cfg.prefill_query_sample.min(prefill)
    };
    let offset = prefill - sample;
    let mut base_out = vec![0.0f32; heads * sample * d];
    let mut quant_out = vec![0.0f32; heads * sample * d];
    for l in 0..n_layers {
        for h in 0..heads {
            let kv = h / group;
            let idx = l * kv_heads + kv;
            for r in 0..sample {
                let t = offset + r;
                let visible = t + 1;
                let q_base = &streams[l].q[(h * total + t) * d..(h * total + t + 1) * d];
                let k_base = &streams[l].k[kv * total * d..(kv * total + visible) * d];
                let v_base = &streams[l].v[kv * total * d..(kv * total + visible) * d];
                sdpa_row(
                    q_base,
                    k_base,
                    v_base,
                    visible,
                    &mut base_out[(h * sample + r) * d..(h * sample + r + 1) * d],
                );
                let q_rot = &q_star[l][(h * total + t) * d..(h * total + t + 1) * d];
                let dst = &mut quant_out[(h * sample + r) * d..(h * sample + r + 1) * d];
                sdpa_row(q_rot, &view_k[idx], &view_v[idx], visible, dst);
                if wht {
                    fwht_inplace(dst)?;
                }
            }
        }
        let (cosine, max_abs, rel_frob, diff_sq, base_sq) = compare(&base_out, &quant_out);
        records.push(MetricRecord {
            layer: l,
            step: 0,
            cosine,
            max_abs_err: max_abs,
            rel_frobenius: rel_frob,
        });
        per_layer[l].push(cosine, max_abs, diff_sq, base_sq);
        overall.push(cosine, max_abs, diff_sq, base_sq);
    }

    // Decode steps.
    let mut base_row = vec![0.0f32; heads * d];
    let mut quant_row = vec![0.0f32; heads * d];
    for s in 1..=cfg.decode_steps {
        let pos = prefill + s - 1;

        if let QuantSide::Cache(cache) = &mut side {
            let shape = vec![n_layers, kv_heads, d];
            let mut kd = Vec::with_capacity(n_layers * kv_heads * d);
            let mut vd = Vec::with_capacity(kd.capacity());
            for l in 0..n_layers {
                for h in 0..kv_heads {
                    kd.extend_from_slice(
                        &k_star[l][(h * total + pos) * d..(h * total + pos + 1) * d],
                    );
                    vd.extend_from_slice(
                        &v_star[l][(h * total + pos) * d..(h * total + pos + 1) * d],
                    );
                }
            }
            cache.append_decode(
                &Tensor::new(shape.clone(), kd)?,
                &Tensor::new(shape, vd)?,
                Modality::Text,
            )?;
            for l in 0..n_layers {
                for h in 0..kv_heads {
                    let idx = l * kv_heads + h;
                    let (k_row, v_row) = cache.row_view(l, h, pos)?;
                    view_k[idx].extend_from_slice(&k_row);
                    view_v[idx].extend_from_slice(&v_row);
                    // Refresh the token that slid out of the window.
                    if let Some(evicted) = pos.checked_sub(cfg.cache.recent_window) {
                        let (k_row, v_row) = cache.row_view(l, h, evicted)?;
                        view_k[idx][evicted * d..(evicted + 1) * d].copy_from_slice(&k_row);
                        view_v[idx][evicted * d..(evicted + 1) * d].copy_from_slice(&v_row);
                    }
                }
            }
        } else {
            for l in 0..n_layers {
                for h in 0..kv_heads {
                    let idx = l * kv_heads + h;
                    view_k[idx].extend_from_slice(
                        &k_star[l][(h * total + pos) * d..(h * total + pos + 1) * d],
                    );
                    view_v[idx].extend_from_slice(
                        &v_star[l][(h * total + pos) * d..(h * total + pos + 1) * d],
                    );
                }
            }
        }

        let visible = pos + 1;
        for l in 0..n_layers {
            for h in 0..heads {
                let kv = h / group;
                let idx = l * kv_heads + kv;
                let q_base = &streams[l].q[(h * total + pos) * d..(h * total + pos + 1) * d];
                let k_base = &streams[l].k[kv * total * d..(kv * total + visible) * d];
                let v_base = &streams[l].v[kv * total * d..(kv * total + visible) * d];
                sdpa_row(
                    q_base,
                    k_base,
                    v_base,
                    visible,
                    &mut base_row[h * d..(h + 1) * d],
                );
                let q_rot = &q_star[l][(h * total + pos) * d..(h * total + pos + 1) * d];
                let dst = &mut quant_row[h * d..(h + 1) * d];
                sdpa_row(q_rot, &view_k[idx], &view_v[idx], visible, dst);
                if wht {
                    fwht_inplace(dst)?;
                }
            }
            let (cosine, max_abs, rel_frob, diff_sq, base_sq) = compare(&base_row, &quant_row);
            records.push(MetricRecord {
                layer: l,
                step: s,
                cosine,
                max_abs_err: max_abs,
                rel_frobenius: rel_frob,
            });
            per_layer[l].push(cosine, max_abs, diff_sq, base_sq);
            overall.push(cosine, max_abs, diff_sq, base_sq);
        }
    }

    let memory = match &side {
        QuantSide::Cache(cache) => Some(cache.memory_report()),
        QuantSide::Exact => None,
    };
    Ok(SimMetrics {
        records,
        per_layer_mean_cosine: per_layer
            .iter()
            .map(|a| {
                if a.count > 0 {
                    a.sum_cosine / a.count as f64
                } else {
                    1.0
                }
            })
            .collect(),
        per_layer_max_abs_err: per_layer.iter().map(|a| a.max_abs).collect(),
        mean_cosine: if overall.count > 0 {
            overall.sum_cosine / overall.count as f64
        } else {
            1.0
        },
        max_abs_err: overall.max_abs,
        rel_frobenius: if overall.base_sq > 0.0 {
            (overall.diff_sq / overall.base_sq).sqrt()
        } else {
            0.0
        },
        key_mse,
        value_mse,
        memory,
    })
}

/// Method variants for comparative runs, from plain round-to-nearest
/// 2-bit up to the full adaptive pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MethodVariant {
    /// Everything at 16-bit (window covers the whole run).
    Fp16,
    /// Every token 4-bit, no clipping, no transform.
    RtnInt4,
    /// Every token 2-bit, no clipping, no transform.
    RtnInt2,
    /// RTN 2-bit plus the Walsh-Hadamard rotation.
    RtnInt2Wht,
    /// Rotation plus TSA tiering (clips, recent window, text at 4-bit).
    WhtTsa,
    /// Full adaptive tiering including PSA pivots, without the rotation.
    AkvqNoWht,
    /// The full method.
    Akvq,
}

impl MethodVariant {
    pub const ALL: [MethodVariant; 7] = [
        MethodVariant::Fp16,
        MethodVariant::RtnInt4,
        MethodVariant::RtnInt2,
        MethodVariant::RtnInt2Wht,
        MethodVariant::WhtTsa,
        MethodVariant::AkvqNoWht,
        MethodVariant::Akvq,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            MethodVariant::Fp16 => "fp16",
            MethodVariant::RtnInt4 => "rtn-int4",
            MethodVariant::RtnInt2 => "rtn-int2",
            MethodVariant::RtnInt2Wht => "rtn-int2-wht",
            MethodVariant::WhtTsa => "wht-tsa",
            MethodVariant::AkvqNoWht => "akvq-no-wht",
            MethodVariant::Akvq => "akvq",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .find(|v| v.name() == s)
            .copied()
            .ok_or_else(|| Error::Param(format!("unknown variant '{}'", s)))
    }
}

/// Derives the (config, policies) pair a variant runs with. The synthetic
/// streams depend only on the base seed and topology, so runs of
/// different variants on the same base are paired comparisons.
pub fn variant_config(
    base: &SimConfig,
    tsa_layers: &[usize],
    variant: MethodVariant,
) -> Result<(SimConfig, Vec<LayerPolicy>)> {
    let mut cfg = base.clone();
    let policies = match variant {
        MethodVariant::Fp16 => {
            cfg.cache.wht_enabled = false;
            cfg.cache.recent_window = cfg.seq_len_prefill + cfg.decode_steps + 1;
            configured_policies(&cfg, &[], &[])?
        }
        MethodVariant::RtnInt4 => {
            cfg.cache.wht_enabled = false;
            cfg.cache.recent_window = 0;
            cfg.cache.clip_int4 = 1.0;
            cfg.modality.vision_fraction = 0.0; // all tokens text -> int4
            let all: Vec<usize> = (0..cfg.cache.n_layers).collect();
            configured_policies(&cfg, &all, &[])?
        }
        MethodVariant::RtnInt2 => {
            cfg.cache.wht_enabled = false;
            cfg.cache.recent_window = 0;
            cfg.cache.clip_int2 = 1.0;
            configured_policies(&cfg, &[], &[])?
        }
        MethodVariant::RtnInt2Wht => {
            cfg.cache.wht_enabled = true;
            cfg.cache.recent_window = 0;
            cfg.cache.clip_int2 = 1.0;
            configured_policies(&cfg, &[], &[])?
        }
        MethodVariant::WhtTsa => {
            cfg.cache.wht_enabled = true;
            configured_policies(&cfg, tsa_layers, &[])?
        }
        MethodVariant::AkvqNoWht => {
            cfg.cache.wht_enabled = false;
            synthesize_policies(&cfg, tsa_layers)?
        }
        MethodVariant::Akvq => {
            cfg.cache.wht_enabled = true;
            synthesize_policies(&cfg, tsa_layers)?
        }
    };
    Ok((cfg, policies))
}

/// Runs one variant against the shared synthetic streams.
pub fn run_variant(
    base: &SimConfig,
    tsa_layers: &[usize],
    variant: MethodVariant,
) -> Result<SimMetrics> {
    let (cfg, policies) = variant_config(base, tsa_layers, variant)?;
    run_pipeline(&cfg, &policies)
}

/// Writes one line per (layer, step) record.
pub fn write_records<W: Write>(metrics: &SimMetrics, w: &mut W) -> io::Result<()> {
    for r in &metrics.records {
        writeln!(
            w,
            "layer={} step={} cosine={} max_err={} rel_frob={}",
            r.layer, r.step, r.cosine, r.max_abs_err, r.rel_frobenius
        )?;
    }
    Ok(())
}

/// Machine-readable summary as `key=value` lines. `prefix` namespaces the
/// keys when several runs share one file (e.g. `akvq.mean_cosine=...`).
pub fn format_summary(prefix: &str, metrics: &SimMetrics) -> String {
    let p = if prefix.is_empty() {
        String::new()
    } else {
        format!("{}.", prefix)
    };
    let mut out = String::new();
    out.push_str(&format!("{}records={}\n", p, metrics.records.len()));
    out.push_str(&format!("{}mean_cosine={}\n", p, metrics.mean_cosine));
    out.push_str(&format!("{}max_abs_err={}\n", p, metrics.max_abs_err));
    out.push_str(&format!("{}rel_frobenius={}\n", p, metrics.rel_frobenius));
    out.push_str(&format!("{}key_mse={}\n", p, metrics.key_mse));
    out.push_str(&format!("{}value_mse={}\n", p, metrics.value_mse));
    if let Some(m) = &metrics.memory {
        out.push_str(&format!("{}bytes_fp16={}\n", p, m.bytes_fp16));
        out.push_str(&format!("{}bytes_int4={}\n", p, m.bytes_int4));
        out.push_str(&format!("{}bytes_int2={}\n", p, m.bytes_int2));
        out.push_str(&format!("{}bytes_overhead={}\n", p, m.bytes_overhead));
        out.push_str(&format!(
            "{}effective_bits={}\n",
            p, m.effective_bits_per_element
        ));
        out.push_str(&format!(
            "{}compression_ratio={}\n",
            p, m.compression_ratio_vs_fp16
        ));
    }
    out
}
