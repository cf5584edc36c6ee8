//! Mixed-precision KV cache.
//!
//! Keys and Values are stored per (layer, kv_head) in three regions:
//! 16-bit rows (pivot and recent tokens), 4-bit rows (text tokens in TSA
//! layers), and 2-bit rows (everything else), following the per-layer
//! classification from [`crate::saliency`]. Prefill bulk-inserts and
//! classifies a whole prompt; decode appends one token at a time into the
//! recent region and re-quantizes the token sliding out of the window at
//! that moment, so recent tokens are always exact and quantizing a token
//! costs the same whether it arrived via prefill or decode.
//!
//! Memory accounting charges 2 bytes per fp16 element, 0.5 / 0.25 bytes
//! per 4-bit / 2-bit element, and 8 bytes of scale+zero overhead per
//! group per row.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::quant::{QuantBits, QuantParams, QuantizedRow};
use crate::saliency::{classify_tokens, LayerPolicy, Modality, Tier};
use crate::tensor::{f16_round, save_tensor, Tensor};

/// Shape and method parameters for a cache instance.
#[derive(Debug, Clone, PartialEq)]
pub struct CacheConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
    pub group_size: usize,
    pub clip_int2: f32,
    pub clip_int4: f32,
    pub recent_window: usize,
    pub n_pivot_max: usize,
    pub wht_enabled: bool,
}

impl CacheConfig {
    /// Config with the reference method constants for a given topology.
    pub fn new(n_layers: usize, n_heads: usize, n_kv_heads: usize, head_dim: usize) -> Self {
        Self {
            n_layers,
            n_heads,
            n_kv_heads,
            head_dim,
            group_size: crate::defaults::GROUP_SIZE,
            clip_int2: crate::defaults::CLIP_INT2,
            clip_int4: crate::defaults::CLIP_INT4,
            recent_window: crate::defaults::RECENT_WINDOW,
            n_pivot_max: crate::defaults::N_PIVOT_MAX,
            wht_enabled: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.n_heads == 0 || self.n_kv_heads == 0 || self.head_dim == 0 {
            return Err(Error::Param("layers, heads, and head_dim must be >= 1".into()));
        }
        if self.n_heads % self.n_kv_heads != 0 {
            return Err(Error::Param(format!(
                "n_heads {} must be divisible by n_kv_heads {}",
                self.n_heads, self.n_kv_heads
            )));
        }
        if self.wht_enabled && !self.head_dim.is_power_of_two() {
            return Err(Error::Param(format!(
                "head_dim {} must be a power of two when the transform is enabled",
                self.head_dim
            )));
        }
        if self.group_size == 0 {
            return Err(Error::Param("group_size must be >= 1".into()));
        }
        for (name, clip) in [("clip_int2", self.clip_int2), ("clip_int4", self.clip_int4)] {
            if !clip.is_finite() || clip <= 0.0 || clip > 1.0 {
                return Err(Error::Param(format!("{} {} must be in (0, 1]", name, clip)));
            }
        }
        Ok(())
    }

    fn quant_params(&self, tier: Tier) -> Result<QuantParams> {
        match tier {
            Tier::Int4 => QuantParams::new(QuantBits::Int4, self.clip_int4, self.group_size),
            Tier::Int2 => QuantParams::new(QuantBits::Int2, self.clip_int2, self.group_size),
            Tier::Fp16 => Err(Error::Param("fp16 tier is not quantized".into())),
        }
    }
}

/// Exact byte accounting for a cache instance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MemoryReport {
    pub bytes_fp16: f64,
    pub bytes_int4: f64,
    pub bytes_int2: f64,
    pub bytes_overhead: f64,
    /// `8 * total_bytes / total_elements`; 0 for an empty cache.
    pub effective_bits_per_element: f64,
    /// `16 / effective_bits`; 1.0 for an empty cache.
    pub compression_ratio_vs_fp16: f64,
}

impl MemoryReport {
    pub fn total_bytes(&self) -> f64 {
        self.bytes_fp16 + self.bytes_int4 + self.bytes_int2 + self.bytes_overhead
    }
}

/// One stored token row.
///
/// The full-precision region keeps the raw f32 row: views expose it
/// rounded to the binary16 grid, and eviction-time quantization consumes
/// the raw values so decode produces bit-identical region contents to a
/// prefill of the same tokens.
#[derive(Debug, Clone)]
enum StoredRow {
    Fp16(Vec<f32>),
    Quant(QuantizedRow),
}

impl StoredRow {
    fn reconstruct(&self) -> Vec<f32> {
        match self {
            StoredRow::Fp16(raw) => raw.iter().map(|&v| f16_round(v)).collect(),
            StoredRow::Quant(row) => row.dequantize(),
        }
    }

    fn tier_matches(&self, tier: Tier) -> bool {
        match (self, tier) {
            (StoredRow::Fp16(_), Tier::Fp16) => true,
            (StoredRow::Quant(r), Tier::Int4) => r.groups()[0].bits() == QuantBits::Int4,
            (StoredRow::Quant(r), Tier::Int2) => r.groups()[0].bits() == QuantBits::Int2,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Default)]
struct HeadStore {
    keys: Vec<StoredRow>,
    values: Vec<StoredRow>,
}

/// Per-layer, per-kv-head store of fp16 / int4 / int2 token regions for
/// Keys and Values. Query heads map onto kv heads by integer division.
#[derive(Debug, Clone)]
pub struct MixedPrecisionKVCache {
    cfg: CacheConfig,
    policies: Vec<LayerPolicy>,
    stores: Vec<HeadStore>,
    tiers: Vec<Vec<Tier>>,
    modality: Vec<Modality>,
    len: usize,
}

impl MixedPrecisionKVCache {
    /// Creates an empty cache. `policies` must cover every layer in order
    /// and agree with the config's window and pivot limits.
    pub fn new(cfg: CacheConfig, policies: Vec<LayerPolicy>) -> Result<Self> {
        cfg.validate()?;
        if policies.len() != cfg.n_layers {
            return Err(Error::Param(format!(
                "{} policies for {} layers",
                policies.len(),
                cfg.n_layers
            )));
        }
        for (l, p) in policies.iter().enumerate() {
            if p.layer_index() != l {
                return Err(Error::Param(format!(
                    "policy at position {} is for layer {}",
                    l,
                    p.layer_index()
                )));
            }
            if p.recent_window() != cfg.recent_window || p.n_pivot_max() != cfg.n_pivot_max {
                return Err(Error::Param(format!(
                    "layer {} policy disagrees with the cache config (window {} vs {}, pivots {} vs {})",
                    l,
                    p.recent_window(),
                    cfg.recent_window,
                    p.n_pivot_max(),
                    cfg.n_pivot_max
                )));
            }
        }
        let stores = vec![HeadStore::default(); cfg.n_layers * cfg.n_kv_heads];
        let tiers = vec![Vec::new(); cfg.n_layers];
        Ok(Self {
            cfg,
            policies,
            stores,
            tiers,
            modality: Vec::new(),
            len: 0,
        })
    }

    pub fn config(&self) -> &CacheConfig {
        &self.cfg
    }

    pub fn policies(&self) -> &[LayerPolicy] {
        &self.policies
    }

    /// Tokens stored (identical across layers and heads).
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn tier_of(&self, layer: usize, token: usize) -> Option<Tier> {
        self.tiers.get(layer)?.get(token).copied()
    }

    fn store_index(&self, layer: usize, kv_head: usize) -> Result<usize> {
        if layer >= self.cfg.n_layers || kv_head >= self.cfg.n_kv_heads {
            return Err(Error::Param(format!(
                "layer {} / kv_head {} out of range ({} layers, {} kv heads)",
                layer, kv_head, self.cfg.n_layers, self.cfg.n_kv_heads
            )));
        }
        Ok(layer * self.cfg.n_kv_heads + kv_head)
    }

    fn store_row(&self, row: &[f32], tier: Tier) -> Result<StoredRow> {
        Ok(match tier {
            Tier::Fp16 => StoredRow::Fp16(row.to_vec()),
            t => StoredRow::Quant(QuantizedRow::quantize(row, &self.cfg.quant_params(t)?)?),
        })
    }

    /// Bulk-inserts a whole prompt, classifying tokens per layer.
    ///
    /// `keys` and `values` are (layers x kv_heads x tokens x head_dim).
    pub fn prefill(&mut self, keys: &Tensor, values: &Tensor, modality: &[Modality]) -> Result<()> {
        if self.len != 0 {
            return Err(Error::State("prefill into a non-empty cache".into()));
        }
        let want = [
            self.cfg.n_layers,
            self.cfg.n_kv_heads,
            modality.len(),
            self.cfg.head_dim,
        ];
        if keys.shape() != want || values.shape() != want {
            return Err(Error::Shape(format!(
                "expected K/V shape {:?}, got {:?} and {:?}",
                want,
                keys.shape(),
                values.shape()
            )));
        }
        let tokens = modality.len();
        if tokens == 0 {
            return Err(Error::Shape("prefill of zero tokens".into()));
        }

        let tiers = self
            .policies
            .iter()
            .map(|p| classify_tokens(tokens, modality, p))
            .collect::<Result<Vec<_>>>()?;

        let d = self.cfg.head_dim;
        for layer in 0..self.cfg.n_layers {
            for head in 0..self.cfg.n_kv_heads {
                let idx = layer * self.cfg.n_kv_heads + head;
                let base = idx * tokens * d;
                self.stores[idx].keys.reserve(tokens);
                self.stores[idx].values.reserve(tokens);
                for t in 0..tokens {
                    let tier = tiers[layer][t];
                    let k_row = &keys.data()[base + t * d..base + (t + 1) * d];
                    let v_row = &values.data()[base + t * d..base + (t + 1) * d];
                    let k = self.store_row(k_row, tier)?;
                    let v = self.store_row(v_row, tier)?;
                    self.stores[idx].keys.push(k);
                    self.stores[idx].values.push(v);
                }
            }
        }
        self.tiers = tiers;
        self.modality = modality.to_vec();
        self.len = tokens;
        Ok(())
    }

    /// Appends one decoded token.
    ///
    /// `k_rows` and `v_rows` are (layers x kv_heads x head_dim). The new
    /// token enters the recent region; the token sliding out of the
    /// window (if any) is re-quantized into its settled tier now.
    pub fn append_decode(
        &mut self,
        k_rows: &Tensor,
        v_rows: &Tensor,
        modality_of_new_token: Modality,
    ) -> Result<()> {
        let want = [self.cfg.n_layers, self.cfg.n_kv_heads, self.cfg.head_dim];
        if k_rows.shape() != want || v_rows.shape() != want {
            return Err(Error::Shape(format!(
                "expected row shape {:?}, got {:?} and {:?}",
                want,
                k_rows.shape(),
                v_rows.shape()
            )));
        }
        let d = self.cfg.head_dim;
        for layer in 0..self.cfg.n_layers {
            for head in 0..self.cfg.n_kv_heads {
                let idx = layer * self.cfg.n_kv_heads + head;
                let base = idx * d;
                let k_row = &k_rows.data()[base..base + d];
                let v_row = &v_rows.data()[base..base + d];
                self.stores[idx].keys.push(StoredRow::Fp16(k_row.to_vec()));
                self.stores[idx].values.push(StoredRow::Fp16(v_row.to_vec()));
            }
            self.tiers[layer].push(Tier::Fp16);
        }
        self.modality.push(modality_of_new_token);
        self.len += 1;

        // Token that just slid out of the recent window, if any.
        if let Some(evicted) = (self.len - 1).checked_sub(self.cfg.recent_window) {
            self.requantize_evicted(evicted)?;
        }
        Ok(())
    }

    fn requantize_evicted(&mut self, token: usize) -> Result<()> {
        let modality = self.modality[token];
        for layer in 0..self.cfg.n_layers {
            let tier = self.policies[layer].settled_tier(token, modality);
            if tier == Tier::Fp16 || self.tiers[layer][token] == tier {
                continue;
            }
            let params = self.cfg.quant_params(tier)?;
            for head in 0..self.cfg.n_kv_heads {
                let idx = layer * self.cfg.n_kv_heads + head;
                for side in 0..2 {
                    let rows = if side == 0 {
                        &mut self.stores[idx].keys
                    } else {
                        &mut self.stores[idx].values
                    };
                    let raw = match &rows[token] {
                        StoredRow::Fp16(raw) => raw.clone(),
                        StoredRow::Quant(_) => {
                            return Err(Error::State(format!(
                                "token {} already quantized before leaving the window",
                                token
                            )))
                        }
                    };
                    rows[token] = StoredRow::Quant(QuantizedRow::quantize(&raw, &params)?);
                }
            }
            self.tiers[layer][token] = tier;
        }
        Ok(())
    }

    /// Materializes `(keys, values)` as (tokens x head_dim) tensors:
    /// fp16 rows rounded to the binary16 grid, quantized rows
    /// reconstructed, in token order.
    pub fn dequantized_view(&self, layer: usize, kv_head: usize) -> Result<(Tensor, Tensor)> {
        let idx = self.store_index(layer, kv_head)?;
        let d = self.cfg.head_dim;
        let mut k = Vec::with_capacity(self.len * d);
        let mut v = Vec::with_capacity(self.len * d);
        for row in &self.stores[idx].keys {
            k.extend(row.reconstruct());
        }
        for row in &self.stores[idx].values {
            v.extend(row.reconstruct());
        }
        Ok((
            Tensor::new(vec![self.len, d], k)?,
            Tensor::new(vec![self.len, d], v)?,
        ))
    }

    /// Reconstructed `(key, value)` rows for a single token.
    pub fn row_view(
        &self,
        layer: usize,
        kv_head: usize,
        token: usize,
    ) -> Result<(Vec<f32>, Vec<f32>)> {
        let idx = self.store_index(layer, kv_head)?;
        if token >= self.len {
            return Err(Error::Param(format!(
                "token {} out of range for cache of {}",
                token, self.len
            )));
        }
        Ok((
            self.stores[idx].keys[token].reconstruct(),
            self.stores[idx].values[token].reconstruct(),
        ))
    }

    /// Exact byte accounting over all layers, heads, and both K and V.
    pub fn memory_report(&self) -> MemoryReport {
        let d = self.cfg.head_dim as f64;
        let mut report = MemoryReport {
            bytes_fp16: 0.0,
            bytes_int4: 0.0,
            bytes_int2: 0.0,
            bytes_overhead: 0.0,
            effective_bits_per_element: 0.0,
            compression_ratio_vs_fp16: 1.0,
        };
        let mut total_rows = 0usize;
        for store in &self.stores {
            for row in store.keys.iter().chain(store.values.iter()) {
                total_rows += 1;
                match row {
                    StoredRow::Fp16(_) => report.bytes_fp16 += 2.0 * d,
                    StoredRow::Quant(q) => {
                        let groups = q.groups().len() as f64;
                        match q.groups()[0].bits() {
                            QuantBits::Int4 => report.bytes_int4 += 0.5 * d,
                            QuantBits::Int2 => report.bytes_int2 += 0.25 * d,
                        }
                        report.bytes_overhead += 8.0 * groups;
                    }
                }
            }
        }
        let total_elements = total_rows as f64 * d;
        if total_elements > 0.0 {
            report.effective_bits_per_element = 8.0 * report.total_bytes() / total_elements;
            report.compression_ratio_vs_fp16 = 16.0 / report.effective_bits_per_element;
        }
        report
    }

    /// Debug snapshot: one AKV1 tensor per non-empty (layer, head, region)
    /// for Keys and Values, plus a manifest of token indices. Not a
    /// stability-guaranteed format.
    pub fn dump_snapshot(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut manifest = String::new();
        let d = self.cfg.head_dim;
        for layer in 0..self.cfg.n_layers {
            for head in 0..self.cfg.n_kv_heads {
                let idx = layer * self.cfg.n_kv_heads + head;
                for (region, tier) in
                    [("fp16", Tier::Fp16), ("int4", Tier::Int4), ("int2", Tier::Int2)]
                {
                    let tokens: Vec<usize> = (0..self.len)
                        .filter(|&t| self.tiers[layer][t] == tier)
                        .collect();
                    if tokens.is_empty() {
                        continue;
                    }
                    for (kind, rows) in
                        [("keys", &self.stores[idx].keys), ("values", &self.stores[idx].values)]
                    {
                        let mut data = Vec::with_capacity(tokens.len() * d);
                        for &t in &tokens {
                            data.extend(rows[t].reconstruct());
                        }
                        let tensor = Tensor::new(vec![tokens.len(), d], data)?;
                        let name = format!("layer{}_head{}_{}_{}.akv1", layer, head, region, kind);
                        save_tensor(&tensor, dir.join(name))?;
                    }
                    let list: Vec<String> = tokens.iter().map(|t| t.to_string()).collect();
                    writeln!(
                        manifest,
                        "layer={} head={} region={} tokens={}",
                        layer,
                        head,
                        region,
                        list.join(",")
                    )
                    .expect("writing to a String cannot fail");
                }
            }
        }
        std::fs::write(dir.join("manifest.txt"), manifest)?;
        Ok(())
    }

    /// Checks the region-partition invariant: every token sits in exactly
    /// one region per layer and storage agrees with the tier map.
    pub fn check_partition(&self) -> Result<()> {
        for layer in 0..self.cfg.n_layers {
            if self.tiers[layer].len() != self.len {
                return Err(Error::State(format!(
                    "layer {} tier map covers {} of {} tokens",
                    layer,
                    self.tiers[layer].len(),
                    self.len
                )));
            }
            for head in 0..self.cfg.n_kv_heads {
                let store = &self.stores[layer * self.cfg.n_kv_heads + head];
                if store.keys.len() != self.len || store.values.len() != self.len {
                    return Err(Error::State("row count disagrees with cache length".into()));
                }
                for t in 0..self.len {
                    let tier = self.tiers[layer][t];
                    if !store.keys[t].tier_matches(tier) || !store.values[t].tier_matches(tier) {
                        return Err(Error::State(format!(
                            "layer {} head {} token {} stored outside its {} region",
                            layer, head, t, tier
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::saliency::AttentionPattern;
    use crate::tensor::{gen_random, Dist};

    fn psa_policy(layer: usize, pivots: Vec<usize>, window: usize) -> LayerPolicy {
        LayerPolicy::new(layer, AttentionPattern::Psa, pivots, window, 15).unwrap()
    }

    fn tsa_policy(layer: usize, window: usize) -> LayerPolicy {
        LayerPolicy::new(layer, AttentionPattern::Tsa, vec![], window, 15).unwrap()
    }

    fn cfg(n_layers: usize, n_kv_heads: usize, head_dim: usize, window: usize) -> CacheConfig {
        let mut c = CacheConfig::new(n_layers, n_kv_heads, n_kv_heads, head_dim);
        c.recent_window = window;
        c.wht_enabled = false;
        c
    }

    fn random_kv(cfg: &CacheConfig, tokens: usize, seed: u64) -> (Tensor, Tensor) {
        let shape = vec![cfg.n_layers, cfg.n_kv_heads, tokens, cfg.head_dim];
        (
            gen_random(shape.clone(), seed, Dist::Gaussian { mean: 0.0, std: 1.0 }).unwrap(),
            gen_random(shape, seed + 1, Dist::Gaussian { mean: 0.0, std: 1.0 }).unwrap(),
        )
    }

    fn text_labels(n: usize) -> Vec<Modality> {
        vec![Modality::Text; n]
    }

    #[test]
    fn new_cache_is_empty_with_zero_memory() {
        let c = cfg(2, 1, 4, 128);
        let cache = MixedPrecisionKVCache::new(
            c,
            vec![psa_policy(0, vec![], 128), psa_policy(1, vec![], 128)],
        )
        .unwrap();
        assert_eq!(cache.len(), 0);
        let report = cache.memory_report();
        assert_eq!(report.total_bytes(), 0.0);
        assert_eq!(report.effective_bits_per_element, 0.0);
        assert_eq!(report.compression_ratio_vs_fp16, 1.0);
    }

    #[test]
    fn wht_requires_power_of_two_head_dim() {
        let mut c = cfg(1, 1, 6, 128);
        c.wht_enabled = true;
        assert!(matches!(
            MixedPrecisionKVCache::new(c, vec![psa_policy(0, vec![], 128)]),
            Err(Error::Param(_))
        ));
    }

    #[test]
    fn policies_must_cover_all_layers() {
        let c = cfg(2, 1, 4, 128);
        assert!(matches!(
            MixedPrecisionKVCache::new(c, vec![psa_policy(0, vec![], 128)]),
            Err(Error::Param(_))
        ));
    }

    #[test]
    fn gqa_divisibility_is_enforced() {
        let mut c = CacheConfig::new(1, 4, 3, 8);
        c.wht_enabled = false;
        assert!(c.validate().is_err());
    }

    #[test]
    fn window_dominant_prefill_keeps_everything_fp16() {
        let c = cfg(1, 1, 4, 128);
        let mut cache =
            MixedPrecisionKVCache::new(c.clone(), vec![psa_policy(0, vec![], 128)]).unwrap();
        let (k, v) = random_kv(&c, 4, 7);
        cache.prefill(&k, &v, &text_labels(4)).unwrap();
        assert_eq!(cache.len(), 4);
        let (kv, _) = cache.dequantized_view(0, 0).unwrap();
        for (got, raw) in kv.data().iter().zip(k.data()) {
            assert_eq!(got.to_bits(), f16_round(*raw).to_bits());
        }
    }

    #[test]
    fn prefill_mixed_regions_meet_error_bounds() {
        let c = cfg(1, 1, 128, 128);
        let mut cache =
            MixedPrecisionKVCache::new(c.clone(), vec![psa_policy(0, vec![0], 128)]).unwrap();
        let (k, v) = random_kv(&c, 300, 11);
        cache.prefill(&k, &v, &text_labels(300)).unwrap();

        let (kv, _) = cache.dequantized_view(0, 0).unwrap();
        let d = 128;
        for t in 0..300 {
            let raw = &k.data()[t * d..(t + 1) * d];
            let got = kv.row(t);
            if t == 0 || t >= 172 {
                for i in 0..d {
                    assert_eq!(got[i].to_bits(), f16_round(raw[i]).to_bits(), "token {}", t);
                }
            } else {
                let params = QuantParams::new(QuantBits::Int2, c.clip_int2, c.group_size).unwrap();
                let oracle = QuantizedRow::quantize(raw, &params).unwrap();
                let scale = oracle.groups()[0].scale();
                let (cmin, cmax) = crate::quant::clipped_range(raw, c.clip_int2).unwrap();
                for i in 0..d {
                    if raw[i] >= cmin && raw[i] <= cmax {
                        assert!(
                            (raw[i] - got[i]).abs() <= scale / 2.0 + 1e-6,
                            "token {} element {}",
                            t,
                            i
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn tsa_text_rows_beat_int2_on_mse() {
        let c = cfg(1, 1, 128, 128);
        let mut cache = MixedPrecisionKVCache::new(c.clone(), vec![tsa_policy(0, 128)]).unwrap();
        let (k, v) = random_kv(&c, 300, 13);
        let mut labels = vec![Modality::Text; 100];
        labels.extend(vec![Modality::Vision; 200]);
        cache.prefill(&k, &v, &labels).unwrap();

        let (kv, _) = cache.dequantized_view(0, 0).unwrap();
        let d = 128;
        let int2 = QuantParams::new(QuantBits::Int2, c.clip_int2, c.group_size).unwrap();
        let mut mse4 = 0.0f64;
        let mut mse2 = 0.0f64;
        for t in 0..100 {
            assert_eq!(cache.tier_of(0, t), Some(Tier::Int4));
            let raw = &k.data()[t * d..(t + 1) * d];
            for (i, &x) in raw.iter().enumerate() {
                mse4 += ((x - kv.row(t)[i]) as f64).powi(2);
            }
            let two_bit = QuantizedRow::quantize(raw, &int2).unwrap().dequantize();
            for (i, &x) in raw.iter().enumerate() {
                mse2 += ((x - two_bit[i]) as f64).powi(2);
            }
        }
        assert!(mse4 < mse2, "int4 mse {} vs int2 mse {}", mse4, mse2);
    }

    #[test]
    fn append_respects_the_sliding_window() {
        let c = cfg(1, 1, 8, 2);
        let mut cache =
            MixedPrecisionKVCache::new(c.clone(), vec![psa_policy(0, vec![], 2)]).unwrap();
        for t in 0..5u64 {
            let k = gen_random(vec![1, 1, 8], 100 + t, Dist::Gaussian { mean: 0.0, std: 1.0 })
                .unwrap();
            let v = gen_random(vec![1, 1, 8], 200 + t, Dist::Gaussian { mean: 0.0, std: 1.0 })
                .unwrap();
            cache.append_decode(&k, &v, Modality::Text).unwrap();
        }
        assert_eq!(cache.len(), 5);
        for t in 0..3 {
            assert_eq!(cache.tier_of(0, t), Some(Tier::Int2), "token {}", t);
        }
        for t in 3..5 {
            assert_eq!(cache.tier_of(0, t), Some(Tier::Fp16), "token {}", t);
        }
        cache.check_partition().unwrap();
    }

    #[test]
    fn first_append_lands_in_the_recent_region() {
        let c = cfg(1, 1, 8, 2);
        let mut cache =
            MixedPrecisionKVCache::new(c.clone(), vec![psa_policy(0, vec![], 2)]).unwrap();
        let k = gen_random(vec![1, 1, 8], 1, Dist::Gaussian { mean: 0.0, std: 1.0 }).unwrap();
        cache.append_decode(&k, &k, Modality::Text).unwrap();
        assert_eq!(cache.len(), 1);
        assert_eq!(cache.tier_of(0, 0), Some(Tier::Fp16));
    }

    #[test]
    fn evicted_pivot_stays_fp16() {
        let c = cfg(1, 1, 8, 2);
        let mut cache =
            MixedPrecisionKVCache::new(c.clone(), vec![psa_policy(0, vec![0], 2)]).unwrap();
        for t in 0..5u64 {
            let k = gen_random(vec![1, 1, 8], 300 + t, Dist::Gaussian { mean: 0.0, std: 1.0 })
                .unwrap();
            cache.append_decode(&k, &k, Modality::Vision).unwrap();
        }
        assert_eq!(cache.tier_of(0, 0), Some(Tier::Fp16));
        assert_eq!(cache.tier_of(0, 1), Some(Tier::Int2));
        cache.check_partition().unwrap();
    }

    #[test]
    fn constant_row_reconstructs_exactly_after_quantization() {
        let c = cfg(1, 1, 8, 0);
        let mut cache =
            MixedPrecisionKVCache::new(c.clone(), vec![psa_policy(0, vec![], 0)]).unwrap();
        let k = Tensor::new(vec![1, 1, 8], vec![2.5; 8]).unwrap();
        cache.append_decode(&k, &k, Modality::Text).unwrap();
        assert_eq!(cache.tier_of(0, 0), Some(Tier::Int2));
        let (kv, vv) = cache.dequantized_view(0, 0).unwrap();
        assert_eq!(kv.data(), &[2.5; 8]);
        assert_eq!(vv.data(), &[2.5; 8]);
    }

    #[test]
    fn int2_region_matches_independent_quantization_oracle() {
        let c = cfg(2, 2, 16, 128);
        let policies = vec![psa_policy(0, vec![], 128), psa_policy(1, vec![], 128)];
        let mut cache = MixedPrecisionKVCache::new(c.clone(), policies).unwrap();
        let (k, v) = random_kv(&c, 300, 17);
        cache.prefill(&k, &v, &text_labels(300)).unwrap();

        let params = QuantParams::new(QuantBits::Int2, c.clip_int2, c.group_size).unwrap();
        let d = 16;
        for layer in 0..2 {
            for head in 0..2 {
                let (kv, _) = cache.dequantized_view(layer, head).unwrap();
                let base = (layer * 2 + head) * 300 * d;
                for t in 0..172 {
                    let raw = &k.data()[base + t * d..base + (t + 1) * d];
                    let oracle = QuantizedRow::quantize(raw, &params).unwrap().dequantize();
                    for i in 0..d {
                        assert_eq!(kv.row(t)[i].to_bits(), oracle[i].to_bits());
                    }
                }
            }
        }
    }

    #[test]
    fn prefill_and_append_produce_identical_views() {
        let mut c = cfg(2, 2, 8, 3);
        c.group_size = 4; // multiple groups per row
        let policies = vec![tsa_policy(0, 3), psa_policy(1, vec![1, 4], 3)];
        let tokens = 20;
        let (k, v) = random_kv(&c, tokens, 23);
        let mut labels = Vec::new();
        for t in 0..tokens {
            labels.push(if t % 3 == 0 { Modality::Text } else { Modality::Vision });
        }

        let mut bulk = MixedPrecisionKVCache::new(c.clone(), policies.clone()).unwrap();
        bulk.prefill(&k, &v, &labels).unwrap();

        let mut incremental = MixedPrecisionKVCache::new(c.clone(), policies).unwrap();
        let d = c.head_dim;
        for t in 0..tokens {
            let mut k_row = Vec::with_capacity(2 * 2 * d);
            let mut v_row = Vec::with_capacity(2 * 2 * d);
            for layer in 0..2 {
                for head in 0..2 {
                    let base = (layer * 2 + head) * tokens * d + t * d;
                    k_row.extend_from_slice(&k.data()[base..base + d]);
                    v_row.extend_from_slice(&v.data()[base..base + d]);
                }
            }
            incremental
                .append_decode(
                    &Tensor::new(vec![2, 2, d], k_row).unwrap(),
                    &Tensor::new(vec![2, 2, d], v_row).unwrap(),
                    labels[t],
                )
                .unwrap();
        }

        for layer in 0..2 {
            for head in 0..2 {
                let (bk, bv) = bulk.dequantized_view(layer, head).unwrap();
                let (ik, iv) = incremental.dequantized_view(layer, head).unwrap();
                let bits =
                    |t: &Tensor| -> Vec<u32> { t.data().iter().map(|v| v.to_bits()).collect() };
                assert_eq!(bits(&bk), bits(&ik), "keys layer {} head {}", layer, head);
                assert_eq!(bits(&bv), bits(&iv), "values layer {} head {}", layer, head);
            }
        }
        bulk.check_partition().unwrap();
        incremental.check_partition().unwrap();
    }

    #[test]
    fn views_are_deterministic() {
        let c = cfg(1, 1, 16, 4);
        let mut cache =
            MixedPrecisionKVCache::new(c.clone(), vec![psa_policy(0, vec![], 4)]).unwrap();
        let (k, v) = random_kv(&c, 40, 29);
        cache.prefill(&k, &v, &text_labels(40)).unwrap();
        let (a, b) = cache.dequantized_view(0, 0).unwrap();
        let (a2, b2) = cache.dequantized_view(0, 0).unwrap();
        assert_eq!(a, a2);
        assert_eq!(b, b2);
    }

    #[test]
    fn memory_report_pure_int2() {
        let c = cfg(1, 1, 128, 0);
        let mut cache =
            MixedPrecisionKVCache::new(c.clone(), vec![psa_policy(0, vec![], 0)]).unwrap();
        let (k, v) = random_kv(&c, 10, 31);
        cache.prefill(&k, &v, &text_labels(10)).unwrap();
        let report = cache.memory_report();
        assert_eq!(report.bytes_fp16, 0.0);
        assert_eq!(report.effective_bits_per_element, 2.5);
        assert_eq!(report.compression_ratio_vs_fp16, 6.4);
    }

    #[test]
    fn memory_report_mixed_300_token_example() {
        let c = cfg(1, 1, 128, 128);
        let mut cache =
            MixedPrecisionKVCache::new(c.clone(), vec![psa_policy(0, vec![0], 128)]).unwrap();
        let (k, v) = random_kv(&c, 300, 37);
        cache.prefill(&k, &v, &text_labels(300)).unwrap();
        let report = cache.memory_report();
        let expect = (129.0 * 16.0 + 171.0 * 2.5) / 300.0;
        assert!((report.effective_bits_per_element - expect).abs() <= 1e-9);
        assert!((report.compression_ratio_vs_fp16 - 16.0 / expect).abs() <= 1e-9);
    }

    #[test]
    fn prefill_rejects_bad_shapes_and_state() {
        let c = cfg(1, 1, 8, 128);
        let mut cache =
            MixedPrecisionKVCache::new(c.clone(), vec![psa_policy(0, vec![], 128)]).unwrap();
        let (k, v) = random_kv(&c, 4, 41);
        assert!(matches!(
            cache.prefill(&k, &v, &text_labels(5)),
            Err(Error::Shape(_))
        ));
        cache.prefill(&k, &v, &text_labels(4)).unwrap();
        assert!(matches!(
            cache.prefill(&k, &v, &text_labels(4)),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn snapshot_dump_round_trips_through_akv1() {
        let dir = tempfile::tempdir().unwrap();
        let c = cfg(1, 1, 8, 2);
        let mut cache =
            MixedPrecisionKVCache::new(c.clone(), vec![psa_policy(0, vec![], 2)]).unwrap();
        let (k, v) = random_kv(&c, 6, 43);
        cache.prefill(&k, &v, &text_labels(6)).unwrap();
        cache.dump_snapshot(dir.path()).unwrap();

        let manifest = std::fs::read_to_string(dir.path().join("manifest.txt")).unwrap();
        assert!(manifest.contains("region=fp16"));
        assert!(manifest.contains("region=int2"));
        let fp16 =
            crate::tensor::load_tensor(dir.path().join("layer0_head0_fp16_keys.akv1")).unwrap();
        assert_eq!(fp16.shape(), &[2, 8]);
        let int2 =
            crate::tensor::load_tensor(dir.path().join("layer0_head0_int2_keys.akv1")).unwrap();
        assert_eq!(int2.shape(), &[4, 8]);
    }
}
