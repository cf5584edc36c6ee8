//! Attention-aware salient-token identification.
//!
//! Layers fall into two attention patterns: TSA (text-salient, early
//! layers where text tokens dominate attention over vision tokens) and
//! PSA (pivot-token-salient, later layers where a few pivot tokens
//! identified by massive residual activations attract most attention).
//! The per-token precision tier follows from the layer's pattern:
//!
//! * recent tokens are kept at 16-bit everywhere (attention locality);
//! * TSA layers keep text tokens at 4-bit, everything else at 2-bit;
//! * PSA layers keep pivot tokens at 16-bit, everything else at 2-bit.

use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Token modality as supplied by the embedding pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Text,
    Vision,
}

/// Storage precision tier for one token's KV rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tier {
    Fp16,
    Int4,
    Int2,
}

impl fmt::Display for Tier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tier::Fp16 => write!(f, "fp16"),
            Tier::Int4 => write!(f, "int4"),
            Tier::Int2 => write!(f, "int2"),
        }
    }
}

/// Per-layer attention pattern.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionPattern {
    Tsa,
    Psa,
}

/// One token's position, modality, and assigned tier.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenMeta {
    pub index: usize,
    pub modality: Modality,
    pub tier: Tier,
}

/// Per-layer quantization policy.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerPolicy {
    layer_index: usize,
    pattern: AttentionPattern,
    pivot_indices: Vec<usize>,
    recent_window: usize,
    n_pivot_max: usize,
    psa_text_int4: bool,
}

impl LayerPolicy {
    /// Builds a policy; pivot indices are only meaningful under PSA and
    /// may not exceed `n_pivot_max`.
    pub fn new(
        layer_index: usize,
        pattern: AttentionPattern,
        pivot_indices: Vec<usize>,
        recent_window: usize,
        n_pivot_max: usize,
    ) -> Result<Self> {
        if pattern == AttentionPattern::Tsa && !pivot_indices.is_empty() {
            return Err(Error::Param(format!(
                "layer {}: pivot indices are only valid under PSA",
                layer_index
            )));
        }
        if pivot_indices.len() > n_pivot_max {
            return Err(Error::Param(format!(
                "layer {}: {} pivots exceed n_pivot_max {}",
                layer_index,
                pivot_indices.len(),
                n_pivot_max
            )));
        }
        Ok(Self {
            layer_index,
            pattern,
            pivot_indices,
            recent_window,
            n_pivot_max,
            psa_text_int4: false,
        })
    }

    /// Experimental: also store text tokens at 4-bit in PSA layers.
    pub fn with_psa_text_int4(mut self, enabled: bool) -> Self {
        self.psa_text_int4 = enabled;
        self
    }

    pub fn layer_index(&self) -> usize {
        self.layer_index
    }

    pub fn pattern(&self) -> AttentionPattern {
        self.pattern
    }

    pub fn pivot_indices(&self) -> &[usize] {
        &self.pivot_indices
    }

    pub fn recent_window(&self) -> usize {
        self.recent_window
    }

    pub fn n_pivot_max(&self) -> usize {
        self.n_pivot_max
    }

    /// Tier a token falls into once it is outside the recent window.
    pub fn settled_tier(&self, index: usize, modality: Modality) -> Tier {
        match self.pattern {
            AttentionPattern::Tsa => match modality {
                Modality::Text => Tier::Int4,
                Modality::Vision => Tier::Int2,
            },
            AttentionPattern::Psa => {
                if self.pivot_indices.contains(&index) {
                    Tier::Fp16
                } else if self.psa_text_int4 && modality == Modality::Text {
                    Tier::Int4
                } else {
                    Tier::Int2
                }
            }
        }
    }
}

/// Per-head mean attention received by each modality.
///
/// Keys before `excluded_prefix` are left out of the averages so sink
/// tokens do not skew the comparison. A modality with no keys after the
/// exclusion is reported as absent.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityAttentionStats {
    pub text_mean_per_head: Option<Vec<f32>>,
    pub vision_mean_per_head: Option<Vec<f32>>,
    pub excluded_prefix: usize,
}

impl ModalityAttentionStats {
    pub fn text_mean(&self) -> Option<f32> {
        self.text_mean_per_head.as_ref().map(|v| mean(v))
    }

    pub fn vision_mean(&self) -> Option<f32> {
        self.vision_mean_per_head.as_ref().map(|v| mean(v))
    }
}

fn mean(v: &[f32]) -> f32 {
    v.iter().sum::<f32>() / v.len() as f32
}

/// Per-head mean attention score received by keys of each modality.
///
/// `attn` is (heads x query_tokens x key_tokens) of softmax rows; every
/// query row must sum to 1 within 1e-4.
pub fn modality_attention_stats(
    attn: &Tensor,
    modality: &[Modality],
    excluded_prefix: usize,
) -> Result<ModalityAttentionStats> {
    if attn.ndim() != 3 {
        return Err(Error::Shape(
            "expected (heads x query_tokens x key_tokens)".into(),
        ));
    }
    let (heads, q_tokens, k_tokens) = (attn.dim(0), attn.dim(1), attn.dim(2));
    if modality.len() != k_tokens {
        return Err(Error::Input(format!(
            "{} modality labels for {} key tokens",
            modality.len(),
            k_tokens
        )));
    }

    for h in 0..heads {
        for q in 0..q_tokens {
            let base = (h * q_tokens + q) * k_tokens;
            let sum: f32 = attn.data()[base..base + k_tokens].iter().sum();
            if (sum - 1.0).abs() > 1e-4 {
                return Err(Error::Input(format!(
                    "attention row (head {}, query {}) sums to {}, not 1",
                    h, q, sum
                )));
            }
        }
    }

    let count_of = |m: Modality| {
        modality
            .iter()
            .enumerate()
            .filter(|(k, &lab)| *k >= excluded_prefix && lab == m)
            .count()
    };
    let text_keys = count_of(Modality::Text);
    let vision_keys = count_of(Modality::Vision);

    let mut text = vec![0.0f64; heads];
    let mut vision = vec![0.0f64; heads];
    for h in 0..heads {
        for q in 0..q_tokens {
            let base = (h * q_tokens + q) * k_tokens;
            for k in excluded_prefix..k_tokens {
                let a = attn.data()[base + k] as f64;
                match modality[k] {
                    Modality::Text => text[h] += a,
                    Modality::Vision => vision[h] += a,
                }
            }
        }
    }
    let finish = |sums: Vec<f64>, keys: usize| -> Option<Vec<f32>> {
        if keys == 0 {
            return None;
        }
        Some(
            sums.into_iter()
                .map(|s| (s / (q_tokens * keys) as f64) as f32)
                .collect(),
        )
    };

    Ok(ModalityAttentionStats {
        text_mean_per_head: finish(text, text_keys),
        vision_mean_per_head: finish(vision, vision_keys),
        excluded_prefix,
    })
}

/// Outcome of TSA detection over a stack of layers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TsaDetection {
    /// Layers where text attention dominates vision attention by `gamma`.
    pub tsa_layers: Vec<usize>,
    /// Layers skipped because a modality statistic was absent.
    pub skipped_layers: Vec<usize>,
}

/// Flags a layer as TSA when its mean text attention exceeds
/// `gamma` times its mean vision attention. Non-TSA layers are PSA.
pub fn detect_tsa_layers(
    stats_per_layer: &[ModalityAttentionStats],
    gamma: f32,
) -> Result<TsaDetection> {
    if !gamma.is_finite() || gamma <= 1.0 {
        return Err(Error::Param(format!("gamma {} must be > 1", gamma)));
    }
    let mut tsa_layers = Vec::new();
    let mut skipped_layers = Vec::new();
    for (layer, stats) in stats_per_layer.iter().enumerate() {
        match (stats.text_mean(), stats.vision_mean()) {
            (Some(t), Some(v)) => {
                if t > gamma * v {
                    tsa_layers.push(layer);
                }
            }
            _ => skipped_layers.push(layer),
        }
    }
    Ok(TsaDetection {
        tsa_layers,
        skipped_layers,
    })
}

/// Pivot-token detection from residual-stream massive activations.
///
/// A token's score is its largest absolute channel value; tokens scoring
/// above `tau` times the median score are returned in descending score
/// order, truncated to `n_pivot_max`. When nothing qualifies, the
/// attention-sink position `[0]` is returned.
pub fn detect_pivot_tokens(
    residual: &Tensor,
    tau: f32,
    n_pivot_max: usize,
) -> Result<Vec<usize>> {
    if residual.ndim() != 2 || residual.dim(0) == 0 {
        return Err(Error::Shape("expected a non-empty (tokens x hidden) tensor".into()));
    }
    if !tau.is_finite() || tau <= 1.0 {
        return Err(Error::Param(format!("tau {} must be > 1", tau)));
    }
    let tokens = residual.dim(0);
    let scores: Vec<f32> = (0..tokens)
        .map(|t| residual.row(t).iter().fold(0.0f32, |m, &v| m.max(v.abs())))
        .collect();

    let mut sorted = scores.clone();
    sorted.sort_by(f32::total_cmp);
    let median = if tokens % 2 == 1 {
        sorted[tokens / 2]
    } else {
        (sorted[tokens / 2 - 1] + sorted[tokens / 2]) / 2.0
    };

    let mut qualifying: Vec<(usize, f32)> = scores
        .iter()
        .enumerate()
        .filter(|&(_, &s)| s > tau * median)
        .map(|(i, &s)| (i, s))
        .collect();
    qualifying.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    qualifying.truncate(n_pivot_max);

    if qualifying.is_empty() {
        return Ok(vec![0]);
    }
    Ok(qualifying.into_iter().map(|(i, _)| i).collect())
}

/// Assigns a precision tier to every token of a sequence under `policy`.
///
/// The last `recent_window` positions are 16-bit in all layers; other
/// tokens settle into the tier dictated by the layer's pattern.
pub fn classify_tokens(
    seq_len: usize,
    modality: &[Modality],
    policy: &LayerPolicy,
) -> Result<Vec<Tier>> {
    if modality.len() != seq_len {
        return Err(Error::Param(format!(
            "{} modality labels for seq_len {}",
            modality.len(),
            seq_len
        )));
    }
    if let Some(&bad) = policy.pivot_indices.iter().find(|&&p| p >= seq_len) {
        return Err(Error::Param(format!(
            "pivot index {} out of range for seq_len {}",
            bad, seq_len
        )));
    }
    let recent_start = seq_len.saturating_sub(policy.recent_window);
    Ok((0..seq_len)
        .map(|i| {
            if i >= recent_start {
                Tier::Fp16
            } else {
                policy.settled_tier(i, modality[i])
            }
        })
        .collect())
}

/// Pairs classification output with token metadata.
pub fn token_metas(modality: &[Modality], tiers: &[Tier]) -> Vec<TokenMeta> {
    modality
        .iter()
        .zip(tiers)
        .enumerate()
        .map(|(index, (&modality, &tier))| TokenMeta {
            index,
            modality,
            tier,
        })
        .collect()
}

/// A whole-model policy: shared analysis parameters plus per-layer
/// patterns, serializable as a plain-text key-value file.
///
/// ```text
/// # comments and blank lines are ignored
/// recent_window = 128
/// n_pivot_max = 15
/// tau = 50
/// gamma = 2
/// psa_text_int4 = false
/// pivots = 3, 11
/// layer 0 = tsa
/// layer 1 = psa
/// ```
///
/// Every layer index from 0 upward must appear exactly once; the shared
/// pivot set applies to all PSA layers.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicySet {
    pub recent_window: usize,
    pub n_pivot_max: usize,
    pub tau: f32,
    pub gamma: f32,
    pub psa_text_int4: bool,
    pub pivots: Vec<usize>,
    pub patterns: Vec<AttentionPattern>,
}

impl PolicySet {
    /// Policy with the reference defaults and the given TSA layers.
    pub fn uniform(n_layers: usize, tsa_layers: &[usize]) -> Self {
        let patterns = (0..n_layers)
            .map(|l| {
                if tsa_layers.contains(&l) {
                    AttentionPattern::Tsa
                } else {
                    AttentionPattern::Psa
                }
            })
            .collect();
        Self {
            recent_window: crate::defaults::RECENT_WINDOW,
            n_pivot_max: crate::defaults::N_PIVOT_MAX,
            tau: crate::defaults::TAU,
            gamma: crate::defaults::GAMMA,
            psa_text_int4: false,
            pivots: Vec::new(),
            patterns,
        }
    }

    pub fn with_pivots(mut self, pivots: Vec<usize>) -> Self {
        self.pivots = pivots;
        self
    }

    pub fn n_layers(&self) -> usize {
        self.patterns.len()
    }

    /// Expands into one validated [`LayerPolicy`] per layer.
    pub fn layer_policies(&self) -> Result<Vec<LayerPolicy>> {
        self.patterns
            .iter()
            .enumerate()
            .map(|(l, &pattern)| {
                let pivots = match pattern {
                    AttentionPattern::Psa => self.pivots.clone(),
                    AttentionPattern::Tsa => Vec::new(),
                };
                LayerPolicy::new(l, pattern, pivots, self.recent_window, self.n_pivot_max)
                    .map(|p| p.with_psa_text_int4(self.psa_text_int4))
            })
            .collect()
    }

    /// Parses the key-value policy grammar.
    pub fn parse(text: &str) -> Result<Self> {
        let mut set = PolicySet::uniform(0, &[]);
        let mut layers: Vec<(usize, AttentionPattern)> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("line {}: expected 'key = value'", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            let bad_value =
                |what: &str| Error::Format(format!("line {}: bad {} '{}'", lineno + 1, what, value));
            if let Some(idx) = key.strip_prefix("layer ") {
                let idx: usize = idx.trim().parse().map_err(|_| bad_value("layer index"))?;
                let pattern = match value {
                    "tsa" => AttentionPattern::Tsa,
                    "psa" => AttentionPattern::Psa,
                    _ => return Err(bad_value("pattern")),
                };
                layers.push((idx, pattern));
                continue;
            }
            match key {
                "recent_window" => {
                    set.recent_window = value.parse().map_err(|_| bad_value("recent_window"))?
                }
                "n_pivot_max" => {
                    set.n_pivot_max = value.parse().map_err(|_| bad_value("n_pivot_max"))?
                }
                "tau" => set.tau = value.parse().map_err(|_| bad_value("tau"))?,
                "gamma" => set.gamma = value.parse().map_err(|_| bad_value("gamma"))?,
                "psa_text_int4" => {
                    set.psa_text_int4 = value.parse().map_err(|_| bad_value("psa_text_int4"))?
                }
                "pivots" => {
                    set.pivots = value
                        .split(',')
                        .map(|s| s.trim().parse::<usize>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|_| bad_value("pivot list"))?
                }
                _ => {
                    return Err(Error::Format(format!(
                        "line {}: unknown key '{}'",
                        lineno + 1,
                        key
                    )))
                }
            }
        }

        layers.sort_by_key(|&(idx, _)| idx);
        for (expect, &(idx, _)) in layers.iter().enumerate() {
            if idx != expect {
                return Err(Error::Format(format!(
                    "layer lines must cover 0..n exactly once; problem at layer {}",
                    idx
                )));
            }
        }
        set.patterns = layers.into_iter().map(|(_, p)| p).collect();
        if set.patterns.is_empty() {
            return Err(Error::Format("policy file declares no layers".into()));
        }
        // Surface pivot-count violations at parse time.
        set.layer_policies()?;
        Ok(set)
    }

    /// Serializes to the same grammar [`PolicySet::parse`] accepts.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("recent_window = {}\n", self.recent_window));
        out.push_str(&format!("n_pivot_max = {}\n", self.n_pivot_max));
        out.push_str(&format!("tau = {}\n", self.tau));
        out.push_str(&format!("gamma = {}\n", self.gamma));
        out.push_str(&format!("psa_text_int4 = {}\n", self.psa_text_int4));
        if !self.pivots.is_empty() {
            let list: Vec<String> = self.pivots.iter().map(|p| p.to_string()).collect();
            out.push_str(&format!("pivots = {}\n", list.join(", ")));
        }
        for (l, pattern) in self.patterns.iter().enumerate() {
            let name = match pattern {
                AttentionPattern::Tsa => "tsa",
                AttentionPattern::Psa => "psa",
            };
            out.push_str(&format!("layer {} = {}\n", l, name));
        }
        out
    }
}
