//! Walsh-Hadamard matrix, fast transform, and the two
//! equivalence-preserving rotations used around the attention computation.
//!
//! The matrix is built by the recursion
//!
//! ```text
//! H_1 = [1]
//! H_2k = 1/sqrt(2) * [[H_k, H_k], [H_k, -H_k]]
//! ```
//!
//! so every entry has magnitude `1/sqrt(d)` and `H * H^T = I`. The fast
//! transform applies the same recursion as O(d log d) butterflies with the
//! `1/sqrt(2)` normalization baked into each level, which keeps one-hot
//! inputs bit-identical to the explicit matrix rows.
//!
//! Rotating Q and K rows by `H` after positional encoding leaves all
//! attention scores unchanged (`(QH)(KH)^T = QK^T`); folding `H` into the
//! value and output weights leaves the attention output unchanged while
//! the cached tensors become outlier-free.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const INV_SQRT_2: f32 = std::f32::consts::FRAC_1_SQRT_2;

/// A power-of-two transform dimension `d = 2^k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HadamardDim {
    k: u32,
    d: usize,
}

impl HadamardDim {
    pub fn new(d: usize) -> Result<Self> {
        if d == 0 || !d.is_power_of_two() {
            return Err(Error::Param(format!("dimension {} is not a power of two", d)));
        }
        Ok(Self {
            k: d.trailing_zeros(),
            d,
        })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn exponent(&self) -> u32 {
        self.k
    }
}

/// Explicit `d x d` Walsh-Hadamard matrix.
pub fn hadamard_matrix(dim: HadamardDim) -> Tensor {
    let d = dim.d;
    let mut m = vec![1.0f32];
    let mut size = 1;
    while size < d {
        let next = size * 2;
        let mut grown = vec![0.0f32; next * next];
        for i in 0..size {
            for j in 0..size {
                let v = INV_SQRT_2 * m[i * size + j];
                grown[i * next + j] = v;
                grown[i * next + j + size] = v;
                grown[(i + size) * next + j] = v;
                grown[(i + size) * next + j + size] = -v;
            }
        }
        m = grown;
        size = next;
    }
    Tensor::new(vec![d, d], m).expect("square matrix shape is consistent")
}

/// In-place fast Walsh-Hadamard transform with per-level normalization.
pub fn fwht_inplace(v: &mut [f32]) -> Result<()> {
    let d = v.len();
    if d == 0 || !d.is_power_of_two() {
        return Err(Error::Param(format!("length {} is not a power of two", d)));
    }
    let mut h = 1;
    while h < d {
        let mut i = 0;
        while i < d {
            for j in i..i + h {
                let x = v[j];
                let y = v[j + h];
                v[j] = (x + y) * INV_SQRT_2;
                v[j + h] = (x - y) * INV_SQRT_2;
            }
            i += h * 2;
        }
        h *= 2;
    }
    Ok(())
}

/// Rotates every row of post-RoPE Q and K by the Hadamard matrix.
///
/// Attention scores are preserved: `(QH)(KH)^T = QK^T` in exact arithmetic.
pub fn apply_qk_transform(q_rows: &Tensor, k_rows: &Tensor) -> Result<(Tensor, Tensor)> {
    if q_rows.ndim() != 2 || k_rows.ndim() != 2 {
        return Err(Error::Shape("expected 2-D (tokens x head_dim) tensors".into()));
    }
    let d = q_rows.dim(1);
    if k_rows.dim(1) != d {
        return Err(Error::Shape(format!(
            "head dimension mismatch: Q has {}, K has {}",
            d,
            k_rows.dim(1)
        )));
    }
    HadamardDim::new(d)?;
    let mut q = q_rows.clone();
    let mut k = k_rows.clone();
    for t in 0..q.dim(0) {
        fwht_inplace(q.row_mut(t))?;
    }
    for t in 0..k.dim(0) {
        fwht_inplace(k.row_mut(t))?;
    }
    Ok((q, k))
}

/// Folds the Hadamard matrix into the value and output weights offline.
///
/// Per head, the head's output columns of `w_v` are right-multiplied by H
/// and the head's input rows of `w_o` are left-multiplied by H^T, so
/// `(A (X w_v')) w_o' = (A (X w_v)) w_o` for any attention weights A.
pub fn fold_value_weights(
    w_v: &Tensor,
    w_o: &Tensor,
    head_dim: usize,
) -> Result<(Tensor, Tensor)> {
    if w_v.ndim() != 2 || w_o.ndim() != 2 {
        return Err(Error::Shape("expected 2-D weight matrices".into()));
    }
    let d = w_v.dim(0);
    if w_v.dim(1) != d || w_o.dim(0) != d || w_o.dim(1) != d {
        return Err(Error::Shape("weight matrices must be d x d".into()));
    }
    HadamardDim::new(head_dim)?;
    if d % head_dim != 0 {
        return Err(Error::Shape(format!(
            "head_dim {} does not divide model dim {}",
            head_dim, d
        )));
    }
    let n_heads = d / head_dim;

    // W_V' = W_V * blockdiag(H): transform each row segment per head.
    let mut wv = w_v.clone();
    for r in 0..d {
        let row = wv.row_mut(r);
        for h in 0..n_heads {
            fwht_inplace(&mut row[h * head_dim..(h + 1) * head_dim])?;
        }
    }

    // W_O' = blockdiag(H^T) * W_O: transform each column segment per head.
    // H is symmetric, so H^T = H.
    let mut wo = w_o.clone();
    let mut col = vec![0.0f32; head_dim];
    for c in 0..d {
        for h in 0..n_heads {
            for i in 0..head_dim {
                col[i] = wo.data()[(h * head_dim + i) * d + c];
            }
            fwht_inplace(&mut col)?;
            for i in 0..head_dim {
                wo.data_mut()[(h * head_dim + i) * d + c] = col[i];
            }
        }
    }
    Ok((wv, wo))
}

/// Channel peak-to-mean ratio of per-token mean absolute values.
///
/// Returns `max_c mean_t |x[t,c]| / mean_c mean_t |x[t,c]|`; always >= 1.
pub fn outlier_ratio(t: &Tensor) -> Result<f32> {
    if t.ndim() != 2 || t.numel() == 0 {
        return Err(Error::Shape("expected a non-empty 2-D tensor".into()));
    }
    let (tokens, channels) = (t.dim(0), t.dim(1));
    let mut channel_means = vec![0.0f64; channels];
    for r in 0..tokens {
        for (c, &v) in t.row(r).iter().enumerate() {
            channel_means[c] += v.abs() as f64;
        }
    }
    for m in &mut channel_means {
        *m /= tokens as f64;
    }
    let peak = channel_means.iter().cloned().fold(0.0f64, f64::max);
    let mean = channel_means.iter().sum::<f64>() / channels as f64;
    if mean == 0.0 {
        return Err(Error::Undefined(
            "outlier ratio of an all-zero tensor".into(),
        ));
    }
    Ok((peak / mean) as f32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{gen_random, Dist};

    fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f32::max)
    }

    /// Explicit row-vector product v * H for cross-checking the butterflies.
    fn matvec(v: &[f32], h: &Tensor) -> Vec<f32> {
        let d = v.len();
        (0..d)
            .map(|j| (0..d).map(|i| v[i] * h.data()[i * d + j]).sum())
            .collect()
    }

    #[test]
    fn h1_is_identity() {
        let h = hadamard_matrix(HadamardDim::new(1).unwrap());
        assert_eq!(h.data(), &[1.0]);
    }

    #[test]
    fn h2_matches_the_recursion_exactly() {
        let h = hadamard_matrix(HadamardDim::new(2).unwrap());
        assert_eq!(
            h.data(),
            &[INV_SQRT_2, INV_SQRT_2, INV_SQRT_2, -INV_SQRT_2]
        );
    }

    #[test]
    fn h4_entries_and_gram_matrix() {
        let h = hadamard_matrix(HadamardDim::new(4).unwrap());
        for &v in h.data() {
            // Per-level normalization: entries are (1/sqrt 2)^2, i.e. 0.5
            // up to one f32 rounding.
            assert!((v.abs() - 0.5).abs() <= 1e-6);
        }
        for i in 0..4 {
            for j in 0..4 {
                let dot: f32 = (0..4).map(|k| h.data()[i * 4 + k] * h.data()[j * 4 + k]).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((dot - expect).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn non_power_of_two_is_rejected() {
        assert!(matches!(HadamardDim::new(0), Err(Error::Param(_))));
        assert!(matches!(HadamardDim::new(6), Err(Error::Param(_))));
        assert!(matches!(fwht_inplace(&mut [0.0; 3]), Err(Error::Param(_))));
    }

    #[test]
    fn fwht_of_unit_vector_matches_h2() {
        let mut v = [1.0, 0.0];
        fwht_inplace(&mut v).unwrap();
        assert_eq!(v, [INV_SQRT_2, INV_SQRT_2]);
    }

    #[test]
    fn fwht_is_an_involution() {
        let t = gen_random(vec![256], 5, Dist::Gaussian { mean: 0.0, std: 1.0 }).unwrap();
        let mut v = t.data().to_vec();
        fwht_inplace(&mut v).unwrap();
        fwht_inplace(&mut v).unwrap();
        assert!(max_abs_diff(&v, t.data()) <= 1e-6);
    }

    #[test]
    fn fwht_spreads_one_hot_uniformly() {
        let c = 3.5f32;
        let d = 64;
        for j in [0usize, 17, 63] {
            let mut v = vec![0.0f32; d];
            v[j] = c;
            fwht_inplace(&mut v).unwrap();
            let expect = c / (d as f32).sqrt();
            for &x in &v {
                assert!((x.abs() - expect).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn fwht_agrees_with_explicit_matrix() {
        for k in 1..=9 {
            let d = 1usize << k;
            let h = hadamard_matrix(HadamardDim::new(d).unwrap());
            let t = gen_random(vec![d], k as u64, Dist::Gaussian { mean: 0.0, std: 1.0 })
                .unwrap();
            let mut v = t.data().to_vec();
            fwht_inplace(&mut v).unwrap();
            let explicit = matvec(t.data(), &h);
            assert!(max_abs_diff(&v, &explicit) <= 1e-5, "d = {}", d);
        }
    }

    #[test]
    fn fwht_conserves_energy() {
        let t = gen_random(vec![512], 8, Dist::Gaussian { mean: 0.0, std: 2.0 }).unwrap();
        let before: f64 = t.data().iter().map(|&x| (x as f64).powi(2)).sum();
        let mut v = t.data().to_vec();
        fwht_inplace(&mut v).unwrap();
        let after: f64 = v.iter().map(|&x| (x as f64).powi(2)).sum();
        assert!(((before.sqrt() - after.sqrt()) / before.sqrt()).abs() <= 1e-5);
    }

    #[test]
    fn qk_transform_preserves_attention_scores() {
        let q = gen_random(vec![64, 128], 21, Dist::Gaussian { mean: 0.0, std: 1.0 }).unwrap();
        let k = gen_random(vec![64, 128], 22, Dist::Gaussian { mean: 0.0, std: 1.0 }).unwrap();
        let (qh, kh) = apply_qk_transform(&q, &k).unwrap();
        let mut worst = 0.0f32;
        for a in 0..64 {
            for b in 0..64 {
                let before: f32 = q.row(a).iter().zip(k.row(b)).map(|(x, y)| x * y).sum();
                let after: f32 = qh.row(a).iter().zip(kh.row(b)).map(|(x, y)| x * y).sum();
                worst = worst.max((before - after).abs());
            }
        }
        assert!(worst <= 1e-4, "max score deviation {}", worst);
    }

    #[test]
    fn qk_transform_of_basis_vector_is_first_hadamard_row() {
        let d = 8;
        let mut e0 = vec![0.0f32; d];
        e0[0] = 1.0;
        let q = Tensor::new(vec![1, d], e0.clone()).unwrap();
        let k = Tensor::new(vec![1, d], e0).unwrap();
        let (qh, kh) = apply_qk_transform(&q, &k).unwrap();
        let h = hadamard_matrix(HadamardDim::new(d).unwrap());
        assert_eq!(qh.row(0), &h.data()[0..d]);
        let dot: f32 = qh.row(0).iter().zip(kh.row(0)).map(|(x, y)| x * y).sum();
        assert!((dot - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn qk_transform_keeps_zero_keys_zero() {
        let q = gen_random(vec![4, 16], 1, Dist::Gaussian { mean: 0.0, std: 1.0 }).unwrap();
        let k = Tensor::zeros(vec![4, 16]);
        let (_, kh) = apply_qk_transform(&q, &k).unwrap();
        assert!(kh.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn qk_transform_rejects_mismatched_head_dims() {
        let q = Tensor::zeros(vec![2, 8]);
        let k = Tensor::zeros(vec![2, 4]);
        assert!(matches!(apply_qk_transform(&q, &k), Err(Error::Shape(_))));
    }

    #[test]
    fn folding_identity_weights_yields_h2() {
        let eye = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let (wv, wo) = fold_value_weights(&eye, &eye, 2).unwrap();
        let h = hadamard_matrix(HadamardDim::new(2).unwrap());
        assert_eq!(wv.data(), h.data());
        assert_eq!(wo.data(), h.data());
    }

    #[test]
    fn folded_weights_preserve_attention_output() {
        let d = 16;
        let head_dim = 8;
        let x = gen_random(vec![8, d], 31, Dist::Gaussian { mean: 0.0, std: 1.0 }).unwrap();
        let wv = gen_random(vec![d, d], 32, Dist::Gaussian { mean: 0.0, std: 1.0 }).unwrap();
        let wo = gen_random(vec![d, d], 33, Dist::Gaussian { mean: 0.0, std: 1.0 }).unwrap();
        // Row-stochastic attention weights.
        let mut a = gen_random(vec![8, 8], 34, Dist::Uniform { lo: 0.0, hi: 1.0 }).unwrap();
        for r in 0..8 {
            let s: f32 = a.row(r).iter().sum();
            for v in a.row_mut(r) {
                *v /= s;
            }
        }

        let matmul = |x: &Tensor, y: &Tensor| -> Tensor {
            let (n, k1) = (x.dim(0), x.dim(1));
            let m = y.dim(1);
            let mut out = vec![0.0f32; n * m];
            for i in 0..n {
                for l in 0..k1 {
                    let xv = x.data()[i * k1 + l];
                    for j in 0..m {
                        out[i * m + j] += xv * y.data()[l * m + j];
                    }
                }
            }
            Tensor::new(vec![n, m], out).unwrap()
        };

        let (wv2, wo2) = fold_value_weights(&wv, &wo, head_dim).unwrap();
        let base = matmul(&matmul(&a, &matmul(&x, &wv)), &wo);
        let folded = matmul(&matmul(&a, &matmul(&x, &wv2)), &wo2);
        assert!(max_abs_diff(base.data(), folded.data()) <= 1e-4);
    }

    #[test]
    fn folding_twice_recovers_the_weights() {
        let d = 8;
        let wv = gen_random(vec![d, d], 41, Dist::Gaussian { mean: 0.0, std: 1.0 }).unwrap();
        let wo = gen_random(vec![d, d], 42, Dist::Gaussian { mean: 0.0, std: 1.0 }).unwrap();
        let (wv1, wo1) = fold_value_weights(&wv, &wo, d).unwrap();
        let (wv2, wo2) = fold_value_weights(&wv1, &wo1, d).unwrap();
        assert!(max_abs_diff(wv2.data(), wv.data()) <= 1e-5);
        assert!(max_abs_diff(wo2.data(), wo.data()) <= 1e-5);
    }

    #[test]
    fn fold_rejects_non_dividing_head_dim() {
        let w = Tensor::zeros(vec![12, 12]);
        assert!(matches!(
            fold_value_weights(&w, &w, 8),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn outlier_ratio_of_uniform_tensor_is_one() {
        let t = Tensor::new(vec![4, 4], vec![1.0; 16]).unwrap();
        assert_eq!(outlier_ratio(&t).unwrap(), 1.0);
    }

    #[test]
    fn outlier_ratio_of_hot_channel() {
        let mut data = vec![1.0f32; 30];
        for r in 0..3 {
            data[r * 10] = 100.0;
        }
        let t = Tensor::new(vec![3, 10], data).unwrap();
        let ratio = outlier_ratio(&t).unwrap();
        assert!((ratio - 100.0 / 10.9).abs() <= 1e-4, "ratio {}", ratio);
    }

    #[test]
    fn outlier_ratio_after_fwht_of_one_hot_rows_is_one() {
        let d = 32;
        let tokens = 5;
        let mut t = Tensor::zeros(vec![tokens, d]);
        for r in 0..tokens {
            t.row_mut(r)[7] = 2.0;
            fwht_inplace(t.row_mut(r)).unwrap();
        }
        let ratio = outlier_ratio(&t).unwrap();
        assert!((ratio - 1.0).abs() <= 1e-6, "ratio {}", ratio);
    }

    #[test]
    fn outlier_ratio_of_zero_tensor_is_undefined() {
        let t = Tensor::zeros(vec![3, 3]);
        assert!(matches!(outlier_ratio(&t), Err(Error::Undefined(_))));
    }
}
