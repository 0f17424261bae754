// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dense kernels shared by the model, SAE and lens code.
//!
//! Everything is stored as row-major `f32`. Dot products accumulate in
//! `f64` and are rounded once, which keeps results independent of how a
//! matrix is split into row blocks (the incremental decoder relies on that).

use std::cmp::Ordering;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Epsilon used by both normalisation kinds.
pub const NORM_EPS: f64 = 1e-6;

/// Dense row-major matrix of finite `f32` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::Shape(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Matrix::new"));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub(crate) fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols + j]
    }

    pub fn column(&self, j: usize) -> Vec<f32> {
        (0..self.rows).map(|i| self.data[i * self.cols + j]).collect()
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub(crate) fn ensure_finite(&self, op: &'static str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(op))
        }
    }
}

/// Standard matrix product `a · b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::Shape(format!(
            "matmul {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    rows_times(a.data(), a.rows, b, out.data_mut());
    out.ensure_finite("matmul")?;
    Ok(out)
}

/// `out[r] = x[r] · w` for each of `rows` rows of `x`. Shapes are the
/// caller's responsibility.
pub(crate) fn rows_times(x: &[f32], rows: usize, w: &Matrix, out: &mut [f32]) {
    let (inner, cols) = (w.rows, w.cols);
    debug_assert_eq!(x.len(), rows * inner);
    debug_assert_eq!(out.len(), rows * cols);
    let mut acc = vec![0f64; cols];
    for r in 0..rows {
        acc.iter_mut().for_each(|a| *a = 0.0);
        let xr = &x[r * inner..(r + 1) * inner];
        for (k, &xv) in xr.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            let xv = f64::from(xv);
            for (a, &wv) in acc.iter_mut().zip(w.row(k)) {
                *a += xv * f64::from(wv);
            }
        }
        for (o, a) in out[r * cols..(r + 1) * cols].iter_mut().zip(&acc) {
            *o = *a as f32;
        }
    }
}

/// `x · w` for a single row vector `x`.
pub fn vec_mat(x: &[f32], w: &Matrix) -> Result<Vec<f32>> {
    if x.len() != w.rows {
        return Err(Error::Shape(format!(
            "vector of {} by {}x{} matrix",
            x.len(),
            w.rows,
            w.cols
        )));
    }
    let mut out = vec![0.0; w.cols];
    rows_times(x, 1, w, &mut out);
    Ok(out)
}

/// `w · x` for a column vector `x`.
pub fn mat_vec(w: &Matrix, x: &[f32]) -> Result<Vec<f32>> {
    if x.len() != w.cols {
        return Err(Error::Shape(format!(
            "{}x{} matrix by vector of {}",
            w.rows,
            w.cols,
            x.len()
        )));
    }
    Ok((0..w.rows).map(|i| dot(w.row(i), x) as f32).collect())
}

pub(crate) fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    #[default]
    RmsNorm,
    LayerNorm,
}

/// RMSNorm or LayerNorm with a per-channel gain (and bias for LayerNorm).
pub fn normalize(x: &[f32], kind: NormKind, gain: &[f32], bias: Option<&[f32]>) -> Result<Vec<f32>> {
    if x.is_empty() {
        return Err(Error::Shape("cannot normalise an empty vector".into()));
    }
    if gain.len() != x.len() {
        return Err(Error::Shape(format!(
            "gain of {} for vector of {}",
            gain.len(),
            x.len()
        )));
    }
    let n = x.len() as f64;
    match kind {
        NormKind::RmsNorm => {
            if bias.is_some() {
                return Err(Error::Shape("rmsnorm takes no bias".into()));
            }
            let ms = x.iter().map(|&v| f64::from(v).powi(2)).sum::<f64>() / n;
            let inv = 1.0 / (ms + NORM_EPS).sqrt();
            Ok(x.iter()
                .zip(gain)
                .map(|(&v, &g)| (f64::from(v) * inv * f64::from(g)) as f32)
                .collect())
        }
        NormKind::LayerNorm => {
            let bias = bias.ok_or_else(|| Error::Shape("layernorm requires a bias".into()))?;
            if bias.len() != x.len() {
                return Err(Error::Shape(format!(
                    "bias of {} for vector of {}",
                    bias.len(),
                    x.len()
                )));
            }
            let mean = x.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
            let var = x.iter().map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>() / n;
            let inv = 1.0 / (var + NORM_EPS).sqrt();
            Ok(x.iter()
                .zip(gain)
                .zip(bias)
                .map(|((&v, &g), &b)| ((f64::from(v) - mean) * inv * f64::from(g) + f64::from(b)) as f32)
                .collect())
        }
    }
}

/// Temperature softmax. `temperature == 0` gives a one-hot at the argmax
/// (lowest index on ties).
pub fn softmax_temp(logits: &[f32], temperature: f32) -> Result<Vec<f32>> {
    if !temperature.is_finite() || temperature < 0.0 {
        return Err(Error::Range(format!(
            "temperature {temperature} must be finite and >= 0"
        )));
    }
    if logits.is_empty() {
        return Err(Error::Degenerate("empty logits".into()));
    }
    if logits.iter().any(|v| v.is_nan() || *v == f32::INFINITY) {
        return Err(Error::Degenerate("logits contain NaN or +inf".into()));
    }
    let best = argmax(logits);
    if logits[best] == f32::NEG_INFINITY {
        return Err(Error::Degenerate("all logits are -inf".into()));
    }
    if temperature == 0.0 {
        let mut out = vec![0.0; logits.len()];
        out[best] = 1.0;
        return Ok(out);
    }
    let t = f64::from(temperature);
    let max = f64::from(logits[best]);
    let exps: Vec<f64> = logits.iter().map(|&v| ((f64::from(v) - max) / t).exp()).collect();
    let z: f64 = exps.iter().sum();
    Ok(exps.iter().map(|e| (e / z) as f32).collect())
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Ordering used for every ranking: logit descending, then index ascending.
fn rank_order(a: &(usize, f32), b: &(usize, f32)) -> Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

/// Top `k` `(index, logit)` pairs, descending by logit, ties by index.
pub fn top_k(logits: &[f32], k: usize) -> Result<Vec<(usize, f32)>> {
    if k == 0 || k > logits.len() {
        return Err(Error::Shape(format!("k={k} outside 1..={}", logits.len())));
    }
    let mut pairs: Vec<(usize, f32)> = logits.iter().copied().enumerate().collect();
    if k < pairs.len() {
        pairs.select_nth_unstable_by(k - 1, rank_order);
        pairs.truncate(k);
    }
    pairs.sort_unstable_by(rank_order);
    Ok(pairs)
}

/// Rank of every index under the `top_k` ordering (0 = highest logit).
pub fn ranks(logits: &[f32]) -> Vec<usize> {
    let mut pairs: Vec<(usize, f32)> = logits.iter().copied().enumerate().collect();
    pairs.sort_unstable_by(rank_order);
    let mut out = vec![0; logits.len()];
    for (rank, (idx, _)) in pairs.into_iter().enumerate() {
        out[idx] = rank;
    }
    out
}

/// tanh-approximated GELU.
pub(crate) fn gelu(x: f32) -> f32 {
    let x = f64::from(x);
    let c = (2.0 / std::f64::consts::PI).sqrt();
    (0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())) as f32
}

/// Seeded ChaCha8 stream. The same seed yields the same stream on every
/// platform; `split` derives independent streams from one seed.
#[derive(Debug, Clone)]
pub struct RngState {
    seed: u64,
    rng: ChaCha8Rng,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent stream `stream` of the same seed.
    pub fn split(&self, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        Self { seed: self.seed, rng }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal via Box-Muller.
    pub fn next_normal(&mut self) -> f64 {
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    pub(crate) fn inner(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

/// Mixes several words into one seed (splitmix64 finaliser per word).
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        h ^= p;
        h = h.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

/// Draws an index from `probs` and advances `rng`.
pub fn sample_categorical(probs: &[f32], rng: &mut RngState) -> Result<usize> {
    if probs.is_empty() {
        return Err(Error::Degenerate("empty distribution".into()));
    }
    if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::Degenerate(
            "probabilities must be finite and non-negative".into(),
        ));
    }
    let total: f64 = probs.iter().map(|&p| f64::from(p)).sum();
    if (total - 1.0).abs() > 1e-4 {
        return Err(Error::Degenerate(format!("probabilities sum to {total}")));
    }
    let u = rng.next_f64() * total;
    let mut cum = 0.0;
    let mut last_nonzero = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            last_nonzero = i;
            cum += f64::from(p);
            if u < cum {
                return Ok(i);
            }
        }
    }
    Ok(last_nonzero)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seeded_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = RngState::new(seed);
        let data = (0..rows * cols).map(|_| rng.next_normal() as f32).collect();
        Matrix::new(rows, cols, data).unwrap()
    }

    #[test]
    fn identity_product_is_exact() {
        let m = seeded_matrix(3, 3, 7);
        assert_eq!(matmul(&Matrix::identity(3), &m).unwrap(), m);
        assert_eq!(matmul(&m, &Matrix::identity(3)).unwrap(), m);
    }

    #[test]
    fn scalar_product() {
        let a = Matrix::new(1, 1, vec![2.0]).unwrap();
        let b = Matrix::new(1, 1, vec![3.0]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[6.0]);
    }

    #[test]
    fn product_matches_triple_loop() {
        let a = seeded_matrix(3, 4, 0);
        let b = seeded_matrix(4, 2, 1);
        let c = matmul(&a, &b).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let mut s = 0f64;
                for k in 0..4 {
                    s += a.get(i, k) as f64 * b.get(k, j) as f64;
                }
                assert!((c.get(i, j) as f64 - s).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn product_shape_error() {
        let a = Matrix::zeros(2, 3);
        assert!(matches!(matmul(&a, &a), Err(Error::Shape(_))));
    }

    #[test]
    fn rmsnorm_hand_value() {
        let y = normalize(&[3.0, 4.0], NormKind::RmsNorm, &[1.0, 1.0], None).unwrap();
        let rms = 12.5f64.sqrt();
        assert!((y[0] as f64 - 3.0 / rms).abs() < 1e-6);
        assert!((y[1] as f64 - 4.0 / rms).abs() < 1e-6);
        assert!((y[0] - 0.8485).abs() < 1e-4 && (y[1] - 1.1314).abs() < 1e-4);
    }

    #[test]
    fn layernorm_constant_gives_bias() {
        let y = normalize(&[5.0; 4], NormKind::LayerNorm, &[2.0; 4], Some(&[0.1, 0.2, 0.3, 0.4])).unwrap();
        assert_eq!(y, vec![0.1, 0.2, 0.3, 0.4]);
    }

    #[test]
    fn rmsnorm_unit_rms_is_near_identity() {
        let x = [1.0, -1.0, 1.0, -1.0];
        let y = normalize(&x, NormKind::RmsNorm, &[1.0; 4], None).unwrap();
        for (a, b) in x.iter().zip(&y) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn normalize_rejects_empty_and_missing_bias() {
        assert!(normalize(&[], NormKind::RmsNorm, &[], None).is_err());
        assert!(normalize(&[1.0], NormKind::LayerNorm, &[1.0], None).is_err());
    }

    #[test]
    fn softmax_cases() {
        assert_eq!(softmax_temp(&[0.0, 0.0], 1.0).unwrap(), vec![0.5, 0.5]);
        assert_eq!(
            softmax_temp(&[1.0, 3.0, 3.0, 2.0], 0.0).unwrap(),
            vec![0.0, 1.0, 0.0, 0.0]
        );
        let p = softmax_temp(&[1.0, 2.0, 3.0], 0.5).unwrap();
        let e: Vec<f64> = [-4.0f64, -2.0, 0.0].iter().map(|v| v.exp()).collect();
        let z: f64 = e.iter().sum();
        for (pi, ei) in p.iter().zip(&e) {
            assert!((*pi as f64 - ei / z).abs() < 1e-7);
        }
        assert!(matches!(
            softmax_temp(&[f32::NEG_INFINITY; 3], 1.0),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn top_k_cases() {
        assert_eq!(top_k(&[5.0, 1.0, 9.0], 2).unwrap(), vec![(2, 9.0), (0, 5.0)]);
        let idx: Vec<usize> = top_k(&[1.0; 5], 3).unwrap().into_iter().map(|p| p.0).collect();
        assert_eq!(idx, vec![0, 1, 2]);
        assert!(top_k(&[1.0], 0).is_err());
        assert!(top_k(&[1.0], 2).is_err());
    }

    #[test]
    fn top_k_matches_full_sort_prefix() {
        let mut rng = RngState::new(0);
        let logits: Vec<f32> = (0..256).map(|_| rng.next_normal() as f32).collect();
        let mut full: Vec<(usize, f32)> = logits.iter().copied().enumerate().collect();
        // independent oracle: stable sort on descending logit keeps index order on ties
        full.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
        assert_eq!(top_k(&logits, 20).unwrap(), full[..20].to_vec());
    }

    #[test]
    fn sampling_cases() {
        let mut rng = RngState::new(3);
        for _ in 0..100 {
            assert_eq!(sample_categorical(&[1.0, 0.0], &mut rng).unwrap(), 0);
        }
        let mut onehot = vec![0.0; 10];
        onehot[7] = 1.0;
        assert_eq!(sample_categorical(&onehot, &mut rng).unwrap(), 7);
        assert!(sample_categorical(&[0.5, 0.4], &mut rng).is_err());
        assert!(sample_categorical(&[1.5, -0.5], &mut rng).is_err());
    }

    #[test]
    fn sampling_frequency() {
        let mut rng = RngState::new(0);
        let n = 100_000;
        let zeros = (0..n)
            .filter(|_| sample_categorical(&[0.5, 0.5], &mut rng).unwrap() == 0)
            .count();
        assert!((zeros as f64 / n as f64 - 0.5).abs() < 0.01);
    }

    #[test]
    fn rng_is_reproducible_and_splittable() {
        let mut a = RngState::new(42);
        let mut b = RngState::new(42);
        let xs: Vec<u64> = (0..5).map(|_| a.next_u64()).collect();
        let ys: Vec<u64> = (0..5).map(|_| b.next_u64()).collect();
        assert_eq!(xs, ys);
        let mut s1 = a.split(1);
        let mut s2 = a.split(2);
        assert_ne!(s1.next_u64(), s2.next_u64());
        assert_ne!(derive_seed(&[1, 2]), derive_seed(&[2, 1]));
    }

    proptest! {
        #[test]
        fn top_k_full_is_stable_sort(v in proptest::collection::vec(-3i8..3, 1..40)) {
            let logits: Vec<f32> = v.iter().map(|&x| x as f32).collect();
            let mut full: Vec<(usize, f32)> = logits.iter().copied().enumerate().collect();
            full.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
            prop_assert_eq!(top_k(&logits, logits.len()).unwrap(), full);
        }

        #[test]
        fn softmax_is_distribution(v in proptest::collection::vec(-50f32..50.0, 1..64), t in 0.01f32..5.0) {
            let p = softmax_temp(&v, t).unwrap();
            let s: f64 = p.iter().map(|&x| x as f64).sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
            prop_assert!(p.iter().all(|&x| x >= 0.0));
        }
    }
}
