// SPDX-License-Identifier: MIT OR Apache-2.0

//! Pre-norm decoder-only transformer with residual-stream hooks.
//!
//! The residual stream after block `l` is the hook and capture site for
//! layer `l`. Hooks see the rows being computed in the current call (all
//! positions for [`Model::forward`], only the new ones when extending a
//! [`KvCache`]) and must return a matrix of the same shape.

mod container;
mod synthetic;
mod tokenizer;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, gelu, normalize, rows_times, Matrix, NormKind};

pub use container::{load_model, save_model, MODEL_BLOB, MODEL_MANIFEST, VOCAB_FILE};
pub use synthetic::{build_synthetic_model, synthetic_vocabulary, PlantedDirection, SyntheticSpec};
pub use tokenizer::{normalize_token, Vocabulary, DEFAULT_SPACE_MARKER};

pub type TokenId = usize;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    #[serde(default)]
    pub norm_kind: NormKind,
    pub tied_unembedding: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_heads * self.d_head != self.d_model {
            return Err(Error::Shape(format!(
                "n_heads ({}) x d_head ({}) != d_model ({})",
                self.n_heads, self.d_head, self.d_model
            )));
        }
        if self.vocab_size < 2 || self.n_layers < 1 || self.d_model == 0 || self.d_ff == 0 || self.max_seq == 0 {
            return Err(Error::Shape(
                "need vocab_size >= 2, n_layers >= 1 and non-zero dimensions".into(),
            ));
        }
        Ok(())
    }
}

/// Parameters of one transformer block.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attn_norm_gain: Vec<f32>,
    pub attn_norm_bias: Option<Vec<f32>>,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub mlp_norm_gain: Vec<f32>,
    pub mlp_norm_bias: Option<Vec<f32>>,
    pub w_in: Matrix,
    pub b_in: Vec<f32>,
    pub w_out: Matrix,
    pub b_out: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    /// `vocab_size x d_model`
    pub token_embedding: Matrix,
    /// `max_seq x d_model`, learned absolute positions.
    pub position_embedding: Matrix,
    pub layers: Vec<LayerWeights>,
    pub final_norm_gain: Vec<f32>,
    pub final_norm_bias: Option<Vec<f32>>,
    /// `d_model x vocab_size`
    pub unembedding: Matrix,
}

/// Immutable model: configuration plus validated weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    weights: ModelWeights,
}

/// Replaces the residual stream at a layer.
pub trait ResidualTransform: Send + Sync {
    fn transform(&self, residual: &Matrix) -> Matrix;
}

impl<F> ResidualTransform for F
where
    F: Fn(&Matrix) -> Matrix + Send + Sync,
{
    fn transform(&self, residual: &Matrix) -> Matrix {
        self(residual)
    }
}

/// A transform attached to the residual stream after block `layer`.
#[derive(Clone)]
pub struct HookPoint {
    pub layer: usize,
    pub transform: Arc<dyn ResidualTransform>,
}

impl HookPoint {
    pub fn new(layer: usize, transform: impl ResidualTransform + 'static) -> Self {
        Self {
            layer,
            transform: Arc::new(transform),
        }
    }

    pub fn identity(layer: usize) -> Self {
        Self::new(layer, |m: &Matrix| m.clone())
    }
}

impl fmt::Debug for HookPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HookPoint")
            .field("layer", &self.layer)
            .finish_non_exhaustive()
    }
}

/// Which rows of the final residual to project to logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LogitRows {
    All,
    Last,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// One row per requested position, `vocab_size` columns.
    pub logits: Matrix,
    /// Post-hook residual rows for each captured layer.
    pub captured: BTreeMap<usize, Matrix>,
}

/// Keys and values of already processed positions.
#[derive(Debug, Clone)]
pub struct KvCache {
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
    len: usize,
}

impl KvCache {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

fn norm_rows(x: &[f32], d: usize, kind: NormKind, gain: &[f32], bias: Option<&[f32]>) -> Result<Vec<f32>> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks_exact(d) {
        out.extend(normalize(row, kind, gain, bias)?);
    }
    Ok(out)
}

impl Model {
    pub fn new(config: ModelConfig, weights: ModelWeights) -> Result<Self> {
        config.validate()?;
        let m = Self { config, weights };
        m.check_shapes()?;
        Ok(m)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn weights(&self) -> &ModelWeights {
        &self.weights
    }

    fn check_shapes(&self) -> Result<()> {
        let c = &self.config;
        let w = &self.weights;
        let d = c.d_model;
        let want = |name: &str, m: &Matrix, r: usize, cols: usize| -> Result<()> {
            if m.shape() != (r, cols) {
                return Err(Error::Shape(format!(
                    "{name}: expected {r}x{cols}, found {:?}",
                    m.shape()
                )));
            }
            Ok(())
        };
        let want_len = |name: &str, v: &[f32], n: usize| -> Result<()> {
            if v.len() != n {
                return Err(Error::Shape(format!("{name}: expected length {n}, found {}", v.len())));
            }
            Ok(())
        };
        let want_bias = |name: &str, b: &Option<Vec<f32>>| -> Result<()> {
            match (c.norm_kind, b) {
                (NormKind::LayerNorm, Some(b)) => want_len(name, b, d),
                (NormKind::RmsNorm, None) => Ok(()),
                (NormKind::LayerNorm, None) => Err(Error::Shape(format!("{name}: layernorm needs a bias"))),
                (NormKind::RmsNorm, Some(_)) => Err(Error::Shape(format!("{name}: rmsnorm takes no bias"))),
            }
        };
        want("token_embedding", &w.token_embedding, c.vocab_size, d)?;
        want("position_embedding", &w.position_embedding, c.max_seq, d)?;
        want("unembedding", &w.unembedding, d, c.vocab_size)?;
        if w.layers.len() != c.n_layers {
            return Err(Error::Shape(format!(
                "expected {} layers, found {}",
                c.n_layers,
                w.layers.len()
            )));
        }
        for (i, l) in w.layers.iter().enumerate() {
            want_len(&format!("layers.{i}.attn_norm.gain"), &l.attn_norm_gain, d)?;
            want_bias(&format!("layers.{i}.attn_norm.bias"), &l.attn_norm_bias)?;
            for (n, m) in [("q", &l.wq), ("k", &l.wk), ("v", &l.wv), ("o", &l.wo)] {
                want(&format!("layers.{i}.attn.{n}"), m, d, d)?;
            }
            want_len(&format!("layers.{i}.mlp_norm.gain"), &l.mlp_norm_gain, d)?;
            want_bias(&format!("layers.{i}.mlp_norm.bias"), &l.mlp_norm_bias)?;
            want(&format!("layers.{i}.mlp.w_in"), &l.w_in, d, c.d_ff)?;
            want_len(&format!("layers.{i}.mlp.b_in"), &l.b_in, c.d_ff)?;
            want(&format!("layers.{i}.mlp.w_out"), &l.w_out, c.d_ff, d)?;
            want_len(&format!("layers.{i}.mlp.b_out"), &l.b_out, d)?;
        }
        want_len("final_norm.gain", &w.final_norm_gain, d)?;
        want_bias("final_norm.bias", &w.final_norm_bias)?;
        if c.tied_unembedding && w.unembedding != w.token_embedding.transpose() {
            return Err(Error::Shape("tied unembedding differs from embedding transpose".into()));
        }
        let vectors = w
            .layers
            .iter()
            .flat_map(|l| {
                [&l.attn_norm_gain, &l.mlp_norm_gain, &l.b_in, &l.b_out]
                    .into_iter()
                    .chain(l.attn_norm_bias.iter())
                    .chain(l.mlp_norm_bias.iter())
            })
            .chain(std::iter::once(&w.final_norm_gain))
            .chain(w.final_norm_bias.iter());
        for v in vectors {
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite("model weights"));
            }
        }
        Ok(())
    }

    /// Final-norm followed by the unembedding, for a single vector.
    pub fn final_norm(&self, x: &[f32]) -> Result<Vec<f32>> {
        normalize(
            x,
            self.config.norm_kind,
            &self.weights.final_norm_gain,
            self.weights.final_norm_bias.as_deref(),
        )
    }

    pub fn new_cache(&self) -> KvCache {
        KvCache {
            keys: vec![Vec::new(); self.config.n_layers],
            values: vec![Vec::new(); self.config.n_layers],
            len: 0,
        }
    }

    /// Full pass over `tokens`, logits for every position.
    pub fn forward(&self, tokens: &[TokenId], hooks: &[HookPoint], capture: &[usize]) -> Result<ForwardOutput> {
        let mut cache = self.new_cache();
        self.extend(&mut cache, tokens, hooks, capture, LogitRows::All)
    }

    /// Logits of the last position only.
    pub fn forward_last(&self, tokens: &[TokenId], hooks: &[HookPoint]) -> Result<Vec<f32>> {
        let mut cache = self.new_cache();
        Ok(self
            .extend(&mut cache, tokens, hooks, &[], LogitRows::Last)?
            .logits
            .into_data())
    }

    /// Processes `tokens` as the positions following those already in
    /// `cache`. Row computations are independent of how a sequence is
    /// split across calls, so extending token by token reproduces a full
    /// pass bit for bit (given row-wise hooks).
    pub fn extend(
        &self,
        cache: &mut KvCache,
        tokens: &[TokenId],
        hooks: &[HookPoint],
        capture: &[usize],
        rows: LogitRows,
    ) -> Result<ForwardOutput> {
        let c = &self.config;
        let w = &self.weights;
        let d = c.d_model;
        let start = cache.len;
        let total = start + tokens.len();
        if total > c.max_seq {
            return Err(Error::Length {
                len: total,
                max: c.max_seq,
            });
        }
        if tokens.is_empty() {
            return Err(Error::EmptyInput("forward needs at least one token".into()));
        }
        for h in hooks {
            if h.layer >= c.n_layers {
                return Err(Error::Range(format!(
                    "hook layer {} >= n_layers {}",
                    h.layer, c.n_layers
                )));
            }
        }
        for &l in capture {
            if l >= c.n_layers {
                return Err(Error::Range(format!("capture layer {l} >= n_layers {}", c.n_layers)));
            }
        }
        let n = tokens.len();
        let mut x = Vec::with_capacity(n * d);
        for (i, &t) in tokens.iter().enumerate() {
            if t >= c.vocab_size {
                return Err(Error::Range(format!("token {t} >= vocab_size {}", c.vocab_size)));
            }
            let e = w.token_embedding.row(t);
            let p = w.position_embedding.row(start + i);
            x.extend(e.iter().zip(p).map(|(a, b)| a + b));
        }

        let mut captured = BTreeMap::new();
        let scale = 1.0 / (c.d_head as f64).sqrt();
        let mut q = vec![0.0; n * d];
        let mut k = vec![0.0; n * d];
        let mut v = vec![0.0; n * d];
        let mut attn = vec![0.0; n * d];
        let mut proj = vec![0.0; n * d];
        let mut hidden = vec![0.0; n * c.d_ff];
        for (li, layer) in w.layers.iter().enumerate() {
            let h = norm_rows(
                &x,
                d,
                c.norm_kind,
                &layer.attn_norm_gain,
                layer.attn_norm_bias.as_deref(),
            )?;
            rows_times(&h, n, &layer.wq, &mut q);
            rows_times(&h, n, &layer.wk, &mut k);
            rows_times(&h, n, &layer.wv, &mut v);
            cache.keys[li].extend_from_slice(&k);
            cache.values[li].extend_from_slice(&v);
            let keys = &cache.keys[li];
            let values = &cache.values[li];
            let mut weights = vec![0f64; total];
            for r in 0..n {
                let pos = start + r;
                for head in 0..c.n_heads {
                    let off = head * c.d_head;
                    let qh = &q[r * d + off..r * d + off + c.d_head];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..=pos {
                        let s = dot(qh, &keys[j * d + off..j * d + off + c.d_head]) * scale;
                        weights[j] = s;
                        max = max.max(s);
                    }
                    let mut z = 0.0;
                    for wj in weights[..=pos].iter_mut() {
                        *wj = (*wj - max).exp();
                        z += *wj;
                    }
                    let out = &mut attn[r * d + off..r * d + off + c.d_head];
                    for (e, o) in out.iter_mut().enumerate() {
                        let mut acc = 0.0;
                        for j in 0..=pos {
                            acc += weights[j] * f64::from(values[j * d + off + e]);
                        }
                        *o = (acc / z) as f32;
                    }
                }
            }
            rows_times(&attn, n, &layer.wo, &mut proj);
            x.iter_mut().zip(&proj).for_each(|(a, b)| *a += b);

            let h = norm_rows(&x, d, c.norm_kind, &layer.mlp_norm_gain, layer.mlp_norm_bias.as_deref())?;
            rows_times(&h, n, &layer.w_in, &mut hidden);
            for row in hidden.chunks_exact_mut(c.d_ff) {
                for (hv, b) in row.iter_mut().zip(&layer.b_in) {
                    *hv = gelu(*hv + b);
                }
            }
            rows_times(&hidden, n, &layer.w_out, &mut proj);
            for (row_x, row_p) in x.chunks_exact_mut(d).zip(proj.chunks_exact(d)) {
                for ((a, p), b) in row_x.iter_mut().zip(row_p).zip(&layer.b_out) {
                    *a += p + b;
                }
            }

            let layer_hooks = hooks.iter().filter(|h| h.layer == li);
            let mut residual: Option<Matrix> = None;
            for hook in layer_hooks {
                let current = residual.take().map_or_else(|| Matrix::new(n, d, x.clone()), Ok)?;
                let replaced = hook.transform.transform(&current);
                if replaced.shape() != current.shape() {
                    return Err(Error::Shape(format!(
                        "hook at layer {li} returned {:?}, expected {:?}",
                        replaced.shape(),
                        current.shape()
                    )));
                }
                replaced.ensure_finite("hook transform")?;
                residual = Some(replaced);
            }
            if let Some(r) = residual {
                x = r.into_data();
            }
            if capture.contains(&li) {
                captured.insert(li, Matrix::new(n, d, x.clone())?);
            }
        }
        cache.len = total;

        let first = match rows {
            LogitRows::All => 0,
            LogitRows::Last => n - 1,
        };
        let m = n - first;
        let hn = norm_rows(
            &x[first * d..],
            d,
            c.norm_kind,
            &w.final_norm_gain,
            w.final_norm_bias.as_deref(),
        )?;
        let mut logits = vec![0.0; m * c.vocab_size];
        rows_times(&hn, m, &w.unembedding, &mut logits);
        let logits = Matrix::new(m, c.vocab_size, logits)?;
        Ok(ForwardOutput { logits, captured })
    }
}
