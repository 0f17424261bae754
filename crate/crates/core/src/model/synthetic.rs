// SPDX-License-Identifier: MIT OR Apache-2.0

//! Deterministic random models for desk-scale experiments.
//!
//! Block output norms grow geometrically with depth (`write_scale *
//! write_growth^layer`, relative to the unit-norm embeddings), so a
//! perturbation injected early is small next to what later blocks write,
//! while one injected late reaches the unembedding nearly intact.

use serde::{Deserialize, Serialize};

use super::tokenizer::{byte_token, DEFAULT_SPACE_MARKER};
use super::{LayerWeights, Model, ModelConfig, ModelWeights, TokenId, Vocabulary};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, NormKind, RngState};
use crate::prefixes::default_prefixes;

/// Forces unembedding column `token` to the normalised `direction`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantedDirection {
    pub layer: usize,
    pub direction: Vec<f32>,
    pub token: TokenId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub norm_kind: NormKind,
    pub tied_unembedding: bool,
    /// Output norm of block 0 relative to an embedding row.
    pub write_scale: f32,
    /// Factor by which block output norms grow per layer.
    pub write_growth: f32,
    /// Explicit per-layer block output norms; overrides the geometric
    /// schedule when non-empty.
    pub write_norms: Vec<f32>,
    /// Norm of the learned position rows.
    pub position_scale: f32,
    /// Final-norm gain; sets the spread of the output logits.
    pub final_gain: f32,
    pub planted: Vec<PlantedDirection>,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_layers: 4,
            d_model: 32,
            n_heads: 4,
            d_ff: 128,
            vocab_size: 256,
            max_seq: 64,
            norm_kind: NormKind::RmsNorm,
            tied_unembedding: true,
            write_scale: 0.05,
            write_growth: 5.0,
            write_norms: Vec::new(),
            position_scale: 0.2,
            final_gain: 3.0,
            planted: Vec::new(),
        }
    }
}

const SPECIAL: [&str; 4] = ["\u{2581}", "\u{2019}", ",", ":"];

const FILLER_WORDS: [&str; 40] = [
    "apple",
    "engineers",
    "profile",
    "crime",
    "school",
    "machines",
    "exposure",
    "activism",
    "contact",
    "lenses",
    "primary",
    "river",
    "music",
    "garden",
    "ocean",
    "winter",
    "doctor",
    "market",
    "coffee",
    "forest",
    "history",
    "science",
    "football",
    "train",
    "window",
    "bread",
    "mountain",
    "letter",
    "planet",
    "city",
    "family",
    "money",
    "light",
    "water",
    "fire",
    "code",
    "peace",
    "movement",
    "violence",
    "fraud",
];

fn byte_fallback_set() -> Vec<u8> {
    std::iter::once(b'\n').chain(0x20..=0x7e).collect()
}

/// Vocabulary of exactly `size` tokens: words of the shipped prefixes,
/// a few punctuation tokens, printable-ASCII byte fallbacks when there is
/// room for them, then filler words.
pub fn synthetic_vocabulary(size: usize) -> Result<Vocabulary> {
    let marker = DEFAULT_SPACE_MARKER;
    let mut words: Vec<String> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    let mut push = |t: String, words: &mut Vec<String>| {
        if seen.insert(t.clone()) {
            words.push(t);
        }
    };
    for p in default_prefixes() {
        for w in p.split(' ') {
            let w = w.trim_end_matches([',', ':']);
            push(format!("{marker}{w}"), &mut words);
        }
    }
    for f in FILLER_WORDS {
        push(format!("{marker}{f}"), &mut words);
    }
    let bytes = byte_fallback_set();
    let fixed = SPECIAL.len() + bytes.len();
    let mut tokens: Vec<String> = SPECIAL.iter().map(|s| s.to_string()).collect();
    if size >= fixed + 16 {
        tokens.extend(bytes.iter().map(|&b| byte_token(b)));
    }
    let room = size.saturating_sub(tokens.len());
    tokens.extend(words.into_iter().take(room));
    let mut i = 0;
    while tokens.len() < size {
        tokens.push(format!("{marker}w{i}"));
        i += 1;
    }
    tokens.truncate(size);
    Vocabulary::new(tokens, marker)
}

fn random_matrix(rng: &mut RngState, rows: usize, cols: usize, std: f64) -> Matrix {
    let data = (0..rows * cols).map(|_| (rng.next_normal() * std) as f32).collect();
    Matrix::new(rows, cols, data).expect("finite gaussian entries")
}

fn random_vec(rng: &mut RngState, n: usize, mean: f64, std: f64) -> Vec<f32> {
    (0..n).map(|_| (mean + rng.next_normal() * std) as f32).collect()
}

fn unit(v: &[f32]) -> Option<Vec<f32>> {
    let norm = v.iter().map(|&x| f64::from(x).powi(2)).sum::<f64>().sqrt();
    (norm > 0.0 && norm.is_finite()).then(|| v.iter().map(|&x| (f64::from(x) / norm) as f32).collect())
}

/// Builds model weights and vocabulary from `spec`; identical inputs give
/// identical weights.
pub fn build_synthetic_model(spec: &SyntheticSpec, seed: u64) -> Result<(Model, Vocabulary)> {
    if spec.n_heads == 0 || !spec.d_model.is_multiple_of(spec.n_heads) {
        return Err(Error::Spec(format!(
            "d_model {} not divisible by n_heads {}",
            spec.d_model, spec.n_heads
        )));
    }
    let config = ModelConfig {
        n_layers: spec.n_layers,
        d_model: spec.d_model,
        n_heads: spec.n_heads,
        d_head: spec.d_model / spec.n_heads,
        d_ff: spec.d_ff,
        vocab_size: spec.vocab_size,
        max_seq: spec.max_seq,
        norm_kind: spec.norm_kind,
        tied_unembedding: spec.tied_unembedding,
    };
    config.validate()?;
    if !spec.write_norms.is_empty() && spec.write_norms.len() != spec.n_layers {
        return Err(Error::Spec(format!(
            "{} write norms for {} layers",
            spec.write_norms.len(),
            spec.n_layers
        )));
    }
    if spec.write_norms.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::Spec("write norms must be finite and non-negative".into()));
    }
    for p in &spec.planted {
        if p.token >= spec.vocab_size {
            return Err(Error::Spec(format!(
                "planted token {} outside vocabulary of {}",
                p.token, spec.vocab_size
            )));
        }
        if p.layer >= spec.n_layers {
            return Err(Error::Spec(format!(
                "planted layer {} >= n_layers {}",
                p.layer, spec.n_layers
            )));
        }
        if p.direction.len() != spec.d_model {
            return Err(Error::Spec(format!(
                "planted direction has {} entries, d_model is {}",
                p.direction.len(),
                spec.d_model
            )));
        }
    }
    let (d, v, f) = (spec.d_model, spec.vocab_size, spec.d_ff);
    let df = d as f64;
    let root = RngState::new(seed);
    let mut rng = root.split(1);

    let mut emb = random_matrix(&mut rng, v, d, 1.0);
    for t in 0..v {
        let row = unit(emb.row(t)).unwrap_or_else(|| vec![0.0; d]);
        emb.row_mut(t).copy_from_slice(&row);
    }
    let mut unemb = if spec.tied_unembedding {
        None
    } else {
        let mut u = random_matrix(&mut rng, v, d, 1.0);
        for t in 0..v {
            let row = unit(u.row(t)).unwrap_or_else(|| vec![0.0; d]);
            u.row_mut(t).copy_from_slice(&row);
        }
        Some(u)
    };
    for p in &spec.planted {
        let dir = unit(&p.direction).ok_or_else(|| Error::Spec("planted direction is zero or non-finite".into()))?;
        match unemb.as_mut() {
            Some(u) => u.row_mut(p.token).copy_from_slice(&dir),
            None => emb.row_mut(p.token).copy_from_slice(&dir),
        }
    }
    let unembedding = unemb.as_ref().unwrap_or(&emb).transpose();

    let pos = random_matrix(&mut rng, spec.max_seq, d, f64::from(spec.position_scale) / df.sqrt());
    let layernorm = spec.norm_kind == NormKind::LayerNorm;
    let mut layers = Vec::with_capacity(spec.n_layers);
    for l in 0..spec.n_layers {
        let target = match spec.write_norms.get(l) {
            Some(&w) => f64::from(w),
            None => f64::from(spec.write_scale) * f64::from(spec.write_growth).powi(l as i32),
        };
        let mut rng = root.split(100 + l as u64);
        let gain = |rng: &mut RngState| random_vec(rng, d, 1.0, 0.1);
        let bias = |rng: &mut RngState| layernorm.then(|| random_vec(rng, d, 0.0, 0.02));
        let attn_norm_gain = gain(&mut rng);
        let attn_norm_bias = bias(&mut rng);
        let wq = random_matrix(&mut rng, d, d, 1.0 / df.sqrt());
        let wk = random_matrix(&mut rng, d, d, 1.0 / df.sqrt());
        let wv = random_matrix(&mut rng, d, d, 1.0 / df.sqrt());
        // attention and MLP each contribute about half of the target norm
        let wo = random_matrix(&mut rng, d, d, target / (2.0 * 0.7 * df));
        let mlp_norm_gain = gain(&mut rng);
        let mlp_norm_bias = bias(&mut rng);
        let w_in = random_matrix(&mut rng, d, f, 1.0 / df.sqrt());
        let b_in = random_vec(&mut rng, f, 0.0, 0.1);
        let w_out = random_matrix(&mut rng, f, d, target / (2.0 * (0.425 * df).sqrt() * (f as f64).sqrt()));
        let b_out = vec![0.0; d];
        layers.push(LayerWeights {
            attn_norm_gain,
            attn_norm_bias,
            wq,
            wk,
            wv,
            wo,
            mlp_norm_gain,
            mlp_norm_bias,
            w_in,
            b_in,
            w_out,
            b_out,
        });
    }
    let weights = ModelWeights {
        token_embedding: emb,
        position_embedding: pos,
        layers,
        final_norm_gain: vec![spec.final_gain; d],
        final_norm_bias: layernorm.then(|| vec![0.0; d]),
        unembedding,
    };
    let model = Model::new(config, weights)?;
    let vocab = synthetic_vocabulary(v)?;
    Ok((model, vocab))
}
