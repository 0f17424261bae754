// SPDX-License-Identifier: MIT OR Apache-2.0

//! On-disk model container: `manifest.json`, `weights.bin`, `vocab.json`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LayerWeights, Model, ModelConfig, ModelWeights, Vocabulary};
use crate::error::{ContainerError, Result};
use crate::io::{pack_tensors, read_file, take_tensor, unpack_tensors, write_atomic, TensorEntry};
use crate::numerics::{Matrix, NormKind};

pub const MODEL_MANIFEST: &str = "manifest.json";
pub const MODEL_BLOB: &str = "weights.bin";
pub const VOCAB_FILE: &str = "vocab.json";
const FORMAT: &str = "saesteer-model/1";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

/// Writes the container into `dir`, creating it if needed.
pub fn save_model(dir: &Path, model: &Model, vocab: &Vocabulary) -> Result<()> {
    let c = model.config();
    let w = model.weights();
    let (d, v, f, s) = (c.d_model, c.vocab_size, c.d_ff, c.max_seq);
    let mut packed: Vec<(String, Vec<usize>, &[f32])> = Vec::new();
    packed.push(("token_embedding".into(), vec![v, d], w.token_embedding.data()));
    packed.push(("position_embedding".into(), vec![s, d], w.position_embedding.data()));
    for (i, l) in w.layers.iter().enumerate() {
        packed.push((format!("layers.{i}.attn_norm.gain"), vec![d], &l.attn_norm_gain));
        if let Some(b) = &l.attn_norm_bias {
            packed.push((format!("layers.{i}.attn_norm.bias"), vec![d], b));
        }
        packed.push((format!("layers.{i}.attn.q"), vec![d, d], l.wq.data()));
        packed.push((format!("layers.{i}.attn.k"), vec![d, d], l.wk.data()));
        packed.push((format!("layers.{i}.attn.v"), vec![d, d], l.wv.data()));
        packed.push((format!("layers.{i}.attn.o"), vec![d, d], l.wo.data()));
        packed.push((format!("layers.{i}.mlp_norm.gain"), vec![d], &l.mlp_norm_gain));
        if let Some(b) = &l.mlp_norm_bias {
            packed.push((format!("layers.{i}.mlp_norm.bias"), vec![d], b));
        }
        packed.push((format!("layers.{i}.mlp.w_in"), vec![d, f], l.w_in.data()));
        packed.push((format!("layers.{i}.mlp.b_in"), vec![f], &l.b_in));
        packed.push((format!("layers.{i}.mlp.w_out"), vec![f, d], l.w_out.data()));
        packed.push((format!("layers.{i}.mlp.b_out"), vec![d], &l.b_out));
    }
    packed.push(("final_norm.gain".into(), vec![d], &w.final_norm_gain));
    if let Some(b) = &w.final_norm_bias {
        packed.push(("final_norm.bias".into(), vec![d], b));
    }
    // a tied unembedding is rebuilt from the embedding on load
    if !c.tied_unembedding {
        packed.push(("unembedding".into(), vec![d, v], w.unembedding.data()));
    }
    let packed: Vec<(&str, Vec<usize>, &[f32])> =
        packed.iter().map(|(n, sh, x)| (n.as_str(), sh.clone(), *x)).collect();
    let (table, blob) = pack_tensors(&packed);
    let manifest = Manifest {
        format: FORMAT.into(),
        config: c.clone(),
        tensors: table,
    };
    write_atomic(&dir.join(MODEL_BLOB), &blob)?;
    write_atomic(&dir.join(VOCAB_FILE), &serde_json::to_vec_pretty(vocab)?)?;
    write_atomic(&dir.join(MODEL_MANIFEST), &serde_json::to_vec_pretty(&manifest)?)
}

/// Loads and validates a container written by [`save_model`].
pub fn load_model(dir: &Path) -> Result<(Model, Vocabulary)> {
    let manifest_path = dir.join(MODEL_MANIFEST);
    let raw = read_file(&manifest_path, || {
        ContainerError::ManifestMissing(manifest_path.clone())
    })?;
    let manifest: Manifest = serde_json::from_slice(&raw).map_err(|e| ContainerError::Manifest(e.to_string()))?;
    if manifest.format != FORMAT {
        return Err(ContainerError::Manifest(format!("unknown format `{}`", manifest.format)).into());
    }
    let c = manifest.config;
    c.validate()
        .map_err(|e| ContainerError::Manifest(format!("invalid config: {e}")))?;
    let blob_path = dir.join(MODEL_BLOB);
    let blob = read_file(&blob_path, || ContainerError::BlobMissing(blob_path.clone()))?;
    let vocab_path = dir.join(VOCAB_FILE);
    let vraw = read_file(&vocab_path, || {
        ContainerError::Manifest(format!("missing {}", vocab_path.display()))
    })?;
    let vocab: Vocabulary =
        serde_json::from_slice(&vraw).map_err(|e| ContainerError::Manifest(format!("vocab: {e}")))?;
    if vocab.len() != c.vocab_size {
        return Err(ContainerError::Shape {
            tensor: "vocab".into(),
            expected: vec![c.vocab_size],
            found: vec![vocab.len()],
        }
        .into());
    }

    let mut t = unpack_tensors(&manifest.tensors, &blob)?;
    let (d, v, f, s) = (c.d_model, c.vocab_size, c.d_ff, c.max_seq);
    let layernorm = c.norm_kind == NormKind::LayerNorm;
    let mut mat = |name: &str, r: usize, cols: usize| -> Result<Matrix> {
        Matrix::new(r, cols, take_tensor(&mut t, name, &[r, cols])?)
    };
    let token_embedding = mat("token_embedding", v, d)?;
    let position_embedding = mat("position_embedding", s, d)?;
    let mut layers = Vec::with_capacity(c.n_layers);
    for i in 0..c.n_layers {
        let wq = mat(&format!("layers.{i}.attn.q"), d, d)?;
        let wk = mat(&format!("layers.{i}.attn.k"), d, d)?;
        let wv = mat(&format!("layers.{i}.attn.v"), d, d)?;
        let wo = mat(&format!("layers.{i}.attn.o"), d, d)?;
        let w_in = mat(&format!("layers.{i}.mlp.w_in"), d, f)?;
        let w_out = mat(&format!("layers.{i}.mlp.w_out"), f, d)?;
        layers.push((wq, wk, wv, wo, w_in, w_out));
    }
    let unembedding = if c.tied_unembedding {
        None
    } else {
        Some(mat("unembedding", d, v)?)
    };
    let mut vecs = |name: &str, n: usize| take_tensor(&mut t, name, &[n]);
    let mut built = Vec::with_capacity(c.n_layers);
    for (i, (wq, wk, wv, wo, w_in, w_out)) in layers.into_iter().enumerate() {
        let attn_norm_gain = vecs(&format!("layers.{i}.attn_norm.gain"), d)?;
        let attn_norm_bias = layernorm
            .then(|| vecs(&format!("layers.{i}.attn_norm.bias"), d))
            .transpose()?;
        let mlp_norm_gain = vecs(&format!("layers.{i}.mlp_norm.gain"), d)?;
        let mlp_norm_bias = layernorm
            .then(|| vecs(&format!("layers.{i}.mlp_norm.bias"), d))
            .transpose()?;
        let b_in = vecs(&format!("layers.{i}.mlp.b_in"), f)?;
        let b_out = vecs(&format!("layers.{i}.mlp.b_out"), d)?;
        built.push(LayerWeights {
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
    let final_norm_gain = vecs("final_norm.gain", d)?;
    let final_norm_bias = layernorm.then(|| vecs("final_norm.bias", d)).transpose()?;
    if let Some(extra) = t.keys().next() {
        return Err(ContainerError::Manifest(format!("unexpected tensor `{extra}`")).into());
    }
    let unembedding = unembedding.unwrap_or_else(|| token_embedding.transpose());
    let weights = ModelWeights {
        token_embedding,
        position_embedding,
        layers: built,
        final_norm_gain,
        final_norm_bias,
        unembedding,
    };
    let model = Model::new(c, weights)?;
    Ok((model, vocab))
}
