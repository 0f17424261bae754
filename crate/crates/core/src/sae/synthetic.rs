// SPDX-License-Identifier: MIT OR Apache-2.0

//! Untrained SAEs with planted features, calibrated on the model's own
//! residual stream.
//!
//! Ordinary features get a random unit decoder column and the same vector
//! as encoder row, with a threshold set so that each fires on roughly
//! `firing_rate` of calibration positions. A planted output feature
//! decodes to a token's unembedding direction; a planted input feature
//! reads (and writes) a token's embedding direction and fires only where
//! that token sits. One global scale on the encoder side is then fitted by
//! least squares so that decoding reconstructs the residual as well as a
//! random dictionary can.

use serde::{Deserialize, Serialize};

use super::SaeParams;
use crate::error::{Error, Result};
use crate::model::{Model, TokenId};
use crate::numerics::{Matrix, RngState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantedFeature {
    pub feature: usize,
    pub token: TokenId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SaeSpec {
    pub layer: usize,
    /// Dictionary size; `None` means eight times the model width.
    pub n_features: Option<usize>,
    pub firing_rate: f64,
    pub calibration_sequences: usize,
    pub calibration_len: usize,
    /// Threshold of a planted input feature as a fraction of its mean
    /// pre-activation on its own token.
    pub input_threshold: f64,
    pub planted_output: Vec<PlantedFeature>,
    pub planted_input: Vec<PlantedFeature>,
}

impl Default for SaeSpec {
    fn default() -> Self {
        Self {
            layer: 0,
            n_features: None,
            firing_rate: 0.1,
            calibration_sequences: 32,
            calibration_len: 24,
            input_threshold: 0.6,
            planted_output: Vec::new(),
            planted_input: Vec::new(),
        }
    }
}

fn unit(v: &[f32]) -> Vec<f32> {
    let norm = v.iter().map(|&x| f64::from(x).powi(2)).sum::<f64>().sqrt();
    if norm == 0.0 {
        return v.to_vec();
    }
    v.iter().map(|&x| (f64::from(x) / norm) as f32).collect()
}

fn random_unit(rng: &mut RngState, n: usize) -> Vec<f32> {
    loop {
        let v: Vec<f32> = (0..n).map(|_| rng.next_normal() as f32).collect();
        if v.iter().any(|&x| x != 0.0) {
            return unit(&v);
        }
    }
}

/// Residual rows at `layer` for random token sequences, plus the token at
/// each row. A final sequence cycles through `must_include` so every
/// planted input token is seen.
fn calibration_rows(
    model: &Model,
    spec: &SaeSpec,
    must_include: &[TokenId],
    rng: &mut RngState,
) -> Result<(Matrix, Vec<TokenId>)> {
    let c = model.config();
    let len = spec.calibration_len.clamp(1, c.max_seq);
    let mut seqs: Vec<Vec<TokenId>> = (0..spec.calibration_sequences.max(1))
        .map(|_| {
            (0..len)
                .map(|_| (rng.next_u64() % c.vocab_size as u64) as TokenId)
                .collect()
        })
        .collect();
    for chunk in must_include.chunks(len) {
        let mut s: Vec<TokenId> = chunk.to_vec();
        while s.len() < len {
            s.push(chunk[s.len() % chunk.len()]);
        }
        seqs.push(s);
    }
    let mut data = Vec::new();
    let mut tokens = Vec::new();
    for s in &seqs {
        let out = model.forward(s, &[], &[spec.layer])?;
        data.extend_from_slice(out.captured[&spec.layer].data());
        tokens.extend_from_slice(s);
    }
    Ok((Matrix::new(tokens.len(), c.d_model, data)?, tokens))
}

fn quantile_sorted(sorted: &[f32], q: f64) -> f32 {
    let pos = (q * (sorted.len() - 1) as f64).ceil() as usize;
    sorted[pos.min(sorted.len() - 1)]
}

pub fn build_synthetic_sae(model: &Model, spec: &SaeSpec, seed: u64) -> Result<SaeParams> {
    let c = model.config();
    let n = c.d_model;
    let m = spec.n_features.unwrap_or(8 * n);
    if spec.layer >= c.n_layers {
        return Err(Error::Spec(format!(
            "SAE layer {} >= n_layers {}",
            spec.layer, c.n_layers
        )));
    }
    if m == 0 {
        return Err(Error::Spec("SAE needs at least one feature".into()));
    }
    if !(spec.firing_rate > 0.0 && spec.firing_rate < 1.0) {
        return Err(Error::Spec(format!("firing_rate {} outside (0, 1)", spec.firing_rate)));
    }
    let mut seen = vec![false; m];
    for p in spec.planted_output.iter().chain(&spec.planted_input) {
        if p.feature >= m {
            return Err(Error::Spec(format!("planted feature {} >= {m} features", p.feature)));
        }
        if p.token >= c.vocab_size {
            return Err(Error::Spec(format!(
                "planted token {} outside vocabulary of {}",
                p.token, c.vocab_size
            )));
        }
        if std::mem::replace(&mut seen[p.feature], true) {
            return Err(Error::Spec(format!("feature {} planted twice", p.feature)));
        }
    }

    let w = model.weights();
    let root = RngState::new(seed);
    let mut rng = root.split(1);
    let mut enc_rows = Vec::with_capacity(m);
    let mut dec_cols = Vec::with_capacity(m);
    for _ in 0..m {
        let d = random_unit(&mut rng, n);
        enc_rows.push(d.clone());
        dec_cols.push(d);
    }
    for p in &spec.planted_output {
        dec_cols[p.feature] = unit(&w.unembedding.column(p.token));
    }
    for p in &spec.planted_input {
        let e = unit(w.token_embedding.row(p.token));
        enc_rows[p.feature] = e.clone();
        dec_cols[p.feature] = e;
    }
    let mut w_enc = Matrix::from_rows(&enc_rows)?;
    let w_dec = Matrix::from_rows(&dec_cols)?.transpose();
    let b_enc = vec![0.0; m];
    let b_dec = vec![0.0; n];

    let inputs: Vec<TokenId> = spec.planted_input.iter().map(|p| p.token).collect();
    let (rows, row_tokens) = calibration_rows(model, spec, &inputs, &mut root.split(2))?;
    let unthresholded = SaeParams::new(
        spec.layer,
        w_enc.clone(),
        b_enc.clone(),
        vec![0.0; m],
        w_dec.clone(),
        b_dec.clone(),
    )?;
    let z = unthresholded.pre_activations(&rows)?;
    let mut theta = vec![0.0f32; m];
    let mut column = Vec::with_capacity(rows.rows());
    for (j, t) in theta.iter_mut().enumerate() {
        column.clear();
        column.extend((0..z.rows()).map(|r| z.get(r, j)));
        column.sort_by(f32::total_cmp);
        *t = quantile_sorted(&column, 1.0 - spec.firing_rate).max(0.0);
    }
    for p in &spec.planted_input {
        let own: Vec<f64> = (0..z.rows())
            .filter(|&r| row_tokens[r] == p.token)
            .map(|r| f64::from(z.get(r, p.feature)))
            .collect();
        let mean = own.iter().sum::<f64>() / own.len() as f64;
        theta[p.feature] = (spec.input_threshold * mean).max(0.0) as f32;
    }

    // least-squares scale c minimising |c * decode(a) - x|^2 over calibration rows
    let sae = SaeParams::new(
        spec.layer,
        w_enc.clone(),
        b_enc.clone(),
        theta.clone(),
        w_dec.clone(),
        b_dec.clone(),
    )?;
    let recon = sae.decode_rows(&sae.encode_rows(&rows)?)?;
    let (mut num, mut den) = (0.0f64, 0.0f64);
    for (x, r) in rows.data().iter().zip(recon.data()) {
        num += f64::from(*x) * f64::from(*r);
        den += f64::from(*r) * f64::from(*r);
    }
    let scale = if den > 0.0 && num > 0.0 {
        (num / den) as f32
    } else {
        1.0
    };
    w_enc.data_mut().iter_mut().for_each(|v| *v *= scale);
    theta.iter_mut().for_each(|t| *t *= scale);
    SaeParams::new(spec.layer, w_enc, b_enc, theta, w_dec, b_dec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lens::logit_lens_feature;
    use crate::model::{build_synthetic_model, SyntheticSpec};

    #[test]
    fn planted_features_behave() {
        let (model, _) = build_synthetic_model(&SyntheticSpec::default(), 1).unwrap();
        let spec = SaeSpec {
            layer: 0,
            planted_output: vec![PlantedFeature { feature: 3, token: 17 }],
            planted_input: vec![PlantedFeature { feature: 5, token: 40 }],
            ..SaeSpec::default()
        };
        let sae = build_synthetic_sae(&model, &spec, 2).unwrap();
        assert_eq!(sae.n_features(), 256);
        assert_eq!(logit_lens_feature(&model, &sae, 3, 20).unwrap().entries[0].0, 17);
        let e = model.weights().token_embedding.row(40).to_vec();
        let a = sae.encode(&e).unwrap();
        assert!(a.values[5] > sae.theta()[5] && a.values[5] > 0.0);
        // residual of token 40 at layer 0 also fires it, another token does not
        let x = model.forward(&[40, 41], &[], &[0]).unwrap().captured[&0].clone();
        let acts = sae.encode_rows(&x).unwrap();
        assert!(acts.get(0, 5) > 0.0);
        assert_eq!(acts.get(1, 5), 0.0);
    }

    #[test]
    fn firing_rate_roughly_respected() {
        let (model, _) = build_synthetic_model(&SyntheticSpec::default(), 3).unwrap();
        let sae = build_synthetic_sae(
            &model,
            &SaeSpec {
                layer: 2,
                ..SaeSpec::default()
            },
            4,
        )
        .unwrap();
        let toks: Vec<TokenId> = (0..48).map(|i| (i * 37 + 5) % 256).collect();
        let x = model.forward(&toks, &[], &[2]).unwrap().captured[&2].clone();
        let a = sae.encode_rows(&x).unwrap();
        let active = a.data().iter().filter(|&&v| v > 0.0).count() as f64 / a.data().len() as f64;
        assert!(active > 0.02 && active < 0.3, "{active}");
    }

    #[test]
    fn rejects_bad_plants() {
        let (model, _) = build_synthetic_model(&SyntheticSpec::default(), 1).unwrap();
        let twice = SaeSpec {
            planted_output: vec![PlantedFeature { feature: 1, token: 2 }],
            planted_input: vec![PlantedFeature { feature: 1, token: 3 }],
            ..SaeSpec::default()
        };
        assert!(matches!(build_synthetic_sae(&model, &twice, 0), Err(Error::Spec(_))));
        let oob = SaeSpec {
            planted_output: vec![PlantedFeature { feature: 1, token: 999 }],
            ..SaeSpec::default()
        };
        assert!(matches!(build_synthetic_sae(&model, &oob, 0), Err(Error::Spec(_))));
    }

    #[test]
    fn deterministic() {
        let (model, _) = build_synthetic_model(&SyntheticSpec::default(), 1).unwrap();
        let s = SaeSpec::default();
        assert_eq!(
            build_synthetic_sae(&model, &s, 7).unwrap(),
            build_synthetic_sae(&model, &s, 7).unwrap()
        );
    }
}
