// SPDX-License-Identifier: MIT OR Apache-2.0

//! Logit lens: project a residual vector, or an SAE feature direction,
//! through the final norm and unembedding.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, TokenId, Vocabulary};
use crate::numerics::{top_k, vec_mat};
use crate::sae::SaeParams;

pub const DEFAULT_K: usize = 20;

/// A feature's top-k lens tokens, best first.
#[derive(Debug, Clone, PartialEq)]
pub struct LensProfile {
    pub feature: usize,
    pub layer: usize,
    pub k: usize,
    pub entries: Vec<(TokenId, f32)>,
}

impl LensProfile {
    pub fn tokens(&self) -> impl Iterator<Item = TokenId> + '_ {
        self.entries.iter().map(|&(t, _)| t)
    }

    /// Top token (the first entry).
    pub fn top1(&self) -> TokenId {
        self.entries[0].0
    }
}

pub fn logit_lens_state(model: &Model, x: &[f32]) -> Result<Vec<f32>> {
    let d = model.config().d_model;
    if x.len() != d {
        return Err(Error::Shape(format!(
            "lens input has width {}, model width is {d}",
            x.len()
        )));
    }
    let h = model.final_norm(x)?;
    vec_mat(&h, &model.weights().unembedding)
}

pub fn logit_lens_feature(model: &Model, sae: &SaeParams, feature: usize, k: usize) -> Result<LensProfile> {
    sae.check_feature(feature)?;
    let logits = logit_lens_state(model, sae.direction_ref(feature))?;
    Ok(LensProfile {
        feature,
        layer: sae.layer(),
        k,
        entries: top_k(&logits, k)?,
    })
}

/// Profiles of every feature of `sae`, in feature order.
pub fn all_profiles(model: &Model, sae: &SaeParams, k: usize) -> Result<Vec<LensProfile>> {
    (0..sae.n_features())
        .into_par_iter()
        .map(|i| logit_lens_feature(model, sae, i, k))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LensToken {
    pub id: TokenId,
    pub string: String,
    pub logit: f32,
}

/// JSONL shape of a profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LensLine {
    pub layer: usize,
    pub feature: usize,
    pub k: usize,
    pub tokens: Vec<LensToken>,
}

impl LensLine {
    pub fn new(profile: &LensProfile, vocab: &Vocabulary) -> Self {
        let tokens = profile
            .entries
            .iter()
            .map(|&(id, logit)| LensToken {
                id,
                string: vocab.token(id).unwrap_or_default().to_string(),
                logit,
            })
            .collect();
        Self {
            layer: profile.layer,
            feature: profile.feature,
            k: profile.k,
            tokens,
        }
    }

    pub fn into_profile(self) -> LensProfile {
        LensProfile {
            feature: self.feature,
            layer: self.layer,
            k: self.k,
            entries: self.tokens.into_iter().map(|t| (t.id, t.logit)).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_synthetic_model, SyntheticSpec};
    use crate::numerics::{Matrix, NormKind, RngState};
    use crate::sae::{build_synthetic_sae, SaeSpec};

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            n_layers: 2,
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            vocab_size: 16,
            max_seq: 8,
            tied_unembedding: false,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn orthonormal_unembedding_argmax() {
        let (m, _) = build_synthetic_model(&small(), 0).unwrap();
        let mut w = m.weights().clone();
        w.unembedding = Matrix::identity(16);
        w.final_norm_gain = vec![1.0; 16];
        let m = Model::new(m.config().clone(), w).unwrap();
        for t in 0..16 {
            let mut x = vec![0.0; 16];
            x[t] = 4.0;
            let logits = logit_lens_state(&m, &x).unwrap();
            assert_eq!(crate::numerics::argmax(&logits), t);
        }
    }

    #[test]
    fn zero_vector_with_layernorm_gives_bias_pattern() {
        let mut s = small();
        s.norm_kind = NormKind::LayerNorm;
        let (m, _) = build_synthetic_model(&s, 0).unwrap();
        let logits = logit_lens_state(&m, &[0.0; 16]).unwrap();
        let bias = m.weights().final_norm_bias.clone().unwrap();
        let want = vec_mat(&bias, &m.weights().unembedding).unwrap();
        assert_eq!(logits, want);
    }

    #[test]
    fn final_layer_lens_matches_model_logits() {
        let (m, _) = build_synthetic_model(&SyntheticSpec::default(), 2).unwrap();
        let toks = [5, 9, 33, 2, 100];
        let out = m.forward(&toks, &[], &[3]).unwrap();
        let resid = &out.captured[&3];
        for p in 0..toks.len() {
            let lens = logit_lens_state(&m, resid.row(p)).unwrap();
            assert_eq!(lens, out.logits.row(p).to_vec());
        }
    }

    #[test]
    fn profile_is_topk_of_full_lens_and_scale_invariant() {
        let (m, _) = build_synthetic_model(&SyntheticSpec::default(), 2).unwrap();
        let sae = build_synthetic_sae(
            &m,
            &SaeSpec {
                layer: 1,
                ..SaeSpec::default()
            },
            3,
        )
        .unwrap();
        let p = logit_lens_feature(&m, &sae, 11, 256).unwrap();
        let full = logit_lens_state(&m, &sae.feature_direction(11).unwrap()).unwrap();
        let mut order: Vec<usize> = (0..256).collect();
        order.sort_by(|&a, &b| full[b].total_cmp(&full[a]).then(a.cmp(&b)));
        assert_eq!(p.tokens().collect::<Vec<_>>(), order);
        let scaled: Vec<f32> = sae.feature_direction(11).unwrap().iter().map(|v| v * 7.5).collect();
        let top_scaled = top_k(&logit_lens_state(&m, &scaled).unwrap(), 20).unwrap();
        let top = logit_lens_feature(&m, &sae, 11, 20).unwrap();
        assert_eq!(
            top_scaled.iter().map(|e| e.0).collect::<Vec<_>>(),
            top.tokens().collect::<Vec<_>>()
        );
    }

    #[test]
    fn errors_and_jsonl_shape() {
        let (m, v) = build_synthetic_model(&SyntheticSpec::default(), 2).unwrap();
        let sae = build_synthetic_sae(&m, &SaeSpec::default(), 3).unwrap();
        assert!(matches!(logit_lens_feature(&m, &sae, 256, 20), Err(Error::Range(_))));
        assert!(matches!(logit_lens_feature(&m, &sae, 0, 0), Err(Error::Shape(_))));
        assert!(matches!(logit_lens_state(&m, &[0.0; 3]), Err(Error::Shape(_))));
        let p = logit_lens_feature(&m, &sae, 4, 20).unwrap();
        let line = LensLine::new(&p, &v);
        let json: serde_json::Value = serde_json::to_value(&line).unwrap();
        assert_eq!(json["tokens"].as_array().unwrap().len(), 20);
        assert!(json["tokens"][0]["string"].is_string());
        assert_eq!(line.into_profile(), p);
    }

    #[test]
    fn all_profiles_in_order() {
        let (m, _) = build_synthetic_model(&SyntheticSpec::default(), 2).unwrap();
        let sae = build_synthetic_sae(&m, &SaeSpec::default(), 3).unwrap();
        let all = all_profiles(&m, &sae, 20).unwrap();
        assert_eq!(all.len(), 256);
        let mut rng = RngState::new(0);
        for _ in 0..5 {
            let i = (rng.next_u64() % 256) as usize;
            assert_eq!(all[i], logit_lens_feature(&m, &sae, i, 20).unwrap());
        }
    }
}
