// SPDX-License-Identifier: MIT OR Apache-2.0

//! Activation records: the sentences a feature fires on, with per-token
//! activations. Read from JSONL exports or collected from a token corpus.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, TokenId, Vocabulary};
use crate::numerics::RngState;
use crate::sae::SaeParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sentence {
    pub tokens: Vec<String>,
    pub activations: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActivationRecord {
    pub feature: usize,
    pub layer: usize,
    pub sentences: Vec<Sentence>,
}

impl ActivationRecord {
    pub fn validate(&self) -> Result<()> {
        for (i, s) in self.sentences.iter().enumerate() {
            if s.tokens.len() != s.activations.len() {
                return Err(Error::Record(format!(
                    "feature {} layer {} sentence {i}: {} tokens but {} activations",
                    self.feature,
                    self.layer,
                    s.tokens.len(),
                    s.activations.len()
                )));
            }
            if s.tokens.is_empty() {
                return Err(Error::Record(format!(
                    "feature {} layer {} sentence {i} is empty",
                    self.feature, self.layer
                )));
            }
            if s.activations.iter().any(|a| !a.is_finite() || *a < 0.0) {
                return Err(Error::Record(format!(
                    "feature {} layer {} sentence {i}: activations must be finite and non-negative",
                    self.feature, self.layer
                )));
            }
        }
        Ok(())
    }
}

/// Records keyed by `(layer, feature)`.
pub type RecordIndex = BTreeMap<(usize, usize), ActivationRecord>;

/// Validates records and indexes them; a repeated key is an error.
pub fn index_records(records: Vec<ActivationRecord>) -> Result<RecordIndex> {
    let mut out = RecordIndex::new();
    for r in records {
        r.validate()?;
        let key = (r.layer, r.feature);
        if out.insert(key, r).is_some() {
            return Err(Error::Record(format!(
                "duplicate record for layer {} feature {}",
                key.0, key.1
            )));
        }
    }
    Ok(out)
}

/// Random sentences over the non-byte tokens of `vocab`.
pub fn synthetic_corpus(vocab: &Vocabulary, n_sentences: usize, len: usize, seed: u64) -> Vec<Vec<TokenId>> {
    let pool: Vec<TokenId> = (0..vocab.len()).filter(|&i| !vocab.is_byte_token(i)).collect();
    let mut rng = RngState::new(seed);
    (0..n_sentences)
        .map(|_| {
            (0..len)
                .map(|_| pool[(rng.next_u64() % pool.len() as u64) as usize])
                .collect()
        })
        .collect()
}

/// Peak activation, sentence index, per-token activations.
type Hit = (f32, usize, Vec<f32>);

/// Runs the corpus through the model once and builds, for every feature of
/// every SAE that fires somewhere, a record of its `max_sentences`
/// strongest sentences (by peak activation, earlier sentences first on
/// ties). Records come out ordered by `(layer, feature)`.
pub fn collect_records(
    model: &Model,
    vocab: &Vocabulary,
    saes: &[&SaeParams],
    corpus: &[Vec<TokenId>],
    max_sentences: usize,
) -> Result<Vec<ActivationRecord>> {
    let layers: Vec<usize> = saes.iter().map(|s| s.layer()).collect();
    // per SAE, per feature
    let mut hits: Vec<Vec<Vec<Hit>>> = saes.iter().map(|s| vec![Vec::new(); s.n_features()]).collect();
    for (si, sentence) in corpus.iter().enumerate() {
        let out = model.forward(sentence, &[], &layers)?;
        for (k, sae) in saes.iter().enumerate() {
            let acts = sae.encode_rows(&out.captured[&sae.layer()])?;
            let m = sae.n_features();
            for (j, feature_hits) in hits[k].iter_mut().enumerate().take(m) {
                let column: Vec<f32> = (0..acts.rows()).map(|r| acts.get(r, j)).collect();
                let peak = column.iter().copied().fold(0.0, f32::max);
                if peak > 0.0 {
                    feature_hits.push((peak, si, column));
                }
            }
        }
    }
    let mut records = Vec::new();
    for (k, sae) in saes.iter().enumerate() {
        for (j, mut feature_hits) in std::mem::take(&mut hits[k]).into_iter().enumerate() {
            if feature_hits.is_empty() {
                continue;
            }
            feature_hits.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            feature_hits.truncate(max_sentences);
            let sentences = feature_hits
                .into_iter()
                .map(|(_, si, activations)| Sentence {
                    tokens: corpus[si]
                        .iter()
                        .map(|&t| vocab.token(t).unwrap_or_default().to_string())
                        .collect(),
                    activations,
                })
                .collect();
            records.push(ActivationRecord {
                feature: j,
                layer: sae.layer(),
                sentences,
            });
        }
    }
    records.sort_by_key(|r| (r.layer, r.feature));
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_synthetic_model, SyntheticSpec};
    use crate::sae::{build_synthetic_sae, SaeSpec};

    #[test]
    fn validation() {
        let mut r = ActivationRecord {
            feature: 1,
            layer: 0,
            sentences: vec![Sentence {
                tokens: vec!["a".into()],
                activations: vec![0.5],
            }],
        };
        r.validate().unwrap();
        r.sentences[0].activations.push(1.0);
        assert!(matches!(r.validate(), Err(Error::Record(_))));
        r.sentences[0].tokens.push("b".into());
        r.sentences[0].activations[1] = -1.0;
        assert!(matches!(r.validate(), Err(Error::Record(_))));
        r.sentences[0].activations[1] = 1.0;
        assert!(index_records(vec![r.clone(), r]).is_err());
    }

    #[test]
    fn collected_records_are_consistent() {
        let (m, v) = build_synthetic_model(&SyntheticSpec::default(), 0).unwrap();
        let sae = build_synthetic_sae(
            &m,
            &SaeSpec {
                layer: 1,
                ..SaeSpec::default()
            },
            1,
        )
        .unwrap();
        let corpus = synthetic_corpus(&v, 30, 8, 2);
        assert!(corpus.iter().flatten().all(|&t| !v.is_byte_token(t)));
        let recs = collect_records(&m, &v, &[&sae], &corpus, 5).unwrap();
        assert!(!recs.is_empty());
        for r in &recs {
            r.validate().unwrap();
            assert!(r.sentences.len() <= 5);
            let peaks: Vec<f32> = r
                .sentences
                .iter()
                .map(|s| s.activations.iter().copied().fold(0.0, f32::max))
                .collect();
            assert!(peaks.windows(2).all(|w| w[0] >= w[1]));
            assert!(peaks[0] > 0.0);
        }
        // spot-check one activation against a direct encode
        let r = &recs[0];
        let s = &r.sentences[0];
        let ids: Vec<TokenId> = s.tokens.iter().map(|t| v.id(t).unwrap()).collect();
        let x = m.forward(&ids, &[], &[1]).unwrap().captured[&1].clone();
        let a = sae.encode_rows(&x).unwrap();
        for p in 0..ids.len() {
            assert_eq!(a.get(p, r.feature), s.activations[p]);
        }
    }
}
