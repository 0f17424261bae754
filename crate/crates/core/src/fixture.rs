// SPDX-License-Identifier: MIT OR Apache-2.0

//! Complete synthetic setups: a model, one SAE per layer with planted
//! input features in early layers and planted output features in late
//! layers, a random corpus with its activation records, and a PMI table.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalsuite::PmiTable;
use crate::model::{build_synthetic_model, normalize_token, Model, SyntheticSpec, TokenId, Vocabulary};
use crate::numerics::{derive_seed, RngState};
use crate::sae::{build_synthetic_sae, PlantedFeature, SaeParams, SaeSpec};
use crate::scoring::{collect_records, synthetic_corpus, ActivationRecord, MAX_SENTENCES};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuiteSpec {
    pub model: SyntheticSpec,
    /// Dictionary size per SAE; `None` means eight times the model width.
    pub n_features: Option<usize>,
    /// Layers that get planted input features.
    pub input_layers: Vec<usize>,
    /// Layers that get planted output features.
    pub output_layers: Vec<usize>,
    /// Planted features per planted layer; they take the lowest indices.
    pub planted_per_layer: usize,
    pub corpus_sentences: usize,
    pub corpus_len: usize,
}

impl Default for SuiteSpec {
    fn default() -> Self {
        Self {
            model: SyntheticSpec {
                n_layers: 6,
                vocab_size: 512,
                // small early writes, a large middle jump, modest late writes:
                // early injections get diluted, late ones survive to the logits
                write_norms: vec![0.05, 0.25, 2.0, 20.0, 40.0, 40.0],
                ..SyntheticSpec::default()
            },
            n_features: None,
            input_layers: vec![0, 1],
            output_layers: vec![4, 5],
            planted_per_layer: 16,
            corpus_sentences: 800,
            corpus_len: 16,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Suite {
    pub model: Model,
    pub vocab: Vocabulary,
    /// One SAE per layer, index = layer.
    pub saes: Vec<Arc<SaeParams>>,
    pub planted_input: Vec<(usize, PlantedFeature)>,
    pub planted_output: Vec<(usize, PlantedFeature)>,
    pub corpus: Vec<Vec<TokenId>>,
    pub records: Vec<ActivationRecord>,
    pub pmi: PmiTable,
}

/// Builds the whole suite deterministically from `seed`.
pub fn build_suite(spec: &SuiteSpec, seed: u64) -> Result<Suite> {
    let n_layers = spec.model.n_layers;
    for &l in spec.input_layers.iter().chain(&spec.output_layers) {
        if l >= n_layers {
            return Err(Error::Spec(format!("planted layer {l} >= n_layers {n_layers}")));
        }
    }
    let (model, vocab) = build_synthetic_model(&spec.model, derive_seed(&[seed, 1]))?;
    // planted tokens: distinct word tokens, never a bare marker
    let marker = vocab.space_marker();
    let mut pool: Vec<TokenId> = (0..vocab.len())
        .filter(|&t| !vocab.is_byte_token(t) && !normalize_token(vocab.token(t).unwrap_or_default(), marker).is_empty())
        .collect();
    let mut rng = RngState::new(derive_seed(&[seed, 2]));
    let planted_layers = spec.input_layers.len() + spec.output_layers.len();
    let needed = planted_layers * spec.planted_per_layer;
    if needed > pool.len() {
        return Err(Error::Spec(format!(
            "{needed} planted tokens requested, {} available",
            pool.len()
        )));
    }
    for i in 0..needed {
        let j = i + (rng.next_u64() % (pool.len() - i) as u64) as usize;
        pool.swap(i, j);
    }
    let mut next = pool.into_iter();
    let mut planted_input = Vec::new();
    let mut planted_output = Vec::new();
    let mut saes = Vec::with_capacity(n_layers);
    for layer in 0..n_layers {
        let mut s = SaeSpec {
            layer,
            n_features: spec.n_features,
            ..SaeSpec::default()
        };
        let plant = |next: &mut dyn Iterator<Item = TokenId>| -> Vec<PlantedFeature> {
            (0..spec.planted_per_layer)
                .map(|feature| PlantedFeature {
                    feature,
                    token: next.next().expect("pool size checked"),
                })
                .collect()
        };
        if spec.input_layers.contains(&layer) {
            s.planted_input = plant(&mut next);
            planted_input.extend(s.planted_input.iter().map(|&p| (layer, p)));
        } else if spec.output_layers.contains(&layer) {
            s.planted_output = plant(&mut next);
            planted_output.extend(s.planted_output.iter().map(|&p| (layer, p)));
        }
        saes.push(Arc::new(build_synthetic_sae(
            &model,
            &s,
            derive_seed(&[seed, 3, layer as u64]),
        )?));
    }
    let corpus = synthetic_corpus(&vocab, spec.corpus_sentences, spec.corpus_len, derive_seed(&[seed, 4]));
    let refs: Vec<&SaeParams> = saes.iter().map(|s| s.as_ref()).collect();
    let records = collect_records(&model, &vocab, &refs, &corpus, MAX_SENTENCES)?;
    let strings: Vec<Vec<&str>> = corpus
        .iter()
        .map(|s| s.iter().map(|&t| vocab.normalized(t).unwrap_or_default()).collect())
        .collect();
    let pmi = PmiTable::from_sentences(&strings)?;
    Ok(Suite {
        model,
        vocab,
        saes,
        planted_input,
        planted_output,
        corpus,
        records,
        pmi,
    })
}
