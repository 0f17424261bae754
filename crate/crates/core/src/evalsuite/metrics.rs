// SPDX-License-Identifier: MIT OR Apache-2.0

//! Generation success, perplexity and steering-factor selection.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lens::LensProfile;
use crate::model::{normalize_token, Model, TokenId, Vocabulary};
use crate::steering::GenerationResult;

/// Mean number of tokens per text (after retokenising the text) whose
/// normalised string is one of the profile's first `k` tokens.
pub fn gen_success(results: &[GenerationResult], profile: &LensProfile, k: usize, vocab: &Vocabulary) -> Result<f64> {
    let texts: Vec<&str> = results.iter().map(|r| r.text.as_str()).collect();
    gen_success_texts(&texts, profile, k, vocab)
}

pub fn gen_success_texts(texts: &[&str], profile: &LensProfile, k: usize, vocab: &Vocabulary) -> Result<f64> {
    if texts.is_empty() {
        return Err(Error::EmptyInput("no generations to score".into()));
    }
    if k == 0 || k > profile.entries.len() {
        return Err(Error::Range(format!("k={k} outside 1..={}", profile.entries.len())));
    }
    let marker = vocab.space_marker();
    let targets: HashSet<&str> = profile.entries[..k]
        .iter()
        .filter_map(|&(id, _)| vocab.token(id))
        .map(|t| normalize_token(t, marker))
        .filter(|t| !t.is_empty())
        .collect();
    let mut total = 0usize;
    for text in texts {
        for id in vocab.tokenize(text)? {
            let t = vocab.normalized(id).unwrap_or_default();
            if targets.contains(t) {
                total += 1;
            }
        }
    }
    Ok(total as f64 / texts.len() as f64)
}

/// `exp(-mean ln p)` of `continuation` given `prefix`, under the unhooked
/// model.
pub fn perplexity_tokens(scorer: &Model, prefix: &[TokenId], continuation: &[TokenId]) -> Result<f64> {
    if continuation.is_empty() {
        return Err(Error::EmptyInput("continuation has no tokens".into()));
    }
    if prefix.is_empty() {
        return Err(Error::EmptyInput("perplexity needs a non-empty prefix".into()));
    }
    let mut seq = prefix.to_vec();
    seq.extend_from_slice(continuation);
    // the last continuation token is never an input
    seq.pop();
    let logits = scorer.forward(&seq, &[], &[])?.logits;
    let mut nll = 0.0;
    for (i, &t) in continuation.iter().enumerate() {
        let row = logits.row(prefix.len() - 1 + i);
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
        let z: f64 = row.iter().map(|&l| (f64::from(l) - max).exp()).sum();
        nll -= f64::from(row[t]) - max - z.ln();
    }
    Ok((nll / continuation.len() as f64).exp())
}

pub fn perplexity(scorer: &Model, vocab: &Vocabulary, text: &str, condition_prefix: &str) -> Result<f64> {
    let prefix = vocab.tokenize(condition_prefix)?;
    let cont = vocab.tokenize(text)?;
    if cont.is_empty() {
        return Err(Error::EmptyInput("text tokenizes to nothing".into()));
    }
    perplexity_tokens(scorer, &prefix, &cont)
}

/// Scope of the maxima used to normalise both metrics.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "scope", deny_unknown_fields)]
pub enum Normalizer {
    /// Maxima over the surviving rows of this table.
    #[default]
    RunMax,
    /// Caller-supplied maxima, e.g. over a whole cohort.
    Global { max_gen_success: f64, max_perplexity: f64 },
}

/// Picks the factor maximising normalised gen success over normalised
/// perplexity among rows with gen success at most `cap`; smaller factor on
/// ties. `None` when every row exceeds the cap.
pub fn select_optimal_factor(rows: &[(f32, f64, f64)], cap: f64, normalizer: Normalizer) -> Result<Option<f32>> {
    if rows.is_empty() {
        return Err(Error::EmptyInput("no factor rows".into()));
    }
    let survivors: Vec<&(f32, f64, f64)> = rows.iter().filter(|r| r.1 <= cap).collect();
    if survivors.is_empty() {
        return Ok(None);
    }
    let (max_gs, max_ppl) = match normalizer {
        Normalizer::RunMax => (
            survivors.iter().map(|r| r.1).fold(f64::NEG_INFINITY, f64::max),
            survivors.iter().map(|r| r.2).fold(f64::NEG_INFINITY, f64::max),
        ),
        Normalizer::Global {
            max_gen_success,
            max_perplexity,
        } => (max_gen_success, max_perplexity),
    };
    let mut best: Option<(f32, f64)> = None;
    for &&(factor, gs, ppl) in &survivors {
        let norm_gs = if max_gs > 0.0 { gs / max_gs } else { 0.0 };
        let norm_ppl = ppl / max_ppl;
        let ratio = if norm_ppl > 0.0 { norm_gs / norm_ppl } else { 0.0 };
        best = match best {
            Some((bf, br)) if br > ratio || (br == ratio && bf <= factor) => Some((bf, br)),
            _ => Some((factor, ratio)),
        };
    }
    Ok(best.map(|b| b.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_synthetic_model, SyntheticSpec};
    use crate::numerics::Matrix;
    use crate::steering::generate_tokens;

    fn profile(ids: &[TokenId]) -> LensProfile {
        LensProfile {
            feature: 0,
            layer: 0,
            k: ids.len(),
            entries: ids.iter().map(|&i| (i, 0.0)).collect(),
        }
    }

    fn vocab() -> Vocabulary {
        Vocabulary::new(
            ["▁a", "▁b", "▁c", "▁d", "b", "▁"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            "▁",
        )
        .unwrap()
    }

    #[test]
    fn gen_success_counts() {
        let v = vocab();
        let p = profile(&[0, 1]);
        assert_eq!(gen_success_texts(&["a b c", "b a a"], &p, 2, &v).unwrap(), 2.5);
        assert_eq!(gen_success_texts(&["c d", "d"], &p, 2, &v).unwrap(), 0.0);
        // "b" without marker normalises to the same string as "▁b"
        assert_eq!(gen_success_texts(&["cb"], &p, 2, &v).unwrap(), 1.0);
        assert_eq!(gen_success_texts(&["a b"], &p, 1, &v).unwrap(), 1.0);
        assert!(gen_success_texts(&[], &p, 2, &v).is_err());
        assert!(gen_success_texts(&["a"], &p, 3, &v).is_err());
        // a bare marker normalises to "" and never counts
        assert_eq!(gen_success_texts(&["  "], &profile(&[5]), 1, &v).unwrap(), 0.0);
    }

    fn untied_small() -> Model {
        let spec = SyntheticSpec {
            n_layers: 2,
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            vocab_size: 30,
            max_seq: 32,
            tied_unembedding: false,
            ..SyntheticSpec::default()
        };
        build_synthetic_model(&spec, 4).unwrap().0
    }

    #[test]
    fn uniform_scorer_gives_vocab_size() {
        let m = untied_small();
        let mut w = m.weights().clone();
        w.unembedding = Matrix::zeros(16, 30);
        let uniform = Model::new(m.config().clone(), w).unwrap();
        let ppl = perplexity_tokens(&uniform, &[1, 2], &[3, 4, 5, 6]).unwrap();
        assert!((ppl - 30.0).abs() < 1e-3, "{ppl}");
    }

    #[test]
    fn sharp_scorer_on_own_greedy_text() {
        let m = untied_small();
        let mut w = m.weights().clone();
        w.final_norm_gain = vec![1e4; 16];
        let sharp = Model::new(m.config().clone(), w).unwrap();
        let prefix = [3, 7];
        let (cont, _) = generate_tokens(&sharp, &prefix, &[], 10, 0.0, 0).unwrap();
        let ppl = perplexity_tokens(&sharp, &prefix, &cont).unwrap();
        assert!((ppl - 1.0).abs() < 1e-3, "{ppl}");
    }

    #[test]
    fn hand_computed_perplexity() {
        let m = untied_small();
        let prefix = [1usize];
        let cont = [4usize, 9, 2];
        let logits = m.forward(&[1, 4, 9], &[], &[]).unwrap().logits;
        let mut nll = 0.0;
        for (i, &t) in cont.iter().enumerate() {
            let row = logits.row(i);
            let z: f64 = row.iter().map(|&l| f64::from(l).exp()).sum();
            nll += -(f64::from(row[t]).exp() / z).ln();
        }
        let want = (nll / 3.0).exp();
        let got = perplexity_tokens(&m, &prefix, &cont).unwrap();
        assert!((got - want).abs() < 1e-9 * want, "{got} vs {want}");
        assert!(got >= 1.0);
        assert!(perplexity_tokens(&m, &prefix, &[]).is_err());
    }

    #[test]
    fn factor_selection() {
        let n = Normalizer::RunMax;
        assert_eq!(select_optimal_factor(&[(2.0, 1.0, 5.0)], 3.0, n).unwrap(), Some(2.0));
        assert_eq!(
            select_optimal_factor(&[(1.0, 3.5, 5.0), (2.0, 4.0, 5.0)], 3.0, n).unwrap(),
            None
        );
        // ratios (1/2)/(10/40) = 2 and 1/1 = 1: the first row wins
        assert_eq!(
            select_optimal_factor(&[(1.0, 1.0, 10.0), (2.0, 2.0, 40.0)], 3.0, n).unwrap(),
            Some(1.0)
        );
        // cap is inclusive, just-over is dropped
        let rows = [(1.0, 3.0, 10.0), (2.0, 3.0 + 1e-12, 1.0)];
        assert_eq!(select_optimal_factor(&rows, 3.0, n).unwrap(), Some(1.0));
        // ties go to the smaller factor regardless of order
        assert_eq!(
            select_optimal_factor(&[(4.0, 1.0, 2.0), (0.5, 1.0, 2.0)], 3.0, n).unwrap(),
            Some(0.5)
        );
        // nothing generated anywhere: smallest factor
        assert_eq!(
            select_optimal_factor(&[(4.0, 0.0, 2.0), (0.5, 0.0, 3.0)], 3.0, n).unwrap(),
            Some(0.5)
        );
        assert!(select_optimal_factor(&[], 3.0, n).is_err());
        let global = Normalizer::Global {
            max_gen_success: 10.0,
            max_perplexity: 100.0,
        };
        assert_eq!(
            select_optimal_factor(&[(1.0, 1.0, 10.0), (2.0, 2.0, 40.0)], 3.0, global).unwrap(),
            Some(1.0)
        );
    }
}
