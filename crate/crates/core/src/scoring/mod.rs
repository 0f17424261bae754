// SPDX-License-Identifier: MIT OR Apache-2.0

//! Input and output scores of SAE features.
//!
//! The input score is the fraction of a feature's top-activating tokens
//! (one per sentence) that appear among its logit-lens tokens. The output
//! score measures how much steering the feature on a neutral prompt lifts
//! the best-ranked lens token, weighting probability by `1 - rank/|V|`.

mod records;

use std::collections::HashSet;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lens::{logit_lens_feature, LensProfile, DEFAULT_K};
use crate::model::{Model, TokenId, Vocabulary};
use crate::numerics::{ranks, RngState};
use crate::prefixes::NEUTRAL_PROMPT;
use crate::sae::SaeParams;
use crate::steering::{make_steer_hook, AmaxScope, SpliceMode};

pub use records::{collect_records, index_records, synthetic_corpus, ActivationRecord, RecordIndex, Sentence};

/// Minimum number of sentences for an input score.
pub const MIN_SENTENCES: usize = 20;
/// Sentences beyond this many are ignored.
pub const MAX_SENTENCES: usize = 100;
pub const DEFAULT_OUTPUT_FACTOR: f32 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreMode {
    /// Steered minus unsteered rank-weighted probability.
    #[default]
    Exact,
    /// Steered rank-weighted probability only.
    Fast,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoreConfig {
    pub neutral_prompt: String,
    pub factor_s: f32,
    pub mode: ScoreMode,
    pub splice_mode: SpliceMode,
    pub amax_scope: AmaxScope,
    /// Evaluate the baseline at the steered run's best lens token instead
    /// of selecting it afresh in the baseline distribution.
    pub reuse_intervened_lstar: bool,
    pub k: usize,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        Self {
            neutral_prompt: NEUTRAL_PROMPT.into(),
            factor_s: DEFAULT_OUTPUT_FACTOR,
            mode: ScoreMode::Exact,
            splice_mode: SpliceMode::Reconstruct,
            amax_scope: AmaxScope::PerPosition,
            reuse_intervened_lstar: false,
            k: DEFAULT_K,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub feature: usize,
    pub layer: usize,
    pub s_in: Option<f64>,
    pub s_out: f64,
    #[serde(rename = "mode")]
    pub s_out_mode: ScoreMode,
    pub lstar_token: TokenId,
    pub lstar_rank: usize,
    pub lstar_prob: f64,
    pub n_sentences: usize,
}

/// `(1 - rank / |V|) · p`.
pub fn rank_weighted_probability(rank: usize, prob: f64, vocab_size: usize) -> f64 {
    (1.0 - rank as f64 / vocab_size as f64) * prob
}

/// Token string used to compare activation tokens with lens tokens.
fn normalized_set<'a>(tokens: impl Iterator<Item = &'a str>, marker: &str) -> HashSet<&'a str> {
    tokens.map(|t| crate::model::normalize_token(t, marker)).collect()
}

/// Fraction of per-sentence top-activating tokens found in the profile.
/// Uses at most the first hundred sentences and needs at least twenty.
pub fn input_score(record: &ActivationRecord, profile: &LensProfile, vocab: &Vocabulary) -> Result<f64> {
    if record.feature != profile.feature || record.layer != profile.layer {
        return Err(Error::Record(format!(
            "record is for layer {} feature {}, profile for layer {} feature {}",
            record.layer, record.feature, profile.layer, profile.feature
        )));
    }
    record.validate()?;
    if record.sentences.len() < MIN_SENTENCES {
        return Err(Error::InsufficientData(format!(
            "feature {} has {} sentences, need {MIN_SENTENCES}",
            record.feature,
            record.sentences.len()
        )));
    }
    let marker = vocab.space_marker();
    let top = record.sentences.iter().take(MAX_SENTENCES).map(|s| {
        let mut best = 0;
        for (i, &a) in s.activations.iter().enumerate() {
            if a > s.activations[best] {
                best = i;
            }
        }
        s.tokens[best].as_str()
    });
    let t = normalized_set(top, marker);
    let lens = normalized_set(profile.tokens().filter_map(|id| vocab.token(id)), marker);
    Ok(t.intersection(&lens).count() as f64 / t.len() as f64)
}

/// Final-position output distribution of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Distribution {
    pub probs: Vec<f64>,
    pub ranks: Vec<usize>,
}

impl Distribution {
    pub fn from_logits(logits: &[f32]) -> Self {
        let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
        let exps: Vec<f64> = logits.iter().map(|&l| (f64::from(l) - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        Self {
            probs: exps.iter().map(|e| e / z).collect(),
            ranks: ranks(logits),
        }
    }

    pub fn weighted(&self, token: TokenId) -> LStar {
        let (rank, prob) = (self.ranks[token], self.probs[token]);
        LStar {
            token,
            rank,
            prob,
            weighted: rank_weighted_probability(rank, prob, self.probs.len()),
        }
    }

    /// Best-ranked profile token; ties go to higher probability, then lower id.
    pub fn lstar(&self, profile: &LensProfile) -> LStar {
        let best = profile
            .tokens()
            .min_by(|&a, &b| {
                self.ranks[a]
                    .cmp(&self.ranks[b])
                    .then(self.probs[b].total_cmp(&self.probs[a]))
                    .then(a.cmp(&b))
            })
            .expect("profiles are non-empty");
        self.weighted(best)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LStar {
    pub token: TokenId,
    pub rank: usize,
    pub prob: f64,
    pub weighted: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputScore {
    pub s_out: f64,
    pub mode: ScoreMode,
    /// ℓ* of the steered distribution.
    pub intervened: LStar,
    /// Baseline term subtracted in exact mode.
    pub baseline: Option<LStar>,
}

/// Unhooked distribution for the prompt's last position.
pub fn baseline_distribution(model: &Model, vocab: &Vocabulary, prompt: &str) -> Result<Distribution> {
    let tokens = vocab.tokenize(prompt)?;
    Ok(Distribution::from_logits(&model.forward_last(&tokens, &[])?))
}

/// Output score; `baseline` lets callers share one unhooked pass.
pub fn output_score_with_baseline(
    model: &Model,
    vocab: &Vocabulary,
    sae: &Arc<SaeParams>,
    profile: &LensProfile,
    cfg: &ScoreConfig,
    baseline: Option<&Distribution>,
) -> Result<OutputScore> {
    if profile.layer != sae.layer() {
        return Err(Error::Range(format!(
            "profile is for layer {}, SAE for layer {}",
            profile.layer,
            sae.layer()
        )));
    }
    if sae.d_model() != model.config().d_model {
        return Err(Error::Shape(format!(
            "SAE width {} does not match model width {}",
            sae.d_model(),
            model.config().d_model
        )));
    }
    let tokens = vocab.tokenize(&cfg.neutral_prompt)?;
    let (point, _) = make_steer_hook(
        sae.clone(),
        profile.feature,
        cfg.factor_s,
        cfg.splice_mode,
        cfg.amax_scope,
    )?;
    let steered = Distribution::from_logits(&model.forward_last(&tokens, &[point])?);
    let intervened = steered.lstar(profile);
    match cfg.mode {
        ScoreMode::Fast => Ok(OutputScore {
            s_out: intervened.weighted,
            mode: ScoreMode::Fast,
            intervened,
            baseline: None,
        }),
        ScoreMode::Exact => {
            let owned;
            let base = match baseline {
                Some(b) => b,
                None => {
                    owned = Distribution::from_logits(&model.forward_last(&tokens, &[])?);
                    &owned
                }
            };
            let b = if cfg.reuse_intervened_lstar {
                base.weighted(intervened.token)
            } else {
                base.lstar(profile)
            };
            Ok(OutputScore {
                s_out: intervened.weighted - b.weighted,
                mode: ScoreMode::Exact,
                intervened,
                baseline: Some(b),
            })
        }
    }
}

pub fn output_score(
    model: &Model,
    vocab: &Vocabulary,
    sae: &Arc<SaeParams>,
    profile: &LensProfile,
    cfg: &ScoreConfig,
) -> Result<OutputScore> {
    output_score_with_baseline(model, vocab, sae, profile, cfg, None)
}

/// One batch result; a failure for one feature does not stop the others.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRow {
    pub layer: usize,
    pub feature: usize,
    pub outcome: std::result::Result<ScoreRecord, String>,
}

/// Input score when a usable record exists, with the sentence count used.
fn optional_input_score(
    record: Option<&ActivationRecord>,
    profile: &LensProfile,
    vocab: &Vocabulary,
) -> Result<(Option<f64>, usize)> {
    let Some(r) = record else {
        return Ok((None, 0));
    };
    let used = r.sentences.len().min(MAX_SENTENCES);
    match input_score(r, profile, vocab) {
        Ok(s) => Ok((Some(s), used)),
        Err(Error::InsufficientData(_)) => Ok((None, used)),
        Err(e) => Err(e),
    }
}

fn score_one(
    model: &Model,
    vocab: &Vocabulary,
    sae: &Arc<SaeParams>,
    feature: usize,
    records: &RecordIndex,
    cfg: &ScoreConfig,
    baseline: Option<&Distribution>,
) -> Result<ScoreRecord> {
    let profile = logit_lens_feature(model, sae, feature, cfg.k)?;
    let (s_in, n_sentences) = optional_input_score(records.get(&(sae.layer(), feature)), &profile, vocab)?;
    let out = output_score_with_baseline(model, vocab, sae, &profile, cfg, baseline)?;
    Ok(ScoreRecord {
        feature,
        layer: sae.layer(),
        s_in,
        s_out: out.s_out,
        s_out_mode: out.mode,
        lstar_token: out.intervened.token,
        lstar_rank: out.intervened.rank,
        lstar_prob: out.intervened.prob,
        n_sentences,
    })
}

/// Scores `(sae, feature)` jobs in parallel. The unhooked baseline of the
/// neutral prompt is computed once. Rows come back sorted by
/// `(layer, feature)`.
pub fn batch_scores(
    model: &Model,
    vocab: &Vocabulary,
    jobs: &[(Arc<SaeParams>, usize)],
    records: &RecordIndex,
    cfg: &ScoreConfig,
) -> Vec<ScoreRow> {
    let baseline = match cfg.mode {
        ScoreMode::Exact => Some(baseline_distribution(model, vocab, &cfg.neutral_prompt).map_err(|e| e.to_string())),
        ScoreMode::Fast => None,
    };
    let mut rows: Vec<ScoreRow> = jobs
        .par_iter()
        .map(|(sae, feature)| {
            let outcome = match &baseline {
                Some(Err(e)) => Err(format!("baseline pass failed: {e}")),
                Some(Ok(b)) => score_one(model, vocab, sae, *feature, records, cfg, Some(b)).map_err(|e| e.to_string()),
                None => score_one(model, vocab, sae, *feature, records, cfg, None).map_err(|e| e.to_string()),
            };
            ScoreRow {
                layer: sae.layer(),
                feature: *feature,
                outcome,
            }
        })
        .collect();
    rows.sort_by_key(|r| (r.layer, r.feature));
    rows
}

/// `count` distinct features out of `n_features`, sorted; all of them when
/// `count >= n_features`.
pub fn sample_features(n_features: usize, count: usize, seed: u64) -> Vec<usize> {
    if count >= n_features {
        return (0..n_features).collect();
    }
    let mut rng = RngState::new(seed);
    let mut picked = rand::seq::index::sample(rng.inner(), n_features, count).into_vec();
    picked.sort_unstable();
    picked
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_synthetic_model, SyntheticSpec};
    use crate::sae::{build_synthetic_sae, PlantedFeature, SaeSpec};

    fn vocab(words: &[&str]) -> Vocabulary {
        Vocabulary::new(words.iter().map(|s| s.to_string()).collect(), "▁").unwrap()
    }

    fn record(tops: &[&str], n: usize) -> ActivationRecord {
        let sentences = (0..n)
            .map(|i| {
                let top = tops[i % tops.len()];
                Sentence {
                    tokens: vec!["▁filler".into(), top.into(), "▁tail".into()],
                    activations: vec![0.1, 2.0, 2.0],
                }
            })
            .collect();
        ActivationRecord {
            feature: 0,
            layer: 0,
            sentences,
        }
    }

    fn profile(ids: &[TokenId]) -> LensProfile {
        LensProfile {
            feature: 0,
            layer: 0,
            k: ids.len(),
            entries: ids.iter().map(|&i| (i, 0.0)).collect(),
        }
    }

    #[test]
    fn input_score_cases() {
        let v = vocab(&["▁cat", "dog", "▁fish", "▁filler", "▁tail"]);
        let r = record(&["cat", "▁dog"], 20);
        assert_eq!(input_score(&r, &profile(&[0, 1]), &v).unwrap(), 1.0);
        assert_eq!(input_score(&r, &profile(&[0, 2]), &v).unwrap(), 0.5);
        assert!(matches!(
            input_score(&record(&["cat"], 19), &profile(&[0]), &v),
            Err(Error::InsufficientData(_))
        ));
        // sentences past the hundredth are ignored
        let mut long = record(&["cat"], 100);
        long.sentences.extend(record(&["▁fish"], 5).sentences);
        assert_eq!(input_score(&long, &profile(&[0]), &v).unwrap(), 1.0);
        // case sensitive
        assert_eq!(input_score(&record(&["Cat"], 20), &profile(&[0]), &v).unwrap(), 0.0);
    }

    #[test]
    fn rank_weight_values() {
        assert_eq!(rank_weighted_probability(0, 0.9, 1000), 0.9);
        assert!(rank_weighted_probability(999, 1e-12, 1000) < 1e-14);
        assert!((rank_weighted_probability(250, 0.4, 1000) - 0.3).abs() < 1e-12);
    }

    #[test]
    fn lstar_picks_best_rank() {
        let d = Distribution::from_logits(&[0.0, 3.0, 1.0, 2.0]);
        assert_eq!(d.ranks, vec![3, 0, 2, 1]);
        let l = d.lstar(&profile(&[0, 2, 3]));
        assert_eq!((l.token, l.rank), (3, 1));
        assert!((l.weighted - 0.75 * d.probs[3]).abs() < 1e-15);
    }

    fn fixture() -> (Model, Vocabulary, Arc<SaeParams>) {
        let (m, v) = build_synthetic_model(&SyntheticSpec::default(), 21).unwrap();
        let spec = SaeSpec {
            layer: 3,
            planted_output: vec![PlantedFeature { feature: 0, token: 80 }],
            ..SaeSpec::default()
        };
        (m.clone(), v, Arc::new(build_synthetic_sae(&m, &spec, 22).unwrap()))
    }

    #[test]
    fn fast_minus_exact_is_baseline_and_planted_wins() {
        let (m, v, sae) = fixture();
        let exact = ScoreConfig::default();
        let fast = ScoreConfig {
            mode: ScoreMode::Fast,
            ..ScoreConfig::default()
        };
        let base = baseline_distribution(&m, &v, NEUTRAL_PROMPT).unwrap();
        let mut scores = Vec::new();
        for f in [0usize, 5, 9, 13] {
            let p = logit_lens_feature(&m, &sae, f, 20).unwrap();
            let e = output_score_with_baseline(&m, &v, &sae, &p, &exact, Some(&base)).unwrap();
            let fa = output_score(&m, &v, &sae, &p, &fast).unwrap();
            let b = e.baseline.unwrap().weighted;
            assert!((fa.s_out - e.s_out - b).abs() < 1e-12);
            assert!((-1.0..=1.0).contains(&e.s_out));
            assert_eq!(output_score(&m, &v, &sae, &p, &exact).unwrap(), e);
            scores.push(e.s_out);
        }
        assert!(scores[1..].iter().all(|&s| scores[0] > s), "{scores:?}");
    }

    #[test]
    fn batch_is_ordered_and_matches_serial() {
        let (m, v, sae) = fixture();
        let jobs: Vec<(Arc<SaeParams>, usize)> = [7usize, 2, 0, 30].iter().map(|&f| (sae.clone(), f)).collect();
        let cfg = ScoreConfig::default();
        let rows = batch_scores(&m, &v, &jobs, &RecordIndex::new(), &cfg);
        assert_eq!(rows.iter().map(|r| r.feature).collect::<Vec<_>>(), vec![0, 2, 7, 30]);
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let serial = pool.install(|| batch_scores(&m, &v, &jobs, &RecordIndex::new(), &cfg));
        assert_eq!(rows, serial);
        assert!(batch_scores(&m, &v, &[], &RecordIndex::new(), &cfg).is_empty());
        let bad = batch_scores(&m, &v, &[(sae.clone(), 9999)], &RecordIndex::new(), &cfg);
        assert!(bad[0].outcome.is_err());
    }

    #[test]
    fn feature_sampling_is_seeded() {
        let a = sample_features(16_384, 100, 3);
        assert_eq!(a, sample_features(16_384, 100, 3));
        assert_ne!(a, sample_features(16_384, 100, 4));
        assert_eq!(a.len(), 100);
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(sample_features(5, 10, 0), vec![0, 1, 2, 3, 4]);
    }
}
