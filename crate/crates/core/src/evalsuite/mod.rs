// SPDX-License-Identifier: MIT OR Apache-2.0

//! Steering evaluation: per-feature factor sweeps scored by generation
//! success and perplexity, plus the cohort-level reports built on them.

mod filter;
mod metrics;
mod pmi;

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lens::{logit_lens_feature, DEFAULT_K};
use crate::model::{Model, Vocabulary};
use crate::prefixes::default_prefixes;
use crate::sae::SaeParams;
use crate::steering::{
    sweep_factors, AmaxScope, GenerationResult, SpliceMode, SteeringSpec, DEFAULT_FACTOR_GRID, DEFAULT_MAX_NEW_TOKENS,
    DEFAULT_TEMPERATURE,
};

pub use filter::{
    layer_profile, quantile, random_filter_baseline, threshold_sweep, tidy_filter_report, tidy_layer_profile,
    BaselineRow, LayerProfile, Quartiles, SweepRow, TidyRow,
};
pub use metrics::{gen_success, gen_success_texts, perplexity, perplexity_tokens, select_optimal_factor, Normalizer};
pub use pmi::{
    default_buckets, pmi, pmi_bucket_analysis, Bucket, BucketRow, FeatureTokens, PmiFile, PmiTable, Predicate,
};

pub const DEFAULT_THRESHOLDS: [f64; 5] = [0.0001, 0.001, 0.01, 0.1, 0.9];
pub const DEFAULT_GEN_SUCCESS_CAP: f64 = 3.0;
pub const DEFAULT_BASELINE_SAMPLES: usize = 10;

/// Which maxima normalise gen success and perplexity in factor selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormScope {
    /// Per feature, over that feature's surviving factors.
    #[default]
    Run,
    /// Over the surviving factors of every feature in the cohort.
    Global,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub k: usize,
    pub prefixes: Vec<String>,
    pub max_new_tokens: usize,
    pub temperature: f32,
    pub factor_grid: Vec<f32>,
    pub gen_success_cap: f64,
    pub thresholds: Vec<f64>,
    pub random_baseline_samples: usize,
    pub normalization: NormScope,
    pub splice_mode: SpliceMode,
    pub amax_scope: AmaxScope,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            prefixes: default_prefixes(),
            max_new_tokens: DEFAULT_MAX_NEW_TOKENS,
            temperature: DEFAULT_TEMPERATURE,
            factor_grid: DEFAULT_FACTOR_GRID.to_vec(),
            gen_success_cap: DEFAULT_GEN_SUCCESS_CAP,
            thresholds: DEFAULT_THRESHOLDS.to_vec(),
            random_baseline_samples: DEFAULT_BASELINE_SAMPLES,
            normalization: NormScope::Run,
            splice_mode: SpliceMode::Reconstruct,
            amax_scope: AmaxScope::PerPosition,
        }
    }
}

impl EvalConfig {
    /// Checks the fields that have constraints; the message names the field.
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.k == 0 {
            return Err("eval.k: must be at least 1".into());
        }
        if self.prefixes.is_empty() {
            return Err("eval.prefixes: must not be empty".into());
        }
        if self.max_new_tokens == 0 {
            return Err("eval.max_new_tokens: must be at least 1".into());
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err("eval.temperature: must be finite and non-negative".into());
        }
        if self.factor_grid.is_empty() || self.factor_grid.iter().any(|f| !f.is_finite()) {
            return Err("eval.factor_grid: must be a non-empty list of finite numbers".into());
        }
        if self.gen_success_cap.is_nan() || self.gen_success_cap <= 0.0 {
            return Err("eval.gen_success_cap: must be positive".into());
        }
        if self
            .thresholds
            .windows(2)
            .any(|w| w[0].partial_cmp(&w[1]) != Some(std::cmp::Ordering::Less))
        {
            return Err("eval.thresholds: must be strictly ascending".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorRow {
    pub factor: f32,
    pub gen_success: f64,
    pub perplexity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub feature: usize,
    pub layer: usize,
    pub per_factor: Vec<FactorRow>,
    pub chosen_factor: Option<f32>,
    pub chosen_gen_success: Option<f64>,
    pub chosen_perplexity: Option<f64>,
}

impl EvalReport {
    fn choose(&mut self, cap: f64, normalizer: Normalizer) -> Result<()> {
        let rows: Vec<(f32, f64, f64)> = self
            .per_factor
            .iter()
            .map(|r| (r.factor, r.gen_success, r.perplexity))
            .collect();
        self.chosen_factor = select_optimal_factor(&rows, cap, normalizer)?;
        let chosen = self
            .chosen_factor
            .and_then(|f| self.per_factor.iter().find(|r| r.factor == f));
        self.chosen_gen_success = chosen.map(|r| r.gen_success);
        self.chosen_perplexity = chosen.map(|r| r.perplexity);
        Ok(())
    }
}

/// Re-selects every report's factor with maxima taken over all reports.
pub fn apply_global_normalization(reports: &mut [EvalReport], cap: f64) -> Result<()> {
    let surviving = reports
        .iter()
        .flat_map(|r| r.per_factor.iter())
        .filter(|r| r.gen_success <= cap);
    let (max_gs, max_ppl) = surviving.fold((f64::NEG_INFINITY, f64::NEG_INFINITY), |(g, p), r| {
        (g.max(r.gen_success), p.max(r.perplexity))
    });
    let normalizer = Normalizer::Global {
        max_gen_success: max_gs,
        max_perplexity: max_ppl,
    };
    for r in reports.iter_mut().filter(|r| !r.per_factor.is_empty()) {
        r.choose(cap, normalizer)?;
    }
    Ok(())
}

/// A feature's report and the generations behind it.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureEvaluation {
    pub report: EvalReport,
    pub generations: Vec<(f32, Vec<GenerationResult>)>,
}

/// Sweeps every factor over every prefix, scores each factor, and picks
/// one (per-feature normalisation; see [`apply_global_normalization`] for
/// the cohort-wide variant). `scorer` computes perplexity without hooks.
pub fn evaluate_feature(
    model: &Model,
    vocab: &Vocabulary,
    sae: &Arc<SaeParams>,
    feature: usize,
    cfg: &EvalConfig,
    seed: u64,
    scorer: &Model,
) -> Result<FeatureEvaluation> {
    cfg.validate().map_err(Error::Spec)?;
    let profile = logit_lens_feature(model, sae, feature, cfg.k)?;
    let base = SteeringSpec {
        max_new_tokens: cfg.max_new_tokens,
        temperature: cfg.temperature,
        seed,
        splice_mode: cfg.splice_mode,
        amax_scope: cfg.amax_scope,
        ..SteeringSpec::new(sae.layer(), feature, 0.0, "")
    };
    let generations = sweep_factors(model, vocab, sae, feature, &cfg.factor_grid, &cfg.prefixes, &base)?;
    let per_factor = generations
        .iter()
        .map(|(factor, results)| {
            let gs = gen_success(results, &profile, cfg.k, vocab)?;
            let ppls: Vec<f64> = results
                .par_iter()
                .map(|g| perplexity_tokens(scorer, &g.prompt_tokens, &g.generated_tokens))
                .collect::<Result<_>>()?;
            Ok(FactorRow {
                factor: *factor,
                gen_success: gs,
                perplexity: ppls.iter().sum::<f64>() / ppls.len() as f64,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut report = EvalReport {
        feature,
        layer: sae.layer(),
        per_factor,
        chosen_factor: None,
        chosen_gen_success: None,
        chosen_perplexity: None,
    };
    report.choose(cfg.gen_success_cap, Normalizer::RunMax)?;
    Ok(FeatureEvaluation { report, generations })
}
