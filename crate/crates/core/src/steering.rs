// SPDX-License-Identifier: MIT OR Apache-2.0

//! Single-feature steering: amplify one SAE feature by `s · a_max` at a
//! residual layer and sample text with the hook active.

use std::sync::{Arc, Mutex, OnceLock};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{HookPoint, LogitRows, Model, ResidualTransform, TokenId, Vocabulary};
use crate::numerics::{derive_seed, sample_categorical, softmax_temp, Matrix, RngState};
use crate::sae::SaeParams;

pub const DEFAULT_FACTOR_GRID: [f32; 12] = [0.2, 0.4, 0.8, 1.2, 1.6, 2.0, 3.0, 4.0, 6.0, 8.0, 10.0, 20.0];
pub const DEFAULT_MAX_NEW_TOKENS: usize = 20;
pub const DEFAULT_TEMPERATURE: f32 = 0.7;

/// How the amplified activations go back into the residual stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpliceMode {
    /// Replace the residual by the decoded, amplified activations.
    #[default]
    Reconstruct,
    /// Add `s · a_max · d_i` to the untouched residual.
    Delta,
}

/// Where `a_max` comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AmaxScope {
    /// Recomputed for every position from its own activations.
    #[default]
    PerPosition,
    /// Taken once from the last prompt position and then frozen.
    PrefixMax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SteeringSpec {
    pub layer: usize,
    pub feature: usize,
    pub factor: f32,
    pub prompt: String,
    #[serde(default = "default_max_new")]
    pub max_new_tokens: usize,
    #[serde(default = "default_temperature")]
    pub temperature: f32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub splice_mode: SpliceMode,
    #[serde(default)]
    pub amax_scope: AmaxScope,
}

fn default_max_new() -> usize {
    DEFAULT_MAX_NEW_TOKENS
}

fn default_temperature() -> f32 {
    DEFAULT_TEMPERATURE
}

impl SteeringSpec {
    pub fn new(layer: usize, feature: usize, factor: f32, prompt: impl Into<String>) -> Self {
        Self {
            layer,
            feature,
            factor,
            prompt: prompt.into(),
            max_new_tokens: DEFAULT_MAX_NEW_TOKENS,
            temperature: DEFAULT_TEMPERATURE,
            seed: 0,
            splice_mode: SpliceMode::default(),
            amax_scope: AmaxScope::default(),
        }
    }

    fn validate(&self) -> Result<()> {
        if !self.factor.is_finite() {
            return Err(Error::Range(format!("steering factor {} is not finite", self.factor)));
        }
        if self.max_new_tokens == 0 {
            return Err(Error::Range("max_new_tokens must be at least 1".into()));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(Error::Range(format!("temperature {} is negative", self.temperature)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    pub prompt_tokens: Vec<TokenId>,
    pub generated_tokens: Vec<TokenId>,
    pub text: String,
    /// Natural-log probability of each generated token under the (steered)
    /// model's softmax at temperature 1.
    pub per_step_logprob: Vec<f64>,
    pub factor: f32,
    /// `a_max` used at the last position of each forward call.
    pub amax_trace: Vec<f32>,
}

/// The steering transform. Records the `a_max` it used at the last row of
/// every call.
#[derive(Debug)]
pub struct SteerHook {
    sae: Arc<SaeParams>,
    feature: usize,
    factor: f32,
    splice: SpliceMode,
    scope: AmaxScope,
    frozen: OnceLock<f32>,
    trace: Mutex<Vec<f32>>,
}

impl SteerHook {
    pub fn new(sae: Arc<SaeParams>, feature: usize, factor: f32, splice: SpliceMode, scope: AmaxScope) -> Result<Self> {
        sae.check_feature(feature)?;
        if !factor.is_finite() {
            return Err(Error::Range(format!("steering factor {factor} is not finite")));
        }
        Ok(Self {
            sae,
            feature,
            factor,
            splice,
            scope,
            frozen: OnceLock::new(),
            trace: Mutex::new(Vec::new()),
        })
    }

    pub fn amax_trace(&self) -> Vec<f32> {
        self.trace.lock().expect("trace lock").clone()
    }

    /// Applies the intervention to every row of `x`.
    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        let sae = &self.sae;
        let m = sae.n_features();
        let n = x.cols();
        let mut acts = sae.encode_rows(x)?;
        let row_max: Vec<f32> = acts
            .data()
            .chunks_exact(m)
            .map(|r| r.iter().copied().fold(0.0, f32::max))
            .collect();
        let amax: Vec<f32> = match self.scope {
            AmaxScope::PerPosition => row_max,
            AmaxScope::PrefixMax => {
                let v = *self.frozen.get_or_init(|| row_max.last().copied().unwrap_or(0.0));
                vec![v; x.rows()]
            }
        };
        if let Some(&last) = amax.last() {
            self.trace.lock().expect("trace lock").push(last);
        }
        match self.splice {
            SpliceMode::Delta => {
                if self.factor == 0.0 {
                    return Ok(x.clone());
                }
                let dir = sae.direction_ref(self.feature);
                let mut out = x.clone();
                for (row, &a) in out.data_mut().chunks_exact_mut(n).zip(&amax) {
                    let scale = self.factor * a;
                    row.iter_mut().zip(dir).for_each(|(v, d)| *v += scale * d);
                }
                out.ensure_finite("steering hook")?;
                Ok(out)
            }
            SpliceMode::Reconstruct => {
                for (row, &a) in acts.data_mut().chunks_exact_mut(m).zip(&amax) {
                    row[self.feature] += self.factor * a;
                }
                sae.decode_rows(&acts)
            }
        }
    }
}

impl ResidualTransform for SteerHook {
    fn transform(&self, residual: &Matrix) -> Matrix {
        // an empty matrix makes the model report the shape failure
        self.apply(residual).unwrap_or_else(|_| Matrix::zeros(0, 0))
    }
}

/// Builds the steering hook for `feature` at the SAE's layer.
pub fn make_steer_hook(
    sae: Arc<SaeParams>,
    feature: usize,
    factor: f32,
    splice: SpliceMode,
    scope: AmaxScope,
) -> Result<(HookPoint, Arc<SteerHook>)> {
    let layer = sae.layer();
    let hook = Arc::new(SteerHook::new(sae, feature, factor, splice, scope)?);
    let point = HookPoint {
        layer,
        transform: hook.clone(),
    };
    Ok((point, hook))
}

fn check_sae_fits(model: &Model, sae: &SaeParams) -> Result<()> {
    let c = model.config();
    if sae.d_model() != c.d_model {
        return Err(Error::Shape(format!(
            "SAE width {} does not match model width {}",
            sae.d_model(),
            c.d_model
        )));
    }
    if sae.layer() >= c.n_layers {
        return Err(Error::Range(format!(
            "SAE layer {} >= n_layers {}",
            sae.layer(),
            c.n_layers
        )));
    }
    Ok(())
}

fn log_softmax_at(logits: &[f32], token: TokenId) -> f64 {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let z: f64 = logits.iter().map(|&l| (f64::from(l) - max).exp()).sum();
    f64::from(logits[token]) - max - z.ln()
}

/// Autoregressive sampling with optional hooks, reusing the key/value
/// cache between steps.
pub fn generate_tokens(
    model: &Model,
    prompt: &[TokenId],
    hooks: &[HookPoint],
    max_new_tokens: usize,
    temperature: f32,
    seed: u64,
) -> Result<(Vec<TokenId>, Vec<f64>)> {
    if prompt.is_empty() {
        return Err(Error::EmptyInput("prompt has no tokens".into()));
    }
    let max = model.config().max_seq;
    if prompt.len() + max_new_tokens > max {
        return Err(Error::Length {
            len: prompt.len() + max_new_tokens,
            max,
        });
    }
    let mut rng = RngState::new(seed);
    let mut cache = model.new_cache();
    let mut logits = model.extend(&mut cache, prompt, hooks, &[], LogitRows::Last)?.logits;
    let mut out = Vec::with_capacity(max_new_tokens);
    let mut logprobs = Vec::with_capacity(max_new_tokens);
    for step in 0..max_new_tokens {
        let row = logits.row(0);
        let probs = softmax_temp(row, temperature)?;
        let t = sample_categorical(&probs, &mut rng)?;
        logprobs.push(log_softmax_at(row, t));
        out.push(t);
        if step + 1 < max_new_tokens {
            logits = model.extend(&mut cache, &[t], hooks, &[], LogitRows::Last)?.logits;
        }
    }
    Ok((out, logprobs))
}

/// Unhooked sampling of a text prompt, for baselines.
pub fn generate(
    model: &Model,
    vocab: &Vocabulary,
    prompt: &str,
    max_new_tokens: usize,
    temperature: f32,
    seed: u64,
) -> Result<GenerationResult> {
    let prompt_tokens = vocab.tokenize(prompt)?;
    let (generated, logprobs) = generate_tokens(model, &prompt_tokens, &[], max_new_tokens, temperature, seed)?;
    Ok(GenerationResult {
        text: vocab.detokenize(&generated)?,
        prompt_tokens,
        generated_tokens: generated,
        per_step_logprob: logprobs,
        factor: 0.0,
        amax_trace: Vec::new(),
    })
}

pub fn steered_generate(
    model: &Model,
    vocab: &Vocabulary,
    sae: &Arc<SaeParams>,
    spec: &SteeringSpec,
) -> Result<GenerationResult> {
    spec.validate()?;
    check_sae_fits(model, sae)?;
    if spec.layer != sae.layer() {
        return Err(Error::Range(format!(
            "steering layer {} but the SAE is attached at layer {}",
            spec.layer,
            sae.layer()
        )));
    }
    let (point, hook) = make_steer_hook(
        sae.clone(),
        spec.feature,
        spec.factor,
        spec.splice_mode,
        spec.amax_scope,
    )?;
    let prompt_tokens = vocab.tokenize(&spec.prompt)?;
    let (generated, logprobs) = generate_tokens(
        model,
        &prompt_tokens,
        &[point],
        spec.max_new_tokens,
        spec.temperature,
        spec.seed,
    )?;
    Ok(GenerationResult {
        text: vocab.detokenize(&generated)?,
        prompt_tokens,
        generated_tokens: generated,
        per_step_logprob: logprobs,
        factor: spec.factor,
        amax_trace: hook.amax_trace(),
    })
}

/// Seed of the generation for (`factor`, prefix `index`).
pub fn sweep_seed(seed: u64, factor: f32, index: usize) -> u64 {
    derive_seed(&[seed, u64::from(factor.to_bits()), index as u64])
}

/// One generation per (factor, prefix), in the order given. `base`
/// supplies everything except factor, prompt and seed.
pub fn sweep_factors(
    model: &Model,
    vocab: &Vocabulary,
    sae: &Arc<SaeParams>,
    feature: usize,
    factors: &[f32],
    prefixes: &[String],
    base: &SteeringSpec,
) -> Result<Vec<(f32, Vec<GenerationResult>)>> {
    if factors.is_empty() {
        return Err(Error::EmptyInput("factor list is empty".into()));
    }
    let jobs: Vec<(usize, usize)> = (0..factors.len())
        .flat_map(|f| (0..prefixes.len()).map(move |p| (f, p)))
        .collect();
    let results: Vec<GenerationResult> = jobs
        .par_iter()
        .map(|&(f, p)| {
            let spec = SteeringSpec {
                layer: sae.layer(),
                feature,
                factor: factors[f],
                prompt: prefixes[p].clone(),
                seed: sweep_seed(base.seed, factors[f], p),
                ..base.clone()
            };
            steered_generate(model, vocab, sae, &spec)
        })
        .collect::<Result<_>>()?;
    let mut it = results.into_iter();
    Ok(factors
        .iter()
        .map(|&f| (f, it.by_ref().take(prefixes.len()).collect()))
        .collect())
}

/// JSONL shape of one generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationLine {
    pub layer: usize,
    pub feature: usize,
    pub factor: f32,
    pub prefix: String,
    pub text: String,
    pub tokens: Vec<TokenId>,
    pub logprobs: Vec<f64>,
}
