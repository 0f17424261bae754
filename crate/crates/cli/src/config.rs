// SPDX-License-Identifier: MIT OR Apache-2.0

//! Run configuration: one JSON file, then command-line overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use saesteer::evalsuite::{default_buckets, Bucket, EvalConfig};
use saesteer::fixture::SuiteSpec;
use saesteer::scoring::{ScoreConfig, ScoreMode};
use saesteer::steering::SpliceMode;
use saesteer::NEUTRAL_PROMPT;

use crate::error::{CliError, CliResult};

/// Which features a command works on.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureSelection {
    /// Inclusive layer range; SAEs outside it are ignored.
    pub layers: Option<[usize; 2]>,
    /// Feature indices per SAE; empty means all of them.
    pub indices: Vec<usize>,
    /// Random subset of that many features per SAE (needs `seed`).
    pub sample: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SteerSection {
    /// Layer of the SAE to steer with; the first loaded SAE when absent.
    pub layer: Option<usize>,
    pub feature: usize,
    pub factor: f32,
    pub prompt: String,
}

impl Default for SteerSection {
    fn default() -> Self {
        Self {
            layer: None,
            feature: 0,
            factor: 10.0,
            prompt: NEUTRAL_PROMPT.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model_dir: Option<PathBuf>,
    /// One SAE container per layer.
    pub sae_dirs: Vec<PathBuf>,
    pub records_path: Option<PathBuf>,
    /// Score JSONL from an earlier `score-*` run.
    pub scores_path: Option<PathBuf>,
    /// Evaluation JSONL from an earlier `eval` run.
    pub evals_path: Option<PathBuf>,
    /// Generation JSONL from an earlier `sweep`, `eval` or `steer` run.
    pub generations_path: Option<PathBuf>,
    pub pmi_path: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub seed: Option<u64>,
    /// Worker threads; 0 uses every available core.
    pub parallelism: usize,
    pub features: FeatureSelection,
    pub eval: EvalConfig,
    pub score: ScoreConfig,
    pub steer: SteerSection,
    pub synth: SuiteSpec,
    pub buckets: Vec<Bucket>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model_dir: None,
            sae_dirs: Vec::new(),
            records_path: None,
            scores_path: None,
            evals_path: None,
            generations_path: None,
            pmi_path: None,
            output_dir: PathBuf::from("out"),
            seed: None,
            parallelism: 0,
            features: FeatureSelection::default(),
            eval: EvalConfig::default(),
            score: ScoreConfig::default(),
            steer: SteerSection::default(),
            synth: SuiteSpec::default(),
            buckets: default_buckets(),
        }
    }
}

/// Parses a config document; unknown keys and type errors name the
/// offending field path.
pub fn parse_config(text: &str) -> CliResult<RunConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        let code = if inner.to_string().starts_with("unknown field") {
            "config.unknown_key"
        } else {
            "config.schema"
        };
        CliError::config(code, format!("{path}: {inner}"))
    })
}

pub fn read_config(path: &Path) -> CliResult<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::config("config.unreadable", format!("{}: {e}", path.display())))?;
    parse_config(&text)
}

/// Command-line values that win over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub model: Option<PathBuf>,
    pub sae: Vec<PathBuf>,
    pub records: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub parallelism: Option<usize>,
    pub mode: Option<ScoreMode>,
    pub splice: Option<SpliceMode>,
    pub layers: Option<[usize; 2]>,
    pub threshold: Option<f64>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) {
        if let Some(m) = &self.model {
            cfg.model_dir = Some(m.clone());
        }
        if !self.sae.is_empty() {
            cfg.sae_dirs = self.sae.clone();
        }
        if let Some(r) = &self.records {
            cfg.records_path = Some(r.clone());
        }
        if let Some(o) = &self.out {
            cfg.output_dir = o.clone();
        }
        if let Some(s) = self.seed {
            cfg.seed = Some(s);
        }
        if let Some(p) = self.parallelism {
            cfg.parallelism = p;
        }
        if let Some(m) = self.mode {
            cfg.score.mode = m;
        }
        if let Some(s) = self.splice {
            cfg.score.splice_mode = s;
            cfg.eval.splice_mode = s;
        }
        if let Some(l) = self.layers {
            cfg.features.layers = Some(l);
        }
        if let Some(t) = self.threshold {
            cfg.eval.thresholds = vec![t];
        }
    }
}

/// Parses `a..b` (inclusive) or a single layer `a`.
pub fn parse_layers(s: &str) -> Result<[usize; 2], String> {
    let parse = |t: &str| t.trim().parse::<usize>().map_err(|e| format!("bad layer `{t}`: {e}"));
    let range = match s.split_once("..") {
        Some((a, b)) => [parse(a)?, parse(b.strip_prefix('=').unwrap_or(b))?],
        None => {
            let a = parse(s)?;
            [a, a]
        }
    };
    if range[0] > range[1] {
        return Err(format!("empty layer range {s}"));
    }
    Ok(range)
}

/// What a command reads.
#[derive(Debug, Clone, Copy, Default)]
pub struct Needs {
    pub model: bool,
    pub saes: bool,
    pub records: bool,
    pub scores: bool,
    pub evals: bool,
    pub generations: bool,
    pub pmi: bool,
    pub seed: bool,
}

fn require_path(field: &str, path: &Option<PathBuf>, needed: bool) -> CliResult<()> {
    match path {
        None if needed => Err(CliError::config(
            "config.missing",
            format!("{field}: required by this command"),
        )),
        Some(p) if !p.exists() => Err(CliError::config(
            "config.path_missing",
            format!("{field}: {} does not exist", p.display()),
        )),
        _ => Ok(()),
    }
}

impl RunConfig {
    /// Schema-level checks plus the inputs `needs` asks for. Runs before
    /// any compute.
    pub fn validate(&self, needs: Needs) -> CliResult<()> {
        self.eval.validate().map_err(|m| CliError::config("config.schema", m))?;
        let s = &self.score;
        if !s.factor_s.is_finite() {
            return Err(CliError::config("config.schema", "score.factor_s: must be finite"));
        }
        if s.k == 0 {
            return Err(CliError::config("config.schema", "score.k: must be at least 1"));
        }
        if s.neutral_prompt.is_empty() {
            return Err(CliError::config(
                "config.schema",
                "score.neutral_prompt: must not be empty",
            ));
        }
        if !self.steer.factor.is_finite() {
            return Err(CliError::config("config.schema", "steer.factor: must be finite"));
        }
        if let Some([a, b]) = self.features.layers {
            if a > b {
                return Err(CliError::config("config.schema", "features.layers: start after end"));
            }
        }
        if (needs.seed || self.features.sample.is_some()) && self.seed.is_none() {
            return Err(CliError::config("config.missing", "seed: required by this command"));
        }
        require_path("model_dir", &self.model_dir, needs.model)?;
        if needs.saes && self.sae_dirs.is_empty() {
            return Err(CliError::config("config.missing", "sae_dirs: required by this command"));
        }
        for (i, d) in self.sae_dirs.iter().enumerate() {
            require_path(&format!("sae_dirs[{i}]"), &Some(d.clone()), false)?;
        }
        require_path("records_path", &self.records_path, needs.records)?;
        require_path("scores_path", &self.scores_path, needs.scores)?;
        require_path("evals_path", &self.evals_path, needs.evals)?;
        require_path("generations_path", &self.generations_path, needs.generations)?;
        require_path("pmi_path", &self.pmi_path, needs.pmi)?;
        Ok(())
    }
}
