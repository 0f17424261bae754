// SPDX-License-Identifier: MIT OR Apache-2.0

//! One function per subcommand. Each reads its inputs, computes, and
//! writes its outputs under `output_dir`.

use std::collections::BTreeMap;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use saesteer::evalsuite::{
    apply_global_normalization, evaluate_feature, layer_profile, pmi_bucket_analysis, random_filter_baseline,
    threshold_sweep, tidy_filter_report, tidy_layer_profile, EvalReport, FeatureTokens, NormScope, PmiFile, PmiTable,
    TidyRow,
};
use saesteer::fixture::build_suite;
use saesteer::io::{read_json, read_jsonl};
use saesteer::lens::{logit_lens_feature, LensLine};
use saesteer::model::{load_model, save_model, Model, Vocabulary};
use saesteer::numerics::derive_seed;
use saesteer::sae::{load_sae, save_sae, SaeParams};
use saesteer::scoring::{
    baseline_distribution, batch_scores, index_records, input_score, output_score_with_baseline, sample_features,
    ActivationRecord, RecordIndex, ScoreMode, ScoreRecord,
};
use saesteer::steering::{steered_generate, sweep_factors, GenerationLine, GenerationResult, SteeringSpec};
use saesteer::{ContainerError, Error};

use crate::config::{Needs, RunConfig};
use crate::error::{CliError, CliResult};
use crate::output::Outputs;

pub const EFFECTIVE_CONFIG: &str = "effective-config.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Command {
    Synth,
    Lens,
    ScoreInput,
    ScoreOutput,
    ScoreAll,
    Steer,
    Sweep,
    Eval,
    FilterReport,
    Profile,
    Pmi,
    Repl,
}

impl Command {
    pub fn needs(self) -> Needs {
        let model_saes = Needs {
            model: true,
            saes: true,
            ..Needs::default()
        };
        match self {
            Command::Synth => Needs {
                seed: true,
                ..Needs::default()
            },
            Command::Lens | Command::ScoreOutput | Command::ScoreAll => model_saes,
            Command::ScoreInput => Needs {
                records: true,
                ..model_saes
            },
            Command::Steer | Command::Sweep | Command::Eval | Command::Repl => Needs {
                seed: true,
                ..model_saes
            },
            Command::FilterReport => Needs {
                scores: true,
                evals: true,
                seed: true,
                ..Needs::default()
            },
            Command::Profile => Needs {
                scores: true,
                ..Needs::default()
            },
            Command::Pmi => Needs {
                scores: true,
                generations: true,
                pmi: true,
                ..model_saes
            },
        }
    }
}

/// Model, vocabulary and the selected SAEs, sorted by layer.
pub struct Loaded {
    pub model: Model,
    pub vocab: Vocabulary,
    pub saes: Vec<Arc<SaeParams>>,
}

pub fn load_inputs(cfg: &RunConfig) -> CliResult<Loaded> {
    let dir = cfg
        .model_dir
        .as_ref()
        .ok_or_else(|| CliError::config("config.missing", "model_dir: required by this command"))?;
    let (model, vocab) = load_model(dir)?;
    let mut saes = Vec::with_capacity(cfg.sae_dirs.len());
    for d in &cfg.sae_dirs {
        let sae = load_sae(d)?;
        if sae.d_model() != model.config().d_model {
            return Err(Error::from(ContainerError::Shape {
                tensor: "W_enc".into(),
                expected: vec![sae.n_features(), model.config().d_model],
                found: vec![sae.n_features(), sae.d_model()],
            })
            .into());
        }
        if sae.layer() >= model.config().n_layers {
            return Err(Error::from(ContainerError::Manifest(format!(
                "{}: layer {} but the model has {} layers",
                d.display(),
                sae.layer(),
                model.config().n_layers
            )))
            .into());
        }
        saes.push(Arc::new(sae));
    }
    saes.sort_by_key(|s| s.layer());
    if let Some(w) = saes.windows(2).find(|w| w[0].layer() == w[1].layer()) {
        return Err(Error::from(ContainerError::Manifest(format!("two SAEs for layer {}", w[0].layer()))).into());
    }
    if let Some([a, b]) = cfg.features.layers {
        saes.retain(|s| (a..=b).contains(&s.layer()));
        if saes.is_empty() && !cfg.sae_dirs.is_empty() {
            return Err(CliError::config(
                "config.layers",
                format!("features.layers: no SAE in {a}..{b}"),
            ));
        }
    }
    Ok(Loaded { model, vocab, saes })
}

/// The `(sae, feature)` work list, ordered by layer then feature.
pub fn select_jobs(cfg: &RunConfig, saes: &[Arc<SaeParams>]) -> CliResult<Vec<(Arc<SaeParams>, usize)>> {
    let mut jobs = Vec::new();
    for sae in saes {
        let n = sae.n_features();
        let candidates: Vec<usize> = if cfg.features.indices.is_empty() {
            (0..n).collect()
        } else {
            let mut v = cfg.features.indices.clone();
            v.sort_unstable();
            v.dedup();
            if let Some(&bad) = v.iter().find(|&&i| i >= n) {
                return Err(CliError::config(
                    "config.features",
                    format!(
                        "features.indices: {bad} out of range for {n} features at layer {}",
                        sae.layer()
                    ),
                ));
            }
            v
        };
        let chosen = match (cfg.features.sample, cfg.seed) {
            (Some(count), Some(seed)) => {
                sample_features(candidates.len(), count, derive_seed(&[seed, sae.layer() as u64]))
                    .into_iter()
                    .map(|i| candidates[i])
                    .collect()
            }
            _ => candidates,
        };
        jobs.extend(chosen.into_iter().map(|f| (sae.clone(), f)));
    }
    Ok(jobs)
}

fn seed(cfg: &RunConfig) -> CliResult<u64> {
    cfg.seed
        .ok_or_else(|| CliError::config("config.missing", "seed: required by this command"))
}

/// Per-feature seed, independent of the order features are processed in.
pub fn feature_seed(seed: u64, layer: usize, feature: usize) -> u64 {
    derive_seed(&[seed, layer as u64, feature as u64])
}

fn read_records(cfg: &RunConfig) -> CliResult<RecordIndex> {
    match &cfg.records_path {
        Some(p) => {
            let records: Vec<ActivationRecord> = read_jsonl(p)?;
            Ok(index_records(records)?)
        }
        None => Ok(RecordIndex::new()),
    }
}

/// Runs `command`, writing the effective config first.
pub fn run(command: Command, cfg: &RunConfig) -> CliResult<Outputs> {
    cfg.validate(command.needs())?;
    let mut out = Outputs::new(&cfg.output_dir);
    out.json(EFFECTIVE_CONFIG, cfg)?;
    match command {
        Command::Synth => synth(cfg, &mut out)?,
        Command::Lens => lens(cfg, &mut out)?,
        Command::ScoreInput => score_input(cfg, &mut out)?,
        Command::ScoreOutput => score_output(cfg, &mut out)?,
        Command::ScoreAll => score_all(cfg, &mut out)?,
        Command::Steer => steer(cfg, &mut out)?,
        Command::Sweep => sweep(cfg, &mut out)?,
        Command::Eval => eval(cfg, &mut out)?,
        Command::FilterReport => filter_report(cfg, &mut out)?,
        Command::Profile => profile(cfg, &mut out)?,
        Command::Pmi => pmi(cfg, &mut out)?,
        Command::Repl => {
            let stdin = std::io::stdin();
            let stdout = std::io::stdout();
            crate::repl::run_repl(cfg, stdin.lock(), stdout.lock())?;
        }
    }
    Ok(out)
}

#[derive(Debug, Serialize)]
struct PlantedLine {
    kind: &'static str,
    layer: usize,
    feature: usize,
    token: usize,
    string: String,
}

fn synth(cfg: &RunConfig, out: &mut Outputs) -> CliResult<()> {
    let suite = build_suite(&cfg.synth, seed(cfg)?)?;
    let model_dir = out.path("model");
    save_model(&model_dir, &suite.model, &suite.vocab)?;
    out.note(model_dir);
    for sae in &suite.saes {
        let dir = out.path(&format!("sae/layer_{:02}", sae.layer()));
        save_sae(&dir, sae)?;
        out.note(dir);
    }
    out.jsonl("records.jsonl", &suite.records)?;
    out.json("pmi.json", &suite.pmi.to_file())?;
    let planted: Vec<PlantedLine> = suite
        .planted_input
        .iter()
        .map(|p| ("input", p))
        .chain(suite.planted_output.iter().map(|p| ("output", p)))
        .map(|(kind, &(layer, p))| PlantedLine {
            kind,
            layer,
            feature: p.feature,
            token: p.token,
            string: suite.vocab.token(p.token).unwrap_or_default().to_string(),
        })
        .collect();
    out.jsonl("planted.jsonl", &planted)
}

fn lens(cfg: &RunConfig, out: &mut Outputs) -> CliResult<()> {
    let l = load_inputs(cfg)?;
    let jobs = select_jobs(cfg, &l.saes)?;
    let lines: Vec<LensLine> = jobs
        .par_iter()
        .map(|(sae, f)| {
            Ok(LensLine::new(
                &logit_lens_feature(&l.model, sae, *f, cfg.eval.k)?,
                &l.vocab,
            ))
        })
        .collect::<saesteer::Result<_>>()?;
    out.jsonl("lens.jsonl", &lines)
}

#[derive(Debug, Default, Serialize)]
struct InputRow {
    feature: usize,
    layer: usize,
    s_in: Option<f64>,
    n_sentences: Option<usize>,
    error: Option<String>,
}

fn score_input(cfg: &RunConfig, out: &mut Outputs) -> CliResult<()> {
    let l = load_inputs(cfg)?;
    let jobs = select_jobs(cfg, &l.saes)?;
    let records = read_records(cfg)?;
    let rows: Vec<InputRow> = jobs
        .par_iter()
        .map(|(sae, f)| {
            let outcome = (|| -> saesteer::Result<(f64, usize)> {
                let record = records
                    .get(&(sae.layer(), *f))
                    .ok_or_else(|| Error::InsufficientData("no activation record".into()))?;
                let profile = logit_lens_feature(&l.model, sae, *f, cfg.score.k)?;
                let s = input_score(record, &profile, &l.vocab)?;
                Ok((s, record.sentences.len().min(saesteer::scoring::MAX_SENTENCES)))
            })();
            match outcome {
                Ok((s, n)) => InputRow {
                    feature: *f,
                    layer: sae.layer(),
                    s_in: Some(s),
                    n_sentences: Some(n),
                    error: None,
                },
                Err(e) => InputRow {
                    feature: *f,
                    layer: sae.layer(),
                    error: Some(e.to_string()),
                    ..InputRow::default()
                },
            }
        })
        .collect();
    out.csv("scores-input.csv", &rows)?;
    out.jsonl("scores-input.jsonl", &rows)
}

#[derive(Debug, Default, Serialize)]
struct OutputRow {
    feature: usize,
    layer: usize,
    s_out: Option<f64>,
    mode: Option<ScoreMode>,
    lstar_token: Option<usize>,
    lstar_rank: Option<usize>,
    lstar_prob: Option<f64>,
    error: Option<String>,
}

fn score_output(cfg: &RunConfig, out: &mut Outputs) -> CliResult<()> {
    let l = load_inputs(cfg)?;
    let jobs = select_jobs(cfg, &l.saes)?;
    let baseline = match cfg.score.mode {
        ScoreMode::Exact => Some(baseline_distribution(&l.model, &l.vocab, &cfg.score.neutral_prompt)?),
        ScoreMode::Fast => None,
    };
    let rows: Vec<OutputRow> = jobs
        .par_iter()
        .map(|(sae, f)| {
            let outcome = logit_lens_feature(&l.model, sae, *f, cfg.score.k).and_then(|profile| {
                output_score_with_baseline(&l.model, &l.vocab, sae, &profile, &cfg.score, baseline.as_ref())
            });
            match outcome {
                Ok(o) => OutputRow {
                    feature: *f,
                    layer: sae.layer(),
                    s_out: Some(o.s_out),
                    mode: Some(o.mode),
                    lstar_token: Some(o.intervened.token),
                    lstar_rank: Some(o.intervened.rank),
                    lstar_prob: Some(o.intervened.prob),
                    error: None,
                },
                Err(e) => OutputRow {
                    feature: *f,
                    layer: sae.layer(),
                    error: Some(e.to_string()),
                    ..OutputRow::default()
                },
            }
        })
        .collect();
    out.csv("scores-output.csv", &rows)?;
    out.jsonl("scores-output.jsonl", &rows)
}

/// Row of `scores.csv` / `scores.jsonl`; also the reader for any of the
/// three score outputs.
#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ScoreLine {
    pub feature: usize,
    pub layer: usize,
    pub s_in: Option<f64>,
    pub s_out: Option<f64>,
    pub mode: Option<ScoreMode>,
    pub lstar_token: Option<usize>,
    pub lstar_rank: Option<usize>,
    pub lstar_prob: Option<f64>,
    pub n_sentences: Option<usize>,
    pub error: Option<String>,
}

impl ScoreLine {
    /// Successful rows with an output score become records.
    pub fn into_record(self) -> Option<ScoreRecord> {
        if self.error.is_some() {
            return None;
        }
        Some(ScoreRecord {
            feature: self.feature,
            layer: self.layer,
            s_in: self.s_in,
            s_out: self.s_out?,
            s_out_mode: self.mode.unwrap_or_default(),
            lstar_token: self.lstar_token.unwrap_or_default(),
            lstar_rank: self.lstar_rank.unwrap_or_default(),
            lstar_prob: self.lstar_prob.unwrap_or_default(),
            n_sentences: self.n_sentences.unwrap_or_default(),
        })
    }
}

fn score_all(cfg: &RunConfig, out: &mut Outputs) -> CliResult<()> {
    let l = load_inputs(cfg)?;
    let jobs = select_jobs(cfg, &l.saes)?;
    let records = read_records(cfg)?;
    let rows: Vec<ScoreLine> = batch_scores(&l.model, &l.vocab, &jobs, &records, &cfg.score)
        .into_iter()
        .map(|r| match r.outcome {
            Ok(s) => ScoreLine {
                feature: s.feature,
                layer: s.layer,
                s_in: s.s_in,
                s_out: Some(s.s_out),
                mode: Some(s.s_out_mode),
                lstar_token: Some(s.lstar_token),
                lstar_rank: Some(s.lstar_rank),
                lstar_prob: Some(s.lstar_prob),
                n_sentences: Some(s.n_sentences),
                error: None,
            },
            Err(e) => ScoreLine {
                feature: r.feature,
                layer: r.layer,
                error: Some(e),
                ..ScoreLine::default()
            },
        })
        .collect();
    out.csv("scores.csv", &rows)?;
    out.jsonl("scores.jsonl", &rows)
}

fn generation_line(layer: usize, feature: usize, prefix: &str, g: &GenerationResult) -> GenerationLine {
    GenerationLine {
        layer,
        feature,
        factor: g.factor,
        prefix: prefix.to_string(),
        text: g.text.clone(),
        tokens: g.generated_tokens.clone(),
        logprobs: g.per_step_logprob.clone(),
    }
}

/// The SAE `steer.layer` names, or the first selected one.
pub fn steer_sae(cfg: &RunConfig, saes: &[Arc<SaeParams>]) -> CliResult<Arc<SaeParams>> {
    let found = match cfg.steer.layer {
        Some(layer) => saes.iter().find(|s| s.layer() == layer),
        None => saes.first(),
    };
    found
        .cloned()
        .ok_or_else(|| CliError::config("config.layers", "steer.layer: no SAE loaded for that layer"))
}

fn steer(cfg: &RunConfig, out: &mut Outputs) -> CliResult<()> {
    let l = load_inputs(cfg)?;
    let sae = steer_sae(cfg, &l.saes)?;
    let spec = SteeringSpec {
        max_new_tokens: cfg.eval.max_new_tokens,
        temperature: cfg.eval.temperature,
        seed: seed(cfg)?,
        splice_mode: cfg.score.splice_mode,
        amax_scope: cfg.score.amax_scope,
        ..SteeringSpec::new(
            sae.layer(),
            cfg.steer.feature,
            cfg.steer.factor,
            cfg.steer.prompt.clone(),
        )
    };
    let g = steered_generate(&l.model, &l.vocab, &sae, &spec)?;
    out.jsonl(
        "steer.jsonl",
        &[generation_line(sae.layer(), spec.feature, &spec.prompt, &g)],
    )
}

fn sweep_base(cfg: &RunConfig, sae: &SaeParams, feature: usize, seed: u64) -> SteeringSpec {
    SteeringSpec {
        max_new_tokens: cfg.eval.max_new_tokens,
        temperature: cfg.eval.temperature,
        seed: feature_seed(seed, sae.layer(), feature),
        splice_mode: cfg.eval.splice_mode,
        amax_scope: cfg.eval.amax_scope,
        ..SteeringSpec::new(sae.layer(), feature, 0.0, "")
    }
}

fn flatten_generations(
    cfg: &RunConfig,
    layer: usize,
    feature: usize,
    gens: &[(f32, Vec<GenerationResult>)],
) -> Vec<GenerationLine> {
    gens.iter()
        .flat_map(|(_, results)| {
            results
                .iter()
                .zip(&cfg.eval.prefixes)
                .map(move |(g, p)| generation_line(layer, feature, p, g))
        })
        .collect()
}

fn sweep(cfg: &RunConfig, out: &mut Outputs) -> CliResult<()> {
    let l = load_inputs(cfg)?;
    let jobs = select_jobs(cfg, &l.saes)?;
    let seed = seed(cfg)?;
    let per_feature: Vec<Vec<GenerationLine>> = jobs
        .par_iter()
        .map(|(sae, f)| {
            let base = sweep_base(cfg, sae, *f, seed);
            let gens = sweep_factors(
                &l.model,
                &l.vocab,
                sae,
                *f,
                &cfg.eval.factor_grid,
                &cfg.eval.prefixes,
                &base,
            )?;
            Ok(flatten_generations(cfg, sae.layer(), *f, &gens))
        })
        .collect::<saesteer::Result<_>>()?;
    let lines: Vec<GenerationLine> = per_feature.into_iter().flatten().collect();
    out.jsonl("generations.jsonl", &lines)
}

#[derive(Debug, Default, Serialize)]
struct EvalRow {
    layer: usize,
    feature: usize,
    factor: f32,
    gen_success: f64,
    perplexity: f64,
    chosen: bool,
}

/// Evaluates every selected feature; reports come back in job order.
pub fn evaluate_jobs(
    cfg: &RunConfig,
    loaded: &Loaded,
    jobs: &[(Arc<SaeParams>, usize)],
    seed: u64,
) -> CliResult<(Vec<EvalReport>, Vec<GenerationLine>)> {
    let results: Vec<(EvalReport, Vec<GenerationLine>)> = jobs
        .par_iter()
        .map(|(sae, f)| {
            let ev = evaluate_feature(
                &loaded.model,
                &loaded.vocab,
                sae,
                *f,
                &cfg.eval,
                feature_seed(seed, sae.layer(), *f),
                &loaded.model,
            )?;
            let lines = flatten_generations(cfg, sae.layer(), *f, &ev.generations);
            Ok((ev.report, lines))
        })
        .collect::<saesteer::Result<_>>()?;
    let (mut reports, lines): (Vec<EvalReport>, Vec<Vec<GenerationLine>>) = results.into_iter().unzip();
    if cfg.eval.normalization == NormScope::Global {
        apply_global_normalization(&mut reports, cfg.eval.gen_success_cap)?;
    }
    Ok((reports, lines.into_iter().flatten().collect()))
}

fn eval(cfg: &RunConfig, out: &mut Outputs) -> CliResult<()> {
    let l = load_inputs(cfg)?;
    let jobs = select_jobs(cfg, &l.saes)?;
    let (reports, lines) = evaluate_jobs(cfg, &l, &jobs, seed(cfg)?)?;
    let rows: Vec<EvalRow> = reports
        .iter()
        .flat_map(|r| {
            r.per_factor.iter().map(move |p| EvalRow {
                layer: r.layer,
                feature: r.feature,
                factor: p.factor,
                gen_success: p.gen_success,
                perplexity: p.perplexity,
                chosen: r.chosen_factor == Some(p.factor),
            })
        })
        .collect();
    out.csv("evals.csv", &rows)?;
    out.jsonl("evals.jsonl", &reports)?;
    out.jsonl("generations.jsonl", &lines)
}

pub fn read_scores(cfg: &RunConfig) -> CliResult<Vec<ScoreRecord>> {
    let path = cfg
        .scores_path
        .as_ref()
        .ok_or_else(|| CliError::config("config.missing", "scores_path: required by this command"))?;
    let lines: Vec<ScoreLine> = read_jsonl(path)?;
    Ok(lines.into_iter().filter_map(ScoreLine::into_record).collect())
}

#[derive(Debug, Default, Serialize)]
struct FilterRow {
    threshold: f64,
    retained: usize,
    with_factor: usize,
    mean_gen_success: Option<f64>,
    baseline_mean: Option<f64>,
    baseline_min: Option<f64>,
    baseline_max: Option<f64>,
    baseline_samples: usize,
}

#[derive(Debug, Serialize)]
struct FilterReport {
    sweep: Vec<saesteer::evalsuite::SweepRow>,
    baseline: Vec<saesteer::evalsuite::BaselineRow>,
}

fn filter_report(cfg: &RunConfig, out: &mut Outputs) -> CliResult<()> {
    let scores = read_scores(cfg)?;
    let evals_path = cfg.evals_path.as_ref().expect("validated");
    let evals: Vec<EvalReport> = read_jsonl(evals_path)?;
    // the baseline draws from the same joined population the sweep uses
    let scored: std::collections::HashSet<(usize, usize)> = scores.iter().map(|s| (s.layer, s.feature)).collect();
    let joined: Vec<EvalReport> = evals
        .into_iter()
        .filter(|e| scored.contains(&(e.layer, e.feature)))
        .collect();
    let sweep = threshold_sweep(&scores, &joined, &cfg.eval.thresholds);
    let sizes: Vec<usize> = sweep.iter().map(|r| r.with_factor).collect();
    let baseline = random_filter_baseline(&joined, &sizes, cfg.eval.random_baseline_samples, seed(cfg)?)?;
    let rows: Vec<FilterRow> = sweep
        .iter()
        .zip(&baseline)
        .map(|(s, b)| FilterRow {
            threshold: s.threshold,
            retained: s.retained,
            with_factor: s.with_factor,
            mean_gen_success: s.mean_gen_success,
            baseline_mean: b.mean_gen_success,
            baseline_min: b.sample_means.iter().copied().reduce(f64::min),
            baseline_max: b.sample_means.iter().copied().reduce(f64::max),
            baseline_samples: b.sample_means.len(),
        })
        .collect();
    let tidy: Vec<TidyRow> = tidy_filter_report(&sweep, &baseline);
    out.csv("filter-report.csv", &rows)?;
    out.json("filter-report.json", &FilterReport { sweep, baseline })?;
    out.csv("filter-tidy.csv", &tidy)
}

#[derive(Debug, Default, Serialize)]
struct ProfileRow {
    layer: usize,
    n: usize,
    n_s_in: usize,
    s_in_q25: Option<f64>,
    s_in_median: Option<f64>,
    s_in_q75: Option<f64>,
    s_out_q25: f64,
    s_out_median: f64,
    s_out_q75: f64,
}

fn profile(cfg: &RunConfig, out: &mut Outputs) -> CliResult<()> {
    let scores = read_scores(cfg)?;
    let profiles = layer_profile(&scores);
    let rows: Vec<ProfileRow> = profiles
        .iter()
        .map(|p| ProfileRow {
            layer: p.layer,
            n: p.n,
            n_s_in: p.n_s_in,
            s_in_q25: p.s_in.map(|q| q.q25),
            s_in_median: p.s_in.map(|q| q.median),
            s_in_q75: p.s_in.map(|q| q.q75),
            s_out_q25: p.s_out.q25,
            s_out_median: p.s_out.median,
            s_out_q75: p.s_out.q75,
        })
        .collect();
    out.csv("profile.csv", &rows)?;
    out.jsonl("profile.jsonl", &profiles)?;
    out.csv("profile-tidy.csv", &tidy_layer_profile(&profiles))
}

fn pmi(cfg: &RunConfig, out: &mut Outputs) -> CliResult<()> {
    let l = load_inputs(cfg)?;
    let scores = read_scores(cfg)?;
    let table = PmiTable::from_file(read_json::<PmiFile>(cfg.pmi_path.as_ref().expect("validated"))?)?;
    let generations: Vec<GenerationLine> = read_jsonl(cfg.generations_path.as_ref().expect("validated"))?;
    let mut generated: BTreeMap<(usize, usize), Vec<String>> = BTreeMap::new();
    for g in &generations {
        let strings = generated.entry((g.layer, g.feature)).or_default();
        for &t in &g.tokens {
            let s = l
                .vocab
                .normalized(t)
                .ok_or_else(|| Error::Record(format!("generated token id {t} outside the vocabulary")))?;
            if !s.is_empty() {
                strings.push(s.to_string());
            }
        }
    }
    let by_layer: BTreeMap<usize, &Arc<SaeParams>> = l.saes.iter().map(|s| (s.layer(), s)).collect();
    let mut tokens = Vec::new();
    for ((layer, feature), strings) in generated {
        let Some(sae) = by_layer.get(&layer) else {
            continue;
        };
        let top1 = logit_lens_feature(&l.model, sae, feature, 1)?.top1();
        tokens.push(FeatureTokens {
            layer,
            feature,
            top1: l.vocab.normalized(top1).unwrap_or_default().to_string(),
            generated: strings,
        });
    }
    let rows = pmi_bucket_analysis(&scores, &tokens, &table, &cfg.buckets);
    out.csv("pmi.csv", &rows)?;
    out.jsonl("pmi.jsonl", &rows)
}
