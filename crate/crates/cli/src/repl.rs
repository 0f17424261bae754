// SPDX-License-Identifier: MIT OR Apache-2.0

//! Line-oriented exploration: pick a feature, set a factor, generate and
//! look at its scores. Every command is a plain library call.

use std::io::{BufRead, Write};
use std::sync::Arc;

use saesteer::lens::logit_lens_feature;
use saesteer::numerics::derive_seed;
use saesteer::sae::SaeParams;
use saesteer::scoring::{input_score, output_score, RecordIndex, ScoreMode};
use saesteer::steering::{generate, steered_generate, SteeringSpec};

use crate::commands::{load_inputs, steer_sae, Loaded};
use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

const HELP: &str = "\
commands:
  show               current layer, feature, factor and prompt
  layer <l>          steer with the SAE at layer l
  feature <i>        select feature i
  factor <s>         set the steering factor
  prompt <text>      set the prompt
  gen                steered generation
  base               unsteered generation
  lens [k]           top-k logit-lens tokens of the feature
  score              input and output score of the feature
  quit               leave";

struct State {
    sae: Arc<SaeParams>,
    feature: usize,
    factor: f32,
    prompt: String,
    generation: u64,
}

pub fn run_repl(cfg: &RunConfig, input: impl BufRead, mut output: impl Write) -> CliResult<()> {
    let loaded = load_inputs(cfg)?;
    let records = match &cfg.records_path {
        Some(p) => saesteer::scoring::index_records(saesteer::io::read_jsonl(p)?)?,
        None => RecordIndex::new(),
    };
    let mut state = State {
        sae: steer_sae(cfg, &loaded.saes)?,
        feature: cfg.steer.feature,
        factor: cfg.steer.factor,
        prompt: cfg.steer.prompt.clone(),
        generation: 0,
    };
    let io_err = |e: std::io::Error| CliError::Runtime(format!("repl io: {e}"));
    writeln!(output, "{HELP}").map_err(io_err)?;
    for line in input.lines() {
        let line = line.map_err(io_err)?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (cmd, arg) = line.split_once(' ').map_or((line, ""), |(c, a)| (c, a.trim()));
        if matches!(cmd, "quit" | "exit") {
            break;
        }
        let reply = step(cfg, &loaded, &records, &mut state, cmd, arg).unwrap_or_else(|e| format!("error: {e}"));
        writeln!(output, "{reply}").map_err(io_err)?;
    }
    Ok(())
}

fn parse<T: std::str::FromStr>(arg: &str) -> Result<T, String> {
    arg.parse().map_err(|_| format!("cannot parse `{arg}`"))
}

fn step(
    cfg: &RunConfig,
    l: &Loaded,
    records: &RecordIndex,
    st: &mut State,
    cmd: &str,
    arg: &str,
) -> Result<String, String> {
    let seed = cfg.seed.unwrap_or_default();
    match cmd {
        "help" => Ok(HELP.into()),
        "show" => Ok(format!(
            "layer {} feature {} factor {} prompt {:?}",
            st.sae.layer(),
            st.feature,
            st.factor,
            st.prompt
        )),
        "layer" => {
            let layer: usize = parse(arg)?;
            st.sae = l
                .saes
                .iter()
                .find(|s| s.layer() == layer)
                .cloned()
                .ok_or_else(|| format!("no SAE loaded for layer {layer}"))?;
            Ok(format!("layer {layer}"))
        }
        "feature" => {
            let f: usize = parse(arg)?;
            st.sae.check_feature(f).map_err(|e| e.to_string())?;
            st.feature = f;
            Ok(format!("feature {f}"))
        }
        "factor" => {
            let s: f32 = parse(arg)?;
            if !s.is_finite() {
                return Err("factor must be finite".into());
            }
            st.factor = s;
            Ok(format!("factor {s}"))
        }
        "prompt" => {
            st.prompt = arg.to_string();
            Ok(format!("prompt {:?}", st.prompt))
        }
        "gen" | "base" => {
            st.generation += 1;
            let g_seed = derive_seed(&[seed, st.generation]);
            let g = if cmd == "gen" {
                let spec = SteeringSpec {
                    max_new_tokens: cfg.eval.max_new_tokens,
                    temperature: cfg.eval.temperature,
                    seed: g_seed,
                    splice_mode: cfg.eval.splice_mode,
                    amax_scope: cfg.eval.amax_scope,
                    ..SteeringSpec::new(st.sae.layer(), st.feature, st.factor, st.prompt.clone())
                };
                steered_generate(&l.model, &l.vocab, &st.sae, &spec)
            } else {
                generate(
                    &l.model,
                    &l.vocab,
                    &st.prompt,
                    cfg.eval.max_new_tokens,
                    cfg.eval.temperature,
                    g_seed,
                )
            }
            .map_err(|e| e.to_string())?;
            let sep = if g.text.starts_with(char::is_whitespace) || g.text.is_empty() {
                ""
            } else {
                " "
            };
            Ok(format!("{}{sep}{}", st.prompt, g.text))
        }
        "lens" => {
            let k = if arg.is_empty() { 10 } else { parse(arg)? };
            let p = logit_lens_feature(&l.model, &st.sae, st.feature, k).map_err(|e| e.to_string())?;
            let shown: Vec<String> = p
                .entries
                .iter()
                .map(|&(id, logit)| format!("{:?} {logit:.3}", l.vocab.token(id).unwrap_or_default()))
                .collect();
            Ok(shown.join("\n"))
        }
        "score" => {
            let p = logit_lens_feature(&l.model, &st.sae, st.feature, cfg.score.k).map_err(|e| e.to_string())?;
            let s_in = match records.get(&(st.sae.layer(), st.feature)) {
                Some(r) => match input_score(r, &p, &l.vocab) {
                    Ok(s) => format!("{s:.4}"),
                    Err(e) => e.to_string(),
                },
                None => "no record".into(),
            };
            let out = output_score(&l.model, &l.vocab, &st.sae, &p, &cfg.score).map_err(|e| e.to_string())?;
            Ok(format!(
                "s_in {s_in}\ns_out {:.4} ({}) best token {:?} rank {}",
                out.s_out,
                match out.mode {
                    ScoreMode::Exact => "exact",
                    ScoreMode::Fast => "fast",
                },
                l.vocab.token(out.intervened.token).unwrap_or_default(),
                out.intervened.rank
            ))
        }
        other => Err(format!("unknown command `{other}`; try `help`")),
    }
}
