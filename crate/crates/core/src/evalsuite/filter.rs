// SPDX-License-Identifier: MIT OR Apache-2.0

//! Cohort-level aggregates: output-score threshold sweeps, size-matched
//! random baselines and per-layer score quartiles.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::EvalReport;
use crate::error::{Error, Result};
use crate::numerics::{derive_seed, RngState};
use crate::scoring::ScoreRecord;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub threshold: f64,
    /// Features with `s_out >= threshold`.
    pub retained: usize,
    /// Retained features that have a chosen factor; the mean is over these.
    pub with_factor: usize,
    pub mean_gen_success: Option<f64>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Mean chosen gen success over features whose output score reaches each
/// threshold. Only features present in both lists take part.
pub fn threshold_sweep(scores: &[ScoreRecord], evals: &[EvalReport], thresholds: &[f64]) -> Vec<SweepRow> {
    let by_key: HashMap<(usize, usize), &EvalReport> = evals.iter().map(|e| ((e.layer, e.feature), e)).collect();
    let joined: Vec<(f64, Option<f64>)> = scores
        .iter()
        .filter_map(|s| {
            by_key
                .get(&(s.layer, s.feature))
                .map(|e| (s.s_out, e.chosen_gen_success))
        })
        .collect();
    thresholds
        .iter()
        .map(|&t| {
            let kept: Vec<Option<f64>> = joined.iter().filter(|(s, _)| *s >= t).map(|&(_, g)| g).collect();
            let chosen: Vec<f64> = kept.iter().flatten().copied().collect();
            SweepRow {
                threshold: t,
                retained: kept.len(),
                with_factor: chosen.len(),
                mean_gen_success: mean(chosen.into_iter()),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineRow {
    pub size: usize,
    pub samples: usize,
    /// Mean over samples of the subset mean gen success.
    pub mean_gen_success: Option<f64>,
    pub sample_means: Vec<f64>,
}

/// Means of random same-size subsets of the features that have a chosen
/// factor, `samples` draws per size, each drawn without replacement.
pub fn random_filter_baseline(
    evals: &[EvalReport],
    sizes: &[usize],
    samples: usize,
    seed: u64,
) -> Result<Vec<BaselineRow>> {
    let population: Vec<f64> = evals.iter().filter_map(|e| e.chosen_gen_success).collect();
    sizes
        .iter()
        .map(|&size| {
            if size > population.len() {
                return Err(Error::Range(format!(
                    "subset size {size} exceeds the {} features with a chosen factor",
                    population.len()
                )));
            }
            if size == 0 {
                return Ok(BaselineRow {
                    size,
                    samples,
                    mean_gen_success: None,
                    sample_means: Vec::new(),
                });
            }
            let sample_means: Vec<f64> = (0..samples)
                .map(|s| {
                    let mut rng = RngState::new(derive_seed(&[seed, size as u64, s as u64]));
                    let picked = rand::seq::index::sample(rng.inner(), population.len(), size);
                    picked.iter().map(|i| population[i]).sum::<f64>() / size as f64
                })
                .collect();
            Ok(BaselineRow {
                size,
                samples,
                mean_gen_success: mean(sample_means.iter().copied()),
                sample_means,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quartiles {
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
}

/// Quantile by linear interpolation between closest ranks.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn quartiles(mut v: Vec<f64>) -> Option<Quartiles> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    Some(Quartiles {
        q25: quantile(&v, 0.25),
        median: quantile(&v, 0.5),
        q75: quantile(&v, 0.75),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerProfile {
    pub layer: usize,
    pub n: usize,
    /// Features with an input score; absent scores are skipped.
    pub n_s_in: usize,
    pub s_in: Option<Quartiles>,
    pub s_out: Quartiles,
}

pub fn layer_profile(scores: &[ScoreRecord]) -> Vec<LayerProfile> {
    let mut by_layer: BTreeMap<usize, Vec<&ScoreRecord>> = BTreeMap::new();
    for s in scores {
        by_layer.entry(s.layer).or_default().push(s);
    }
    by_layer
        .into_iter()
        .map(|(layer, rows)| {
            let s_in: Vec<f64> = rows.iter().filter_map(|r| r.s_in).collect();
            let s_out: Vec<f64> = rows.iter().map(|r| r.s_out).collect();
            LayerProfile {
                layer,
                n: rows.len(),
                n_s_in: s_in.len(),
                s_in: quartiles(s_in),
                s_out: quartiles(s_out).expect("layer has at least one row"),
            }
        })
        .collect()
}

/// Long-format plotting row.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TidyRow {
    pub x: f64,
    pub series: String,
    pub y: Option<f64>,
    pub y_lo: Option<f64>,
    pub y_hi: Option<f64>,
}

pub fn tidy_layer_profile(profiles: &[LayerProfile]) -> Vec<TidyRow> {
    let mut out = Vec::new();
    for p in profiles {
        for (series, q) in [("s_in", p.s_in), ("s_out", Some(p.s_out))] {
            out.push(TidyRow {
                x: p.layer as f64,
                series: series.into(),
                y: q.map(|q| q.median),
                y_lo: q.map(|q| q.q25),
                y_hi: q.map(|q| q.q75),
            });
        }
    }
    out
}

/// Threshold rows, then the matching random-baseline rows with the
/// sample-mean range as the band. Baseline rows are matched by position.
pub fn tidy_filter_report(sweep: &[SweepRow], baseline: &[BaselineRow]) -> Vec<TidyRow> {
    let mut out: Vec<TidyRow> = sweep
        .iter()
        .map(|r| TidyRow {
            x: r.threshold,
            series: "threshold".into(),
            y: r.mean_gen_success,
            y_lo: None,
            y_hi: None,
        })
        .collect();
    for (r, b) in sweep.iter().zip(baseline) {
        let lo = b.sample_means.iter().copied().reduce(f64::min);
        let hi = b.sample_means.iter().copied().reduce(f64::max);
        out.push(TidyRow {
            x: r.threshold,
            series: "random".into(),
            y: b.mean_gen_success,
            y_lo: lo,
            y_hi: hi,
        });
    }
    out
}
