// SPDX-License-Identifier: MIT OR Apache-2.0

use std::sync::Arc;

use saesteer::evalsuite::{evaluate_feature, layer_profile, pmi, threshold_sweep, EvalConfig, PmiTable};
use saesteer::fixture::{build_suite, SuiteSpec};
use saesteer::io::{read_jsonl, to_jsonl, write_atomic};
use saesteer::lens::logit_lens_feature;
use saesteer::model::{load_model, save_model};
use saesteer::sae::{load_sae, save_sae, SaeParams};
use saesteer::scoring::{batch_scores, index_records, ActivationRecord, ScoreConfig, ScoreRecord};
use saesteer::{default_prefixes, Error};

fn small_spec() -> SuiteSpec {
    SuiteSpec {
        planted_per_layer: 4,
        corpus_sentences: 200,
        ..SuiteSpec::default()
    }
}

#[test]
fn suite_is_deterministic_per_seed() {
    let a = build_suite(&small_spec(), 3).unwrap();
    let b = build_suite(&small_spec(), 3).unwrap();
    let c = build_suite(&small_spec(), 4).unwrap();
    assert!(a.model == b.model && a.records == b.records);
    assert!(a.model != c.model);
}

#[test]
fn planted_output_features_put_their_token_first() {
    let s = build_suite(&small_spec(), 1).unwrap();
    for (layer, planted) in &s.planted_output {
        let p = logit_lens_feature(&s.model, &s.saes[*layer], planted.feature, 5).unwrap();
        assert_eq!(
            p.entries[0].0, planted.token,
            "layer {layer} feature {}",
            planted.feature
        );
    }
}

#[test]
fn scores_feed_the_filter_and_profile() {
    let s = build_suite(&small_spec(), 2).unwrap();
    let records = index_records(s.records.clone()).unwrap();
    let jobs: Vec<(Arc<SaeParams>, usize)> = s
        .saes
        .iter()
        .flat_map(|sae| (0..4).map(move |f| (sae.clone(), f)))
        .collect();
    let scores: Vec<ScoreRecord> = batch_scores(&s.model, &s.vocab, &jobs, &records, &ScoreConfig::default())
        .into_iter()
        .map(|r| r.outcome.unwrap())
        .collect();
    assert_eq!(scores.len(), 24);
    assert!(scores.iter().all(|r| (-1.0..=1.0).contains(&r.s_out)));

    let profile = layer_profile(&scores);
    assert_eq!(profile.len(), 6);
    assert!(profile.iter().all(|p| p.n == 4));

    let cfg = EvalConfig {
        prefixes: default_prefixes()[..2].to_vec(),
        factor_grid: vec![1.0, 8.0],
        max_new_tokens: 4,
        ..EvalConfig::default()
    };
    let evals: Vec<_> = jobs
        .iter()
        .take(6)
        .map(|(sae, f)| {
            evaluate_feature(&s.model, &s.vocab, sae, *f, &cfg, 7, &s.model)
                .unwrap()
                .report
        })
        .collect();
    let sweep = threshold_sweep(&scores, &evals, &[f64::NEG_INFINITY, f64::INFINITY]);
    // only evaluated features take part
    assert_eq!(sweep[0].retained, 6);
    assert!(sweep[0].with_factor <= 6);
    assert_eq!(sweep[1].retained, 0);
    assert_eq!(sweep[1].mean_gen_success, None);
}

#[test]
fn containers_round_trip_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let s = build_suite(&small_spec(), 5).unwrap();
    save_model(&dir.path().join("m"), &s.model, &s.vocab).unwrap();
    let (model, vocab) = load_model(&dir.path().join("m")).unwrap();
    assert!(model == s.model && vocab == s.vocab);
    save_sae(&dir.path().join("s"), &s.saes[2]).unwrap();
    assert_eq!(load_sae(&dir.path().join("s")).unwrap(), *s.saes[2]);

    std::fs::remove_file(dir.path().join("s").join("manifest.json")).unwrap();
    let err = load_sae(&dir.path().join("s")).unwrap_err();
    assert!(matches!(err, Error::Container(_)), "{err}");
}

#[test]
fn records_and_pmi_survive_serialization() {
    let dir = tempfile::tempdir().unwrap();
    let s = build_suite(&small_spec(), 6).unwrap();
    let path = dir.path().join("records.jsonl");
    write_atomic(&path, &to_jsonl(&s.records).unwrap()).unwrap();
    let back: Vec<ActivationRecord> = read_jsonl(&path).unwrap();
    assert_eq!(back, s.records);

    let file = s.pmi.to_file();
    let table = PmiTable::from_file(serde_json::from_str(&serde_json::to_string(&file).unwrap()).unwrap()).unwrap();
    let words: Vec<&String> = file.unigrams.iter().map(|(w, _)| w).take(8).collect();
    for a in &words {
        for b in &words {
            assert_eq!(pmi(&table, a, b), pmi(&s.pmi, a, b));
        }
    }
}
