// SPDX-License-Identifier: MIT OR Apache-2.0

//! Pointwise mutual information between generated tokens and a feature's
//! top lens token, bucketed by input/output score.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scoring::ScoreRecord;

/// Co-occurrence counts. Pairs are unordered: `(a, b)` and `(b, a)` are
/// summed into one entry at ingestion.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PmiTable {
    pairs: HashMap<(String, String), u64>,
    unigrams: HashMap<String, u64>,
    total_pairs: u64,
    total_unigrams: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PmiFile {
    pub pairs: Vec<(String, String, u64)>,
    pub unigrams: Vec<(String, u64)>,
    pub total_pairs: u64,
    pub total_unigrams: u64,
}

fn key(a: &str, b: &str) -> (String, String) {
    if a <= b {
        (a.to_string(), b.to_string())
    } else {
        (b.to_string(), a.to_string())
    }
}

impl PmiTable {
    pub fn from_file(file: PmiFile) -> Result<Self> {
        if file.total_pairs == 0 || file.total_unigrams == 0 {
            return Err(Error::Record("PMI totals must be positive".into()));
        }
        let mut unigrams = HashMap::new();
        for (t, c) in file.unigrams {
            if c == 0 {
                return Err(Error::Record(format!("unigram `{t}` has zero count")));
            }
            *unigrams.entry(t).or_insert(0) += c;
        }
        let mut pairs = HashMap::new();
        for (a, b, c) in file.pairs {
            if c == 0 {
                return Err(Error::Record(format!("pair (`{a}`, `{b}`) has zero count")));
            }
            for t in [&a, &b] {
                if !unigrams.contains_key(t) {
                    return Err(Error::Record(format!("pair token `{t}` has no unigram count")));
                }
            }
            *pairs.entry(key(&a, &b)).or_insert(0) += c;
        }
        Ok(Self {
            pairs,
            unigrams,
            total_pairs: file.total_pairs,
            total_unigrams: file.total_unigrams,
        })
    }

    /// Counts adjacent pairs and unigrams over tokenised sentences.
    pub fn from_sentences<S: AsRef<str>>(sentences: &[Vec<S>]) -> Result<Self> {
        let mut pairs: HashMap<(String, String), u64> = HashMap::new();
        let mut unigrams: HashMap<String, u64> = HashMap::new();
        for s in sentences {
            for t in s {
                *unigrams.entry(t.as_ref().to_string()).or_insert(0) += 1;
            }
            for w in s.windows(2) {
                *pairs.entry(key(w[0].as_ref(), w[1].as_ref())).or_insert(0) += 1;
            }
        }
        Self::from_file(PmiFile {
            total_pairs: pairs.values().sum(),
            total_unigrams: unigrams.values().sum(),
            pairs: pairs.into_iter().map(|((a, b), c)| (a, b, c)).collect(),
            unigrams: unigrams.into_iter().collect(),
        })
    }

    /// Sorted, canonical file form.
    pub fn to_file(&self) -> PmiFile {
        let mut pairs: Vec<(String, String, u64)> = self
            .pairs
            .iter()
            .map(|((a, b), &c)| (a.clone(), b.clone(), c))
            .collect();
        pairs.sort();
        let mut unigrams: Vec<(String, u64)> = self.unigrams.iter().map(|(t, &c)| (t.clone(), c)).collect();
        unigrams.sort();
        PmiFile {
            pairs,
            unigrams,
            total_pairs: self.total_pairs,
            total_unigrams: self.total_unigrams,
        }
    }
}

/// `log2(p(a,b) / (p(a) p(b)))`, absent when the pair was never counted.
pub fn pmi(table: &PmiTable, a: &str, b: &str) -> Option<f64> {
    let pair = *table.pairs.get(&key(a, b))?;
    let ca = *table.unigrams.get(a)?;
    let cb = *table.unigrams.get(b)?;
    let tu = table.total_unigrams as f64;
    let joint = pair as f64 / table.total_pairs as f64;
    Some((joint / ((ca as f64 / tu) * (cb as f64 / tu))).log2())
}

/// Condition on one score; an absent score fails every bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Predicate {
    Any,
    AtLeast(f64),
    Below(f64),
}

impl Predicate {
    fn holds(self, v: Option<f64>) -> bool {
        match (self, v) {
            (Predicate::Any, _) => true,
            (Predicate::AtLeast(t), Some(v)) => v >= t,
            (Predicate::Below(t), Some(v)) => v < t,
            (_, None) => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bucket {
    pub name: String,
    pub s_in: Predicate,
    pub s_out: Predicate,
}

impl Bucket {
    pub fn contains(&self, s: &ScoreRecord) -> bool {
        self.s_in.holds(s.s_in) && self.s_out.holds(Some(s.s_out))
    }
}

/// Output features without input behaviour, and input features.
pub fn default_buckets() -> Vec<Bucket> {
    vec![
        Bucket {
            name: "output_only".into(),
            s_in: Predicate::Below(0.1),
            s_out: Predicate::AtLeast(0.1),
        },
        Bucket {
            name: "input".into(),
            s_in: Predicate::AtLeast(0.1),
            s_out: Predicate::Any,
        },
    ]
}

/// Per-feature input to the bucket analysis: its generated token strings
/// and its top-1 lens token string.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTokens {
    pub layer: usize,
    pub feature: usize,
    pub top1: String,
    pub generated: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BucketRow {
    pub bucket: String,
    pub n_features: usize,
    pub n_pairs: usize,
    pub mean_pmi: Option<f64>,
}

/// Mean PMI of (generated token, top-1 lens token) pairs over the
/// features in each bucket. Pairs missing from the table are skipped.
pub fn pmi_bucket_analysis(
    scores: &[ScoreRecord],
    tokens: &[FeatureTokens],
    table: &PmiTable,
    buckets: &[Bucket],
) -> Vec<BucketRow> {
    let by_key: HashMap<(usize, usize), &FeatureTokens> = tokens.iter().map(|t| ((t.layer, t.feature), t)).collect();
    buckets
        .iter()
        .map(|b| {
            let members: Vec<&FeatureTokens> = scores
                .iter()
                .filter(|s| b.contains(s))
                .filter_map(|s| by_key.get(&(s.layer, s.feature)).copied())
                .collect();
            let values: Vec<f64> = members
                .iter()
                .flat_map(|f| f.generated.iter().filter_map(|g| pmi(table, g, &f.top1)))
                .collect();
            BucketRow {
                bucket: b.name.clone(),
                n_features: members.len(),
                n_pairs: values.len(),
                mean_pmi: (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64),
            }
        })
        .collect()
}
