//! Pattern-labeled calibration data.
//!
//! For every query both base models are sampled `k` times. The model with
//! the higher empirical accuracy becomes the query's positive model and the
//! other one its negative. Equal accuracy is broken by the smaller mean
//! generated-token count, and a tie on both defaults to the short model.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum ModelTag {
    Long,
    Short,
}

impl ModelTag {
    pub fn other(self) -> Self {
        match self {
            ModelTag::Long => ModelTag::Short,
            ModelTag::Short => ModelTag::Long,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ModelTag::Long => "long",
            ModelTag::Short => "short",
        }
    }
}

impl fmt::Display for ModelTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One graded sample from a response log.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ResponseRecord {
    pub query_id: String,
    pub model: ModelTag,
    pub sample_index: u32,
    pub correct: bool,
    pub token_count: u64,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LabelError {
    #[error("no queries")]
    NoQueries,
    #[error("empty record set")]
    EmptyRecords,
    #[error("records mix queries or models: expected ({query}, {model})")]
    MixedRecords { query: String, model: ModelTag },
    #[error("duplicate record ({query}, {model}, {sample_index})")]
    DuplicateKey {
        query: String,
        model: ModelTag,
        sample_index: u32,
    },
    #[error("query `{query}` has no samples for the {model} model")]
    MissingModel { query: String, model: ModelTag },
    #[error("query `{query}`, {model} model: {found} of {expected} samples present")]
    MissingSamples {
        query: String,
        model: ModelTag,
        expected: usize,
        found: usize,
    },
    #[error("query `{query}`, {model} model: sample index {sample_index} outside 0..{k}")]
    KMismatch {
        query: String,
        model: ModelTag,
        sample_index: u32,
        k: usize,
    },
}

/// Aggregate over one model's samples for one query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ModelStats {
    pub samples: u64,
    pub correct: u64,
    pub total_tokens: u64,
}

impl ModelStats {
    pub fn from_records<'a>(records: impl IntoIterator<Item = &'a ResponseRecord>) -> Self {
        let mut s = ModelStats::default();
        for r in records {
            s.samples += 1;
            s.correct += u64::from(r.correct);
            s.total_tokens += r.token_count;
        }
        s
    }

    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.samples as f64
    }

    pub fn mean_tokens(&self) -> f64 {
        self.total_tokens as f64 / self.samples as f64
    }
}

/// Per-query statistics for both models.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct QueryStats {
    pub query_id: String,
    pub long: Option<ModelStats>,
    pub short: Option<ModelStats>,
}

impl QueryStats {
    pub fn get(&self, tag: ModelTag) -> Option<&ModelStats> {
        match tag {
            ModelTag::Long => self.long.as_ref(),
            ModelTag::Short => self.short.as_ref(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum LabelReason {
    Accuracy,
    TieTokens,
}

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PatternLabel {
    pub query_id: String,
    pub positive: ModelTag,
    pub negative: ModelTag,
    pub reason: LabelReason,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Provenance {
    pub k: usize,
    pub seed: Option<u64>,
    pub sources: Vec<String>,
}

/// One label per query, sorted by query id.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PLDataset {
    pub labels: Vec<PatternLabel>,
    pub provenance: Provenance,
}

impl PLDataset {
    pub fn get(&self, query_id: &str) -> Option<&PatternLabel> {
        self.labels
            .binary_search_by(|l| l.query_id.as_str().cmp(query_id))
            .ok()
            .map(|i| &self.labels[i])
    }
}

/// Fraction of correct samples in a homogeneous (query, model) record set.
pub fn empirical_accuracy(records: &[ResponseRecord]) -> Result<f64, LabelError> {
    let first = records.first().ok_or(LabelError::EmptyRecords)?;
    if records
        .iter()
        .any(|r| r.query_id != first.query_id || r.model != first.model)
    {
        return Err(LabelError::MixedRecords {
            query: first.query_id.clone(),
            model: first.model,
        });
    }
    Ok(ModelStats::from_records(records).accuracy())
}

/// Reject repeated `(query_id, model, sample_index)` keys.
pub fn check_unique(records: &[ResponseRecord]) -> Result<(), LabelError> {
    let mut seen = BTreeSet::new();
    for r in records {
        if !seen.insert((r.query_id.as_str(), r.model, r.sample_index)) {
            return Err(LabelError::DuplicateKey {
                query: r.query_id.clone(),
                model: r.model,
                sample_index: r.sample_index,
            });
        }
    }
    Ok(())
}

/// Pick the positive model for one query.
///
/// Ratios are compared by integer cross-multiplication, so equal accuracies
/// and equal mean token counts are detected exactly.
pub fn assign_pattern(stats: &QueryStats) -> Result<PatternLabel, LabelError> {
    let missing = |model| LabelError::MissingModel {
        query: stats.query_id.clone(),
        model,
    };
    let long = stats.long.ok_or_else(|| missing(ModelTag::Long))?;
    let short = stats.short.ok_or_else(|| missing(ModelTag::Short))?;
    if long.samples == 0 {
        return Err(missing(ModelTag::Long));
    }
    if short.samples == 0 {
        return Err(missing(ModelTag::Short));
    }

    let cross = |a: u64, na: u64, b: u64, nb: u64| {
        (u128::from(a) * u128::from(nb)).cmp(&(u128::from(b) * u128::from(na)))
    };
    use core::cmp::Ordering::*;
    let (positive, reason) = match cross(long.correct, long.samples, short.correct, short.samples)
    {
        Greater => (ModelTag::Long, LabelReason::Accuracy),
        Less => (ModelTag::Short, LabelReason::Accuracy),
        Equal => {
            let tokens = cross(
                long.total_tokens,
                long.samples,
                short.total_tokens,
                short.samples,
            );
            let pos = if tokens == Less {
                ModelTag::Long
            } else {
                ModelTag::Short
            };
            (pos, LabelReason::TieTokens)
        }
    };
    Ok(PatternLabel {
        query_id: stats.query_id.clone(),
        positive,
        negative: positive.other(),
        reason,
    })
}

/// Group records per query and model, checking that every query has
/// exactly `k` samples (indices `0..k`) from each model.
pub fn query_stats(records: &[ResponseRecord], k: usize) -> Result<Vec<QueryStats>, LabelError> {
    check_unique(records)?;
    let mut grouped: BTreeMap<&str, [Vec<&ResponseRecord>; 2]> = BTreeMap::new();
    for r in records {
        if r.sample_index as usize >= k {
            return Err(LabelError::KMismatch {
                query: r.query_id.clone(),
                model: r.model,
                sample_index: r.sample_index,
                k,
            });
        }
        let slot = grouped.entry(&r.query_id).or_default();
        slot[r.model as usize].push(r);
    }
    let mut out = Vec::with_capacity(grouped.len());
    for (query, per_model) in grouped {
        let mut stats = QueryStats {
            query_id: query.into(),
            long: None,
            short: None,
        };
        for tag in [ModelTag::Long, ModelTag::Short] {
            let recs = &per_model[tag as usize];
            if recs.len() != k {
                return Err(LabelError::MissingSamples {
                    query: query.into(),
                    model: tag,
                    expected: k,
                    found: recs.len(),
                });
            }
            let s = ModelStats::from_records(recs.iter().copied());
            match tag {
                ModelTag::Long => stats.long = Some(s),
                ModelTag::Short => stats.short = Some(s),
            }
        }
        out.push(stats);
    }
    Ok(out)
}

pub fn build_pl_dataset(
    records: &[ResponseRecord],
    k_expected: usize,
    provenance: Provenance,
) -> Result<PLDataset, LabelError> {
    let stats = query_stats(records, k_expected)?;
    if stats.is_empty() {
        return Err(LabelError::NoQueries);
    }
    let labels = stats
        .iter()
        .map(assign_pattern)
        .collect::<Result<Vec<_>, _>>()?;
    Ok(PLDataset { labels, provenance })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::format;
    use alloc::vec;

    fn rec(q: &str, model: ModelTag, i: u32, correct: bool, tokens: u64) -> ResponseRecord {
        ResponseRecord {
            query_id: q.into(),
            model,
            sample_index: i,
            correct,
            token_count: tokens,
        }
    }

    fn stats(q: &str, long: (u64, u64, u64), short: (u64, u64, u64)) -> QueryStats {
        let mk = |(samples, correct, total_tokens)| ModelStats {
            samples,
            correct,
            total_tokens,
        };
        QueryStats {
            query_id: q.into(),
            long: Some(mk(long)),
            short: Some(mk(short)),
        }
    }

    #[test]
    fn accuracy_examples() {
        let recs: Vec<_> = (0..12)
            .map(|i| rec("q", ModelTag::Long, i, i < 9, 10))
            .collect();
        assert_eq!(empirical_accuracy(&recs).unwrap(), 0.75);
        let all: Vec<_> = (0..4).map(|i| rec("q", ModelTag::Short, i, true, 1)).collect();
        assert_eq!(empirical_accuracy(&all).unwrap(), 1.0);
        assert_eq!(empirical_accuracy(&[]), Err(LabelError::EmptyRecords));
    }

    #[test]
    fn accuracy_rejects_mixed_sets() {
        let recs = vec![
            rec("q", ModelTag::Long, 0, true, 1),
            rec("q", ModelTag::Short, 0, true, 1),
        ];
        assert!(matches!(
            empirical_accuracy(&recs),
            Err(LabelError::MixedRecords { .. })
        ));
    }

    #[test]
    fn assign_examples() {
        // 0.8 vs 0.3 on 10 samples each
        let l = assign_pattern(&stats("a", (10, 8, 100), (10, 3, 10))).unwrap();
        assert_eq!((l.positive, l.negative, l.reason), (ModelTag::Long, ModelTag::Short, LabelReason::Accuracy));

        // 0.5 each, mean tokens 1200 vs 300
        let l = assign_pattern(&stats("b", (12, 6, 14400), (12, 6, 3600))).unwrap();
        assert_eq!((l.positive, l.reason), (ModelTag::Short, LabelReason::TieTokens));

        let l = assign_pattern(&stats("c", (12, 0, 120), (12, 0, 120))).unwrap();
        assert_eq!(l.positive, ModelTag::Short);

        // long wins the token tie-break when it is strictly shorter
        let l = assign_pattern(&stats("d", (4, 2, 40), (4, 2, 41))).unwrap();
        assert_eq!((l.positive, l.reason), (ModelTag::Long, LabelReason::TieTokens));
    }

    #[test]
    fn assign_requires_both_models() {
        let mut s = stats("a", (1, 1, 1), (1, 1, 1));
        s.short = None;
        assert_eq!(
            assign_pattern(&s),
            Err(LabelError::MissingModel {
                query: "a".into(),
                model: ModelTag::Short
            })
        );
    }

    #[test]
    fn build_single_query() {
        let mut recs = Vec::new();
        for i in 0..3 {
            recs.push(rec("q1", ModelTag::Long, i, true, 50));
            recs.push(rec("q1", ModelTag::Short, i, false, 5));
        }
        let ds = build_pl_dataset(&recs, 3, Provenance::default()).unwrap();
        assert_eq!(ds.labels.len(), 1);
        assert_eq!(ds.labels[0].positive, ModelTag::Long);
        assert!(ds.get("q1").is_some());
        assert!(ds.get("q2").is_none());
    }

    #[test]
    fn build_reports_missing_samples() {
        let mut recs = Vec::new();
        for i in 0..12 {
            recs.push(rec("q1", ModelTag::Short, i, true, 5));
            if i < 11 {
                recs.push(rec("q1", ModelTag::Long, i, true, 5));
            }
        }
        let err = build_pl_dataset(&recs, 12, Provenance::default()).unwrap_err();
        assert_eq!(
            err,
            LabelError::MissingSamples {
                query: "q1".into(),
                model: ModelTag::Long,
                expected: 12,
                found: 11
            }
        );
        assert!(format!("{err}").contains("q1"));
    }

    #[test]
    fn build_rejects_bad_inputs() {
        assert_eq!(
            build_pl_dataset(&[], 12, Provenance::default()),
            Err(LabelError::NoQueries)
        );
        let dup = vec![
            rec("q", ModelTag::Long, 0, true, 1),
            rec("q", ModelTag::Long, 0, false, 1),
        ];
        assert!(matches!(
            build_pl_dataset(&dup, 1, Provenance::default()),
            Err(LabelError::DuplicateKey { .. })
        ));
        let big = vec![rec("q", ModelTag::Long, 5, true, 1)];
        assert!(matches!(
            build_pl_dataset(&big, 2, Provenance::default()),
            Err(LabelError::KMismatch { .. })
        ));
    }
}
