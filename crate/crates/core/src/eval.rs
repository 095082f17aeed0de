//! Accuracy / response-length metrics and the reflective-keyword ratio.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use thiserror::Error;

/// Reflective phrases whose presence marks a response as "thinking".
pub const DEFAULT_THINKING_KEYWORDS: [&str; 6] = [
    "wait",
    "re-examine",
    "recap",
    "double-check",
    "let me just check",
    "let me just verify",
];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("no graded responses for benchmark `{0}`")]
    Empty(String),
    #[error("benchmark sets differ: only in candidate {only_candidate:?}, only in reference {only_reference:?}")]
    BenchmarkMismatch {
        only_candidate: Vec<String>,
        only_reference: Vec<String>,
    },
    #[error("duplicate benchmark `{0}`")]
    DuplicateBenchmark(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GradedResponse {
    pub correct: bool,
    pub token_count: u64,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EvalResult {
    pub benchmark: String,
    pub accuracy: f64,
    pub mean_tokens: f64,
    pub sample_count: usize,
}

pub fn evaluate(
    benchmark: impl Into<String>,
    responses: &[GradedResponse],
) -> Result<EvalResult, EvalError> {
    let benchmark = benchmark.into();
    if responses.is_empty() {
        return Err(EvalError::Empty(benchmark));
    }
    let correct = responses.iter().filter(|r| r.correct).count();
    let tokens: u64 = responses.iter().map(|r| r.token_count).sum();
    let n = responses.len();
    Ok(EvalResult {
        benchmark,
        accuracy: correct as f64 / n as f64,
        mean_tokens: tokens as f64 / n as f64,
        sample_count: n,
    })
}

/// Relative change `(candidate - reference) / reference` in percent.
/// Negative values are reductions.
pub fn relative_change_pct(candidate: f64, reference: f64) -> f64 {
    if reference == 0.0 {
        if candidate == 0.0 {
            0.0
        } else {
            f64::INFINITY.copysign(candidate)
        }
    } else {
        (candidate - reference) / reference * 100.0
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BenchmarkComparison {
    pub candidate: EvalResult,
    pub reference: EvalResult,
    /// Relative accuracy change in percent.
    pub accuracy_change_pct: f64,
    /// Relative mean-length change in percent (negative = shorter).
    pub length_change_pct: f64,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ComparativeReport {
    /// Sorted by benchmark name.
    pub benchmarks: Vec<BenchmarkComparison>,
    /// Mean of the per-benchmark relative accuracy changes.
    pub avg_accuracy_change_pct: f64,
    /// Mean of the per-benchmark relative length changes.
    pub avg_length_change_pct: f64,
    /// Relative change between the benchmark-averaged accuracies.
    pub pooled_accuracy_change_pct: f64,
    /// Relative change between the benchmark-averaged mean lengths.
    pub pooled_length_change_pct: f64,
}

impl ComparativeReport {
    /// Average length reduction as a positive percentage.
    pub fn avg_length_reduction_pct(&self) -> f64 {
        -self.avg_length_change_pct
    }
}

fn index(results: &[EvalResult]) -> Result<BTreeMap<&str, &EvalResult>, EvalError> {
    let mut m = BTreeMap::new();
    for r in results {
        if m.insert(r.benchmark.as_str(), r).is_some() {
            return Err(EvalError::DuplicateBenchmark(r.benchmark.clone()));
        }
    }
    Ok(m)
}

pub fn compare(
    candidate: &[EvalResult],
    reference: &[EvalResult],
) -> Result<ComparativeReport, EvalError> {
    let cand = index(candidate)?;
    let refs = index(reference)?;
    let only_candidate: Vec<String> = cand
        .keys()
        .filter(|k| !refs.contains_key(*k))
        .map(|k| String::from(*k))
        .collect();
    let only_reference: Vec<String> = refs
        .keys()
        .filter(|k| !cand.contains_key(*k))
        .map(|k| String::from(*k))
        .collect();
    if !only_candidate.is_empty() || !only_reference.is_empty() || cand.is_empty() {
        return Err(EvalError::BenchmarkMismatch {
            only_candidate,
            only_reference,
        });
    }

    let benchmarks: Vec<BenchmarkComparison> = cand
        .iter()
        .map(|(name, c)| {
            let r = refs[name];
            BenchmarkComparison {
                candidate: (*c).clone(),
                reference: r.clone(),
                accuracy_change_pct: relative_change_pct(c.accuracy, r.accuracy),
                length_change_pct: relative_change_pct(c.mean_tokens, r.mean_tokens),
            }
        })
        .collect();
    let n = benchmarks.len() as f64;
    let mean = |f: &dyn Fn(&BenchmarkComparison) -> f64| benchmarks.iter().map(f).sum::<f64>() / n;
    let avg_accuracy_change_pct = mean(&|b| b.accuracy_change_pct);
    let avg_length_change_pct = mean(&|b| b.length_change_pct);
    let pooled_accuracy_change_pct = relative_change_pct(
        mean(&|b| b.candidate.accuracy),
        mean(&|b| b.reference.accuracy),
    );
    let pooled_length_change_pct = relative_change_pct(
        mean(&|b| b.candidate.mean_tokens),
        mean(&|b| b.reference.mean_tokens),
    );
    Ok(ComparativeReport {
        benchmarks,
        avg_accuracy_change_pct,
        avg_length_change_pct,
        pooled_accuracy_change_pct,
        pooled_length_change_pct,
    })
}

/// Fraction of responses containing at least one keyword (case-insensitive
/// substring match). An empty response list gives 0.
pub fn thinking_ratio<S: AsRef<str>, K: AsRef<str>>(responses: &[S], keywords: &[K]) -> f64 {
    if responses.is_empty() {
        return 0.0;
    }
    let keys: Vec<String> = keywords
        .iter()
        .map(|k| k.as_ref().to_lowercase())
        .filter(|k| !k.is_empty())
        .collect();
    let hits = responses
        .iter()
        .filter(|r| {
            let text = r.as_ref().to_lowercase();
            keys.iter().any(|k| text.contains(k.as_str()))
        })
        .count();
    hits as f64 / responses.len() as f64
}
