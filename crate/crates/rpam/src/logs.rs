//! Line-delimited JSON logs: graded response samples for labeling and
//! per-response evaluation records.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rpam_core::eval::{evaluate, EvalError, EvalResult, GradedResponse};
use rpam_core::labeling::ResponseRecord;
use rpam_core::ModelTag;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LogError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: duplicate record ({query_id}, {model}, {sample_index})")]
    Duplicate {
        line: usize,
        query_id: String,
        model: ModelTag,
        sample_index: u32,
    },
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// One response in an evaluation log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalRecord {
    pub benchmark: String,
    pub correct: bool,
    pub token_count: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> LogError + '_ {
    move |source| LogError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Parse JSONL, skipping blank lines. Line numbers in errors are 1-based.
fn parse_jsonl<T: DeserializeOwned>(reader: impl BufRead) -> Result<Vec<(usize, T)>, LogError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| LogError::Malformed {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|e| LogError::Malformed {
            line: line_no,
            message: e.to_string(),
        })?;
        out.push((line_no, value));
    }
    Ok(out)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawResponse {
    query_id: String,
    model: ModelTag,
    sample_index: u32,
    correct: bool,
    token_count: u64,
}

pub fn parse_response_log(reader: impl BufRead) -> Result<Vec<ResponseRecord>, LogError> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (line, r) in parse_jsonl::<RawResponse>(reader)? {
        if !seen.insert((r.query_id.clone(), r.model, r.sample_index)) {
            return Err(LogError::Duplicate {
                line,
                query_id: r.query_id,
                model: r.model,
                sample_index: r.sample_index,
            });
        }
        out.push(ResponseRecord {
            query_id: r.query_id,
            model: r.model,
            sample_index: r.sample_index,
            correct: r.correct,
            token_count: r.token_count,
        });
    }
    Ok(out)
}

pub fn read_response_log(path: impl AsRef<Path>) -> Result<Vec<ResponseRecord>, LogError> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(io_err(path))?;
    parse_response_log(BufReader::new(file))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), LogError> {
    let mut buf = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut buf, r).expect("log rows serialize");
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(&buf).map_err(io_err(path))
}

pub fn write_response_log(path: impl AsRef<Path>, records: &[ResponseRecord]) -> Result<(), LogError> {
    write_jsonl(path.as_ref(), records)
}

pub fn parse_eval_log(reader: impl BufRead) -> Result<Vec<EvalRecord>, LogError> {
    Ok(parse_jsonl(reader)?.into_iter().map(|(_, r)| r).collect())
}

pub fn read_eval_log(path: impl AsRef<Path>) -> Result<Vec<EvalRecord>, LogError> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(io_err(path))?;
    parse_eval_log(BufReader::new(file))
}

pub fn write_eval_log(path: impl AsRef<Path>, records: &[EvalRecord]) -> Result<(), LogError> {
    write_jsonl(path.as_ref(), records)
}

/// Per-benchmark accuracy and mean length, sorted by benchmark name.
pub fn summarize(records: &[EvalRecord]) -> Result<Vec<EvalResult>, LogError> {
    let mut groups: BTreeMap<&str, Vec<GradedResponse>> = BTreeMap::new();
    for r in records {
        groups.entry(&r.benchmark).or_default().push(GradedResponse {
            correct: r.correct,
            token_count: r.token_count,
        });
    }
    Ok(groups
        .into_iter()
        .map(|(name, g)| evaluate(name, &g))
        .collect::<Result<_, _>>()?)
}

/// Thinking ratio per benchmark over the records that carry text.
/// Benchmarks without any text are omitted.
pub fn thinking_ratios(records: &[EvalRecord], keywords: &[&str]) -> BTreeMap<String, f64> {
    let mut texts: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for r in records {
        if let Some(t) = &r.text {
            texts.entry(&r.benchmark).or_default().push(t);
        }
    }
    texts
        .into_iter()
        .map(|(b, t)| (b.to_owned(), rpam_core::eval::thinking_ratio(&t, keywords)))
        .collect()
}
