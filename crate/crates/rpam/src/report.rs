//! Coefficient reports from calibration and the comparison table printed
//! by `eval`.

use std::fmt::Write as _;

use rpam_core::eval::{ComparativeReport, EvalResult};
use rpam_core::rpam::{CalibrationConfig, CoefPair, LayerCalibration};
use serde::Serialize;

/// Metadata key under which a calibrated checkpoint records its report hash.
pub const REPORT_HASH_KEY: &str = "rpam.coefficient_report_sha256";
pub const METHOD_KEY: &str = "merge.method";

#[derive(Debug, Clone, Serialize)]
pub struct CoefficientReport {
    /// `(λ_long, λ_short)` per layer; the embeddings follow layer 0 and the
    /// output head the last layer.
    pub pairs: Vec<CoefPair>,
    pub layers: Vec<LayerCalibration>,
    pub config: CalibrationConfig,
    pub pl_dataset_sha256: String,
    pub prompts_sha256: String,
    pub long_sha256: String,
    pub short_sha256: String,
}

impl CoefficientReport {
    /// One line per layer: final pair, loss before and after, chosen run.
    pub fn summary(&self) -> String {
        let mut s = String::new();
        for l in &self.layers {
            let p = l.final_pair();
            let _ = writeln!(
                s,
                "layer {}: lambda_long={:.6} lambda_short={:.6} loss {:.6} -> {:.6} (lr {}, {} epochs)",
                l.layer,
                p.lambda_long,
                p.lambda_short,
                l.chosen.initial_loss(),
                l.chosen.final_loss(),
                l.chosen.learning_rate,
                l.chosen.epochs,
            );
            if let Some(w) = &l.warning {
                let _ = writeln!(s, "  warning: {w}");
            }
        }
        s
    }
}

fn pct(v: f64) -> String {
    if v.is_finite() {
        format!("{v:+.2}%")
    } else {
        "n/a".into()
    }
}

/// Aligned plain-text table: one row per benchmark with reference and
/// candidate accuracy / mean length and their relative changes, then the
/// averaged row.
pub fn comparison_table(report: &ComparativeReport) -> String {
    let header = [
        "benchmark", "ref acc", "ref len", "cand acc", "cand len", "acc chg", "len chg",
    ];
    let mut rows: Vec<[String; 7]> = report
        .benchmarks
        .iter()
        .map(|b| {
            [
                b.candidate.benchmark.clone(),
                format!("{:.1}", b.reference.accuracy * 100.0),
                format!("{:.1}", b.reference.mean_tokens),
                format!("{:.1}", b.candidate.accuracy * 100.0),
                format!("{:.1}", b.candidate.mean_tokens),
                pct(b.accuracy_change_pct),
                pct(b.length_change_pct),
            ]
        })
        .collect();
    let n = report.benchmarks.len() as f64;
    let mean = |f: &dyn Fn(&EvalResult) -> f64, cand: bool| {
        report
            .benchmarks
            .iter()
            .map(|b| f(if cand { &b.candidate } else { &b.reference }))
            .sum::<f64>()
            / n
    };
    rows.push([
        "average".into(),
        format!("{:.1}", mean(&|r| r.accuracy, false) * 100.0),
        format!("{:.1}", mean(&|r| r.mean_tokens, false)),
        format!("{:.1}", mean(&|r| r.accuracy, true) * 100.0),
        format!("{:.1}", mean(&|r| r.mean_tokens, true)),
        pct(report.avg_accuracy_change_pct),
        pct(report.avg_length_change_pct),
    ]);

    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for r in &rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.chars().count());
        }
    }
    let line = |cells: &[&str]| -> String {
        let mut s = String::new();
        for (i, (c, w)) in cells.iter().zip(&widths).enumerate() {
            if i == 0 {
                let _ = write!(s, "{c:<w$}");
            } else {
                let _ = write!(s, "  {c:>w$}");
            }
        }
        s.push('\n');
        s
    };
    let mut out = line(&header);
    let total: usize = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
    out.push_str(&"-".repeat(total));
    out.push('\n');
    for (i, r) in rows.iter().enumerate() {
        if i + 1 == rows.len() {
            out.push_str(&"-".repeat(total));
            out.push('\n');
        }
        let cells: Vec<&str> = r.iter().map(String::as_str).collect();
        out.push_str(&line(&cells));
    }
    let _ = writeln!(
        out,
        "pooled: accuracy {}, length {}",
        pct(report.pooled_accuracy_change_pct),
        pct(report.pooled_length_change_pct)
    );
    out
}
