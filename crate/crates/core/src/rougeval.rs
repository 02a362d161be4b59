//! ROUGE-1/2/L scoring (F1 and truncated recall) with per-sample averaging,
//! plus the timing summary read from decoder sidecar files.

use std::collections::HashMap;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::textkit::tokenize;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("prediction file has {pred} lines but reference file has {reference}")]
    LineCountMismatch { pred: usize, reference: usize },
    #[error("malformed timing file: {0}")]
    BadTiming(String),
    #[error("malformed baseline report: {0}")]
    BadReport(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Precision, recall and F1, each as a percentage.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    fn from_counts(overlap: usize, pred_total: usize, ref_total: usize) -> Self {
        let precision = if pred_total == 0 { 0.0 } else { overlap as f64 / pred_total as f64 };
        let recall = if ref_total == 0 { 0.0 } else { overlap as f64 / ref_total as f64 };
        let f1 = if precision == 0.0 || recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
        Self { precision: 100.0 * precision, recall: 100.0 * recall, f1: 100.0 * f1 }
    }
}

fn ngram_counts<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut counts = HashMap::new();
    if n == 0 || tokens.len() < n {
        return counts;
    }
    for w in tokens.windows(n) {
        *counts.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
    }
    counts
}

/// Clipped n-gram overlap.
pub fn rouge_n<S: AsRef<str>, T: AsRef<str>>(pred: &[S], reference: &[T], n: usize) -> Prf {
    let p = ngram_counts(pred, n);
    let r = ngram_counts(reference, n);
    let overlap = p.iter().map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0))).sum();
    Prf::from_counts(overlap, p.values().sum(), r.values().sum())
}

pub fn lcs_len<S: AsRef<str>, T: AsRef<str>>(a: &[S], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x.as_ref() == y.as_ref() { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Longest-common-subsequence ROUGE.
pub fn rouge_l<S: AsRef<str>, T: AsRef<str>>(pred: &[S], reference: &[T]) -> Prf {
    Prf::from_counts(lcs_len(pred, reference), pred.len(), reference.len())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BudgetUnit {
    Chars,
    Bytes,
}

/// Longest token prefix whose space-joined length fits in `budget`.
pub fn truncate_to_budget<S: AsRef<str>>(tokens: &[S], budget: usize, unit: BudgetUnit) -> &[S] {
    let measure = |s: &str| match unit {
        BudgetUnit::Chars => s.chars().count(),
        BudgetUnit::Bytes => s.len(),
    };
    let mut used = 0;
    for (i, t) in tokens.iter().enumerate() {
        let add = measure(t.as_ref()) + usize::from(i > 0);
        if used + add > budget {
            return &tokens[..i];
        }
        used += add;
    }
    tokens
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruncatedRecall {
    pub r1: f64,
    pub r2: f64,
    pub rl: f64,
}

/// ROUGE recall after cutting the prediction to the budget.
pub fn truncated_recall<S: AsRef<str>, T: AsRef<str>>(pred: &[S], reference: &[T], budget: usize, unit: BudgetUnit) -> TruncatedRecall {
    let cut = truncate_to_budget(pred, budget, unit);
    TruncatedRecall {
        r1: rouge_n(cut, reference, 1).recall,
        r2: rouge_n(cut, reference, 2).recall,
        rl: rouge_l(cut, reference).recall,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    F1,
    TruncatedRecall { char_budget: usize, unit: BudgetUnit },
}

impl FromStr for Protocol {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "f1" => Ok(Self::F1),
            "truncated-recall" => Ok(Self::TruncatedRecall { char_budget: 75, unit: BudgetUnit::Chars }),
            other => Err(format!("unknown protocol {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingSummary {
    pub mean_seconds: f64,
    pub samples: usize,
    /// Baseline mean time divided by this report's.
    pub speedup_vs_baseline: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RougeReport {
    pub protocol: Protocol,
    pub r1: Prf,
    pub r2: Prf,
    pub rl: Prf,
    pub n_samples: usize,
    /// Total score (sum over the three metrics) minus the baseline's.
    pub delta_r: Option<f64>,
    pub timing: Option<TimingSummary>,
}

impl RougeReport {
    /// Sum of the three headline numbers: F1 under the F1 protocol, recall otherwise.
    pub fn total(&self) -> f64 {
        match self.protocol {
            Protocol::F1 => self.r1.f1 + self.r2.f1 + self.rl.f1,
            Protocol::TruncatedRecall { .. } => self.r1.recall + self.r2.recall + self.rl.recall,
        }
    }

    pub fn delta_against(&self, baseline: &RougeReport) -> f64 {
        self.total() - baseline.total()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

fn mean_prf(items: &[Prf]) -> Prf {
    if items.is_empty() {
        return Prf::default();
    }
    let n = items.len() as f64;
    Prf {
        precision: items.iter().map(|p| p.precision).sum::<f64>() / n,
        recall: items.iter().map(|p| p.recall).sum::<f64>() / n,
        f1: items.iter().map(|p| p.f1).sum::<f64>() / n,
    }
}

/// Tokenizes each line; lines with no tokens score as empty predictions.
fn tokenize_lines<S: AsRef<str>>(lines: &[S]) -> Vec<Vec<String>> {
    lines.iter().map(|l| tokenize(l.as_ref()).unwrap_or_default()).collect()
}

/// Per-sample ROUGE averaged over the corpus.
pub fn evaluate_lines<S: AsRef<str>, T: AsRef<str>>(pred: &[S], reference: &[T], protocol: Protocol) -> Result<RougeReport> {
    if pred.len() != reference.len() {
        return Err(EvalError::LineCountMismatch { pred: pred.len(), reference: reference.len() });
    }
    let preds = tokenize_lines(pred);
    let refs = tokenize_lines(reference);
    let (mut r1, mut r2, mut rl) = (Vec::new(), Vec::new(), Vec::new());
    for (p, r) in preds.iter().zip(&refs) {
        let p: &[String] = match protocol {
            Protocol::F1 => p,
            Protocol::TruncatedRecall { char_budget, unit } => truncate_to_budget(p, char_budget, unit),
        };
        r1.push(rouge_n(p, r, 1));
        r2.push(rouge_n(p, r, 2));
        rl.push(rouge_l(p, r));
    }
    Ok(RougeReport {
        protocol,
        r1: mean_prf(&r1),
        r2: mean_prf(&r2),
        rl: mean_prf(&rl),
        n_samples: preds.len(),
        delta_r: None,
        timing: None,
    })
}

/// Mean seconds per sample from a sidecar `index<TAB>microseconds` file.
pub fn read_timing(path: &Path) -> Result<TimingSummary> {
    let text = std::fs::read_to_string(path)?;
    let mut total = 0.0;
    let mut samples = 0;
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let micros = line
            .split('\t')
            .next_back()
            .and_then(|f| f.trim().parse::<f64>().ok())
            .ok_or_else(|| EvalError::BadTiming(format!("line {}: {line:?}", i + 1)))?;
        total += micros;
        samples += 1;
    }
    if samples == 0 {
        return Err(EvalError::BadTiming("no samples".into()));
    }
    Ok(TimingSummary { mean_seconds: total / samples as f64 / 1e6, samples, speedup_vs_baseline: None })
}

/// Evaluates prediction and reference files, attaching timing and baseline deltas
/// when available.
pub fn corpus_eval(
    pred_path: &Path,
    ref_path: &Path,
    protocol: Protocol,
    timing_path: Option<&Path>,
    baseline: Option<&RougeReport>,
) -> Result<RougeReport> {
    let read = |p: &Path| -> Result<Vec<String>> {
        Ok(std::fs::read_to_string(p)?.lines().map(|l| l.trim_end_matches('\r').to_string()).collect())
    };
    let mut report = evaluate_lines(&read(pred_path)?, &read(ref_path)?, protocol)?;
    if let Some(tp) = timing_path {
        let mut timing = read_timing(tp)?;
        if let Some(base) = baseline.and_then(|b| b.timing) {
            if timing.mean_seconds > 0.0 {
                timing.speedup_vs_baseline = Some(base.mean_seconds / timing.mean_seconds);
            }
        }
        report.timing = Some(timing);
    }
    if let Some(b) = baseline {
        report.delta_r = Some(report.delta_against(b));
    }
    Ok(report)
}
