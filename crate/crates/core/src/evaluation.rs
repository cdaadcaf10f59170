//! Subject-level ranking metrics, max-F1 operating point, PHQ-8 severity
//! bands and fold aggregation.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EvalError {
    #[error("scores need at least one positive and one negative subject")]
    DegenerateLabels,
    #[error("aggregation needs at least two folds, got {0}")]
    TooFewFolds(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredSubject {
    pub speaker_id: String,
    pub score: f64,
    pub label: u8,
    pub phq8: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
    pub threshold: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    pub threshold: f64,
}

/// Cumulative counts at one distinct threshold, highest threshold first.
#[derive(Debug, Clone, Copy)]
struct Step {
    threshold: f64,
    tp: usize,
    fp: usize,
}

fn class_counts(scored: &[ScoredSubject]) -> Result<(usize, usize), EvalError> {
    let pos = scored.iter().filter(|s| s.label == 1).count();
    let neg = scored.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(EvalError::DegenerateLabels);
    }
    Ok((pos, neg))
}

/// Predictions are positive iff `score >= threshold`.
fn sweep(scored: &[ScoredSubject]) -> Vec<Step> {
    let mut order: Vec<(f64, u8)> = scored.iter().map(|s| (s.score, s.label)).collect();
    order.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut steps: Vec<Step> = Vec::new();
    let (mut tp, mut fp) = (0, 0);
    for (i, &(score, label)) in order.iter().enumerate() {
        if label == 1 {
            tp += 1;
        } else {
            fp += 1;
        }
        let last_of_group = order.get(i + 1).is_none_or(|next| next.0 != score);
        if last_of_group {
            steps.push(Step { threshold: score, tp, fp });
        }
    }
    steps
}

pub fn pr_curve(scored: &[ScoredSubject]) -> Result<Vec<PrPoint>, EvalError> {
    let (pos, _) = class_counts(scored)?;
    Ok(sweep(scored)
        .into_iter()
        .map(|s| PrPoint {
            recall: s.tp as f64 / pos as f64,
            precision: s.tp as f64 / (s.tp + s.fp) as f64,
            threshold: s.threshold,
        })
        .collect())
}

/// Average precision: the mean over positives of the precision at the
/// threshold equal to that positive's score.
pub fn pr_auc(scored: &[ScoredSubject]) -> Result<f64, EvalError> {
    let (pos, _) = class_counts(scored)?;
    let mut sum = 0.0;
    let mut prev_tp = 0;
    for s in sweep(scored) {
        let precision = s.tp as f64 / (s.tp + s.fp) as f64;
        for _ in prev_tp..s.tp {
            sum += precision;
        }
        prev_tp = s.tp;
    }
    Ok(sum / pos as f64)
}

/// ROC points from `(0, 0)` through every threshold.
pub fn roc_curve(scored: &[ScoredSubject]) -> Result<Vec<RocPoint>, EvalError> {
    let (pos, neg) = class_counts(scored)?;
    let mut out = vec![RocPoint { fpr: 0.0, tpr: 0.0, threshold: f64::INFINITY }];
    out.extend(sweep(scored).into_iter().map(|s| RocPoint {
        fpr: s.fp as f64 / neg as f64,
        tpr: s.tp as f64 / pos as f64,
        threshold: s.threshold,
    }));
    Ok(out)
}

/// Trapezoid area under the ROC curve, accumulated in integer counts so it
/// matches the Mann-Whitney statistic exactly.
pub fn roc_auc(scored: &[ScoredSubject]) -> Result<f64, EvalError> {
    let (pos, neg) = class_counts(scored)?;
    let (mut twice_area, mut prev_tp, mut prev_fp) = (0u128, 0usize, 0usize);
    for s in sweep(scored) {
        twice_area += ((s.fp - prev_fp) * (s.tp + prev_tp)) as u128;
        prev_tp = s.tp;
        prev_fp = s.fp;
    }
    Ok(twice_area as f64 / (2 * pos * neg) as f64)
}

pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub threshold: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Highest-F1 point; among equal F1 the higher threshold wins.
pub fn best_f1(curve: &[PrPoint]) -> OperatingPoint {
    assert!(!curve.is_empty(), "empty PR curve");
    let mut best: Option<OperatingPoint> = None;
    for p in curve {
        let f1 = f1_score(p.precision, p.recall);
        let better = match best {
            None => true,
            Some(b) => f1 > b.f1 || (f1 == b.f1 && p.threshold > b.threshold),
        };
        if better {
            best = Some(OperatingPoint { threshold: p.threshold, f1, precision: p.precision, recall: p.recall });
        }
    }
    best.unwrap()
}

/// PHQ-8 bands compared against the healthy 0-9 group.
pub const SEVERITY_BANDS: [(u8, u8); 4] = [(10, 14), (15, 19), (20, 24), (10, 24)];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeverityRow {
    pub band: String,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
}

impl SeverityRow {
    pub fn subjects(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

/// One row per band with at least one depressed subject, evaluated on the
/// healthy subjects plus that band at a fixed threshold.
pub fn severity_report(scored: &[ScoredSubject], threshold: f64) -> Vec<SeverityRow> {
    SEVERITY_BANDS
        .iter()
        .filter_map(|&(lo, hi)| {
            let in_band = |s: &&ScoredSubject| s.phq8 <= 9 || (lo..=hi).contains(&s.phq8);
            let subset: Vec<&ScoredSubject> = scored.iter().filter(in_band).collect();
            if !subset.iter().any(|s| s.phq8 >= lo) {
                return None;
            }
            let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
            for s in subset {
                match (s.score >= threshold, s.phq8 >= lo) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, false) => tn += 1,
                    (false, true) => fn_ += 1,
                }
            }
            let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
            let recall = tp as f64 / (tp + fn_) as f64;
            Some(SeverityRow {
                band: format!("{lo}-{hi}"),
                tp,
                fp,
                tn,
                fn_,
                f1: f1_score(precision, recall),
                precision,
                recall,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub fold_index: Option<usize>,
    pub n_subjects: usize,
    pub pr_auc: f64,
    pub roc_auc: f64,
    pub best_threshold: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub severity_rows: Vec<SeverityRow>,
}

pub fn evaluate(scored: &[ScoredSubject], fold_index: Option<usize>) -> Result<MetricsReport, EvalError> {
    let curve = pr_curve(scored)?;
    let op = best_f1(&curve);
    Ok(MetricsReport {
        fold_index,
        n_subjects: scored.len(),
        pr_auc: pr_auc(scored)?,
        roc_auc: roc_auc(scored)?,
        best_threshold: op.threshold,
        f1: op.f1,
        precision: op.precision,
        recall: op.recall,
        severity_rows: severity_report(scored, op.threshold),
    })
}

/// Mean and standard error (sample deviation over √k).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSe {
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
}

impl MeanSe {
    /// Unit-interval value rendered as a percentage, `79.65 ± 2.02`.
    pub fn percent(&self) -> String {
        format!("{:.2} ± {:.2}", self.mean * 100.0, self.stderr * 100.0)
    }
}

pub fn mean_se(values: &[f64]) -> Result<MeanSe, EvalError> {
    let k = values.len();
    if k < 2 {
        return Err(EvalError::TooFewFolds(k));
    }
    // shifted by the first value so identical folds give exactly zero spread
    let base = values[0];
    let mean = base + values.iter().map(|v| v - base).sum::<f64>() / k as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1) as f64;
    Ok(MeanSe { mean, stderr: var.sqrt() / (k as f64).sqrt(), n: k })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub folds: usize,
    pub pr_auc: MeanSe,
    pub roc_auc: MeanSe,
    pub f1: MeanSe,
    pub precision: MeanSe,
    pub recall: MeanSe,
}

pub fn aggregate_folds(reports: &[MetricsReport]) -> Result<AggregateReport, EvalError> {
    let pick = |f: fn(&MetricsReport) -> f64| mean_se(&reports.iter().map(f).collect::<Vec<_>>());
    Ok(AggregateReport {
        folds: reports.len(),
        pr_auc: pick(|r| r.pr_auc)?,
        roc_auc: pick(|r| r.roc_auc)?,
        f1: pick(|r| r.f1)?,
        precision: pick(|r| r.precision)?,
        recall: pick(|r| r.recall)?,
    })
}

/// Severity table in percent: `PHQ-8 | F1 | Precision | Recall`.
pub fn render_severity_table(rows: &[SeverityRow]) -> String {
    let mut out = format!("{:<8} {:>8} {:>10} {:>8}\n", "PHQ-8", "F1", "Precision", "Recall");
    for r in rows {
        let _ = writeln!(
            out,
            "{:<8} {:>8.2} {:>10.2} {:>8.2}",
            r.band,
            r.f1 * 100.0,
            r.precision * 100.0,
            r.recall * 100.0
        );
    }
    out
}

pub fn render_report(report: &MetricsReport) -> String {
    let mut out = String::new();
    if let Some(f) = report.fold_index {
        let _ = writeln!(out, "fold {f}");
    }
    let _ = writeln!(out, "subjects   {}", report.n_subjects);
    let _ = writeln!(out, "PR-AUC     {:.2}", report.pr_auc * 100.0);
    let _ = writeln!(out, "ROC-AUC    {:.2}", report.roc_auc * 100.0);
    let _ = writeln!(out, "threshold  {:.4}", report.best_threshold);
    out.push_str(&render_severity_table(&report.severity_rows));
    out
}

/// `threshold,x,y` rows for external plotting.
pub fn pr_curve_csv(curve: &[PrPoint]) -> String {
    let mut out = String::from("threshold,recall,precision\n");
    for p in curve {
        let _ = writeln!(out, "{},{},{}", p.threshold, p.recall, p.precision);
    }
    out
}

pub fn roc_curve_csv(curve: &[RocPoint]) -> String {
    let mut out = String::from("threshold,fpr,tpr\n");
    for p in curve {
        let _ = writeln!(out, "{},{},{}", p.threshold, p.fpr, p.tpr);
    }
    out
}
