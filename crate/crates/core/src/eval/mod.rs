//! Ranking metrics for multi-label prediction and the statistics used to
//! compare models.

mod stats;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use stats::{
    bootstrap_ci, bootstrap_mean, frequency_bin_report, frequency_bins, wilcoxon_signed_rank, BinSummary,
    BootstrapCi, BootstrapConfig, FrequencyBinReport, PairTest, WilcoxonMethod, WilcoxonResult,
};

/// Midranks (1-based) of `values`; tied values share their average rank.
pub fn midranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i + 1;
        while j < idx.len() && values[idx[j]] == values[idx[i]] {
            j += 1;
        }
        // positions i..j hold ranks i+1..=j
        let r = (i + 1 + j) as f64 / 2.0;
        for &k in &idx[i..j] {
            ranks[k] = r;
        }
        i = j;
    }
    ranks
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half. `None` when either class is absent.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len(), "roc_auc: length mismatch");
    let pos = labels.iter().filter(|&&y| y != 0).count() as u64;
    let neg = labels.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    // doubled rank sum keeps everything integral
    let ranks = midranks(scores);
    let r2: u64 = ranks
        .iter()
        .zip(labels)
        .filter(|(_, &y)| y != 0)
        .map(|(r, _)| (2.0 * r) as u64)
        .sum();
    let u2 = r2 - pos * (pos + 1);
    Some((u2 as f64 / 2.0) / (pos * neg) as f64)
}

/// AUC over every (sample, label) cell pooled together.
pub fn micro_auc(scores: &[Vec<f64>], labels: &[Vec<u8>]) -> Option<f64> {
    let s: Vec<f64> = scores.iter().flatten().copied().collect();
    let y: Vec<u8> = labels.iter().flatten().copied().collect();
    roc_auc(&s, &y)
}

fn column<T: Copy>(rows: &[Vec<T>], l: usize) -> Vec<T> {
    rows.iter().map(|r| r[l]).collect()
}

/// Per-label AUC; `None` for labels with a single class present.
pub fn per_label_auc(scores: &[Vec<f64>], labels: &[Vec<u8>]) -> Vec<Option<f64>> {
    let n_labels = labels.first().map_or(0, Vec::len);
    (0..n_labels)
        .map(|l| roc_auc(&column(scores, l), &column(labels, l)))
        .collect()
}

/// Per-label AUC averaged with weights equal to each label's positive count.
pub fn weighted_auc(scores: &[Vec<f64>], labels: &[Vec<u8>]) -> Option<f64> {
    let aucs = per_label_auc(scores, labels);
    let mut num = 0.0;
    let mut den = 0.0;
    for (l, auc) in aucs.iter().enumerate() {
        if let Some(a) = auc {
            let w = labels.iter().filter(|r| r[l] != 0).count() as f64;
            num += w * a;
            den += w;
        }
    }
    (den > 0.0).then(|| num / den)
}

/// Hits among the `k` highest scores divided by `min(k, positives)`. Ties in
/// score go to the lower label index. `None` without positives.
pub fn adjusted_precision_at_k(scores: &[f64], labels: &[u8], k: usize) -> Option<f64> {
    let positives = labels.iter().filter(|&&y| y != 0).count();
    if positives == 0 || k == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let hits = idx.iter().take(k).filter(|&&i| labels[i] != 0).count();
    Some(hits as f64 / k.min(positives) as f64)
}

/// Mean adjusted precision over samples with at least one positive, and the
/// number of samples excluded.
pub fn mean_adjusted_precision_at_k(scores: &[Vec<f64>], labels: &[Vec<u8>], k: usize) -> (Option<f64>, usize) {
    let vals: Vec<Option<f64>> = scores
        .iter()
        .zip(labels)
        .map(|(s, y)| adjusted_precision_at_k(s, y, k))
        .collect();
    let kept: Vec<f64> = vals.iter().flatten().copied().collect();
    let excluded = vals.len() - kept.len();
    let mean = (!kept.is_empty()).then(|| kept.iter().sum::<f64>() / kept.len() as f64);
    (mean, excluded)
}

/// Two-pass Pearson correlation; `None` for constant input or `n < 2`.
pub fn pearson_r(x: &[f64], y: &[f64]) -> Option<f64> {
    assert_eq!(x.len(), y.len(), "pearson_r: length mismatch");
    let n = x.len();
    if n < 2 {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Classification metrics for one evaluated set. Values are fractions in
/// [0, 1]; use [`percent`] for table formatting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub micro_auc: Option<f64>,
    pub weighted_auc: Option<f64>,
    pub adj_p_at_k: Option<f64>,
    pub k: usize,
    pub per_label_auc: BTreeMap<String, Option<f64>>,
    pub skipped_labels: Vec<String>,
    pub samples_without_positives: usize,
}

pub fn evaluate_multilabel(
    scores: &[Vec<f64>],
    labels: &[Vec<u8>],
    label_names: &[String],
    k: usize,
) -> Result<MetricReport> {
    if scores.len() != labels.len() || scores.iter().zip(labels).any(|(s, y)| s.len() != y.len()) {
        return Err(Error::Shape {
            op: "evaluate_multilabel",
            lhs: vec![scores.len(), scores.first().map_or(0, Vec::len)],
            rhs: vec![labels.len(), labels.first().map_or(0, Vec::len)],
        });
    }
    if labels.first().is_some_and(|r| r.len() != label_names.len()) {
        return Err(Error::Config("label name count does not match label columns".into()));
    }
    let aucs = per_label_auc(scores, labels);
    let per_label_auc: BTreeMap<String, Option<f64>> = label_names.iter().cloned().zip(aucs.iter().copied()).collect();
    let skipped_labels = label_names
        .iter()
        .zip(&aucs)
        .filter(|(_, a)| a.is_none())
        .map(|(n, _)| n.clone())
        .collect();
    let (adj, excluded) = mean_adjusted_precision_at_k(scores, labels, k);
    Ok(MetricReport {
        micro_auc: micro_auc(scores, labels),
        weighted_auc: weighted_auc(scores, labels),
        adj_p_at_k: adj,
        k,
        per_label_auc,
        skipped_labels,
        samples_without_positives: excluded,
    })
}

/// `x` as a percentage with two decimals, e.g. `0.89987 -> "89.99"`.
pub fn percent(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}
