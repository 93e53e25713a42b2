use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use super::midranks;
use crate::error::{Error, Result};

/// Largest effective sample size enumerated exactly when ties are present.
const EXACT_LIMIT: usize = 12;
/// Largest tie-free sample size handled by the exact null distribution.
const EXACT_TIE_FREE_LIMIT: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WilcoxonMethod {
    /// Full enumeration of all sign assignments.
    Exact,
    /// Exact null distribution of the integer rank sum (no ties).
    ExactTieFree,
    /// Normal approximation with tie correction and continuity correction.
    Normal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// `min(W+, W-)`.
    pub w: f64,
    pub w_plus: f64,
    pub w_minus: f64,
    /// Pairs remaining after zero differences are dropped.
    pub n_effective: usize,
    pub zeros_dropped: usize,
    /// Two-sided.
    pub p_value: f64,
    pub method: WilcoxonMethod,
}

/// Two-sided Wilcoxon signed-rank test on paired samples.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<WilcoxonResult> {
    if a.len() != b.len() {
        return Err(Error::Shape {
            op: "wilcoxon_signed_rank",
            lhs: vec![a.len()],
            rhs: vec![b.len()],
        });
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|d| *d != 0.0).collect();
    let zeros_dropped = a.len() - diffs.len();
    let n = diffs.len();
    if n == 0 {
        return Err(Error::DegenerateTest("all paired differences are zero".into()));
    }
    let abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let ranks = midranks(&abs);
    // doubled ranks are integers
    let r2: Vec<u64> = ranks.iter().map(|r| (2.0 * r) as u64).collect();
    let wp2: u64 = r2.iter().zip(&diffs).filter(|(_, d)| **d > 0.0).map(|(r, _)| r).sum();
    let total2: u64 = r2.iter().sum();
    let wm2 = total2 - wp2;
    let w2 = wp2.min(wm2);
    let ties = ranks.iter().any(|r| r.fract() != 0.0) || has_tied_values(&abs);

    let (p_value, method) = if n <= EXACT_LIMIT {
        let mut count: u64 = 0;
        for mask in 0u32..(1 << n) {
            let plus: u64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| r2[i]).sum();
            if plus.min(total2 - plus) <= w2 {
                count += 1;
            }
        }
        (count as f64 / (1u64 << n) as f64, WilcoxonMethod::Exact)
    } else if !ties && n <= EXACT_TIE_FREE_LIMIT {
        (exact_tie_free_p(n, w2 / 2), WilcoxonMethod::ExactTieFree)
    } else {
        if n < 5 {
            return Err(Error::DegenerateTest(format!("normal approximation needs n >= 5, got {n}")));
        }
        let nf = n as f64;
        let mean = nf * (nf + 1.0) / 4.0;
        let tie_term: f64 = tie_groups(&abs).iter().map(|&t| (t * t * t - t) as f64).sum::<f64>() / 48.0;
        let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term;
        if var <= 0.0 {
            return Err(Error::DegenerateTest("zero variance under the null".into()));
        }
        let w = w2 as f64 / 2.0;
        let z = ((mean - w).abs() - 0.5).max(0.0) / var.sqrt();
        let normal = Normal::new(0.0, 1.0).expect("standard normal");
        ((2.0 * (1.0 - normal.cdf(z))).min(1.0), WilcoxonMethod::Normal)
    };
    Ok(WilcoxonResult {
        w: w2 as f64 / 2.0,
        w_plus: wp2 as f64 / 2.0,
        w_minus: wm2 as f64 / 2.0,
        n_effective: n,
        zeros_dropped,
        p_value: p_value.min(1.0),
        method,
    })
}

fn has_tied_values(v: &[f64]) -> bool {
    tie_groups(v).iter().any(|&t| t > 1)
}

fn tie_groups(v: &[f64]) -> Vec<u64> {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let mut groups = Vec::new();
    let mut i = 0;
    while i < s.len() {
        let mut j = i + 1;
        while j < s.len() && s[j] == s[i] {
            j += 1;
        }
        groups.push((j - i) as u64);
        i = j;
    }
    groups
}

/// `P(min(W+, W-) <= w)` for ranks `1..=n` without ties.
fn exact_tie_free_p(n: usize, w: u64) -> f64 {
    let total = n * (n + 1) / 2;
    // counts[s] = number of subsets of {1..n} summing to s
    let mut counts = vec![0f64; total + 1];
    counts[0] = 1.0;
    for r in 1..=n {
        for s in (r..=total).rev() {
            counts[s] += counts[s - r];
        }
    }
    let all = 2f64.powi(n as i32);
    let lower: f64 = counts[..=(w as usize).min(total)].iter().sum();
    (2.0 * lower / all).min(1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub replicates: usize,
    pub level: f64,
    pub seed: u64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            replicates: 10_000,
            level: 0.95,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapCi {
    pub lo: f64,
    pub hi: f64,
    /// Statistic on the full sample.
    pub point: f64,
    pub level: f64,
    pub replicates: usize,
    /// Resamples on which the statistic was undefined and that were redrawn.
    pub redrawn: usize,
    pub warning: Option<String>,
}

const MAX_REDRAWS: usize = 1000;

/// Linear-interpolation percentile of sorted data, `q` in [0, 1].
pub(crate) fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Percentile bootstrap over `n` items. `statistic` receives resampled
/// indices and may return `None` when undefined; such resamples are redrawn.
/// Replicate `r` draws from its own ChaCha stream, so results do not depend
/// on scheduling.
pub fn bootstrap_ci<F>(n: usize, statistic: F, cfg: &BootstrapConfig) -> Result<BootstrapCi>
where
    F: Fn(&[usize]) -> Option<f64> + Sync,
{
    if n < 2 {
        return Err(Error::DatasetTooSmall { have: n, need: 2 });
    }
    if !(cfg.level > 0.0 && cfg.level < 1.0) || cfg.replicates < 2 {
        return Err(Error::Config("bootstrap needs level in (0, 1) and at least 2 replicates".into()));
    }
    let all: Vec<usize> = (0..n).collect();
    let point = statistic(&all).ok_or_else(|| Error::UndefinedMetric("statistic undefined on the full sample".into()))?;
    let draws = (0..cfg.replicates)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(r as u64);
            let mut idx = vec![0usize; n];
            for attempt in 0..MAX_REDRAWS {
                idx.iter_mut().for_each(|i| *i = rng.random_range(0..n));
                if let Some(v) = statistic(&idx) {
                    return Ok((v, attempt));
                }
            }
            Err(Error::UndefinedMetric(format!(
                "statistic undefined on {MAX_REDRAWS} consecutive resamples"
            )))
        })
        .collect::<Result<Vec<_>>>()?;
    let redrawn: usize = draws.iter().map(|d| d.1).sum();
    let mut values: Vec<f64> = draws.into_iter().map(|d| d.0).collect();
    values.sort_by(f64::total_cmp);
    let alpha = (1.0 - cfg.level) / 2.0;
    let warning = (redrawn as f64 > 0.01 * cfg.replicates as f64)
        .then(|| format!("{redrawn} undefined resamples redrawn ({} replicates)", cfg.replicates));
    if let Some(w) = &warning {
        log::warn!("bootstrap: {w}");
    }
    Ok(BootstrapCi {
        lo: percentile_sorted(&values, alpha),
        hi: percentile_sorted(&values, 1.0 - alpha),
        point,
        level: cfg.level,
        replicates: cfg.replicates,
        redrawn,
        warning,
    })
}

/// Bootstrap interval for the mean of `values`.
pub fn bootstrap_mean(values: &[f64], cfg: &BootstrapConfig) -> Result<BootstrapCi> {
    bootstrap_ci(
        values.len(),
        |idx| Some(idx.iter().map(|&i| values[i]).sum::<f64>() / idx.len() as f64),
        cfg,
    )
}

/// Assigns each label to one of `n_bins` frequency bins whose edges are the
/// quantiles of the positive counts among labels with at least one positive.
/// Labels without positives get `None`. Returns assignments and the interior
/// edges.
pub fn frequency_bins(positive_counts: &[usize], n_bins: usize) -> (Vec<Option<usize>>, Vec<f64>) {
    let mut freqs: Vec<f64> = positive_counts.iter().filter(|&&c| c > 0).map(|&c| c as f64).collect();
    if freqs.is_empty() || n_bins == 0 {
        return (vec![None; positive_counts.len()], Vec::new());
    }
    freqs.sort_by(f64::total_cmp);
    let edges: Vec<f64> = (1..n_bins)
        .map(|i| percentile_sorted(&freqs, i as f64 / n_bins as f64))
        .collect();
    let bins = positive_counts
        .iter()
        .map(|&c| (c > 0).then(|| edges.iter().filter(|&&e| (c as f64) > e).count()))
        .collect();
    (bins, edges)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairTest {
    pub model_a: String,
    pub model_b: String,
    pub n_labels: usize,
    pub result: Option<WilcoxonResult>,
    /// Why the test was not run, when it was not.
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinSummary {
    pub bin: usize,
    pub labels: Vec<String>,
    /// Per model: mean AUC over labels with a defined AUC.
    pub means: Vec<Option<f64>>,
    /// Per model: standard error of the mean.
    pub sems: Vec<Option<f64>>,
    pub tests: Vec<PairTest>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyBinReport {
    pub models: Vec<String>,
    pub edges: Vec<f64>,
    pub bins: Vec<BinSummary>,
    /// Labels with no training positives (not binned).
    pub unbinned: Vec<String>,
}

/// Per-label AUCs of several models summarized within label-frequency bins,
/// with a Wilcoxon test between every pair of models inside each bin.
pub fn frequency_bin_report(
    models: &[(String, Vec<Option<f64>>)],
    label_names: &[String],
    train_positive_counts: &[usize],
    n_bins: usize,
) -> Result<FrequencyBinReport> {
    if models.len() < 2 {
        return Err(Error::Config("frequency bin report needs at least two models".into()));
    }
    let n_labels = label_names.len();
    if train_positive_counts.len() != n_labels || models.iter().any(|m| m.1.len() != n_labels) {
        return Err(Error::Shape {
            op: "frequency_bin_report",
            lhs: vec![n_labels],
            rhs: vec![train_positive_counts.len()],
        });
    }
    let (assign, edges) = frequency_bins(train_positive_counts, n_bins);
    let mut bins = Vec::with_capacity(n_bins);
    for b in 0..n_bins {
        let members: Vec<usize> = (0..n_labels).filter(|&l| assign[l] == Some(b)).collect();
        let mut means = Vec::new();
        let mut sems = Vec::new();
        for (_, aucs) in models {
            let vals: Vec<f64> = members.iter().filter_map(|&l| aucs[l]).collect();
            let (m, s) = mean_sem(&vals);
            means.push(m);
            sems.push(s);
        }
        let mut tests = Vec::new();
        for i in 0..models.len() {
            for j in i + 1..models.len() {
                let shared: Vec<(f64, f64)> = members
                    .iter()
                    .filter_map(|&l| Some((models[i].1[l]?, models[j].1[l]?)))
                    .collect();
                let (a, bb): (Vec<f64>, Vec<f64>) = shared.iter().copied().unzip();
                let (result, note) = if shared.len() < 2 {
                    (None, Some(format!("{} shared labels; test skipped", shared.len())))
                } else {
                    match wilcoxon_signed_rank(&a, &bb) {
                        Ok(r) => (Some(r), None),
                        Err(e) => (None, Some(e.to_string())),
                    }
                };
                tests.push(PairTest {
                    model_a: models[i].0.clone(),
                    model_b: models[j].0.clone(),
                    n_labels: shared.len(),
                    result,
                    note,
                });
            }
        }
        bins.push(BinSummary {
            bin: b,
            labels: members.iter().map(|&l| label_names[l].clone()).collect(),
            means,
            sems,
            tests,
        });
    }
    Ok(FrequencyBinReport {
        models: models.iter().map(|m| m.0.clone()).collect(),
        edges,
        bins,
        unbinned: (0..n_labels)
            .filter(|&l| assign[l].is_none())
            .map(|l| label_names[l].clone())
            .collect(),
    })
}

fn mean_sem(v: &[f64]) -> (Option<f64>, Option<f64>) {
    if v.is_empty() {
        return (None, None);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (Some(m), None);
    }
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (Some(m), Some((var / n).sqrt()))
}
