//! Iterative multi-label stratification, k-fold assignment, repeated
//! holdouts and stratified subsampling.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Order-2 stratification only tracks pairs among this many most frequent labels.
pub const DEFAULT_PAIR_LABEL_CAP: usize = 200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratifyOptions {
    /// 1 for single labels, 2 to also track label pairs.
    pub order: u8,
    pub pair_label_cap: usize,
    pub seed: u64,
}

impl StratifyOptions {
    pub fn new(order: u8, seed: u64) -> Self {
        Self {
            order,
            pair_label_cap: DEFAULT_PAIR_LABEL_CAP,
            seed,
        }
    }
}

/// Integer part sizes summing to `n`, by largest remainder (ties to the lower index).
pub fn capacities(n: usize, ratios: &[f64]) -> Result<Vec<usize>> {
    let total: f64 = ratios.iter().sum();
    if ratios.is_empty() || ratios.iter().any(|r| !(*r >= 0.0)) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split ratios must be non-negative and sum to 1, got {ratios:?}")));
    }
    let exact: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut caps: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..ratios.len()).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let short = n - caps.iter().sum::<usize>();
    for &j in order.iter().take(short) {
        caps[j] += 1;
    }
    Ok(caps)
}

/// Stratification units carried by each sample: its positive labels, plus
/// (order 2) the pairs of positive labels among the most frequent ones.
fn sample_units(labels: &[Vec<u8>], opts: &StratifyOptions) -> Vec<Vec<usize>> {
    let n_labels = labels.first().map_or(0, Vec::len);
    let mut counts = vec![0usize; n_labels];
    for row in labels {
        for (l, &y) in row.iter().enumerate() {
            counts[l] += (y != 0) as usize;
        }
    }
    let mut by_freq: Vec<usize> = (0..n_labels).collect();
    by_freq.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    let top: BTreeSet<usize> = by_freq.into_iter().take(opts.pair_label_cap).collect();
    labels
        .iter()
        .map(|row| {
            let pos: Vec<usize> = (0..n_labels).filter(|&l| row[l] != 0).collect();
            let mut units = pos.clone();
            if opts.order >= 2 {
                let tp: Vec<usize> = pos.iter().copied().filter(|l| top.contains(l)).collect();
                for (i, &a) in tp.iter().enumerate() {
                    for &b in &tp[i + 1..] {
                        units.push(n_labels + a * n_labels + b);
                    }
                }
            }
            units
        })
        .collect()
}

/// Greedy iterative stratification into parts of exactly `caps` samples.
///
/// The unit (label or label pair) with the fewest unassigned carriers is
/// handled first; each carrier goes to the part with the largest remaining
/// demand for that unit, then the largest remaining capacity, then a seeded
/// random choice. Parts never exceed their capacity. Returns the part index
/// of every sample.
pub fn stratify_counts(labels: &[Vec<u8>], caps: &[usize], opts: &StratifyOptions) -> Result<Vec<usize>> {
    let n = labels.len();
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    if caps.iter().sum::<usize>() != n {
        return Err(Error::Config(format!("part sizes {caps:?} do not sum to {n}")));
    }
    if !(1..=2).contains(&opts.order) {
        return Err(Error::Config(format!("stratification order must be 1 or 2, got {}", opts.order)));
    }
    let width = labels[0].len();
    if labels.iter().any(|r| r.len() != width) {
        return Err(Error::Config("label rows have different lengths".into()));
    }
    let k = caps.len();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let units = sample_units(labels, opts);

    let mut carriers: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, us) in units.iter().enumerate() {
        for &u in us {
            carriers.entry(u).or_default().push(i);
        }
    }
    let ratios: Vec<f64> = caps.iter().map(|&c| c as f64 / n as f64).collect();
    let mut demand: BTreeMap<usize, Vec<f64>> = carriers
        .iter()
        .map(|(&u, s)| (u, ratios.iter().map(|r| r * s.len() as f64).collect()))
        .collect();
    let mut remaining: BTreeMap<usize, usize> = carriers.iter().map(|(&u, s)| (u, s.len())).collect();
    let mut queue: BTreeSet<(usize, usize)> = remaining.iter().map(|(&u, &c)| (c, u)).collect();
    let mut cap_left = caps.to_vec();
    let mut assign: Vec<Option<usize>> = vec![None; n];

    let pick = |cands: &[usize], rng: &mut ChaCha8Rng| cands[rng.random_range(0..cands.len())];

    while let Some(&(_, u)) = queue.iter().next() {
        queue.remove(&(remaining[&u], u));
        let mut todo: Vec<usize> = carriers[&u].iter().copied().filter(|&i| assign[i].is_none()).collect();
        todo.shuffle(&mut rng);
        for i in todo {
            let d = &demand[&u];
            let open: Vec<usize> = (0..k).filter(|&j| cap_left[j] > 0).collect();
            let best_d = open.iter().map(|&j| d[j]).fold(f64::NEG_INFINITY, f64::max);
            let tied: Vec<usize> = open.iter().copied().filter(|&j| d[j] == best_d).collect();
            let best_c = tied.iter().map(|&j| cap_left[j]).max().unwrap_or(0);
            let tied: Vec<usize> = tied.into_iter().filter(|&j| cap_left[j] == best_c).collect();
            let j = pick(&tied, &mut rng);
            assign[i] = Some(j);
            cap_left[j] -= 1;
            for &v in &units[i] {
                demand.get_mut(&v).expect("unit demand")[j] -= 1.0;
                let r = remaining.get_mut(&v).expect("unit count");
                if v != u {
                    queue.remove(&(*r, v));
                    if *r > 1 {
                        queue.insert((*r - 1, v));
                    }
                }
                *r -= 1;
            }
        }
    }
    let mut rest: Vec<usize> = (0..n).filter(|&i| assign[i].is_none()).collect();
    rest.shuffle(&mut rng);
    for i in rest {
        let best_c = *cap_left.iter().max().expect("parts");
        let tied: Vec<usize> = (0..k).filter(|&j| cap_left[j] == best_c).collect();
        let j = pick(&tied, &mut rng);
        assign[i] = Some(j);
        cap_left[j] -= 1;
    }
    Ok(assign.into_iter().map(|a| a.expect("all assigned")).collect())
}

/// Stratified partition by ratios; sizes are within one sample of `ratio * n`.
pub fn iterative_stratified_split(labels: &[Vec<u8>], ratios: &[f64], opts: &StratifyOptions) -> Result<Vec<usize>> {
    if labels.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let caps = capacities(labels.len(), ratios)?;
    stratify_counts(labels, &caps, opts)
}

/// Fold index in `0..k` for every sample.
pub fn kfold(labels: &[Vec<u8>], k: usize, opts: &StratifyOptions) -> Result<Vec<usize>> {
    if k == 0 || labels.len() < k {
        return Err(Error::DatasetTooSmall {
            have: labels.len(),
            need: k.max(1),
        });
    }
    iterative_stratified_split(labels, &vec![1.0 / k as f64; k], opts)
}

/// Mean over labels and parts of `|positives_in_part / part_size - global rate|`.
pub fn label_proportion_deviation(labels: &[Vec<u8>], assign: &[usize], parts: usize) -> f64 {
    let n = labels.len();
    let width = labels.first().map_or(0, Vec::len);
    let mut sizes = vec![0usize; parts];
    let mut pos = vec![vec![0usize; width]; parts];
    let mut total = vec![0usize; width];
    for (row, &j) in labels.iter().zip(assign) {
        sizes[j] += 1;
        for (l, &y) in row.iter().enumerate() {
            if y != 0 {
                pos[j][l] += 1;
                total[l] += 1;
            }
        }
    }
    let mut sum = 0.0;
    let mut cnt = 0usize;
    for l in 0..width {
        let global = total[l] as f64 / n as f64;
        for j in (0..parts).filter(|&j| sizes[j] > 0) {
            sum += (pos[j][l] as f64 / sizes[j] as f64 - global).abs();
            cnt += 1;
        }
    }
    if cnt == 0 {
        0.0
    } else {
        sum / cnt as f64
    }
}

/// Uniform random partition with the same part sizes as `ratios` would give.
pub fn random_split(n: usize, ratios: &[f64], seed: u64) -> Result<Vec<usize>> {
    let caps = capacities(n, ratios)?;
    let mut assign: Vec<usize> = caps.iter().enumerate().flat_map(|(j, &c)| std::iter::repeat_n(j, c)).collect();
    assign.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(assign)
}

/// Seeded uniform train/test splits. Split `i` depends only on `(seed, i)`.
pub fn repeated_splits(n: usize, splits: usize, ratio: f64, seed: u64) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    if n < 5 {
        return Err(Error::DatasetTooSmall { have: n, need: 5 });
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("train ratio must be in (0, 1), got {ratio}")));
    }
    let n_train = ((ratio * n as f64).round() as usize).clamp(1, n - 1);
    Ok((0..splits)
        .map(|s| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(s as u64);
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut rng);
            let test = idx.split_off(n_train);
            (idx, test)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subsample {
    /// Indices into the input rows, ascending.
    pub selected: Vec<usize>,
    /// Labels with positives in the input but none in the subset.
    pub lost_labels: Vec<usize>,
}

fn lost_labels(labels: &[Vec<u8>], selected: &[usize]) -> Vec<usize> {
    let width = labels.first().map_or(0, Vec::len);
    (0..width)
        .filter(|&l| labels.iter().any(|r| r[l] != 0) && selected.iter().all(|&i| labels[i][l] == 0))
        .collect()
}

fn take_stratified(labels: &[Vec<u8>], pool: &[usize], count: usize, opts: &StratifyOptions) -> Result<Vec<usize>> {
    if count >= pool.len() {
        return Ok(pool.to_vec());
    }
    let rows: Vec<Vec<u8>> = pool.iter().map(|&i| labels[i].clone()).collect();
    let assign = stratify_counts(&rows, &[count, pool.len() - count], opts)?;
    Ok(pool.iter().zip(&assign).filter(|(_, &a)| a == 0).map(|(&i, _)| i).collect())
}

/// Stratified subset of `ceil(fraction * n)` rows.
pub fn subsample_fraction(labels: &[Vec<u8>], fraction: f64, opts: &StratifyOptions) -> Result<Subsample> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("fraction must be in (0, 1], got {fraction}")));
    }
    if labels.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let pool: Vec<usize> = (0..labels.len()).collect();
    let count = (fraction * labels.len() as f64).ceil() as usize;
    let selected = take_stratified(labels, &pool, count, opts)?;
    Ok(Subsample {
        lost_labels: lost_labels(labels, &selected),
        selected,
    })
}

/// One stratified subset per fraction, each contained in the subset of every
/// larger fraction. Output follows the input order of `fractions`.
pub fn nested_subsamples(labels: &[Vec<u8>], fractions: &[f64], opts: &StratifyOptions) -> Result<Vec<Subsample>> {
    if labels.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if let Some(f) = fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
        return Err(Error::Config(format!("fraction must be in (0, 1], got {f}")));
    }
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    order.sort_by(|&a, &b| fractions[b].total_cmp(&fractions[a]));
    let mut pool: Vec<usize> = (0..labels.len()).collect();
    let mut out: Vec<Option<Subsample>> = vec![None; fractions.len()];
    for (step, &f) in order.iter().enumerate() {
        let count = (fractions[f] * labels.len() as f64).ceil() as usize;
        let step_opts = StratifyOptions {
            seed: opts.seed.wrapping_add(step as u64),
            ..opts.clone()
        };
        pool = take_stratified(labels, &pool, count, &step_opts)?;
        out[f] = Some(Subsample {
            lost_labels: lost_labels(labels, &pool),
            selected: pool.clone(),
        });
    }
    Ok(out.into_iter().map(|s| s.expect("every fraction visited")).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Assignment {
    Test,
    Fold(usize),
}

impl fmt::Display for Assignment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Assignment::Test => write!(f, "test"),
            Assignment::Fold(k) => write!(f, "fold_{k}"),
        }
    }
}

impl FromStr for Assignment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "test" {
            return Ok(Assignment::Test);
        }
        s.strip_prefix("fold_")
            .and_then(|k| k.parse().ok())
            .map(Assignment::Fold)
            .ok_or_else(|| Error::Config(format!("unknown split assignment `{s}`")))
    }
}

/// Held-out test set plus k folds over the remaining pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub ids: Vec<String>,
    pub assignments: Vec<Assignment>,
    pub seed: u64,
    pub order: u8,
}

impl SplitPlan {
    /// Stratified test split of `test_ratio`, then `k` stratified folds of the rest.
    pub fn build(ids: &[String], labels: &[Vec<u8>], test_ratio: f64, k: usize, opts: &StratifyOptions) -> Result<Self> {
        if ids.len() != labels.len() {
            return Err(Error::Shape {
                op: "split_plan",
                lhs: vec![ids.len()],
                rhs: vec![labels.len()],
            });
        }
        let outer = if test_ratio > 0.0 {
            iterative_stratified_split(labels, &[test_ratio, 1.0 - test_ratio], opts)?
        } else {
            vec![1; labels.len()]
        };
        let pool: Vec<usize> = (0..labels.len()).filter(|&i| outer[i] == 1).collect();
        let pool_rows: Vec<Vec<u8>> = pool.iter().map(|&i| labels[i].clone()).collect();
        let inner_opts = StratifyOptions {
            seed: opts.seed.wrapping_add(1),
            ..opts.clone()
        };
        let folds = kfold(&pool_rows, k, &inner_opts)?;
        let mut assignments = vec![Assignment::Test; labels.len()];
        for (p, &i) in pool.iter().enumerate() {
            assignments[i] = Assignment::Fold(folds[p]);
        }
        Ok(Self {
            ids: ids.to_vec(),
            assignments,
            seed: opts.seed,
            order: opts.order,
        })
    }

    pub fn n_folds(&self) -> usize {
        self.assignments
            .iter()
            .filter_map(|a| match a {
                Assignment::Fold(k) => Some(k + 1),
                Assignment::Test => None,
            })
            .max()
            .unwrap_or(0)
    }

    pub fn indices(&self, which: Assignment) -> Vec<usize> {
        (0..self.ids.len()).filter(|&i| self.assignments[i] == which).collect()
    }

    /// Fold index per pool sample and the pool's row indices.
    pub fn fold_vector(&self) -> (Vec<usize>, Vec<usize>) {
        let mut pool = Vec::new();
        let mut folds = Vec::new();
        for (i, a) in self.assignments.iter().enumerate() {
            if let Assignment::Fold(k) = a {
                pool.push(i);
                folds.push(*k);
            }
        }
        (folds, pool)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["id", "assignment"])?;
        for (id, a) in self.ids.iter().zip(&self.assignments) {
            out.write_record([id.as_str(), &a.to_string()])?;
        }
        out.flush()?;
        Ok(())
    }

    /// Reads `id,assignment` rows. Seed and order are not stored in the CSV.
    pub fn read_csv<R: Read>(r: R, seed: u64, order: u8) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let headers = rd.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["id", "assignment"] {
            return Err(Error::Load {
                source_name: "split plan".into(),
                message: format!("expected header `id,assignment`, got `{}`", headers.iter().collect::<Vec<_>>().join(",")),
            });
        }
        let mut ids = Vec::new();
        let mut assignments = Vec::new();
        let mut seen = BTreeSet::new();
        for rec in rd.records() {
            let rec = rec?;
            let id = rec[0].to_string();
            if !seen.insert(id.clone()) {
                return Err(Error::Load {
                    source_name: "split plan".into(),
                    message: format!("duplicate id `{id}`"),
                });
            }
            ids.push(id);
            assignments.push(rec[1].parse()?);
        }
        Ok(Self {
            ids,
            assignments,
            seed,
            order,
        })
    }
}
