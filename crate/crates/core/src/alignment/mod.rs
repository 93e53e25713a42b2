//! Contrastive spectrum-structure alignment and the two ablation objectives.

mod masked;
mod supervised;

use std::collections::BTreeSet;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{build_peak_tokens, encode_batch, EncodedBatch, EncoderConfig, PeakTokens};
use crate::error::{Error, Result};
use crate::ms_data::{EmbeddingTable, MassSpectrum};
use crate::tensor::{finite_difference_check_with, Adam, GradCheck, Graph, ParamStore, Stencil, Tensor, Var};

pub use masked::{init_mlm_head, masked_reconstruction_loss, train_masked_reconstruction, MaskedConfig};
pub use supervised::{predict_supervised, train_supervised_e2e, SupervisedConfig, SupervisedEpoch, SupervisedResult};

/// Cosine similarities between the rows of `u` and `v`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    n: usize,
    m: usize,
    values: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn n_rows(&self) -> usize {
        self.n
    }

    pub fn n_cols(&self) -> usize {
        self.m
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.m + j]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn from_values(n: usize, m: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n * m {
            return Err(Error::Shape {
                op: "similarity_matrix",
                lhs: vec![n, m],
                rhs: vec![values.len()],
            });
        }
        Ok(Self { n, m, values })
    }
}

/// Unit-normalizes both row sets and returns `U V^T`.
pub fn similarity_matrix(u: &[Vec<f64>], v: &[Vec<f64>]) -> Result<SimilarityMatrix> {
    let mut g = Graph::new();
    let uu = g.constant(Tensor::from_rows(u)?);
    let vv = g.constant(Tensor::from_rows(v)?);
    let s = similarity_graph(&mut g, uu, vv)?;
    SimilarityMatrix::from_values(u.len(), v.len(), g.value(s).data().to_vec())
}

/// Differentiable `normalize(U) normalize(V)^T`.
pub fn similarity_graph(g: &mut Graph, u: Var, v: Var) -> Result<Var> {
    let un = g.l2_normalize_rows(u)?;
    let vn = g.l2_normalize_rows(v)?;
    let vt = g.transpose(vn)?;
    g.matmul(un, vt)
}

/// Mean of the row-wise and column-wise cross-entropy of `s / tau` against
/// the diagonal.
pub fn contrastive_graph(g: &mut Graph, s: Var, tau: f64) -> Result<Var> {
    let t = g.value(s);
    if t.shape().len() != 2 || t.shape()[0] != t.shape()[1] {
        return Err(Error::Shape {
            op: "contrastive_loss",
            lhs: t.shape().to_vec(),
            rhs: vec![],
        });
    }
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    let n = t.shape()[0];
    let targets: Vec<usize> = (0..n).collect();
    let z = g.scale(s, 1.0 / tau);
    let rows = g.softmax_cross_entropy(z, &targets)?;
    let zt = g.transpose(z)?;
    let cols = g.softmax_cross_entropy(zt, &targets)?;
    let both = g.add(rows, cols)?;
    Ok(g.scale(both, 0.5))
}

pub fn contrastive_loss(s: &SimilarityMatrix, tau: f64) -> Result<f64> {
    let mut g = Graph::new();
    let v = g.constant(Tensor::matrix(s.n, s.m, s.values.clone())?);
    let l = contrastive_graph(&mut g, v, tau)?;
    Ok(g.value(l).item())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectBy {
    ValLoss,
    Recall1,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentConfig {
    pub batch: usize,
    pub tau: f64,
    pub lr_encoder: f64,
    pub lr_projection: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub val_fraction: f64,
    pub select_by: SelectBy,
    pub seed: u64,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        Self {
            batch: 512,
            tau: 0.03,
            lr_encoder: 1e-4,
            lr_projection: 1e-3,
            max_epochs: 50,
            patience: 5,
            val_fraction: 0.05,
            select_by: SelectBy::ValLoss,
            seed: 0,
        }
    }
}

impl AlignmentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch < 2 {
            return Err(Error::Config(format!("batch size must be at least 2, got {}", self.batch)));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.tau)));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::Config(format!("val_fraction must be in (0, 1), got {}", self.val_fraction)));
        }
        if !(self.lr_encoder > 0.0 && self.lr_projection > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        Ok(())
    }

    pub fn optimizer(&self) -> Adam {
        Adam::new(self.lr_projection)
            .with_group("enc.", self.lr_encoder)
            .with_group("proj.", self.lr_projection)
    }
}

/// One spectrum with its frozen structure vector.
#[derive(Debug, Clone, Copy)]
pub struct AlignmentPair<'a> {
    pub spectrum: &'a MassSpectrum,
    pub target: &'a [f64],
}

/// Joins spectra to structure vectors by compound id. Returns the pairs and
/// the ids without a structure vector.
pub fn build_pairs<'a>(spectra: &'a [MassSpectrum], structs: &'a EmbeddingTable) -> (Vec<AlignmentPair<'a>>, Vec<String>) {
    let mut pairs = Vec::new();
    let mut missing = Vec::new();
    for s in spectra {
        match structs.get(&s.compound_id) {
            Some(v) => pairs.push(AlignmentPair { spectrum: s, target: v }),
            None => missing.push(s.compound_id.clone()),
        }
    }
    (pairs, missing)
}

/// Holds out `fraction` of the distinct ids (at least one). Every index of
/// a held-out id goes to the second list.
pub fn split_by_id(ids: &[&str], fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut unique: Vec<&str> = ids.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    unique.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let k = ((unique.len() as f64 * fraction).ceil() as usize).clamp(1, unique.len().saturating_sub(1).max(1));
    let held: BTreeSet<&str> = unique[..k].iter().copied().collect();
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (i, id) in ids.iter().enumerate() {
        if held.contains(id) {
            val.push(i);
        } else {
            train.push(i);
        }
    }
    (train, val)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_recall1: f64,
}

pub fn write_history_csv<W: Write>(history: &[EpochRecord], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["epoch", "train_loss", "val_loss"])?;
    for r in history {
        out.write_record([r.epoch.to_string(), r.train_loss.to_string(), r.val_loss.to_string()])?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct AlignmentResult {
    /// Parameters from the best validation epoch.
    pub params: ParamStore,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub tau: f64,
}

impl AlignmentResult {
    pub fn best(&self) -> &EpochRecord {
        &self.history[self.best_epoch]
    }
}

pub(crate) struct Prepared {
    pub tokens: Vec<PeakTokens>,
}

pub(crate) fn tokenize(spectra: &[&MassSpectrum], cfg: &EncoderConfig) -> Result<Prepared> {
    let tokens = spectra
        .iter()
        .map(|s| build_peak_tokens(s, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(Prepared { tokens })
}

pub(crate) fn batch_of(tokens: &[PeakTokens], idx: &[usize]) -> Result<EncodedBatch> {
    let picked: Vec<PeakTokens> = idx.iter().map(|&i| tokens[i].clone()).collect();
    EncodedBatch::from_tokens(&picked)
}

fn targets_of(pairs: &[AlignmentPair<'_>], idx: &[usize]) -> Result<Tensor> {
    let rows: Vec<Vec<f64>> = idx.iter().map(|&i| pairs[i].target.to_vec()).collect();
    Tensor::from_rows(&rows)
}

/// Whether `candidate` beats `best` under the selection rule.
pub(crate) fn improves(select: SelectBy, candidate: &EpochRecord, best: Option<&EpochRecord>) -> bool {
    match best {
        None => true,
        Some(b) => match select {
            SelectBy::ValLoss => candidate.val_loss < b.val_loss,
            SelectBy::Recall1 => candidate.val_recall1 > b.val_recall1,
        },
    }
}

/// Evaluation-mode loss and retrieval recall@1 over a held-out index set.
/// The loss is averaged over consecutive chunks of `batch`, weighted by chunk
/// size; a final partial chunk is kept.
pub fn evaluate_alignment(
    pairs: &[AlignmentPair<'_>],
    tokens: &[PeakTokens],
    idx: &[usize],
    store: &ParamStore,
    enc: &EncoderConfig,
    batch: usize,
    tau: f64,
) -> Result<(f64, f64)> {
    if idx.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut total = 0.0;
    let mut u_all: Vec<Vec<f64>> = Vec::with_capacity(idx.len());
    for chunk in idx.chunks(batch) {
        let mut g = Graph::new();
        let eb = batch_of(tokens, chunk)?;
        let u = encode_batch(&mut g, store, enc, &eb)?;
        let v = g.constant(targets_of(pairs, chunk)?);
        let s = similarity_graph(&mut g, u, v)?;
        let l = contrastive_graph(&mut g, s, tau)?;
        total += g.value(l).item() * chunk.len() as f64;
        u_all.extend(g.value(u).to_rows());
    }
    let v_all: Vec<Vec<f64>> = idx.iter().map(|&i| pairs[i].target.to_vec()).collect();
    let sim = similarity_matrix(&u_all, &v_all)?;
    let ids: Vec<&str> = idx.iter().map(|&i| pairs[i].spectrum.compound_id.as_str()).collect();
    let hits = (0..idx.len())
        .filter(|&i| {
            let mut best = 0;
            for j in 1..idx.len() {
                if sim.get(i, j) > sim.get(i, best) {
                    best = j;
                }
            }
            ids[best] == ids[i]
        })
        .count();
    Ok((total / idx.len() as f64, hits as f64 / idx.len() as f64))
}

/// Trains the encoder and projection against frozen structure vectors.
///
/// A shard of compound ids is held out for validation. Training stops after
/// `patience` epochs without improvement and the best epoch's parameters are
/// returned.
pub fn train_alignment(
    pairs: &[AlignmentPair<'_>],
    enc: &EncoderConfig,
    cfg: &AlignmentConfig,
    init: ParamStore,
) -> Result<AlignmentResult> {
    cfg.validate()?;
    enc.validate()?;
    if pairs.len() < 2 * cfg.batch {
        return Err(Error::DatasetTooSmall {
            have: pairs.len(),
            need: 2 * cfg.batch,
        });
    }
    if let Some(p) = pairs.iter().find(|p| p.target.len() != enc.proj_dim) {
        return Err(Error::Shape {
            op: "train_alignment",
            lhs: vec![p.target.len()],
            rhs: vec![enc.proj_dim],
        });
    }
    let ids: Vec<&str> = pairs.iter().map(|p| p.spectrum.compound_id.as_str()).collect();
    let (train_idx, val_idx) = split_by_id(&ids, cfg.val_fraction, cfg.seed);
    if train_idx.len() < cfg.batch {
        return Err(Error::DatasetTooSmall {
            have: train_idx.len(),
            need: cfg.batch,
        });
    }
    let spectra: Vec<&MassSpectrum> = pairs.iter().map(|p| p.spectrum).collect();
    let prep = tokenize(&spectra, enc)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_a11e);
    let mut params = init;
    let mut opt = cfg.optimizer();
    let mut history: Vec<EpochRecord> = Vec::new();
    let mut best: Option<(usize, ParamStore)> = None;
    let mut order = train_idx.clone();

    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut losses = Vec::new();
        for chunk in order.chunks_exact(cfg.batch) {
            let mut g = Graph::with_dropout(enc.dropout, rng.random());
            let eb = batch_of(&prep.tokens, chunk)?;
            let u = encode_batch(&mut g, &params, enc, &eb)?;
            let v = g.constant(targets_of(pairs, chunk)?);
            let s = similarity_graph(&mut g, u, v)?;
            let l = contrastive_graph(&mut g, s, cfg.tau)?;
            losses.push(g.value(l).item());
            let grads = g.backward(l)?;
            opt.step(&mut params, grads.params())?;
        }
        let train_loss = losses.iter().sum::<f64>() / losses.len() as f64;
        let (val_loss, val_recall1) =
            evaluate_alignment(pairs, &prep.tokens, &val_idx, &params, enc, cfg.batch, cfg.tau)?;
        let rec = EpochRecord {
            epoch,
            train_loss,
            val_loss,
            val_recall1,
        };
        log::info!("epoch {epoch}: train {train_loss:.5} val {val_loss:.5} r@1 {val_recall1:.4}");
        if improves(cfg.select_by, &rec, best.as_ref().map(|(e, _)| &history[*e])) {
            best = Some((epoch, params.clone()));
        }
        history.push(rec);
        if let Some((b, _)) = &best {
            if epoch - b >= cfg.patience {
                break;
            }
        }
    }
    let (best_epoch, params) = best.ok_or_else(|| Error::Config("max_epochs must be positive".into()))?;
    Ok(AlignmentResult {
        params,
        history,
        best_epoch,
        tau: cfg.tau,
    })
}

/// Central-difference check of the contrastive loss of one batch with
/// respect to every parameter tensor in `store`, in evaluation mode.
pub fn alignment_gradient_check(
    pairs: &[AlignmentPair<'_>],
    store: &ParamStore,
    enc: &EncoderConfig,
    tau: f64,
    h: f64,
    stencil: Stencil,
) -> Result<Vec<(String, GradCheck)>> {
    let spectra: Vec<&MassSpectrum> = pairs.iter().map(|p| p.spectrum).collect();
    let batch = EncodedBatch::from_spectra(&spectra, enc)?;
    let idx: Vec<usize> = (0..pairs.len()).collect();
    let targets = targets_of(pairs, &idx)?;
    store
        .names()
        .map(|name| {
            let f = |g: &mut Graph, x: Var| {
                g.bind_param(name, x);
                let u = encode_batch(g, store, enc, &batch)?;
                let v = g.constant(targets.clone());
                let s = similarity_graph(g, u, v)?;
                contrastive_graph(g, s, tau)
            };
            Ok((name.clone(), finite_difference_check_with(f, store.get(name)?, h, stencil)?))
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct GridSearchResult {
    pub best_tau: f64,
    /// One finished run per temperature, in ascending temperature order.
    pub runs: Vec<AlignmentResult>,
}

impl GridSearchResult {
    pub fn best_run(&self) -> &AlignmentResult {
        self.runs.iter().find(|r| r.tau == self.best_tau).expect("best run present")
    }
}

pub const DEFAULT_TAU_GRID: [f64; 5] = [0.01, 0.03, 0.05, 0.07, 0.1];

/// Trains one model per temperature from the same initialization and picks
/// the best under `cfg.select_by`; ties go to the smaller temperature.
pub fn grid_search_temperature(
    pairs: &[AlignmentPair<'_>],
    grid: &[f64],
    enc: &EncoderConfig,
    cfg: &AlignmentConfig,
    init: &ParamStore,
) -> Result<GridSearchResult> {
    if grid.is_empty() {
        return Err(Error::Config("temperature grid is empty".into()));
    }
    let mut taus = grid.to_vec();
    taus.sort_by(f64::total_cmp);
    taus.dedup();
    let mut runs = Vec::with_capacity(taus.len());
    let mut best: Option<(f64, EpochRecord)> = None;
    for &tau in &taus {
        let run_cfg = AlignmentConfig { tau, ..cfg.clone() };
        let run = train_alignment(pairs, enc, &run_cfg, init.clone())?;
        let rec = run.best().clone();
        if improves(cfg.select_by, &rec, best.as_ref().map(|b| &b.1)) {
            best = Some((tau, rec));
        }
        runs.push(run);
    }
    Ok(GridSearchResult {
        best_tau: best.map(|b| b.0).unwrap_or(taus[0]),
        runs,
    })
}
