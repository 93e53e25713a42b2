use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{build_peak_tokens, EncoderConfig, PeakTokens};
use crate::error::{Error, Result};
use crate::ms_data::{EmbeddingTable, MassSpectrum};
use crate::tensor::{multi_head_attention, AttentionWeights, Graph, ParamStore, Tensor, Var};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumEmbedding {
    pub compound_id: String,
    pub vector: Vec<f64>,
}

/// Fresh encoder and projection parameters. The token table is copied from
/// `e_cen` when given, otherwise drawn from U(-0.05, 0.05).
pub fn init_encoder_params<R: Rng>(cfg: &EncoderConfig, e_cen: Option<&Tensor>, rng: &mut R) -> Result<ParamStore> {
    cfg.validate()?;
    let (d, v) = (cfg.d, cfg.vocab.size());
    let mut s = ParamStore::new();
    let tok = match e_cen {
        Some(t) if t.shape() == [v, d] => t.clone(),
        Some(t) => {
            return Err(Error::Shape {
                op: "init_encoder_params",
                lhs: t.shape().to_vec(),
                rhs: vec![v, d],
            })
        }
        None => Tensor::uniform(&[v, d], -0.05, 0.05, rng),
    };
    s.insert("enc.tok", tok);
    let ff = cfg.ff_mult * d;
    for l in 0..cfg.layers {
        let p = format!("enc.l{l}");
        AttentionWeights::init(&mut s, &format!("{p}.att"), d, rng);
        for n in ["ln1", "ln2"] {
            s.insert(format!("{p}.{n}.g"), Tensor::full(&[d], 1.0));
            s.insert(format!("{p}.{n}.b"), Tensor::zeros(&[d]));
        }
        s.insert(format!("{p}.ff.w1"), Tensor::xavier(d, ff, rng));
        s.insert(format!("{p}.ff.b1"), Tensor::zeros(&[ff]));
        s.insert(format!("{p}.ff.w2"), Tensor::xavier(ff, d, rng));
        s.insert(format!("{p}.ff.b2"), Tensor::zeros(&[d]));
    }
    if cfg.norm_first {
        s.insert("enc.ln_f.g", Tensor::full(&[d], 1.0));
        s.insert("enc.ln_f.b", Tensor::zeros(&[d]));
    }
    match cfg.proj_hidden {
        None => {
            s.insert("proj.w", Tensor::xavier(d, cfg.proj_dim, rng));
            s.insert("proj.b", Tensor::zeros(&[cfg.proj_dim]));
        }
        Some(h) => {
            s.insert("proj.w1", Tensor::xavier(d, h, rng));
            s.insert("proj.b1", Tensor::zeros(&[h]));
            s.insert("proj.w2", Tensor::xavier(h, cfg.proj_dim, rng));
            s.insert("proj.b2", Tensor::zeros(&[cfg.proj_dim]));
        }
    }
    Ok(s)
}

/// Token sequences stacked row-major and padded only to the longest valid
/// length in the batch.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedBatch {
    pub batch: usize,
    pub seq: usize,
    pub ids: Vec<usize>,
    pub weights: Vec<f64>,
    pub mask: Vec<bool>,
}

impl EncodedBatch {
    pub fn from_tokens(tokens: &[PeakTokens]) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let seq = tokens.iter().map(PeakTokens::valid_len).max().unwrap_or(1);
        let mut b = Self {
            batch: tokens.len(),
            seq,
            ids: Vec::with_capacity(tokens.len() * seq),
            weights: Vec::with_capacity(tokens.len() * seq),
            mask: Vec::with_capacity(tokens.len() * seq),
        };
        for t in tokens {
            b.ids.extend_from_slice(&t.ids[..seq]);
            b.weights.extend_from_slice(&t.weights[..seq]);
            b.mask.extend_from_slice(&t.mask[..seq]);
        }
        Ok(b)
    }

    pub fn from_spectra(spectra: &[&MassSpectrum], cfg: &EncoderConfig) -> Result<Self> {
        let tokens = spectra
            .iter()
            .map(|s| build_peak_tokens(s, cfg))
            .collect::<Result<Vec<_>>>()?;
        Self::from_tokens(&tokens)
    }

    fn cls_rows(&self) -> Vec<usize> {
        (0..self.batch).map(|b| b * self.seq).collect()
    }
}

/// Runs the Transformer stack. Returns every position's final state
/// (`[batch * seq x d]`) or only the CLS states (`[batch x d]`).
pub fn encode_hidden(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &EncoderConfig,
    batch: &EncodedBatch,
    cls_only: bool,
) -> Result<Var> {
    let tok = g.param(store, "enc.tok")?;
    let emb = g.gather(tok, &batch.ids)?;
    let mut x = g.scale_rows(emb, batch.weights.clone())?;
    let cls = batch.cls_rows();
    let (bs, sl) = (batch.batch, batch.seq);
    for l in 0..cfg.layers {
        let p = format!("enc.l{l}");
        let att = AttentionWeights::load(g, store, &format!("{p}.att"))?;
        let ln1 = (g.param(store, &format!("{p}.ln1.g"))?, g.param(store, &format!("{p}.ln1.b"))?);
        let ln2 = (g.param(store, &format!("{p}.ln2.g"))?, g.param(store, &format!("{p}.ln2.b"))?);
        let w1 = g.param(store, &format!("{p}.ff.w1"))?;
        let b1 = g.param(store, &format!("{p}.ff.b1"))?;
        let w2 = g.param(store, &format!("{p}.ff.w2"))?;
        let b2 = g.param(store, &format!("{p}.ff.b2"))?;
        // Rows other than CLS are dead after the last attention.
        let trim = cls_only && l + 1 == cfg.layers;

        let att_in = if cfg.norm_first { g.layer_norm(x, ln1.0, ln1.1, LN_EPS)? } else { x };
        let mut a = multi_head_attention(g, att_in, &att, bs, sl, cfg.heads, &batch.mask)?;
        if trim {
            a = g.select_rows(a, &cls)?;
            x = g.select_rows(x, &cls)?;
        }
        let mut h = g.add(x, a)?;
        if !cfg.norm_first {
            h = g.layer_norm(h, ln1.0, ln1.1, LN_EPS)?;
        }
        let ff_in = if cfg.norm_first { g.layer_norm(h, ln2.0, ln2.1, LN_EPS)? } else { h };
        let f = g.linear(ff_in, w1, b1)?;
        let f = g.relu(f);
        let f = g.dropout(f);
        let f = g.linear(f, w2, b2)?;
        x = g.add(h, f)?;
        if !cfg.norm_first {
            x = g.layer_norm(x, ln2.0, ln2.1, LN_EPS)?;
        }
    }
    if cls_only && cfg.layers == 0 {
        x = g.select_rows(x, &cls)?;
    }
    if cfg.norm_first {
        let gam = g.param(store, "enc.ln_f.g")?;
        let bet = g.param(store, "enc.ln_f.b")?;
        x = g.layer_norm(x, gam, bet, LN_EPS)?;
    }
    Ok(x)
}

/// CLS state followed by the projection head: `[batch x proj_dim]`.
pub fn encode_batch(g: &mut Graph, store: &ParamStore, cfg: &EncoderConfig, batch: &EncodedBatch) -> Result<Var> {
    let h = encode_hidden(g, store, cfg, batch, true)?;
    project(g, store, cfg, h)
}

fn project(g: &mut Graph, store: &ParamStore, cfg: &EncoderConfig, h: Var) -> Result<Var> {
    match cfg.proj_hidden {
        None => {
            let w = g.param(store, "proj.w")?;
            let b = g.param(store, "proj.b")?;
            g.linear(h, w, b)
        }
        Some(_) => {
            let w1 = g.param(store, "proj.w1")?;
            let b1 = g.param(store, "proj.b1")?;
            let w2 = g.param(store, "proj.w2")?;
            let b2 = g.param(store, "proj.b2")?;
            let z = g.linear(h, w1, b1)?;
            let z = g.relu(z);
            g.linear(z, w2, b2)
        }
    }
}

/// Encodes one spectrum. `dropout_seed = None` is evaluation mode.
pub fn encode_spectrum(
    s: &MassSpectrum,
    store: &ParamStore,
    cfg: &EncoderConfig,
    dropout_seed: Option<u64>,
) -> Result<SpectrumEmbedding> {
    let batch = EncodedBatch::from_spectra(&[s], cfg)?;
    let mut g = match dropout_seed {
        Some(seed) => Graph::with_dropout(cfg.dropout, seed),
        None => Graph::new(),
    };
    let out = encode_batch(&mut g, store, cfg, &batch)?;
    let vector = g.value(out).data().to_vec();
    if vector.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidSpectrum {
            id: s.compound_id.clone(),
            reason: "non-finite embedding".into(),
        });
    }
    Ok(SpectrumEmbedding {
        compound_id: s.compound_id.clone(),
        vector,
    })
}

/// Evaluation-mode embeddings, one row per spectrum, computed in parallel
/// chunks. Results do not depend on the chunk size or thread count.
pub fn embed_rows(
    spectra: &[&MassSpectrum],
    store: &ParamStore,
    cfg: &EncoderConfig,
    chunk: usize,
) -> Result<Vec<Vec<f64>>> {
    let parts = spectra
        .par_chunks(chunk.max(1))
        .map(|part| {
            let batch = EncodedBatch::from_spectra(part, cfg)?;
            let mut g = Graph::new();
            let out = encode_batch(&mut g, store, cfg, &batch)?;
            Ok(g.value(out).to_rows())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(parts.into_iter().flatten().collect())
}

/// Embedding table keyed by compound id; a repeated id keeps its last row.
pub fn embed_spectra(
    spectra: &[MassSpectrum],
    store: &ParamStore,
    cfg: &EncoderConfig,
    chunk: usize,
) -> Result<EmbeddingTable> {
    let refs: Vec<&MassSpectrum> = spectra.iter().collect();
    let rows = embed_rows(&refs, store, cfg, chunk)?;
    let mut table = EmbeddingTable::new(cfg.proj_dim);
    for (s, v) in spectra.iter().zip(rows) {
        table.insert(s.compound_id.clone(), v)?;
    }
    Ok(table)
}
