use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{batch_of, tokenize};
use crate::downstream::{head_forward, init_head_params, pos_weights, sigmoid};
use crate::encoder::{embed_rows, encode_batch, EncoderConfig};
use crate::error::{Error, Result};
use crate::eval::micro_auc;
use crate::ms_data::MassSpectrum;
use crate::tensor::{Adam, Graph, ParamStore, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupervisedConfig {
    pub batch: usize,
    pub lr_encoder: f64,
    pub lr_head: f64,
    pub hidden_ratio: f64,
    pub max_epochs: usize,
    pub seed: u64,
}

impl Default for SupervisedConfig {
    fn default() -> Self {
        Self {
            batch: 64,
            lr_encoder: 1e-4,
            lr_head: 1e-4,
            hidden_ratio: 0.5,
            max_epochs: 50,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupervisedEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_micro_auc: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct SupervisedResult {
    /// Encoder, projection and `head.*` parameters.
    pub params: ParamStore,
    pub history: Vec<SupervisedEpoch>,
}

/// Scores from an end-to-end trained model.
pub fn predict_supervised(spectra: &[&MassSpectrum], params: &ParamStore, enc: &EncoderConfig) -> Result<Vec<Vec<f64>>> {
    let emb = embed_rows(spectra, params, enc, 64)?;
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_rows(&emb)?);
    let z = head_forward(&mut g, params, x)?;
    Ok(g.value(z).to_rows().into_iter().map(|r| r.into_iter().map(sigmoid).collect()).collect())
}

/// Trains encoder, projection and classifier head jointly on labels with
/// weighted BCE. The encoder is never frozen in this mode. `init` must hold
/// encoder parameters; the head is created when absent.
pub fn train_supervised_e2e(
    spectra: &[MassSpectrum],
    labels: &[Vec<u8>],
    enc: &EncoderConfig,
    cfg: &SupervisedConfig,
    init: ParamStore,
) -> Result<SupervisedResult> {
    if spectra.len() != labels.len() {
        return Err(Error::Shape {
            op: "train_supervised_e2e",
            lhs: vec![spectra.len()],
            rhs: vec![labels.len()],
        });
    }
    if spectra.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if cfg.batch == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let refs: Vec<&MassSpectrum> = spectra.iter().collect();
    let prep = tokenize(&refs, enc)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x51de);
    let mut params = init;
    if !params.contains("head.w1") {
        init_head_params(&mut params, enc.proj_dim, labels[0].len(), cfg.hidden_ratio, &mut rng)?;
    }
    let all: Vec<usize> = (0..spectra.len()).collect();
    let pw = pos_weights(labels, &all);
    let mut opt = Adam::new(cfg.lr_head)
        .with_group("enc.", cfg.lr_encoder)
        .with_group("proj.", cfg.lr_encoder);
    let mut order = all;
    let mut history = Vec::new();
    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut losses = Vec::new();
        for chunk in order.chunks(cfg.batch) {
            let mut g = Graph::with_dropout(enc.dropout, rng.random());
            let eb = batch_of(&prep.tokens, chunk)?;
            let u = encode_batch(&mut g, &params, enc, &eb)?;
            let z = head_forward(&mut g, &params, u)?;
            let y: Vec<f64> = chunk.iter().flat_map(|&i| labels[i].iter().map(|&v| v as f64)).collect();
            let l = g.weighted_bce(z, &y, &pw)?;
            losses.push(g.value(l).item());
            let grads = g.backward(l)?;
            opt.step(&mut params, grads.params())?;
        }
        let scores = predict_supervised(&refs, &params, enc)?;
        history.push(SupervisedEpoch {
            epoch,
            train_loss: losses.iter().sum::<f64>() / losses.len() as f64,
            train_micro_auc: micro_auc(&scores, labels),
        });
    }
    Ok(SupervisedResult { params, history })
}
