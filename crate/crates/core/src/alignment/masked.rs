use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{improves, split_by_id, tokenize, EpochRecord, SelectBy};
use crate::encoder::{encode_hidden, EncoderConfig, PeakTokens, MASK};
use crate::error::{Error, Result};
use crate::ms_data::MassSpectrum;
use crate::tensor::{Adam, Graph, ParamStore, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskedConfig {
    pub mask_ratio: f64,
    pub batch: usize,
    pub lr_encoder: f64,
    pub lr_head: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for MaskedConfig {
    fn default() -> Self {
        Self {
            mask_ratio: 0.15,
            batch: 512,
            lr_encoder: 1e-4,
            lr_head: 1e-3,
            max_epochs: 50,
            patience: 5,
            val_fraction: 0.05,
            seed: 0,
        }
    }
}

/// Output layer over the peak vocabulary (reserved ids excluded), with small
/// weights so untrained predictions are close to uniform.
pub fn init_mlm_head<R: Rng>(store: &mut ParamStore, enc: &EncoderConfig, rng: &mut R) {
    let classes = enc.vocab.n_peaks();
    store.insert("mlm.w", Tensor::uniform(&[enc.d, classes], -0.02, 0.02, rng));
    store.insert("mlm.b", Tensor::zeros(&[classes]));
}

/// Masks `ceil(ratio * S)` peak positions per spectrum and returns the mean
/// cross-entropy of predicting their m/z. With nothing masked the loss is a
/// constant zero.
pub fn masked_reconstruction_loss<R: Rng>(
    g: &mut Graph,
    store: &ParamStore,
    enc: &EncoderConfig,
    tokens: &[PeakTokens],
    ratio: f64,
    rng: &mut R,
) -> Result<Var> {
    let mut masked: Vec<PeakTokens> = tokens.to_vec();
    let mut picks: Vec<(usize, usize, usize)> = Vec::new();
    for (b, t) in masked.iter_mut().enumerate() {
        let peaks = t.valid_len() - 1;
        let k = ((ratio * peaks as f64).ceil() as usize).min(peaks);
        for pos in index::sample(rng, peaks, k).into_iter() {
            let p = pos + 1;
            let class = enc.vocab.mz(t.ids[p]).map(|mz| (mz - enc.vocab.mz_lo) as usize);
            let class = class.ok_or_else(|| Error::Config("masked position holds a reserved token".into()))?;
            picks.push((b, p, class));
            t.ids[p] = MASK;
        }
    }
    if picks.is_empty() {
        log::warn!("masked reconstruction: no positions masked, loss is zero");
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let batch = crate::encoder::EncodedBatch::from_tokens(&masked)?;
    let h = encode_hidden(g, store, enc, &batch, false)?;
    let rows: Vec<usize> = picks.iter().map(|&(b, p, _)| b * batch.seq + p).collect();
    let targets: Vec<usize> = picks.iter().map(|p| p.2).collect();
    let hm = g.select_rows(h, &rows)?;
    let w = g.param(store, "mlm.w")?;
    let bias = g.param(store, "mlm.b")?;
    let logits = g.linear(hm, w, bias)?;
    g.softmax_cross_entropy(logits, &targets)
}

/// Trains encoder plus reconstruction head. `init` must hold encoder
/// parameters; the head is created when absent.
pub fn train_masked_reconstruction(
    spectra: &[MassSpectrum],
    enc: &EncoderConfig,
    cfg: &MaskedConfig,
    init: ParamStore,
) -> Result<(ParamStore, Vec<EpochRecord>)> {
    if spectra.len() < 2 {
        return Err(Error::DatasetTooSmall {
            have: spectra.len(),
            need: 2,
        });
    }
    let refs: Vec<&MassSpectrum> = spectra.iter().collect();
    let prep = tokenize(&refs, enc)?;
    let ids: Vec<&str> = spectra.iter().map(|s| s.compound_id.as_str()).collect();
    let (train_idx, val_idx) = split_by_id(&ids, cfg.val_fraction, cfg.seed);
    let batch = cfg.batch.min(train_idx.len()).max(1);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x3a5c);
    let mut params = init;
    if !params.contains("mlm.w") {
        init_mlm_head(&mut params, enc, &mut rng);
    }
    let mut opt = Adam::new(cfg.lr_head).with_group("enc.", cfg.lr_encoder);
    let mut order = train_idx.clone();
    let mut history: Vec<EpochRecord> = Vec::new();
    let mut best: Option<(usize, ParamStore)> = None;
    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut losses = Vec::new();
        for chunk in order.chunks_exact(batch) {
            let mut g = Graph::with_dropout(enc.dropout, rng.random());
            let eb: Vec<PeakTokens> = chunk.iter().map(|&i| prep.tokens[i].clone()).collect();
            let l = masked_reconstruction_loss(&mut g, &params, enc, &eb, cfg.mask_ratio, &mut rng)?;
            losses.push(g.value(l).item());
            let grads = g.backward(l)?;
            opt.step(&mut params, grads.params())?;
        }
        // fixed masking for validation so epochs are comparable
        let mut vrng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7a1d);
        let mut val_total = 0.0;
        for chunk in val_idx.chunks(batch) {
            let mut g = Graph::new();
            let eb: Vec<PeakTokens> = chunk.iter().map(|&i| prep.tokens[i].clone()).collect();
            let l = masked_reconstruction_loss(&mut g, &params, enc, &eb, cfg.mask_ratio, &mut vrng)?;
            val_total += g.value(l).item() * chunk.len() as f64;
        }
        let rec = EpochRecord {
            epoch,
            train_loss: losses.iter().sum::<f64>() / losses.len().max(1) as f64,
            val_loss: val_total / val_idx.len().max(1) as f64,
            val_recall1: 0.0,
        };
        if improves(SelectBy::ValLoss, &rec, best.as_ref().map(|(e, _)| &history[*e])) {
            best = Some((epoch, params.clone()));
        }
        history.push(rec);
        if let Some((b, _)) = &best {
            if epoch - b >= cfg.patience {
                break;
            }
        }
    }
    let params = best.map(|b| b.1).unwrap_or(params);
    Ok((params, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{build_peak_tokens, init_encoder_params, PeakVocabulary};

    fn cfg() -> EncoderConfig {
        EncoderConfig {
            d: 32,
            max_peaks: 16,
            proj_dim: 8,
            vocab: PeakVocabulary::new(50, 149).unwrap(),
            ..EncoderConfig::default()
        }
    }

    #[test]
    fn single_peak_masks_one_position() {
        let enc = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = init_encoder_params(&enc, None, &mut rng).unwrap();
        init_mlm_head(&mut p, &enc, &mut rng);
        let s = MassSpectrum::from_pairs("x", &[(77, 1.0)]).unwrap();
        let t = build_peak_tokens(&s, &enc).unwrap();
        let mut g = Graph::new();
        let l = masked_reconstruction_loss(&mut g, &p, &enc, &[t], 0.15, &mut rng).unwrap();
        let v = g.value(l).item();
        assert!(v > 0.0 && (v - 100f64.ln()).abs() < 0.1 * 100f64.ln());
    }

    #[test]
    fn nothing_masked_gives_zero() {
        let enc = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = init_encoder_params(&enc, None, &mut rng).unwrap();
        let s = MassSpectrum::from_pairs("x", &[(77, 1.0), (90, 0.5)]).unwrap();
        let t = build_peak_tokens(&s, &enc).unwrap();
        let mut g = Graph::new();
        let l = masked_reconstruction_loss(&mut g, &p, &enc, &[t], 0.0, &mut rng).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
    }
}
