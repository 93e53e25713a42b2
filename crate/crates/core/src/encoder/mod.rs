//! Peak tokenization, the spectrum Transformer, and co-occurrence pretraining.

mod model;
mod sgns;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ms_data::MassSpectrum;
use crate::tensor::Tensor;

pub use model::{
    embed_rows, embed_spectra, encode_batch, encode_hidden, encode_spectrum, init_encoder_params, EncodedBatch,
    SpectrumEmbedding,
};
pub use sgns::{pretrain_cooccurrence, SgnsConfig, SgnsResult};

pub const CLS: usize = 0;
pub const PAD: usize = 1;
pub const MASK: usize = 2;
const RESERVED: usize = 3;

/// Integer m/z range mapped onto token ids after the reserved tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PeakVocabulary {
    pub mz_lo: u32,
    pub mz_hi: u32,
}

impl PeakVocabulary {
    pub fn new(mz_lo: u32, mz_hi: u32) -> Result<Self> {
        if mz_lo == 0 || mz_hi < mz_lo {
            return Err(Error::Config(format!("invalid m/z range [{mz_lo}, {mz_hi}]")));
        }
        Ok(Self { mz_lo, mz_hi })
    }

    /// Total number of ids including CLS, PAD and MASK.
    pub fn size(&self) -> usize {
        (self.mz_hi - self.mz_lo + 1) as usize + RESERVED
    }

    /// Number of peak (non-reserved) ids.
    pub fn n_peaks(&self) -> usize {
        self.size() - RESERVED
    }

    pub fn token(&self, mz: u32) -> Option<usize> {
        (self.mz_lo..=self.mz_hi)
            .contains(&mz)
            .then(|| (mz - self.mz_lo) as usize + RESERVED)
    }

    pub fn mz(&self, token: usize) -> Option<u32> {
        (token >= RESERVED && token < self.size()).then(|| self.mz_lo + (token - RESERVED) as u32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub dropout: f64,
    pub power: f64,
    pub max_peaks: usize,
    /// Feed-forward hidden width as a multiple of `d`.
    pub ff_mult: usize,
    pub proj_dim: usize,
    /// Hidden width of an optional two-layer projection head.
    pub proj_hidden: Option<usize>,
    /// Pre-norm residual blocks with a final LayerNorm instead of post-norm.
    pub norm_first: bool,
    pub vocab: PeakVocabulary,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d: 500,
            layers: 2,
            heads: 4,
            dropout: 0.1,
            power: 0.5,
            max_peaks: 128,
            ff_mult: 2,
            proj_dim: 256,
            proj_hidden: None,
            norm_first: false,
            vocab: PeakVocabulary { mz_lo: 1, mz_hi: 1000 },
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "embedding dim {} must be a positive multiple of heads {}",
                self.d, self.heads
            )));
        }
        if !(self.power > 0.0) {
            return Err(Error::Config(format!("power must be positive, got {}", self.power)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        if self.max_peaks == 0 || self.proj_dim == 0 || self.ff_mult == 0 {
            return Err(Error::Config("max_peaks, proj_dim and ff_mult must be positive".into()));
        }
        PeakVocabulary::new(self.vocab.mz_lo, self.vocab.mz_hi)?;
        Ok(())
    }
}

/// Token sequence for one spectrum: CLS first, peaks in ascending m/z, then
/// PAD up to `max_peaks + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct PeakTokens {
    pub ids: Vec<usize>,
    pub weights: Vec<f64>,
    pub mask: Vec<bool>,
}

impl PeakTokens {
    /// Number of valid positions including CLS.
    pub fn valid_len(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Peaks outside the vocabulary range are ignored. When more than
/// `max_peaks` remain, the most intense are kept (ties favour lower m/z).
pub fn build_peak_tokens(s: &MassSpectrum, cfg: &EncoderConfig) -> Result<PeakTokens> {
    let vocab = &cfg.vocab;
    let base = s.max_intensity();
    let mut peaks: Vec<(usize, f64, u32)> = s
        .peaks()
        .iter()
        .filter(|p| p.intensity > 0.0)
        .filter_map(|p| vocab.token(p.mz).map(|t| (t, p.intensity / base, p.mz)))
        .collect();
    if peaks.is_empty() {
        return Err(Error::EmptySpectrum(s.compound_id.clone()));
    }
    if peaks.len() > cfg.max_peaks {
        peaks.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.2.cmp(&b.2)));
        peaks.truncate(cfg.max_peaks);
        peaks.sort_by_key(|p| p.2);
    }
    let len = cfg.max_peaks + 1;
    let mut ids = Vec::with_capacity(len);
    let mut weights = Vec::with_capacity(len);
    let mut mask = Vec::with_capacity(len);
    ids.push(CLS);
    weights.push(1.0);
    mask.push(true);
    for (t, x, _) in &peaks {
        ids.push(*t);
        weights.push(x.powf(cfg.power));
        mask.push(true);
    }
    ids.resize(len, PAD);
    weights.resize(len, 0.0);
    mask.resize(len, false);
    Ok(PeakTokens { ids, weights, mask })
}

/// Intensity-weighted sum of token embeddings over real peak positions.
pub fn eims2vec_pool(tokens: &PeakTokens, e_cen: &Tensor) -> Vec<f64> {
    let d = e_cen.cols();
    let mut u = vec![0.0; d];
    for ((&id, &w), &m) in tokens.ids.iter().zip(&tokens.weights).zip(&tokens.mask) {
        if !m || id < RESERVED {
            continue;
        }
        for (o, e) in u.iter_mut().zip(e_cen.row(id)) {
            *o += w * e;
        }
    }
    u
}
