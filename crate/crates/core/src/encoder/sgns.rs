use std::collections::BTreeSet;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::PeakVocabulary;
use crate::error::{Error, Result};
use crate::ms_data::MassSpectrum;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgnsConfig {
    pub dim: usize,
    pub epochs: usize,
    pub lr: f64,
    pub negatives: usize,
    /// Exponent applied to unigram counts for negative sampling.
    pub unigram_power: f64,
    /// Exponent applied to normalized intensities for pair weights.
    pub intensity_power: f64,
    pub seed: u64,
}

impl Default for SgnsConfig {
    fn default() -> Self {
        Self {
            dim: 500,
            epochs: 5,
            lr: 0.025,
            negatives: 5,
            unigram_power: 0.75,
            intensity_power: 0.5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SgnsResult {
    /// Center embeddings `[vocab.size() x dim]`; reserved rows stay at their
    /// random initialization.
    pub e_cen: Tensor,
    /// Weighted loss per epoch (positive plus negative terms).
    pub loss_history: Vec<f64>,
    /// Weighted positive-pair loss per epoch.
    pub positive_history: Vec<f64>,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn log_sigmoid(z: f64) -> f64 {
    -((-z).max(0.0) + (-z.abs()).exp().ln_1p())
}

/// Skip-gram with negative sampling over all ordered peak pairs that
/// co-occur in a spectrum, each pair weighted by the product of the two
/// power-scaled intensities. A drawn negative equal to the center or the
/// context token is skipped, not redrawn.
pub fn pretrain_cooccurrence(spectra: &[MassSpectrum], vocab: &PeakVocabulary, cfg: &SgnsConfig) -> Result<SgnsResult> {
    if cfg.dim == 0 || !(cfg.lr > 0.0) {
        return Err(Error::Config("SGNS needs dim > 0 and lr > 0".into()));
    }
    let uncovered: BTreeSet<u32> = spectra
        .iter()
        .flat_map(|s| s.peaks().iter())
        .filter(|p| p.intensity > 0.0 && vocab.token(p.mz).is_none())
        .map(|p| p.mz)
        .collect();
    if !uncovered.is_empty() {
        return Err(Error::UncoveredMz(uncovered.into_iter().collect()));
    }
    let docs: Vec<Vec<(usize, f64)>> = spectra
        .iter()
        .map(|s| {
            let base = s.max_intensity();
            s.peaks()
                .iter()
                .filter(|p| p.intensity > 0.0)
                .map(|p| (vocab.token(p.mz).unwrap(), (p.intensity / base).powf(cfg.intensity_power)))
                .collect::<Vec<_>>()
        })
        .filter(|d| d.len() >= 2)
        .collect();
    if docs.is_empty() {
        return Err(Error::EmptyCorpus);
    }

    let v = vocab.size();
    let d = cfg.dim;
    let mut counts = vec![0.0; v];
    for doc in &docs {
        for &(t, _) in doc {
            counts[t] += 1.0;
        }
    }
    let unigram: Vec<f64> = counts.iter().map(|c: &f64| c.powf(cfg.unigram_power)).collect();
    let sampler = WeightedIndex::new(&unigram).map_err(|e| Error::Config(format!("unigram table: {e}")))?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let half = 0.5 / d as f64;
    let mut cen: Vec<f64> = (0..v * d).map(|_| rng.random_range(-half..half)).collect();
    let mut ctx = vec![0.0; v * d];
    let mut order: Vec<usize> = (0..docs.len()).collect();
    let mut loss_history = Vec::with_capacity(cfg.epochs);
    let mut positive_history = Vec::with_capacity(cfg.epochs);
    let mut grad = vec![0.0; d];
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();

    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut positive) = (0.0, 0.0);
        for &di in &order {
            let doc = &docs[di];
            for (i, &(a, wa)) in doc.iter().enumerate() {
                for (j, &(b, wb)) in doc.iter().enumerate() {
                    if i == j {
                        continue;
                    }
                    let w = wa * wb;
                    grad.iter_mut().for_each(|x| *x = 0.0);
                    let update = |target: usize, label: f64, grad: &mut [f64], cen: &[f64], ctx: &mut [f64]| {
                        let e = &cen[a * d..(a + 1) * d];
                        let c = &mut ctx[target * d..(target + 1) * d];
                        let s = dot(e, c);
                        let gs = w * (sigmoid(s) - label);
                        for k in 0..d {
                            grad[k] += gs * c[k];
                            c[k] -= cfg.lr * gs * e[k];
                        }
                        if label == 1.0 { -w * log_sigmoid(s) } else { -w * log_sigmoid(-s) }
                    };
                    let lp = update(b, 1.0, &mut grad, &cen, &mut ctx);
                    positive += lp;
                    total += lp;
                    for _ in 0..cfg.negatives {
                        let n = sampler.sample(&mut rng);
                        if n == b || n == a {
                            continue;
                        }
                        total += update(n, 0.0, &mut grad, &cen, &mut ctx);
                    }
                    for (e, g) in cen[a * d..(a + 1) * d].iter_mut().zip(&grad) {
                        *e -= cfg.lr * g;
                    }
                }
            }
        }
        loss_history.push(total);
        positive_history.push(positive);
    }
    Ok(SgnsResult {
        e_cen: Tensor::new(vec![v, d], cen)?,
        loss_history,
        positive_history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> PeakVocabulary {
        PeakVocabulary::new(50, 99).unwrap()
    }

    fn cosine(t: &Tensor, i: usize, j: usize) -> f64 {
        let (a, b) = (t.row(i), t.row(j));
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    }

    #[test]
    fn planted_cooccurrence_ordering() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        // a=60 and b=61 always together; c=62 never with a
        let mut corpus = Vec::new();
        for k in 0..200 {
            let mut pairs = if k % 2 == 0 { vec![(60, 1.0), (61, 0.8)] } else { vec![(62, 1.0)] };
            let lo = if k % 2 == 0 { 70 } else { 85 };
            for _ in 0..3 {
                pairs.push((rng.random_range(lo..lo + 12), rng.random_range(0.1..0.9)));
            }
            corpus.push(MassSpectrum::from_pairs(format!("s{k}"), &pairs).unwrap());
        }
        let cfg = SgnsConfig {
            dim: 16,
            epochs: 20,
            seed: 1,
            ..SgnsConfig::default()
        };
        let v = vocab();
        let r = pretrain_cooccurrence(&corpus, &v, &cfg).unwrap();
        let (a, b, c) = (v.token(60).unwrap(), v.token(61).unwrap(), v.token(62).unwrap());
        assert!(cosine(&r.e_cen, a, b) > cosine(&r.e_cen, a, c));
    }

    #[test]
    fn single_pair_loss_decreases() {
        let corpus = vec![MassSpectrum::from_pairs("x", &[(60, 1.0), (75, 0.5)]).unwrap()];
        let cfg = SgnsConfig {
            dim: 8,
            epochs: 10,
            lr: 0.01,
            seed: 3,
            ..SgnsConfig::default()
        };
        let r = pretrain_cooccurrence(&corpus, &vocab(), &cfg).unwrap();
        for w in r.positive_history.windows(2) {
            assert!(w[1] < w[0], "{:?}", r.positive_history);
        }
        for w in r.loss_history.windows(2) {
            assert!(w[1] < w[0], "{:?}", r.loss_history);
        }
    }

    #[test]
    fn corpus_errors() {
        let v = vocab();
        assert!(matches!(pretrain_cooccurrence(&[], &v, &SgnsConfig::default()), Err(Error::EmptyCorpus)));
        let s = MassSpectrum::from_pairs("x", &[(60, 1.0), (140, 0.5), (30, 0.2)]).unwrap();
        match pretrain_cooccurrence(&[s], &v, &SgnsConfig::default()) {
            Err(Error::UncoveredMz(m)) => assert_eq!(m, vec![30, 140]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let corpus = vec![
            MassSpectrum::from_pairs("x", &[(60, 1.0), (75, 0.5), (80, 0.2)]).unwrap(),
            MassSpectrum::from_pairs("y", &[(61, 1.0), (75, 0.5)]).unwrap(),
        ];
        let cfg = SgnsConfig {
            dim: 4,
            epochs: 3,
            ..SgnsConfig::default()
        };
        let a = pretrain_cooccurrence(&corpus, &vocab(), &cfg).unwrap();
        let b = pretrain_cooccurrence(&corpus, &vocab(), &cfg).unwrap();
        assert_eq!(a.e_cen, b.e_cen);
    }
}
