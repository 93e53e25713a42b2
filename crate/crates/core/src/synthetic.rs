//! Seeded synthetic data: spectra, learnable spectrum-structure pairs,
//! multi-label targets, ratings and raw acquisitions with a planted sample.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::acquisition::RawAcquisition;
use crate::encoder::{build_peak_tokens, eims2vec_pool, EncoderConfig, PeakVocabulary};
use crate::error::Result;
use crate::ms_data::{EmbeddingTable, LabelMatrix, MassSpectrum, RatingMatrix, RATING_SCALE};
use crate::tensor::Tensor;

/// Spectra `syn0..` with `min_peaks..=max_peaks` distinct peaks each,
/// intensities in (0.01, 1].
pub fn random_spectra(n: usize, vocab: &PeakVocabulary, min_peaks: usize, max_peaks: usize, seed: u64) -> Vec<MassSpectrum> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mzs: Vec<u32> = (vocab.mz_lo..=vocab.mz_hi).collect();
    (0..n)
        .map(|i| {
            let k = rng.random_range(min_peaks..=max_peaks.min(mzs.len()));
            let picked: Vec<u32> = mzs.choose_multiple(&mut rng, k).copied().collect();
            let pairs: Vec<(u32, f64)> = picked.into_iter().map(|m| (m, rng.random_range(0.01..=1.0))).collect();
            MassSpectrum::from_pairs(format!("syn{i}"), &pairs).expect("valid synthetic spectrum")
        })
        .collect()
}

fn gaussian_matrix(rows: usize, cols: usize, sd: f64, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let nd = Normal::new(0.0, sd).expect("positive sd");
    (0..rows).map(|_| (0..cols).map(|_| nd.sample(rng)).collect()).collect()
}

#[derive(Debug, Clone)]
pub struct SyntheticAlignment {
    pub spectra: Vec<MassSpectrum>,
    pub structs: EmbeddingTable,
    /// Peak co-occurrence table the targets were generated from, `[vocab.size() x enc.d]`.
    pub e_cen: Tensor,
    /// Map from pooled spectrum vector to structure vector, `[proj_dim][d]`.
    pub map: Vec<Vec<f64>>,
}

/// Pairs whose structure vector is a fixed random linear map of the
/// intensity-weighted pooled token embedding of the spectrum.
pub fn learnable_alignment(n: usize, enc: &EncoderConfig, min_peaks: usize, max_peaks: usize, seed: u64) -> Result<SyntheticAlignment> {
    let spectra = random_spectra(n, &enc.vocab, min_peaks, max_peaks, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa11);
    let rows = gaussian_matrix(enc.vocab.size(), enc.d, 1.0 / (enc.d as f64).sqrt(), &mut rng);
    let e_cen = Tensor::from_rows(&rows)?;
    let map = gaussian_matrix(enc.proj_dim, enc.d, 1.0 / (enc.d as f64).sqrt(), &mut rng);
    let mut structs = EmbeddingTable::new(enc.proj_dim);
    for s in &spectra {
        let u = eims2vec_pool(&build_peak_tokens(s, enc)?, &e_cen);
        let v: Vec<f64> = map.iter().map(|r| r.iter().zip(&u).map(|(a, b)| a * b).sum()).collect();
        structs.insert(s.compound_id.clone(), v)?;
    }
    Ok(SyntheticAlignment {
        spectra,
        structs,
        e_cen,
        map,
    })
}

/// Same ids, structure vectors permuted across ids: no learnable signal.
pub fn shuffle_targets(structs: &EmbeddingTable, seed: u64) -> Result<EmbeddingTable> {
    let ids = structs.ids().to_vec();
    let mut perm = ids.clone();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = EmbeddingTable::new(structs.dim());
    for (id, src) in ids.iter().zip(&perm) {
        out.insert(id.clone(), structs.get(src).expect("id present").to_vec())?;
    }
    Ok(out)
}

/// Labels from thresholded random projections of `x`; label `l` is positive
/// for roughly `rates[l]` of the rows.
pub fn projected_labels(ids: &[String], x: &[Vec<f64>], rates: &[f64], seed: u64) -> Result<LabelMatrix> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = x.first().map_or(0, Vec::len);
    let dirs = gaussian_matrix(rates.len(), d, 1.0, &mut rng);
    let mut cols: Vec<Vec<u8>> = Vec::with_capacity(rates.len());
    for (dir, &rate) in dirs.iter().zip(rates) {
        let proj: Vec<f64> = x.iter().map(|r| r.iter().zip(dir).map(|(a, b)| a * b).sum()).collect();
        let mut sorted = proj.clone();
        sorted.sort_by(|a, b| b.total_cmp(a));
        let k = ((rate * x.len() as f64).round() as usize).clamp(1, x.len().max(1)) - 1;
        let cut = sorted.get(k).copied().unwrap_or(f64::INFINITY);
        cols.push(proj.iter().map(|&p| (p >= cut) as u8).collect());
    }
    let names: Vec<String> = (0..rates.len()).map(|l| format!("label{l}")).collect();
    let rows = ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.clone(), cols.iter().map(|c| c[i]).collect()))
        .collect();
    LabelMatrix::from_rows(names, rows)
}

/// Ratings on the raw 0..=99 scale, affine in `x` plus Gaussian noise of
/// `noise` sd, clamped to the scale and stored divided by 99.
pub fn linear_ratings(ids: &[String], x: &[Vec<f64>], n_attributes: usize, noise: f64, seed: u64) -> Result<RatingMatrix> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = x.first().map_or(0, Vec::len);
    let coef = gaussian_matrix(n_attributes, d, 1.0, &mut rng);
    let rows = ids
        .iter()
        .zip(x)
        .map(|(id, r)| {
            let vals = coef
                .iter()
                .enumerate()
                .map(|(a, c)| {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    let raw = 50.0 + a as f64 + 10.0 * c.iter().zip(r).map(|(p, q)| p * q).sum::<f64>() + noise * e;
                    raw.clamp(0.0, RATING_SCALE) / RATING_SCALE
                })
                .collect();
            (id.clone(), vals)
        })
        .collect();
    let names = (0..n_attributes).map(|a| format!("attr{a}")).collect();
    RatingMatrix::from_rows(names, rows)
}

#[derive(Debug, Clone)]
pub struct PlantedAcquisition {
    pub acquisition: RawAcquisition,
    /// First time index carrying sample signal.
    pub onset: usize,
    pub spectrum: MassSpectrum,
}

/// Background of per-channel level plus Gaussian noise, then from `onset`
/// onward the planted spectrum (scaled to `peak_height`) on top.
pub fn planted_acquisition(
    spectrum: &MassSpectrum,
    mz_axis: &[u32],
    n_times: usize,
    onset: usize,
    peak_height: f64,
    noise_sd: f64,
    seed: u64,
) -> Result<PlantedAcquisition> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base: Vec<f64> = mz_axis.iter().map(|_| rng.random_range(5.0..20.0)).collect();
    let max = spectrum.max_intensity();
    let signal: Vec<f64> = mz_axis
        .iter()
        .map(|m| {
            spectrum
                .peaks()
                .iter()
                .find(|p| p.mz == *m)
                .map_or(0.0, |p| peak_height * p.intensity / max)
        })
        .collect();
    let nd = Normal::new(0.0, noise_sd).expect("non-negative sd");
    let mut data = Vec::with_capacity(n_times * mz_axis.len());
    for t in 0..n_times {
        for c in 0..mz_axis.len() {
            let s = if t >= onset { signal[c] } else { 0.0 };
            data.push((base[c] + s + nd.sample(&mut rng)).max(0.0));
        }
    }
    let times = (0..n_times).map(|t| t as f64).collect();
    Ok(PlantedAcquisition {
        acquisition: RawAcquisition::new(times, mz_axis.to_vec(), data)?,
        onset,
        spectrum: spectrum.clone(),
    })
}

/// Cosine between two spectra on their union of m/z values.
pub fn spectrum_cosine(a: &MassSpectrum, b: &MassSpectrum) -> f64 {
    let mut dot = 0.0;
    for p in a.peaks() {
        if let Some(q) = b.peaks().iter().find(|q| q.mz == p.mz) {
            dot += p.intensity * q.intensity;
        }
    }
    let na: f64 = a.peaks().iter().map(|p| p.intensity * p.intensity).sum::<f64>().sqrt();
    let nb: f64 = b.peaks().iter().map(|p| p.intensity * p.intensity).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}
