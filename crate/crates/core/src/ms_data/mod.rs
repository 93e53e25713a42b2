//! Mass spectra and the side tables that accompany them.
//!
//! Spectra are centroided, unit-resolution peak lists with integer m/z in
//! `1..=MZ_CEILING`. The MSP reader/writer lives in [`msp`], the structure
//! embedding, label, and rating tables in [`tables`].

pub mod msp;
pub mod tables;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use msp::{parse_msp, write_msp, MspParse, RecordError};
pub use tables::{EmbeddingTable, LabelMatrix, RatingMatrix, RATING_SCALE};

/// Largest m/z accepted anywhere in the pipeline.
pub const MZ_CEILING: u32 = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Peak {
    pub mz: u32,
    pub intensity: f64,
}

impl Peak {
    pub fn new(mz: u32, intensity: f64) -> Self {
        Self { mz, intensity }
    }
}

/// A centroided spectrum keyed by compound id.
///
/// Peaks are kept sorted by m/z with no duplicates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MassSpectrum {
    pub compound_id: String,
    pub name: Option<String>,
    pub formula: Option<String>,
    pub molecular_weight: Option<f64>,
    peaks: Vec<Peak>,
}

impl MassSpectrum {
    /// Builds a spectrum from arbitrary peaks: sorts by m/z and merges
    /// duplicate m/z by summing intensities.
    pub fn new(compound_id: impl Into<String>, peaks: Vec<Peak>) -> Result<Self> {
        let compound_id = compound_id.into();
        let peaks = canonical_peaks(&compound_id, peaks)?;
        Ok(Self {
            compound_id,
            name: None,
            formula: None,
            molecular_weight: None,
            peaks,
        })
    }

    pub fn from_pairs(compound_id: impl Into<String>, pairs: &[(u32, f64)]) -> Result<Self> {
        Self::new(
            compound_id,
            pairs.iter().map(|&(mz, i)| Peak::new(mz, i)).collect(),
        )
    }

    pub fn peaks(&self) -> &[Peak] {
        &self.peaks
    }

    pub fn len(&self) -> usize {
        self.peaks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.peaks.is_empty()
    }

    pub fn max_mz(&self) -> u32 {
        self.peaks.last().map_or(0, |p| p.mz)
    }

    pub fn max_intensity(&self) -> f64 {
        self.peaks.iter().map(|p| p.intensity).fold(0.0, f64::max)
    }

    fn with_peaks(&self, peaks: Vec<Peak>) -> Self {
        Self {
            compound_id: self.compound_id.clone(),
            name: self.name.clone(),
            formula: self.formula.clone(),
            molecular_weight: self.molecular_weight,
            peaks,
        }
    }
}

fn canonical_peaks(id: &str, mut peaks: Vec<Peak>) -> Result<Vec<Peak>> {
    for p in &peaks {
        if p.mz == 0 || p.mz > MZ_CEILING {
            return Err(Error::InvalidSpectrum {
                id: id.to_string(),
                reason: format!("m/z {} outside 1..={MZ_CEILING}", p.mz),
            });
        }
        if !p.intensity.is_finite() || p.intensity < 0.0 {
            return Err(Error::InvalidSpectrum {
                id: id.to_string(),
                reason: format!("intensity {} at m/z {} is not a non-negative number", p.intensity, p.mz),
            });
        }
    }
    peaks.sort_by_key(|p| p.mz);
    let mut merged: Vec<Peak> = Vec::with_capacity(peaks.len());
    for p in peaks {
        match merged.last_mut() {
            Some(last) if last.mz == p.mz => last.intensity += p.intensity,
            _ => merged.push(p),
        }
    }
    Ok(merged)
}

/// Divides every intensity by the base peak so the maximum becomes 1.0.
pub fn normalize_spectrum(s: &MassSpectrum) -> Result<MassSpectrum> {
    let max = s.max_intensity();
    if max <= 0.0 {
        return Err(Error::InvalidSpectrum {
            id: s.compound_id.clone(),
            reason: "all intensities are zero".into(),
        });
    }
    let peaks = s
        .peaks
        .iter()
        .map(|p| Peak::new(p.mz, p.intensity / max))
        .collect();
    Ok(s.with_peaks(peaks))
}

/// Keeps peaks with `lo <= mz <= hi`. Does not renormalize.
pub fn filter_mz_range(s: &MassSpectrum, lo: u32, hi: u32) -> Result<MassSpectrum> {
    if lo > hi {
        return Err(Error::Config(format!("m/z range lo {lo} > hi {hi}")));
    }
    let peaks: Vec<Peak> = s
        .peaks
        .iter()
        .copied()
        .filter(|p| p.mz >= lo && p.mz <= hi)
        .collect();
    if peaks.is_empty() {
        return Err(Error::EmptySpectrum(s.compound_id.clone()));
    }
    Ok(s.with_peaks(peaks))
}

/// Keeps spectra whose `MW` metadata lies in `[lo, hi]`; spectra without
/// the field pass through.
pub fn filter_molecular_weight(spectra: Vec<MassSpectrum>, lo: f64, hi: f64) -> Vec<MassSpectrum> {
    spectra
        .into_iter()
        .filter(|s| s.molecular_weight.is_none_or(|mw| mw >= lo && mw <= hi))
        .collect()
}

/// Exact-identity key for a normalized spectrum: (m/z, intensity in
/// millionths).
pub type PeakSignature = Vec<(u32, i64)>;

pub fn peak_signature(s: &MassSpectrum) -> PeakSignature {
    s.peaks
        .iter()
        .map(|p| (p.mz, (p.intensity * 1e6).round() as i64))
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LeakageReport {
    /// (pool compound id, matching holdout compound id)
    pub removed: Vec<(String, String)>,
}

/// Drops every pool spectrum whose peak signature equals a holdout
/// signature.
pub fn leakage_filter(
    pool: &[MassSpectrum],
    holdout: &[MassSpectrum],
) -> (Vec<MassSpectrum>, LeakageReport) {
    let held: HashMap<PeakSignature, &str> = holdout
        .iter()
        .map(|s| (peak_signature(s), s.compound_id.as_str()))
        .collect();
    let mut report = LeakageReport::default();
    let mut kept = Vec::with_capacity(pool.len());
    for s in pool {
        match held.get(&peak_signature(s)) {
            Some(hid) => report
                .removed
                .push((s.compound_id.clone(), (*hid).to_string())),
            None => kept.push(s.clone()),
        }
    }
    (kept, report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec(pairs: &[(u32, f64)]) -> MassSpectrum {
        MassSpectrum::from_pairs("x", pairs).unwrap()
    }

    #[test]
    fn construction_sorts_and_merges() {
        let s = spec(&[(77, 10.0), (50, 5.0), (77, 2.5)]);
        assert_eq!(s.peaks(), &[Peak::new(50, 5.0), Peak::new(77, 12.5)]);
        assert_eq!(s.max_mz(), 77);
    }

    #[test]
    fn rejects_out_of_range_mz() {
        assert!(MassSpectrum::from_pairs("x", &[(1001, 1.0)]).is_err());
        assert!(MassSpectrum::from_pairs("x", &[(0, 1.0)]).is_err());
        assert!(MassSpectrum::from_pairs("x", &[(10, -1.0)]).is_err());
    }

    #[test]
    fn normalize_base_peak() {
        let n = normalize_spectrum(&spec(&[(50, 200.0), (77, 400.0)])).unwrap();
        assert_eq!(n.peaks(), &[Peak::new(50, 0.5), Peak::new(77, 1.0)]);
        assert_eq!(normalize_spectrum(&n).unwrap(), n);
    }

    #[test]
    fn normalize_all_zero_is_error() {
        let s = spec(&[(50, 0.0), (60, 0.0)]);
        assert!(matches!(
            normalize_spectrum(&s),
            Err(Error::InvalidSpectrum { .. })
        ));
    }

    #[test]
    fn mz_filter_inclusive() {
        let s = spec(&[(30, 1.0), (60, 1.0), (200, 1.0)]);
        assert_eq!(filter_mz_range(&s, 50, 180).unwrap().peaks(), &[Peak::new(60, 1.0)]);
        let b = spec(&[(49, 1.0), (50, 1.0), (180, 1.0), (181, 1.0)]);
        let f = filter_mz_range(&b, 50, 180).unwrap();
        assert_eq!(f.peaks().iter().map(|p| p.mz).collect::<Vec<_>>(), vec![50, 180]);
        assert_eq!(filter_mz_range(&s, 1, s.max_mz()).unwrap(), s);
        assert!(matches!(filter_mz_range(&s, 300, 400), Err(Error::EmptySpectrum(_))));
    }

    #[test]
    fn molecular_weight_filter_skips_missing() {
        let mut a = spec(&[(50, 1.0)]);
        a.molecular_weight = Some(400.0);
        let mut b = spec(&[(50, 1.0)]);
        b.molecular_weight = Some(120.0);
        let c = spec(&[(50, 1.0)]);
        let kept = filter_molecular_weight(vec![a, b.clone(), c.clone()], 50.0, 300.0);
        assert_eq!(kept, vec![b, c]);
    }

    #[test]
    fn leakage_removes_identical() {
        let a = MassSpectrum::from_pairs("A", &[(50, 1.0), (60, 0.5)]).unwrap();
        let b = MassSpectrum::from_pairs("B", &[(41, 1.0), (43, 0.25)]).unwrap();
        let b2 = MassSpectrum::from_pairs("B'", &[(41, 1.0), (43, 0.25)]).unwrap();
        let (kept, report) = leakage_filter(&[a.clone(), b], &[b2]);
        assert_eq!(kept, vec![a.clone()]);
        assert_eq!(report.removed, vec![("B".to_string(), "B'".to_string())]);

        let c = MassSpectrum::from_pairs("C", &[(90, 1.0)]).unwrap();
        let (kept, report) = leakage_filter(std::slice::from_ref(&a), &[c]);
        assert_eq!(kept, vec![a]);
        assert!(report.removed.is_empty());
    }

    #[test]
    fn leakage_keeps_near_duplicates() {
        // differ at 1e-3: far above the 6-decimal rounding
        let a = MassSpectrum::from_pairs("A", &[(41, 1.0), (43, 0.250)]).unwrap();
        let h = MassSpectrum::from_pairs("H", &[(41, 1.0), (43, 0.251)]).unwrap();
        let (kept, _) = leakage_filter(&[a], &[h]);
        assert_eq!(kept.len(), 1);
        // differ below the rounding resolution
        let a = MassSpectrum::from_pairs("A", &[(41, 1.0), (43, 0.25 + 1e-9)]).unwrap();
        let h = MassSpectrum::from_pairs("H", &[(41, 1.0), (43, 0.25)]).unwrap();
        let (kept, _) = leakage_filter(&[a], &[h]);
        assert!(kept.is_empty());
    }

    fn arb_spectrum() -> impl Strategy<Value = MassSpectrum> {
        prop::collection::btree_map(1u32..=MZ_CEILING, 0.001f64..1e6, 1..40).prop_map(|m| {
            let pairs: Vec<(u32, f64)> = m.into_iter().collect();
            MassSpectrum::from_pairs("p", &pairs).unwrap()
        })
    }

    proptest! {
        #[test]
        fn normalize_sets_max_and_preserves_ratios(s in arb_spectrum()) {
            let n = normalize_spectrum(&s).unwrap();
            prop_assert_eq!(n.max_intensity(), 1.0);
            let max = s.max_intensity();
            for (a, b) in s.peaks().iter().zip(n.peaks()) {
                prop_assert_eq!(a.mz, b.mz);
                prop_assert!((a.intensity / max - b.intensity).abs() <= 1e-12);
            }
            prop_assert_eq!(normalize_spectrum(&n).unwrap(), n);
        }

        #[test]
        fn mz_filter_idempotent(s in arb_spectrum(), lo in 1u32..500, span in 0u32..500) {
            let hi = lo + span;
            if let Ok(once) = filter_mz_range(&s, lo, hi) {
                prop_assert_eq!(filter_mz_range(&once, lo, hi).unwrap(), once);
            }
        }

        #[test]
        fn leakage_survivors_disjoint_from_holdout(
            pool in prop::collection::vec(arb_spectrum(), 0..8),
            extra in prop::collection::vec(arb_spectrum(), 0..4),
        ) {
            let pool: Vec<_> = pool.iter().map(|s| normalize_spectrum(s).unwrap()).collect();
            let mut holdout: Vec<_> = extra.iter().map(|s| normalize_spectrum(s).unwrap()).collect();
            holdout.extend(pool.iter().step_by(2).cloned());
            let (kept, report) = leakage_filter(&pool, &holdout);
            let held: std::collections::HashSet<_> = holdout.iter().map(peak_signature).collect();
            for s in &kept {
                prop_assert!(!held.contains(&peak_signature(s)));
            }
            prop_assert_eq!(kept.len() + report.removed.len(), pool.len());
        }
    }
}
