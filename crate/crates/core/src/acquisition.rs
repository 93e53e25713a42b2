//! Raw time-by-m/z acquisitions to a single spectrum.
//!
//! The pipeline: total ion current, sliding least-squares slope to find the
//! sample window, per-channel background mean/std, subtraction of
//! `mean + 5 * std` clamped at zero, and a time average over the sample
//! window.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ms_data::{normalize_spectrum, MassSpectrum, Peak};

pub const DEFAULT_WINDOW: usize = 20;
/// Background threshold multiplier on the channel standard deviation.
pub const NOISE_SIGMAS: f64 = 5.0;

/// Dense intensity matrix, row-major `[time][channel]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RawAcquisition {
    times: Vec<f64>,
    mz_axis: Vec<u32>,
    intensity: Vec<f64>,
}

impl RawAcquisition {
    pub fn new(times: Vec<f64>, mz_axis: Vec<u32>, intensity: Vec<f64>) -> Result<Self> {
        let bad = |m: String| Err(Error::InvalidAcquisition(m));
        if times.len() * mz_axis.len() != intensity.len() {
            return bad(format!(
                "matrix has {} values, axes imply {}x{}",
                intensity.len(),
                times.len(),
                mz_axis.len()
            ));
        }
        if mz_axis.is_empty() || times.is_empty() {
            return bad("empty axis".into());
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return bad("timestamps must be strictly increasing".into());
        }
        if mz_axis.windows(2).any(|w| w[1] <= w[0]) {
            return bad("m/z axis must be strictly increasing".into());
        }
        if intensity.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return bad("intensities must be finite and non-negative".into());
        }
        Ok(Self {
            times,
            mz_axis,
            intensity,
        })
    }

    pub fn n_times(&self) -> usize {
        self.times.len()
    }

    pub fn n_channels(&self) -> usize {
        self.mz_axis.len()
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn mz_axis(&self) -> &[u32] {
        &self.mz_axis
    }

    pub fn at(&self, t: usize, m: usize) -> f64 {
        self.intensity[t * self.mz_axis.len() + m]
    }

    pub fn row(&self, t: usize) -> &[f64] {
        let m = self.mz_axis.len();
        &self.intensity[t * m..(t + 1) * m]
    }

    /// Keeps channels with `lo <= mz <= hi`.
    pub fn restrict_mz(&self, lo: u32, hi: u32) -> Result<Self> {
        let keep: Vec<usize> = (0..self.n_channels())
            .filter(|&m| (lo..=hi).contains(&self.mz_axis[m]))
            .collect();
        if keep.is_empty() {
            return Err(Error::InvalidAcquisition(format!("no channels in [{lo}, {hi}]")));
        }
        let intensity = (0..self.n_times())
            .flat_map(|t| keep.iter().map(move |&m| (t, m)))
            .map(|(t, m)| self.at(t, m))
            .collect();
        Self::new(
            self.times.clone(),
            keep.iter().map(|&m| self.mz_axis[m]).collect(),
            intensity,
        )
    }

    /// CSV with header `time,<mz1>,<mz2>,...`.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let headers = rdr.headers()?.clone();
        let mz_axis = headers
            .iter()
            .skip(1)
            .map(|h| {
                h.trim()
                    .parse::<u32>()
                    .map_err(|_| Error::InvalidAcquisition(format!("bad m/z column `{h}`")))
            })
            .collect::<Result<Vec<u32>>>()?;
        let mut times = Vec::new();
        let mut intensity = Vec::new();
        for (n, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let mut cells = rec.iter().map(|c| {
                c.trim().parse::<f64>().map_err(|_| {
                    Error::InvalidAcquisition(format!("row {}: bad number `{c}`", n + 2))
                })
            });
            times.push(cells.next().ok_or_else(|| {
                Error::InvalidAcquisition(format!("row {}: empty", n + 2))
            })??);
            for c in cells {
                intensity.push(c?);
            }
        }
        Self::new(times, mz_axis, intensity)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        let mut header = vec!["time".to_string()];
        header.extend(self.mz_axis.iter().map(u32::to_string));
        wtr.write_record(&header)?;
        for t in 0..self.n_times() {
            let mut rec = vec![self.times[t].to_string()];
            rec.extend(self.row(t).iter().map(f64::to_string));
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Time-index boundaries of the sample region.
///
/// Background is `0..=bg_end`; the sample window is
/// `sample_start..sample_end` (end exclusive). `tail_start` is the onset of
/// the steepest decline after the plateau, or `sample_end` when the trace
/// never declines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentBoundaries {
    pub bg_end: usize,
    pub sample_start: usize,
    pub tail_start: usize,
    pub sample_end: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackgroundStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub fn compute_tic(a: &RawAcquisition) -> Vec<f64> {
    (0..a.n_times()).map(|t| a.row(t).iter().sum()).collect()
}

/// Least-squares slope of `y` against `0..y.len()`.
fn ls_slope(y: &[f64]) -> f64 {
    let n = y.len() as f64;
    let x_mean = (n - 1.0) / 2.0;
    let y_mean = y.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, &v) in y.iter().enumerate() {
        let dx = i as f64 - x_mean;
        num += dx * (v - y_mean);
        den += dx * dx;
    }
    num / den
}

/// Slope for every full window, indexed by the window's first point of its
/// upper half: entry `c` covers `tic[c - w/2 .. c - w/2 + w]`.
pub fn sliding_slopes(tic: &[f64], window: usize) -> Vec<(usize, f64)> {
    let half = window / 2;
    tic.windows(window)
        .enumerate()
        .map(|(start, w)| (start + half, ls_slope(w)))
        .collect()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Three standard errors of a windowed slope under white noise, with the
/// noise level taken from the median absolute first difference (robust to
/// the few large steps at onset and tail). Floored relative to the trace
/// magnitude so exactly flat traces are rejected.
pub fn flatness_threshold(tic: &[f64], window: usize) -> f64 {
    let diffs: Vec<f64> = tic.windows(2).map(|w| (w[1] - w[0]).abs()).collect();
    let sigma = median(diffs) / (0.674_489_750_196_081_7 * std::f64::consts::SQRT_2);
    let w = window as f64;
    let slope_se = sigma * (12.0 / (w * (w * w - 1.0))).sqrt();
    let scale = tic.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    (3.0 * slope_se).max(1e-9 * scale)
}

/// Locates the sample window in a total-ion-current trace.
///
/// The onset is the centre of the window with the steepest least-squares
/// rise. After it, the steepest decline marks the tail; the first later
/// window that is flat again (slope above `-eps`) ends the sample. With no
/// decline the sample runs to the end of the trace.
pub fn segment_sample_window(tic: &[f64], window: usize) -> Result<SegmentBoundaries> {
    if window < 2 {
        return Err(Error::Config(format!("window must be >= 2, got {window}")));
    }
    if tic.len() < 2 * window {
        return Err(Error::InvalidAcquisition(format!(
            "trace of {} points is shorter than two windows of {window}",
            tic.len()
        )));
    }
    let slopes = sliding_slopes(tic, window);
    let eps = flatness_threshold(tic, window);

    // first maximum wins on ties
    let (onset, max_slope) = slopes
        .iter()
        .copied()
        .fold((0usize, f64::NEG_INFINITY), |best, (c, s)| if s > best.1 { (c, s) } else { best });
    if max_slope <= eps {
        return Err(Error::NoSampleDetected {
            max_slope,
            threshold: eps,
        });
    }

    let after: Vec<(usize, f64)> = slopes.iter().copied().filter(|&(c, _)| c > onset).collect();
    let n = tic.len();
    let (tail_start, sample_end) = match after
        .iter()
        .copied()
        .fold(None::<(usize, f64)>, |best, (c, s)| match best {
            Some((_, bs)) if bs <= s => best,
            _ => Some((c, s)),
        }) {
        Some((tail, s)) if s < -eps => {
            let end = after
                .iter()
                .find(|&&(c, s)| c > tail && s >= -eps)
                .map_or(n, |&(c, _)| c);
            (tail, end)
        }
        _ => (n, n),
    };

    Ok(SegmentBoundaries {
        bg_end: onset.saturating_sub(1),
        sample_start: onset,
        tail_start,
        sample_end,
    })
}

/// Per-channel mean and population standard deviation over `0..=bg_end`.
pub fn estimate_background_stats(a: &RawAcquisition, b: &SegmentBoundaries) -> Result<BackgroundStats> {
    if b.bg_end < 2 {
        return Err(Error::InsufficientBackground(b.bg_end));
    }
    let count = (b.bg_end + 1) as f64;
    let m = a.n_channels();
    let mut mean = vec![0.0; m];
    for t in 0..=b.bg_end {
        for (acc, &v) in mean.iter_mut().zip(a.row(t)) {
            *acc += v;
        }
    }
    mean.iter_mut().for_each(|v| *v /= count);
    let mut var = vec![0.0; m];
    for t in 0..=b.bg_end {
        for ((acc, &v), &mu) in var.iter_mut().zip(a.row(t)).zip(&mean) {
            *acc += (v - mu) * (v - mu);
        }
    }
    let std = var.into_iter().map(|v| (v / count).sqrt()).collect();
    Ok(BackgroundStats { mean, std })
}

/// `max(0, x - (mean + 5 * std))` per channel.
pub fn baseline_correct(a: &RawAcquisition, s: &BackgroundStats) -> Result<RawAcquisition> {
    if s.mean.len() != a.n_channels() || s.std.len() != a.n_channels() {
        return Err(Error::Shape {
            op: "baseline_correct",
            lhs: vec![a.n_channels()],
            rhs: vec![s.mean.len(), s.std.len()],
        });
    }
    let threshold: Vec<f64> = s
        .mean
        .iter()
        .zip(&s.std)
        .map(|(&mu, &sd)| mu + NOISE_SIGMAS * sd)
        .collect();
    let m = a.n_channels();
    let intensity = a
        .intensity
        .iter()
        .enumerate()
        .map(|(i, &v)| (v - threshold[i % m]).max(0.0))
        .collect();
    Ok(RawAcquisition {
        times: a.times.clone(),
        mz_axis: a.mz_axis.clone(),
        intensity,
    })
}

/// Averages the sample window per channel, drops zero channels and
/// base-peak normalizes.
pub fn collapse_to_spectrum(a: &RawAcquisition, b: &SegmentBoundaries, id: &str) -> Result<MassSpectrum> {
    let end = b.sample_end.min(a.n_times());
    if b.sample_start >= end {
        return Err(Error::InvalidAcquisition("empty sample window".into()));
    }
    let count = (end - b.sample_start) as f64;
    let mut sums = vec![0.0; a.n_channels()];
    for t in b.sample_start..end {
        for (acc, &v) in sums.iter_mut().zip(a.row(t)) {
            *acc += v;
        }
    }
    let peaks: Vec<Peak> = a
        .mz_axis
        .iter()
        .zip(sums)
        .map(|(&mz, s)| Peak::new(mz, s / count))
        .filter(|p| p.intensity > 0.0)
        .collect();
    if peaks.is_empty() {
        return Err(Error::EmptySpectrum(id.to_string()));
    }
    normalize_spectrum(&MassSpectrum::new(id, peaks)?)
}

#[derive(Debug, Clone)]
pub struct PreprocessOutput {
    pub boundaries: SegmentBoundaries,
    pub background: BackgroundStats,
    pub spectrum: MassSpectrum,
}

/// Full pipeline: TIC, segmentation, background, correction, averaging.
pub fn preprocess(a: &RawAcquisition, window: usize, id: &str) -> Result<PreprocessOutput> {
    let tic = compute_tic(a);
    let boundaries = segment_sample_window(&tic, window)?;
    let background = estimate_background_stats(a, &boundaries)?;
    let corrected = baseline_correct(a, &background)?;
    let spectrum = collapse_to_spectrum(&corrected, &boundaries, id)?;
    Ok(PreprocessOutput {
        boundaries,
        background,
        spectrum,
    })
}
