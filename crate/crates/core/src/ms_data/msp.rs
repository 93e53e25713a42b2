//! MSP-style spectral library records.
//!
//! ```text
//! Name: Ethyl acetate
//! Formula: C4H8O2
//! MW: 88
//! ID: 141-78-6
//! Num Peaks: 3
//! 43 999; 45 120;
//! 61 85;
//! ```
//!
//! Records are separated by blank lines. A record whose peak count disagrees
//! with `Num Peaks`, or that has no peaks, is reported in
//! [`MspParse::errors`] and skipped; a header line that is not `key: value`
//! aborts the parse.

use std::fmt::Write as _;

use crate::error::{Error, Result};

use super::{MassSpectrum, Peak};

#[derive(Debug, Clone, PartialEq)]
pub struct RecordError {
    /// 1-based line where the record starts.
    pub line: usize,
    pub id: Option<String>,
    pub message: String,
}

#[derive(Debug, Clone, Default)]
pub struct MspParse {
    pub spectra: Vec<MassSpectrum>,
    pub errors: Vec<RecordError>,
}

#[derive(Default)]
struct Draft {
    start_line: usize,
    name: Option<String>,
    formula: Option<String>,
    mw: Option<f64>,
    id: Option<String>,
    declared: Option<usize>,
    pairs: Vec<Peak>,
    in_peaks: bool,
    problem: Option<String>,
}

impl Draft {
    fn is_blank(&self) -> bool {
        self.name.is_none()
            && self.id.is_none()
            && self.declared.is_none()
            && self.pairs.is_empty()
            && self.problem.is_none()
    }

    fn finish(self, out: &mut MspParse) {
        let id = self.id.clone().or_else(|| self.name.clone());
        let fail = |message: String, out: &mut MspParse| {
            out.errors.push(RecordError {
                line: self.start_line,
                id: id.clone(),
                message,
            })
        };
        if let Some(p) = &self.problem {
            return fail(p.clone(), out);
        }
        let Some(compound_id) = id.clone() else {
            return fail("record has neither ID nor Name".into(), out);
        };
        let Some(declared) = self.declared else {
            return fail("missing `Num Peaks`".into(), out);
        };
        if self.pairs.is_empty() {
            return fail("empty peak list".into(), out);
        }
        if self.pairs.len() != declared {
            return fail(
                format!("declared {declared} peaks, found {}", self.pairs.len()),
                out,
            );
        }
        match MassSpectrum::new(compound_id, self.pairs) {
            Ok(mut s) => {
                s.name = self.name;
                s.formula = self.formula;
                s.molecular_weight = self.mw;
                out.spectra.push(s);
            }
            Err(e) => fail(e.to_string(), out),
        }
    }
}

fn parse_peak_line(line: &str) -> std::result::Result<Vec<Peak>, String> {
    let cleaned = line.replace([';', ','], " ");
    let tokens: Vec<&str> = cleaned.split_whitespace().collect();
    if !tokens.len().is_multiple_of(2) {
        return Err(format!("odd number of peak tokens in `{line}`"));
    }
    tokens
        .chunks(2)
        .map(|pair| {
            let mz: f64 = pair[0]
                .parse()
                .map_err(|_| format!("bad m/z `{}`", pair[0]))?;
            if mz.fract() != 0.0 || mz < 1.0 || mz > u32::MAX as f64 {
                return Err(format!("m/z `{}` is not a positive integer", pair[0]));
            }
            let intensity: f64 = pair[1]
                .parse()
                .map_err(|_| format!("bad intensity `{}`", pair[1]))?;
            Ok(Peak::new(mz as u32, intensity))
        })
        .collect()
}

pub fn parse_msp(text: &str) -> Result<MspParse> {
    let mut out = MspParse::default();
    let mut draft = Draft::default();

    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = raw.trim();
        if line.is_empty() {
            if !draft.is_blank() {
                std::mem::take(&mut draft).finish(&mut out);
            }
            continue;
        }
        if draft.is_blank() {
            draft.start_line = lineno;
        }
        if draft.in_peaks && !line.contains(':') {
            match parse_peak_line(line) {
                Ok(peaks) => draft.pairs.extend(peaks),
                Err(msg) => {
                    draft.problem.get_or_insert(format!("line {lineno}: {msg}"));
                }
            }
            continue;
        }
        if draft.in_peaks {
            // header without a separating blank line: a new record begins
            std::mem::take(&mut draft).finish(&mut out);
            draft.start_line = lineno;
        }
        let Some((key, value)) = line.split_once(':') else {
            return Err(Error::Parse {
                line: lineno,
                message: format!("expected `key: value`, found `{line}`"),
            });
        };
        let key = key.trim().to_ascii_lowercase();
        let value = value.trim();
        match key.as_str() {
            "name" => draft.name = Some(value.to_string()),
            "formula" => draft.formula = Some(value.to_string()),
            "id" => draft.id = Some(value.to_string()),
            "mw" => match value.parse::<f64>() {
                Ok(v) => draft.mw = Some(v),
                Err(_) => {
                    draft.problem.get_or_insert(format!("line {lineno}: bad MW `{value}`"));
                }
            },
            "num peaks" => {
                match value.parse::<usize>() {
                    Ok(n) => draft.declared = Some(n),
                    Err(_) => {
                        draft
                            .problem
                            .get_or_insert(format!("line {lineno}: bad peak count `{value}`"));
                    }
                }
                draft.in_peaks = true;
            }
            _ => {}
        }
    }
    if !draft.is_blank() {
        draft.finish(&mut out);
    }
    Ok(out)
}

pub fn write_msp(spectra: &[MassSpectrum]) -> String {
    let mut out = String::new();
    for (i, s) in spectra.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        if let Some(name) = &s.name {
            let _ = writeln!(out, "Name: {name}");
        }
        if let Some(formula) = &s.formula {
            let _ = writeln!(out, "Formula: {formula}");
        }
        if let Some(mw) = s.molecular_weight {
            let _ = writeln!(out, "MW: {mw}");
        }
        let _ = writeln!(out, "ID: {}", s.compound_id);
        let _ = writeln!(out, "Num Peaks: {}", s.len());
        for p in s.peaks() {
            let _ = writeln!(out, "{} {};", p.mz, p.intensity);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn parses_inline_peaks() {
        let text = "Name: A\nID: a1\nNum Peaks: 2\n50 100; 77 999;\n";
        let p = parse_msp(text).unwrap();
        assert!(p.errors.is_empty());
        assert_eq!(p.spectra.len(), 1);
        assert_eq!(p.spectra[0].compound_id, "a1");
        assert_eq!(
            p.spectra[0].peaks(),
            &[Peak::new(50, 100.0), Peak::new(77, 999.0)]
        );
    }

    #[test]
    fn sorts_unsorted_peaks() {
        let text = "ID: a\nNum Peaks: 2\n77 10; 50 5;\n";
        let p = parse_msp(text).unwrap();
        assert_eq!(
            p.spectra[0].peaks(),
            &[Peak::new(50, 5.0), Peak::new(77, 10.0)]
        );
    }

    #[test]
    fn metadata_and_one_peak_per_line() {
        let text = "Name: Ethyl acetate\nFormula: C4H8O2\nMW: 88\nCAS#: 141-78-6\nID: e1\nNum Peaks: 3\n43 999\n45 120\n61 85\n";
        let s = &parse_msp(text).unwrap().spectra[0];
        assert_eq!(s.name.as_deref(), Some("Ethyl acetate"));
        assert_eq!(s.formula.as_deref(), Some("C4H8O2"));
        assert_eq!(s.molecular_weight, Some(88.0));
        assert_eq!(s.len(), 3);
    }

    #[test]
    fn count_mismatch_is_record_level() {
        let text = "ID: bad\nNum Peaks: 3\n50 1; 60 2;\n\nID: good\nNum Peaks: 1\n41 5;\n";
        let p = parse_msp(text).unwrap();
        assert_eq!(p.spectra.len(), 1);
        assert_eq!(p.spectra[0].compound_id, "good");
        assert_eq!(p.errors.len(), 1);
        assert_eq!(p.errors[0].line, 1);
        assert_eq!(p.errors[0].id.as_deref(), Some("bad"));
    }

    #[test]
    fn empty_peak_list_is_record_level() {
        let text = "ID: e\nNum Peaks: 0\n\nID: f\nNum Peaks: 1\n50 1;\n";
        let p = parse_msp(text).unwrap();
        assert_eq!(p.spectra.len(), 1);
        assert!(p.errors[0].message.contains("empty"));
    }

    #[test]
    fn malformed_header_reports_line() {
        let text = "ID: a\nNum Peaks: 1\n50 1;\n\nthis is not a header\n";
        match parse_msp(text) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 5),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_mz_merged_after_count() {
        let text = "ID: d\nNum Peaks: 3\n50 1; 50 2; 60 1;\n";
        let s = &parse_msp(text).unwrap().spectra[0];
        assert_eq!(s.peaks(), &[Peak::new(50, 3.0), Peak::new(60, 1.0)]);
    }

    #[test]
    fn synthetic_library_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut spectra = Vec::new();
        for i in 0..1000 {
            let n = rng.random_range(1..60);
            let pairs: Vec<(u32, f64)> = (0..n)
                .map(|_| (rng.random_range(1..=1000), rng.random::<f64>() * 999.0))
                .collect();
            let mut s = MassSpectrum::from_pairs(format!("cmp{i}"), &pairs).unwrap();
            if i % 3 == 0 {
                s.name = Some(format!("compound {i}"));
                s.molecular_weight = Some(rng.random_range(50.0..300.0));
            }
            spectra.push(s);
        }
        let text = write_msp(&spectra);
        let first = parse_msp(&text).unwrap();
        assert!(first.errors.is_empty());
        assert_eq!(first.spectra, spectra);
        let second = parse_msp(&write_msp(&first.spectra)).unwrap();
        assert_eq!(second.spectra, first.spectra);
    }
}
