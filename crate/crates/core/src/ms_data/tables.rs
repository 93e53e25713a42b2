//! Side tables keyed by compound id: structure embeddings (JSON lines),
//! odor labels and perceptual ratings (CSV).

use std::collections::HashMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Raw perceptual ratings arrive on a 0..=99 scale.
pub const RATING_SCALE: f64 = 99.0;

#[derive(Serialize, Deserialize)]
struct EmbeddingLine {
    id: String,
    vec: Vec<f64>,
}

fn load_err(source: &str, message: impl Into<String>) -> Error {
    Error::Load {
        source_name: source.to_string(),
        message: message.into(),
    }
}

/// Fixed-dimension vectors keyed by compound id, in file order.
///
/// Used both for frozen structure embeddings and for exported spectrum
/// embeddings; the on-disk schema is the same.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    ids: Vec<String>,
    vectors: Vec<Vec<f64>>,
    index: HashMap<String, usize>,
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            ids: Vec::new(),
            vectors: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Inserts or replaces the vector for `id`.
    pub fn insert(&mut self, id: impl Into<String>, vec: Vec<f64>) -> Result<()> {
        let id = id.into();
        if vec.len() != self.dim {
            return Err(load_err(
                "embedding table",
                format!("vector for `{id}` has length {}, expected {}", vec.len(), self.dim),
            ));
        }
        if vec.iter().any(|v| !v.is_finite()) {
            return Err(load_err("embedding table", format!("non-finite value in `{id}`")));
        }
        match self.index.get(&id) {
            Some(&i) => self.vectors[i] = vec,
            None => {
                self.index.insert(id.clone(), self.ids.len());
                self.ids.push(id);
                self.vectors.push(vec);
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn get(&self, id: &str) -> Option<&[f64]> {
        self.index.get(id).map(|&i| self.vectors[i].as_slice())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.ids
            .iter()
            .zip(&self.vectors)
            .map(|(id, v)| (id.as_str(), v.as_slice()))
    }

    pub fn read_jsonl<R: BufRead>(reader: R, source: &str) -> Result<Self> {
        let mut table: Option<Self> = None;
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: EmbeddingLine = serde_json::from_str(&line)
                .map_err(|e| load_err(source, format!("line {}: {e}", lineno + 1)))?;
            let t = table.get_or_insert_with(|| Self::new(rec.vec.len()));
            if rec.vec.len() != t.dim {
                return Err(load_err(
                    source,
                    format!(
                        "dimension mismatch at `{}`: {} vs {}",
                        rec.id,
                        rec.vec.len(),
                        t.dim
                    ),
                ));
            }
            t.insert(rec.id, rec.vec)
                .map_err(|e| load_err(source, e.to_string()))?;
        }
        table.ok_or_else(|| load_err(source, "no embeddings"))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_jsonl(std::io::BufReader::new(f), &path.display().to_string())
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for (id, vec) in self.iter() {
            let line = serde_json::to_string(&EmbeddingLine {
                id: id.to_string(),
                vec: vec.to_vec(),
            })?;
            writeln!(w, "{line}")?;
        }
        Ok(())
    }
}

/// Multi-hot odor descriptor labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMatrix {
    pub label_names: Vec<String>,
    ids: Vec<String>,
    rows: Vec<Vec<u8>>,
    index: HashMap<String, usize>,
}

impl LabelMatrix {
    pub fn new(label_names: Vec<String>) -> Self {
        Self {
            label_names,
            ids: Vec::new(),
            rows: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn push(&mut self, id: impl Into<String>, row: Vec<u8>) -> Result<()> {
        let id = id.into();
        if row.len() != self.label_names.len() {
            return Err(load_err(
                "label matrix",
                format!("row `{id}` has {} labels, expected {}", row.len(), self.label_names.len()),
            ));
        }
        if row.iter().any(|&v| v > 1) {
            return Err(load_err("label matrix", format!("row `{id}` is not binary")));
        }
        if self.index.contains_key(&id) {
            return Err(load_err("label matrix", format!("duplicate id `{id}`")));
        }
        self.index.insert(id.clone(), self.ids.len());
        self.ids.push(id);
        self.rows.push(row);
        Ok(())
    }

    pub fn from_rows(label_names: Vec<String>, rows: Vec<(String, Vec<u8>)>) -> Result<Self> {
        let mut m = Self::new(label_names);
        for (id, row) in rows {
            m.push(id, row)?;
        }
        Ok(m)
    }

    pub fn n_labels(&self) -> usize {
        self.label_names.len()
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn rows(&self) -> &[Vec<u8>] {
        &self.rows
    }

    pub fn row(&self, id: &str) -> Option<&[u8]> {
        self.index.get(id).map(|&i| self.rows[i].as_slice())
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    /// Per-label positive counts over the given sample indices.
    pub fn positive_counts(&self, samples: &[usize]) -> Vec<usize> {
        let mut counts = vec![0usize; self.n_labels()];
        for &i in samples {
            for (c, &v) in counts.iter_mut().zip(&self.rows[i]) {
                *c += v as usize;
            }
        }
        counts
    }

    /// Ids of rows with no positive label.
    pub fn unlabeled(&self) -> Vec<&str> {
        self.ids
            .iter()
            .zip(&self.rows)
            .filter(|(_, r)| r.iter().all(|&v| v == 0))
            .map(|(id, _)| id.as_str())
            .collect()
    }

    pub fn subset(&self, samples: &[usize]) -> Self {
        let mut m = Self::new(self.label_names.clone());
        for &i in samples {
            m.index.insert(self.ids[i].clone(), m.ids.len());
            m.ids.push(self.ids[i].clone());
            m.rows.push(self.rows[i].clone());
        }
        m
    }

    pub fn read_csv<R: std::io::Read>(reader: R, source: &str) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let headers = rdr.headers()?.clone();
        if headers.is_empty() || headers.get(0).map(str::trim) != Some("id") {
            return Err(load_err(source, "header must start with `id`"));
        }
        let mut m = Self::new(headers.iter().skip(1).map(|h| h.trim().to_string()).collect());
        for (n, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let id = rec.get(0).unwrap_or_default().trim().to_string();
            let row = rec
                .iter()
                .skip(1)
                .map(|c| match c.trim() {
                    "0" => Ok(0u8),
                    "1" => Ok(1u8),
                    other => Err(load_err(
                        source,
                        format!("row {} (`{id}`): label cell `{other}` is not 0/1", n + 2),
                    )),
                })
                .collect::<Result<Vec<u8>>>()?;
            m.push(id, row).map_err(|e| load_err(source, e.to_string()))?;
        }
        Ok(m)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_csv(f, &path.display().to_string())
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        let mut header = vec!["id".to_string()];
        header.extend(self.label_names.iter().cloned());
        wtr.write_record(&header)?;
        for (id, row) in self.ids.iter().zip(&self.rows) {
            let mut rec = vec![id.clone()];
            rec.extend(row.iter().map(|v| v.to_string()));
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Continuous perceptual ratings rescaled to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RatingMatrix {
    pub attribute_names: Vec<String>,
    ids: Vec<String>,
    rows: Vec<Vec<f64>>,
}

impl RatingMatrix {
    /// Builds from already-normalized rows.
    pub fn from_rows(attribute_names: Vec<String>, rows: Vec<(String, Vec<f64>)>) -> Result<Self> {
        let mut ids = Vec::with_capacity(rows.len());
        let mut vals = Vec::with_capacity(rows.len());
        for (id, row) in rows {
            if row.len() != attribute_names.len() {
                return Err(load_err("rating matrix", format!("row `{id}` has wrong width")));
            }
            if row.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
                return Err(load_err("rating matrix", format!("row `{id}` outside [0,1]")));
            }
            ids.push(id);
            vals.push(row);
        }
        Ok(Self {
            attribute_names,
            ids,
            rows: vals,
        })
    }

    pub fn n_attributes(&self) -> usize {
        self.attribute_names.len()
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    /// Reads raw 0..=99 ratings and divides by 99.
    pub fn read_csv<R: std::io::Read>(reader: R, source: &str) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let headers = rdr.headers()?.clone();
        if headers.get(0).map(str::trim) != Some("id") {
            return Err(load_err(source, "header must start with `id`"));
        }
        let names: Vec<String> = headers.iter().skip(1).map(|h| h.trim().to_string()).collect();
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let id = rec.get(0).unwrap_or_default().trim().to_string();
            let row = rec
                .iter()
                .skip(1)
                .map(|c| {
                    let v: f64 = c.trim().parse().map_err(|_| {
                        load_err(source, format!("`{id}`: rating `{c}` is not a number"))
                    })?;
                    if !v.is_finite() || !(0.0..=RATING_SCALE).contains(&v) {
                        return Err(load_err(source, format!("`{id}`: rating {v} outside [0, 99]")));
                    }
                    Ok(v / RATING_SCALE)
                })
                .collect::<Result<Vec<f64>>>()?;
            if row.len() != names.len() {
                return Err(load_err(source, format!("`{id}`: expected {} ratings", names.len())));
            }
            rows.push((id, row));
        }
        Self::from_rows(names, rows)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_csv(f, &path.display().to_string())
    }
}
