//! Run configuration: defaults, TOML file overlay, flag overrides.

use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use scent_core::alignment::{AlignmentConfig, MaskedConfig, SupervisedConfig, DEFAULT_TAU_GRID};
use scent_core::downstream::ClassifierConfig;
use scent_core::encoder::{EncoderConfig, SgnsConfig};
use scent_core::eval::BootstrapConfig;
use scent_core::splits::DEFAULT_PAIR_LABEL_CAP;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSection {
    pub mw_lo: f64,
    pub mw_hi: f64,
    /// m/z window kept by `preprocess`.
    pub mz_lo: u32,
    pub mz_hi: u32,
    pub window: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            mw_lo: 50.0,
            mw_hi: 300.0,
            mz_lo: 50,
            mz_hi: 180,
            window: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSection {
    pub taus: Vec<f64>,
}

impl Default for GridSection {
    fn default() -> Self {
        Self {
            taus: DEFAULT_TAU_GRID.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSection {
    pub test_ratio: f64,
    pub folds: usize,
    pub order: u8,
    pub pair_label_cap: usize,
}

impl Default for SplitSection {
    fn default() -> Self {
        Self {
            test_ratio: 0.1,
            folds: 5,
            order: 2,
            pair_label_cap: DEFAULT_PAIR_LABEL_CAP,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressSection {
    pub lambda: f64,
    pub splits: usize,
    pub ratio: f64,
}

impl Default for RegressSection {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            splits: 100,
            ratio: 0.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSection {
    pub k: usize,
    pub bins: usize,
    pub pca_k: usize,
    pub fractions: Vec<f64>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            k: 5,
            bins: 5,
            pca_k: 2,
            fractions: vec![0.1, 0.25, 0.5, 0.75, 1.0],
        }
    }
}

/// Fully resolved configuration for one command. Seeds inside the stage
/// sections are not configurable; they are derived from the run seed.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataSection,
    pub encoder: EncoderConfig,
    pub sgns: SgnsConfig,
    pub align: AlignmentConfig,
    pub grid: GridSection,
    pub mask: MaskedConfig,
    pub supervised: SupervisedConfig,
    pub classify: ClassifierConfig,
    pub split: SplitSection,
    pub regress: RegressSection,
    pub bootstrap: BootstrapConfig,
    pub eval: EvalSection,
}

/// Keys that are valid but absent from the serialized defaults.
const OPTIONAL_KEYS: [(&str, ValueKind); 1] = [("encoder.proj_hidden", ValueKind::Integer)];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ValueKind {
    Integer,
    Float,
    Bool,
    String,
    Array,
    Table,
}

fn kind(v: &Value) -> ValueKind {
    match v {
        Value::Integer(_) => ValueKind::Integer,
        Value::Float(_) => ValueKind::Float,
        Value::Boolean(_) => ValueKind::Bool,
        Value::String(_) => ValueKind::String,
        Value::Array(_) => ValueKind::Array,
        Value::Table(_) => ValueKind::Table,
        Value::Datetime(_) => ValueKind::String,
    }
}

fn kind_name(k: ValueKind) -> &'static str {
    match k {
        ValueKind::Integer => "an integer",
        ValueKind::Float => "a number",
        ValueKind::Bool => "a boolean",
        ValueKind::String => "a string",
        ValueKind::Array => "an array",
        ValueKind::Table => "a table",
    }
}

fn strip_seeds(t: &mut Table, top: bool) {
    if !top {
        t.remove("seed");
    }
    for (_, v) in t.iter_mut() {
        if let Value::Table(inner) = v {
            strip_seeds(inner, false);
        }
    }
}

/// Defaults as a TOML table, without per-stage seeds.
pub fn default_table() -> Table {
    let Ok(Value::Table(mut t)) = Value::try_from(RunConfig::default()) else {
        unreachable!("defaults serialize to a table")
    };
    strip_seeds(&mut t, false);
    t
}

fn suggest<'a>(key: &str, candidates: impl Iterator<Item = &'a String>) -> Option<String> {
    candidates
        .map(|c| (strsim::jaro_winkler(key, c), c))
        .filter(|(s, _)| *s >= 0.8)
        .max_by(|a, b| a.0.total_cmp(&b.0))
        .map(|(_, c)| c.clone())
}

fn unknown_key(path: &str, key: &str, known: &Table) -> anyhow::Error {
    let full = if path.is_empty() { key.to_string() } else { format!("{path}.{key}") };
    match suggest(key, known.keys()) {
        Some(s) => anyhow!("unknown config key `{full}`; did you mean `{s}`?"),
        None => anyhow!("unknown config key `{full}`"),
    }
}

fn coerce(path: &str, want: ValueKind, v: Value) -> Result<Value> {
    match (want, v) {
        (ValueKind::Float, Value::Integer(i)) => Ok(Value::Float(i as f64)),
        (ValueKind::Array, Value::Array(items)) => {
            let items = items
                .into_iter()
                .map(|x| match x {
                    Value::Integer(i) => Ok(Value::Float(i as f64)),
                    Value::Float(f) => Ok(Value::Float(f)),
                    other => bail!("config key `{path}` expects numbers, got {}", kind_name(kind(&other))),
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Value::Array(items))
        }
        (want, v) if kind(&v) == want => Ok(v),
        (want, v) => bail!("config key `{path}` expects {}, got {}", kind_name(want), kind_name(kind(&v))),
    }
}

/// Writes `src` into `dst`, checking every key and value type against
/// `known`. Paths are reported dotted from the root.
fn overlay(dst: &mut Table, known: &Table, src: Table, path: &str) -> Result<()> {
    for (key, value) in src {
        let full = if path.is_empty() { key.clone() } else { format!("{path}.{key}") };
        if key == "seed" {
            bail!("config key `{full}` is not allowed; pass --seed on the command line");
        }
        let want = match known.get(&key) {
            Some(v) => kind(v),
            None => match OPTIONAL_KEYS.iter().find(|(p, _)| *p == full) {
                Some((_, k)) => *k,
                None => return Err(unknown_key(path, &key, known)),
            },
        };
        if want == ValueKind::Table {
            let Value::Table(inner) = value else {
                bail!("config key `{full}` expects a table, got {}", kind_name(kind(&value)));
            };
            let Some(Value::Table(known_inner)) = known.get(&key) else { unreachable!() };
            let known_inner = known_inner.clone();
            let slot = dst.entry(key.clone()).or_insert_with(|| Value::Table(Table::new()));
            let Value::Table(slot) = slot else { unreachable!() };
            overlay(slot, &known_inner, inner, &full)?;
        } else {
            dst.insert(key, coerce(&full, want, value)?);
        }
    }
    Ok(())
}

fn merge_into(dst: &mut Table, src: Table) {
    for (k, v) in src {
        match (dst.get_mut(&k), v) {
            (Some(Value::Table(d)), Value::Table(s)) => merge_into(d, s),
            (_, v) => {
                dst.insert(k, v);
            }
        }
    }
}

/// Parses a `--set key=value` assignment into a nested table.
pub fn parse_assignment(s: &str) -> Result<Table> {
    let (key, raw) = s
        .split_once('=')
        .ok_or_else(|| anyhow!("expected key=value, got `{s}`"))?;
    let key = key.trim();
    if key.is_empty() {
        bail!("empty key in `{s}`");
    }
    let raw = raw.trim();
    let value = match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => Value::String(raw.to_string()),
    };
    Ok(nested(key, value))
}

/// `a.b.c = v` as nested tables.
pub fn nested(path: &str, value: Value) -> Table {
    let mut parts: Vec<&str> = path.split('.').collect();
    let last = parts.pop().expect("non-empty path");
    let mut t = Table::new();
    t.insert(last.to_string(), value);
    for p in parts.into_iter().rev() {
        let mut outer = Table::new();
        outer.insert(p.to_string(), Value::Table(t));
        t = outer;
    }
    t
}

/// Resolves defaults, then the optional file, then each override in order.
pub fn resolve(file: Option<&str>, overrides: &[Table], seed: u64) -> Result<RunConfig> {
    let known = default_table();
    let mut merged = known.clone();
    if let Some(text) = file {
        let parsed: Table = text.parse().map_err(|e| anyhow!("config parse error: {e}"))?;
        overlay(&mut merged, &known, parsed, "")?;
    }
    for o in overrides {
        overlay(&mut merged, &known, o.clone(), "")?;
    }
    let Ok(Value::Table(mut full)) = Value::try_from(RunConfig::default()) else {
        unreachable!("defaults serialize to a table")
    };
    merge_into(&mut full, merged);
    let mut cfg: RunConfig = Value::Table(full)
        .try_into()
        .map_err(|e: toml::de::Error| anyhow!("invalid config: {}", e.message()))?;
    cfg.seed = seed;
    cfg.sgns.seed = seed;
    cfg.align.seed = seed;
    cfg.mask.seed = seed;
    cfg.supervised.seed = seed;
    cfg.classify.seed = seed;
    cfg.bootstrap.seed = seed;
    cfg.encoder.validate()?;
    Ok(cfg)
}

pub fn load_file(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))
}
