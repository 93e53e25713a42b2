//! Command-line surface. Hyperparameter flags are optional so that a value
//! from `--config` survives unless the flag is given; the defaults shown in
//! help text are the resolved defaults.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use toml::{Table, Value};

use crate::config::nested;

#[derive(Debug, Parser)]
#[command(name = "scent", version, about = "Mass-spectrum odor prediction experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML config file; flags override its values
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Config override such as `encoder.d=64`; repeatable, applied after the file
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Primary output file; `<out>.run.json` and other sidecars land next to it
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct Seed {
    /// Master seed; every random draw in the run derives from it
    #[arg(long)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args)]
pub struct SplitInput {
    /// Existing `id,assignment` split; built and written to `<out>.split.csv` when absent
    #[arg(long, value_name = "PATH")]
    pub split: Option<PathBuf>,
    /// Number of cross-validation folds [default: 5]
    #[arg(long)]
    pub folds: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Raw acquisition CSV to a baseline-corrected, time-averaged spectrum
    Preprocess(PreprocessArgs),
    /// Skip-gram pretraining of peak embeddings on co-occurrence
    PretrainCooc(PretrainArgs),
    /// Contrastive spectrum-structure alignment
    Align(AlignArgs),
    /// Alignment over a temperature grid, keeping the best model
    AlignGrid(AlignGridArgs),
    /// Spectrum embeddings from a trained model or pooled peak embeddings
    Embed(EmbedArgs),
    /// Multi-label odor classifier with held-out test set and k-fold CV
    Classify(ClassifyArgs),
    /// Ridge regression of perceptual ratings over repeated splits
    Regress(RegressArgs),
    /// Ablations: masked reconstruction or end-to-end supervision
    #[command(subcommand)]
    Ablate(AblateMode),
    /// Classifier performance against training-set fraction
    Scale(ScaleArgs),
    /// Bootstrap confidence intervals and paired tests over predictions
    Bootstrap(BootstrapArgs),
    /// Principal-component projection of embeddings
    Pca(PcaArgs),
    /// Flatten result JSON files into CSV tables
    Report(ReportArgs),
    /// Re-execute a run from its run.json and compare output hashes
    Rerun(RerunArgs),
    /// Write a seeded synthetic dataset for smoke runs
    Synth(SynthArgs),
}

#[derive(Debug, Subcommand)]
pub enum AblateMode {
    /// Masked peak reconstruction pretraining of the encoder
    Mask(MaskArgs),
    /// Encoder, projection and classifier trained jointly on labels
    Supervised(SupervisedArgs),
}

fn int(out: &mut Table, path: &str, v: Option<usize>) {
    if let Some(v) = v {
        merge(out, nested(path, Value::Integer(v as i64)));
    }
}

fn float(out: &mut Table, path: &str, v: Option<f64>) {
    if let Some(v) = v {
        merge(out, nested(path, Value::Float(v)));
    }
}

fn merge(dst: &mut Table, src: Table) {
    for (k, v) in src {
        match (dst.get_mut(&k), v) {
            (Some(Value::Table(d)), Value::Table(s)) => merge(d, s),
            (_, v) => {
                dst.insert(k, v);
            }
        }
    }
}

/// Typed flags as a config overlay.
pub trait Overrides {
    fn overrides(&self) -> Table;
}

#[derive(Debug, Clone, Args)]
pub struct PreprocessArgs {
    #[command(flatten)]
    pub common: Common,
    /// Raw acquisition CSV (`time,<mz1>,...`); repeatable
    #[arg(long = "in", value_name = "PATH", required = true)]
    pub inputs: Vec<PathBuf>,
    /// Compound id per input, in order [default: file stem]
    #[arg(long = "id")]
    pub ids: Vec<String>,
    /// Lowest m/z channel kept [default: 50]
    #[arg(long)]
    pub mz_lo: Option<usize>,
    /// Highest m/z channel kept [default: 180]
    #[arg(long)]
    pub mz_hi: Option<usize>,
    /// Sliding-slope window length [default: 20]
    #[arg(long)]
    pub window: Option<usize>,
}

impl Overrides for PreprocessArgs {
    fn overrides(&self) -> Table {
        let mut t = Table::new();
        int(&mut t, "data.mz_lo", self.mz_lo);
        int(&mut t, "data.mz_hi", self.mz_hi);
        int(&mut t, "data.window", self.window);
        t
    }
}

#[derive(Debug, Clone, Args)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub seed: Seed,
    /// Spectral library (MSP)
    #[arg(long, value_name = "PATH")]
    pub spectra: PathBuf,
    /// Embedding dimension [default: 500]
    #[arg(long)]
    pub dim: Option<usize>,
    /// Training epochs [default: 5]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Negatives per positive pair [default: 5]
    #[arg(long)]
    pub negatives: Option<usize>,
    /// Learning rate [default: 0.025]
    #[arg(long)]
    pub lr: Option<f64>,
}

impl Overrides for PretrainArgs {
    fn overrides(&self) -> Table {
        let mut t = Table::new();
        int(&mut t, "sgns.dim", self.dim);
        int(&mut t, "sgns.epochs", self.epochs);
        int(&mut t, "sgns.negatives", self.negatives);
        float(&mut t, "sgns.lr", self.lr);
        t
    }
}

#[derive(Debug, Clone, Args)]
pub struct AlignTrain {
    /// Spectral library (MSP)
    #[arg(long, value_name = "PATH")]
    pub spectra: PathBuf,
    /// Structure embeddings (JSON lines with `id` and `vec`)
    #[arg(long, value_name = "PATH")]
    pub structs: PathBuf,
    /// Peak-embedding checkpoint from `pretrain-cooc` for the token table
    #[arg(long, value_name = "PATH")]
    pub init: Option<PathBuf>,
    /// Split file whose test ids (and identical spectra) are excluded
    #[arg(long, value_name = "PATH")]
    pub exclude: Option<PathBuf>,
    /// Batch size [default: 512]
    #[arg(long)]
    pub batch: Option<usize>,
    /// Maximum epochs [default: 50]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Encoder learning rate [default: 0.0001]
    #[arg(long)]
    pub lr_encoder: Option<f64>,
    /// Projection learning rate [default: 0.001]
    #[arg(long)]
    pub lr_projection: Option<f64>,
    /// Early-stopping patience in epochs [default: 5]
    #[arg(long)]
    pub patience: Option<usize>,
    /// Fraction of compound ids held out for validation [default: 0.05]
    #[arg(long)]
    pub val_fraction: Option<f64>,
}

impl AlignTrain {
    fn put(&self, t: &mut Table) {
        int(t, "align.batch", self.batch);
        int(t, "align.max_epochs", self.epochs);
        float(t, "align.lr_encoder", self.lr_encoder);
        float(t, "align.lr_projection", self.lr_projection);
        int(t, "align.patience", self.patience);
        float(t, "align.val_fraction", self.val_fraction);
    }
}

#[derive(Debug, Clone, Args)]
pub struct AlignArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub seed: Seed,
    #[command(flatten)]
    pub train: AlignTrain,
    /// Softmax temperature [default: 0.03]
    #[arg(long)]
    pub tau: Option<f64>,
}

impl Overrides for AlignArgs {
    fn overrides(&self) -> Table {
        let mut t = Table::new();
        self.train.put(&mut t);
        float(&mut t, "align.tau", self.tau);
        t
    }
}

#[derive(Debug, Clone, Args)]
pub struct AlignGridArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub seed: Seed,
    #[command(flatten)]
    pub train: AlignTrain,
    /// Comma-separated temperatures [default: 0.01,0.03,0.05,0.07,0.1]
    #[arg(long, value_delimiter = ',')]
    pub grid: Vec<f64>,
}

impl Overrides for AlignGridArgs {
    fn overrides(&self) -> Table {
        let mut t = Table::new();
        self.train.put(&mut t);
        if !self.grid.is_empty() {
            let v = self.grid.iter().map(|&x| Value::Float(x)).collect();
            merge(&mut t, nested("grid.taus", Value::Array(v)));
        }
        t
    }
}

#[derive(Debug, Clone, Args)]
pub struct EmbedArgs {
    #[command(flatten)]
    pub common: Common,
    /// Spectral library (MSP)
    #[arg(long, value_name = "PATH")]
    pub spectra: PathBuf,
    /// Aligned model checkpoint
    #[arg(long, value_name = "PATH", required_unless_present = "pooled", conflicts_with = "pooled")]
    pub model: Option<PathBuf>,
    /// Peak-embedding checkpoint; embeds by intensity-weighted pooling
    #[arg(long, value_name = "PATH")]
    pub pooled: Option<PathBuf>,
}

impl Overrides for EmbedArgs {
    fn overrides(&self) -> Table {
        Table::new()
    }
}

#[derive(Debug, Clone, Args)]
pub struct ClassifierFlags {
    /// Embeddings (JSON lines)
    #[arg(long, value_name = "PATH")]
    pub emb: PathBuf,
    /// Labels CSV (`id,<label1>,...`)
    #[arg(long, value_name = "PATH")]
    pub labels: PathBuf,
    #[command(flatten)]
    pub split: SplitInput,
    /// Batch size [default: 64]
    #[arg(long)]
    pub batch: Option<usize>,
    /// Learning rate [default: 0.0001]
    #[arg(long)]
    pub lr: Option<f64>,
    /// Maximum epochs [default: 50]
    #[arg(long)]
    pub epochs: Option<usize>,
}

impl ClassifierFlags {
    fn put(&self, t: &mut Table) {
        int(t, "split.folds", self.split.folds);
        int(t, "classify.batch", self.batch);
        float(t, "classify.lr", self.lr);
        int(t, "classify.max_epochs", self.epochs);
    }
}

#[derive(Debug, Clone, Args)]
pub struct ClassifyArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub seed: Seed,
    #[command(flatten)]
    pub flags: ClassifierFlags,
}

impl Overrides for ClassifyArgs {
    fn overrides(&self) -> Table {
        let mut t = Table::new();
        self.flags.put(&mut t);
        t
    }
}

#[derive(Debug, Clone, Args)]
pub struct ScaleArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub seed: Seed,
    #[command(flatten)]
    pub flags: ClassifierFlags,
    /// Comma-separated training fractions [default: 0.1,0.25,0.5,0.75,1]
    #[arg(long, value_delimiter = ',')]
    pub fractions: Vec<f64>,
}

impl Overrides for ScaleArgs {
    fn overrides(&self) -> Table {
        let mut t = Table::new();
        self.flags.put(&mut t);
        if !self.fractions.is_empty() {
            let v = self.fractions.iter().map(|&x| Value::Float(x)).collect();
            merge(&mut t, nested("eval.fractions", Value::Array(v)));
        }
        t
    }
}

#[derive(Debug, Clone, Args)]
pub struct RegressArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub seed: Seed,
    /// Embeddings (JSON lines)
    #[arg(long, value_name = "PATH")]
    pub emb: PathBuf,
    /// Ratings CSV (`id,<attr1>,...`)
    #[arg(long, value_name = "PATH")]
    pub ratings: PathBuf,
    /// Repeated random splits [default: 100]
    #[arg(long)]
    pub splits: Option<usize>,
    /// Training share of each split [default: 0.8]
    #[arg(long)]
    pub ratio: Option<f64>,
    /// Ridge penalty [default: 1]
    #[arg(long)]
    pub lambda: Option<f64>,
}

impl Overrides for RegressArgs {
    fn overrides(&self) -> Table {
        let mut t = Table::new();
        int(&mut t, "regress.splits", self.splits);
        float(&mut t, "regress.ratio", self.ratio);
        float(&mut t, "regress.lambda", self.lambda);
        t
    }
}

#[derive(Debug, Clone, Args)]
pub struct MaskArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub seed: Seed,
    /// Spectral library (MSP)
    #[arg(long, value_name = "PATH")]
    pub spectra: PathBuf,
    /// Peak-embedding checkpoint for the token table
    #[arg(long, value_name = "PATH")]
    pub init: Option<PathBuf>,
    /// Fraction of peaks masked [default: 0.15]
    #[arg(long)]
    pub mask_ratio: Option<f64>,
    /// Maximum epochs [default: 50]
    #[arg(long)]
    pub epochs: Option<usize>,
}

impl Overrides for MaskArgs {
    fn overrides(&self) -> Table {
        let mut t = Table::new();
        float(&mut t, "mask.mask_ratio", self.mask_ratio);
        int(&mut t, "mask.max_epochs", self.epochs);
        t
    }
}

#[derive(Debug, Clone, Args)]
pub struct SupervisedArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub seed: Seed,
    /// Spectral library (MSP)
    #[arg(long, value_name = "PATH")]
    pub spectra: PathBuf,
    /// Labels CSV (`id,<label1>,...`)
    #[arg(long, value_name = "PATH")]
    pub labels: PathBuf,
    /// Existing `id,assignment` split; built and written to `<out>.split.csv` when absent
    #[arg(long, value_name = "PATH")]
    pub split: Option<PathBuf>,
    /// Peak-embedding checkpoint for the token table
    #[arg(long, value_name = "PATH")]
    pub init: Option<PathBuf>,
    /// Maximum epochs [default: 50]
    #[arg(long)]
    pub epochs: Option<usize>,
}

impl Overrides for SupervisedArgs {
    fn overrides(&self) -> Table {
        let mut t = Table::new();
        int(&mut t, "supervised.max_epochs", self.epochs);
        t
    }
}

#[derive(Debug, Clone, Args)]
pub struct BootstrapArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub seed: Seed,
    /// Test-set predictions as `name=path` (CSV `id,<label1>,...`); repeatable
    #[arg(long = "pred", value_name = "NAME=PATH", required = true)]
    pub predictions: Vec<String>,
    /// Labels CSV (`id,<label1>,...`)
    #[arg(long, value_name = "PATH")]
    pub labels: PathBuf,
    /// Split file; training positives from its pool define frequency bins
    #[arg(long, value_name = "PATH")]
    pub split: Option<PathBuf>,
    /// Bootstrap replicates [default: 10000]
    #[arg(long)]
    pub replicates: Option<usize>,
}

impl Overrides for BootstrapArgs {
    fn overrides(&self) -> Table {
        let mut t = Table::new();
        int(&mut t, "bootstrap.replicates", self.replicates);
        t
    }
}

#[derive(Debug, Clone, Args)]
pub struct PcaArgs {
    #[command(flatten)]
    pub common: Common,
    /// Embeddings (JSON lines)
    #[arg(long, value_name = "PATH")]
    pub emb: PathBuf,
    /// Number of components [default: 2]
    #[arg(long)]
    pub k: Option<usize>,
}

impl Overrides for PcaArgs {
    fn overrides(&self) -> Table {
        let mut t = Table::new();
        int(&mut t, "eval.pca_k", self.k);
        t
    }
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    #[command(flatten)]
    pub common: Common,
    /// Result JSON from classify, scale, regress, bootstrap or ablate; repeatable
    #[arg(long = "in", value_name = "PATH", required = true)]
    pub inputs: Vec<PathBuf>,
}

impl Overrides for ReportArgs {
    fn overrides(&self) -> Table {
        Table::new()
    }
}

#[derive(Debug, Clone, Args)]
pub struct RerunArgs {
    /// run.json written by an earlier command
    pub record: PathBuf,
    /// Write outputs here instead of the recorded location
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub seed: Seed,
    /// Number of compounds
    #[arg(long, default_value_t = 600)]
    pub n: usize,
    /// Number of odor labels
    #[arg(long, default_value_t = 8)]
    pub labels: usize,
    /// Raw acquisitions written for the first compounds
    #[arg(long, default_value_t = 3)]
    pub acquisitions: usize,
}

impl Overrides for SynthArgs {
    fn overrides(&self) -> Table {
        Table::new()
    }
}
