//! One function per subcommand. Each reads its inputs, runs one pipeline,
//! writes its outputs and returns what the run record needs.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};

use scent_core::acquisition::{preprocess, RawAcquisition};
use scent_core::alignment::{
    build_pairs, grid_search_temperature, predict_supervised, train_alignment, train_masked_reconstruction,
    train_supervised_e2e, write_history_csv, AlignmentPair, EpochRecord,
};
use scent_core::downstream::{pca_project, predict_labels, regress_repeated, train_classifier, FoldResult};
use scent_core::encoder::{
    build_peak_tokens, eims2vec_pool, embed_spectra, init_encoder_params, pretrain_cooccurrence, EncoderConfig,
    PeakVocabulary,
};
use scent_core::eval::{
    bootstrap_ci, evaluate_multilabel, frequency_bin_report, mean_adjusted_precision_at_k, micro_auc, per_label_auc,
    weighted_auc, wilcoxon_signed_rank, MetricReport,
};
use scent_core::ms_data::{
    filter_molecular_weight, leakage_filter, parse_msp, write_msp, EmbeddingTable, LabelMatrix, MassSpectrum,
    RatingMatrix, RATING_SCALE,
};
use scent_core::splits::{kfold, nested_subsamples, Assignment, SplitPlan, StratifyOptions};
use scent_core::synthetic::{learnable_alignment, linear_ratings, planted_acquisition, projected_labels};
use scent_core::tensor::{Checkpoint, ParamStore, Tensor};

use crate::args::{
    AlignArgs, AlignGridArgs, AlignTrain, BootstrapArgs, ClassifierFlags, ClassifyArgs, EmbedArgs, MaskArgs, PcaArgs,
    PreprocessArgs, PretrainArgs, RegressArgs, ReportArgs, ScaleArgs, SupervisedArgs, SynthArgs,
};
use crate::config::RunConfig;
use crate::record::sidecar;

/// What a finished command hands back for its run record.
#[derive(Debug, Default)]
pub struct Outcome {
    pub inputs: Vec<PathBuf>,
    /// (role, path); roles name outputs independently of `--out`.
    pub outputs: Vec<(String, PathBuf)>,
    pub summary: Value,
}

impl Outcome {
    fn output(&mut self, role: &str, path: PathBuf) {
        self.outputs.push((role.to_string(), path));
    }
}

const EMBED_CHUNK: usize = 256;

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut w = create(path)?;
    w.write_all(text.as_bytes())?;
    w.flush()?;
    Ok(())
}

/// CSV with `id` then one column per name.
fn write_matrix_csv(path: &Path, names: &[String], ids: &[String], rows: &[Vec<f64>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    let mut header = vec!["id".to_string()];
    header.extend(names.iter().cloned());
    w.write_record(&header)?;
    for (id, row) in ids.iter().zip(rows) {
        let mut rec = vec![id.clone()];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn read_matrix_csv(path: &Path) -> Result<(Vec<String>, Vec<String>, Vec<Vec<f64>>)> {
    let mut r = csv::Reader::from_reader(BufReader::new(
        File::open(path).with_context(|| format!("opening {}", path.display()))?,
    ));
    let headers = r.headers()?.clone();
    if headers.get(0) != Some("id") {
        bail!("{}: header must start with `id`", path.display());
    }
    let names: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
    let mut ids = Vec::new();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        ids.push(rec[0].to_string());
        let row = rec
            .iter()
            .skip(1)
            .map(|c| c.trim().parse::<f64>().map_err(|_| anyhow!("{}: bad number `{c}`", path.display())))
            .collect::<Result<Vec<_>>>()?;
        if row.len() != names.len() {
            bail!("{}: row `{}` has {} values, expected {}", path.display(), &rec[0], row.len(), names.len());
        }
        rows.push(row);
    }
    Ok((names, ids, rows))
}

/// Library spectra passing the molecular-weight filter and carrying at
/// least one peak inside `vocab`.
fn read_spectra(path: &Path, cfg: &RunConfig, vocab: &PeakVocabulary) -> Result<Vec<MassSpectrum>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let parsed = parse_msp(&text)?;
    for e in &parsed.errors {
        warn!("{}:{}: skipped record: {}", path.display(), e.line, e.message);
    }
    let n = parsed.spectra.len();
    let kept = filter_molecular_weight(parsed.spectra, cfg.data.mw_lo, cfg.data.mw_hi);
    let kept: Vec<MassSpectrum> = kept
        .into_iter()
        .filter(|s| s.peaks().iter().any(|p| p.intensity > 0.0 && vocab.token(p.mz).is_some()))
        .collect();
    info!("{}: {} of {} spectra kept", path.display(), kept.len(), n);
    if kept.is_empty() {
        bail!("{}: no usable spectra", path.display());
    }
    Ok(kept)
}

fn read_plan(path: &Path, cfg: &RunConfig) -> Result<SplitPlan> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(SplitPlan::read_csv(BufReader::new(f), cfg.seed, cfg.split.order)?)
}

fn stratify_opts(cfg: &RunConfig) -> StratifyOptions {
    StratifyOptions {
        pair_label_cap: cfg.split.pair_label_cap,
        ..StratifyOptions::new(cfg.split.order, cfg.seed)
    }
}

fn init_params(enc: &EncoderConfig, init: Option<&Path>, seed: u64) -> Result<ParamStore> {
    let e_cen = match init {
        Some(p) => Some(load_e_cen(p)?.0),
        None => None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(init_encoder_params(enc, e_cen.as_ref(), &mut rng)?)
}

fn load_e_cen(path: &Path) -> Result<(Tensor, PeakVocabulary)> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    let t = ck.params.get("e_cen")?.clone();
    let vocab = ck
        .config
        .as_ref()
        .and_then(|c| c.get("vocab"))
        .cloned()
        .ok_or_else(|| anyhow!("{}: missing vocabulary metadata", path.display()))?;
    Ok((t, serde_json::from_value(vocab)?))
}

fn load_model(path: &Path) -> Result<(ParamStore, EncoderConfig)> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    let enc = ck
        .config
        .as_ref()
        .and_then(|c| c.get("encoder"))
        .cloned()
        .ok_or_else(|| anyhow!("{}: missing encoder metadata", path.display()))?;
    Ok((ck.params, serde_json::from_value(enc)?))
}

fn save_model(path: &Path, params: &ParamStore, enc: &EncoderConfig, extra: Value) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut meta = json!({ "encoder": enc });
    if let (Value::Object(m), Value::Object(e)) = (&mut meta, extra) {
        m.extend(e);
    }
    Checkpoint::new(params.clone()).with_config(meta).save(path)?;
    Ok(())
}

pub fn preprocess_cmd(a: &PreprocessArgs, cfg: &mut RunConfig) -> Result<Outcome> {
    if !a.ids.is_empty() && a.ids.len() != a.inputs.len() {
        bail!("{} ids given for {} inputs", a.ids.len(), a.inputs.len());
    }
    let mut out = Outcome::default();
    let mut spectra = Vec::new();
    let mut per_input = Vec::new();
    for (i, path) in a.inputs.iter().enumerate() {
        let id = match a.ids.get(i) {
            Some(id) => id.clone(),
            None => path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
        };
        let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
        let raw = RawAcquisition::read_csv(BufReader::new(f))?;
        let raw = raw.restrict_mz(cfg.data.mz_lo, cfg.data.mz_hi)?;
        let p = preprocess(&raw, cfg.data.window, &id).with_context(|| format!("preprocessing {}", path.display()))?;
        per_input.push(json!({ "id": id, "boundaries": p.boundaries, "peaks": p.spectrum.len() }));
        spectra.push(p.spectrum);
        out.inputs.push(path.clone());
    }
    write_text(&a.common.out, &write_msp(&spectra))?;
    out.output("spectra", a.common.out.clone());
    out.summary = json!({ "acquisitions": per_input });
    Ok(out)
}

pub fn pretrain_cmd(a: &PretrainArgs, cfg: &mut RunConfig) -> Result<Outcome> {
    let vocab = cfg.encoder.vocab;
    let spectra = read_spectra(&a.spectra, cfg, &vocab)?;
    let r = pretrain_cooccurrence(&spectra, &vocab, &cfg.sgns)?;
    let mut params = ParamStore::new();
    params.insert("e_cen", r.e_cen);
    if let Some(dir) = a.common.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Checkpoint::new(params)
        .with_config(json!({ "vocab": vocab, "sgns": cfg.sgns }))
        .save(&a.common.out)?;
    let hist = sidecar(&a.common.out, "history.csv");
    let mut w = csv::Writer::from_writer(create(&hist)?);
    w.write_record(["epoch", "loss", "positive_loss"])?;
    for (e, (l, p)) in r.loss_history.iter().zip(&r.positive_history).enumerate() {
        w.write_record([e.to_string(), l.to_string(), p.to_string()])?;
    }
    w.flush()?;
    let mut out = Outcome {
        inputs: vec![a.spectra.clone()],
        ..Outcome::default()
    };
    out.output("checkpoint", a.common.out.clone());
    out.output("history", hist);
    out.summary = json!({ "spectra": spectra.len(), "final_loss": r.loss_history.last() });
    Ok(out)
}

struct AlignData {
    spectra: Vec<MassSpectrum>,
    structs: EmbeddingTable,
    removed: usize,
}

fn align_data(t: &AlignTrain, cfg: &mut RunConfig, out: &mut Outcome) -> Result<AlignData> {
    let structs = EmbeddingTable::load(&t.structs)?;
    if cfg.encoder.proj_dim != structs.dim() {
        info!("projection dimension set to structure dimension {}", structs.dim());
        cfg.encoder.proj_dim = structs.dim();
    }
    let vocab = cfg.encoder.vocab;
    let mut spectra = read_spectra(&t.spectra, cfg, &vocab)?;
    out.inputs.push(t.spectra.clone());
    out.inputs.push(t.structs.clone());
    let mut removed = 0;
    if let Some(p) = &t.exclude {
        let plan = read_plan(p, cfg)?;
        out.inputs.push(p.clone());
        let test: HashSet<&str> = plan
            .ids
            .iter()
            .zip(&plan.assignments)
            .filter(|(_, a)| **a == Assignment::Test)
            .map(|(id, _)| id.as_str())
            .collect();
        let (held, pool): (Vec<MassSpectrum>, Vec<MassSpectrum>) =
            spectra.into_iter().partition(|s| test.contains(s.compound_id.as_str()));
        let (kept, report) = leakage_filter(&pool, &held);
        removed = held.len() + report.removed.len();
        spectra = kept;
    }
    if let Some(p) = &t.init {
        out.inputs.push(p.clone());
    }
    Ok(AlignData {
        spectra,
        structs,
        removed,
    })
}

fn history_out(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut w = create(path)?;
    write_history_csv(history, &mut w)?;
    w.flush()?;
    Ok(())
}

fn pairs_of<'a>(d: &'a AlignData) -> Result<Vec<AlignmentPair<'a>>> {
    let (pairs, missing) = build_pairs(&d.spectra, &d.structs);
    if !missing.is_empty() {
        warn!("{} spectra have no structure vector and are skipped", missing.len());
    }
    if pairs.is_empty() {
        bail!("no spectrum has a matching structure vector");
    }
    Ok(pairs)
}

pub fn align_cmd(a: &AlignArgs, cfg: &mut RunConfig) -> Result<Outcome> {
    let mut out = Outcome::default();
    let data = align_data(&a.train, cfg, &mut out)?;
    let pairs = pairs_of(&data)?;
    let init = init_params(&cfg.encoder, a.train.init.as_deref(), cfg.seed)?;
    let r = train_alignment(&pairs, &cfg.encoder, &cfg.align, init)?;
    save_model(&a.common.out, &r.params, &cfg.encoder, json!({ "tau": r.tau }))?;
    let hist = sidecar(&a.common.out, "history.csv");
    history_out(&hist, &r.history)?;
    out.output("checkpoint", a.common.out.clone());
    out.output("history", hist);
    out.summary = json!({
        "pairs": pairs.len(),
        "excluded": data.removed,
        "best_epoch": r.best_epoch,
        "val_loss": r.best().val_loss,
        "val_recall1": r.best().val_recall1,
        "epochs_run": r.history.len(),
    });
    Ok(out)
}

pub fn align_grid_cmd(a: &AlignGridArgs, cfg: &mut RunConfig) -> Result<Outcome> {
    let mut out = Outcome::default();
    let data = align_data(&a.train, cfg, &mut out)?;
    let pairs = pairs_of(&data)?;
    let init = init_params(&cfg.encoder, a.train.init.as_deref(), cfg.seed)?;
    let g = grid_search_temperature(&pairs, &cfg.grid.taus, &cfg.encoder, &cfg.align, &init)?;
    let best = g.best_run();
    save_model(&a.common.out, &best.params, &cfg.encoder, json!({ "tau": best.tau }))?;
    out.output("checkpoint", a.common.out.clone());
    let table = sidecar(&a.common.out, "grid.csv");
    let mut w = csv::Writer::from_writer(create(&table)?);
    w.write_record(["tau", "best_epoch", "val_loss", "val_recall1"])?;
    let mut runs = Vec::new();
    for (i, r) in g.runs.iter().enumerate() {
        let b = r.best();
        w.write_record([r.tau.to_string(), r.best_epoch.to_string(), b.val_loss.to_string(), b.val_recall1.to_string()])?;
        let hist = sidecar(&a.common.out, &format!("tau{i}.history.csv"));
        history_out(&hist, &r.history)?;
        out.output(&format!("history_tau{i}"), hist);
        runs.push(json!({ "tau": r.tau, "best_epoch": r.best_epoch, "val_loss": b.val_loss, "val_recall1": b.val_recall1 }));
    }
    w.flush()?;
    out.output("grid", table);
    out.summary = json!({ "pairs": pairs.len(), "excluded": data.removed, "best_tau": g.best_tau, "runs": runs });
    Ok(out)
}

pub fn embed_cmd(a: &EmbedArgs, cfg: &mut RunConfig) -> Result<Outcome> {
    let mut out = Outcome::default();
    let table = if let Some(model) = &a.model {
        let (params, enc) = load_model(model)?;
        out.inputs.push(model.clone());
        cfg.encoder = enc.clone();
        let spectra = read_spectra(&a.spectra, cfg, &enc.vocab)?;
        embed_spectra(&spectra, &params, &enc, EMBED_CHUNK)?
    } else {
        let pooled = a.pooled.as_ref().expect("clap requires one source");
        let (e_cen, vocab) = load_e_cen(pooled)?;
        out.inputs.push(pooled.clone());
        let enc = EncoderConfig {
            d: e_cen.cols(),
            vocab,
            ..cfg.encoder.clone()
        };
        let spectra = read_spectra(&a.spectra, cfg, &enc.vocab)?;
        let mut t = EmbeddingTable::new(enc.d);
        for s in &spectra {
            t.insert(s.compound_id.clone(), eims2vec_pool(&build_peak_tokens(s, &enc)?, &e_cen))?;
        }
        t
    };
    out.inputs.insert(0, a.spectra.clone());
    let mut w = create(&a.common.out)?;
    table.write_jsonl(&mut w)?;
    w.flush()?;
    out.output("embeddings", a.common.out.clone());
    out.summary = json!({ "embedded": table.len(), "dim": table.dim() });
    Ok(out)
}

/// Labeled rows that also have an embedding, in label-file order.
struct Joined {
    ids: Vec<String>,
    x: Vec<Vec<f64>>,
    y: Vec<Vec<u8>>,
    names: Vec<String>,
}

fn join(emb: &EmbeddingTable, labels: &LabelMatrix) -> Result<Joined> {
    let mut j = Joined {
        ids: Vec::new(),
        x: Vec::new(),
        y: Vec::new(),
        names: labels.label_names.clone(),
    };
    for (id, row) in labels.ids().iter().zip(labels.rows()) {
        if let Some(v) = emb.get(id) {
            j.ids.push(id.clone());
            j.x.push(v.to_vec());
            j.y.push(row.clone());
        }
    }
    let dropped = labels.len() - j.ids.len();
    if dropped > 0 {
        warn!("{dropped} labeled compounds have no embedding and are skipped");
    }
    if j.ids.is_empty() {
        bail!("no labeled compound has an embedding");
    }
    Ok(j)
}

/// Per-row assignment from a split file, or a freshly built stratified plan
/// written next to `out`. Rows absent from a given split file are dropped.
fn assignments(
    ids: &[String],
    y: &[Vec<u8>],
    split: Option<&Path>,
    cfg: &RunConfig,
    out_path: &Path,
    out: &mut Outcome,
) -> Result<Vec<Option<Assignment>>> {
    match split {
        Some(p) => {
            let plan = read_plan(p, cfg)?;
            out.inputs.push(p.to_path_buf());
            let by_id: HashMap<&str, Assignment> =
                plan.ids.iter().map(String::as_str).zip(plan.assignments.iter().copied()).collect();
            Ok(ids.iter().map(|id| by_id.get(id.as_str()).copied()).collect())
        }
        None => {
            let plan = SplitPlan::build(ids, y, cfg.split.test_ratio, cfg.split.folds, &stratify_opts(cfg))?;
            let path = sidecar(out_path, "split.csv");
            let mut w = create(&path)?;
            plan.write_csv(&mut w)?;
            w.flush()?;
            out.output("split", path);
            Ok(plan.assignments.into_iter().map(Some).collect())
        }
    }
}

struct Partition {
    pool: Vec<usize>,
    folds: Vec<usize>,
    test: Vec<usize>,
}

fn partition(assign: &[Option<Assignment>]) -> Result<Partition> {
    let mut p = Partition {
        pool: Vec::new(),
        folds: Vec::new(),
        test: Vec::new(),
    };
    for (i, a) in assign.iter().enumerate() {
        match a {
            Some(Assignment::Test) => p.test.push(i),
            Some(Assignment::Fold(k)) => {
                p.pool.push(i);
                p.folds.push(*k);
            }
            None => {}
        }
    }
    if p.test.is_empty() || p.pool.is_empty() {
        bail!("split needs both test and training rows");
    }
    Ok(p)
}

fn pick<T: Clone>(rows: &[T], idx: &[usize]) -> Vec<T> {
    idx.iter().map(|&i| rows[i].clone()).collect()
}

/// Mean of sigmoid scores over the fold heads, plus each head's own scores.
fn ensemble(folds: &[FoldResult], x: &[Vec<f64>]) -> Result<(Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>)> {
    let per: Vec<Vec<Vec<f64>>> = folds.iter().map(|f| predict_labels(&f.head, x)).collect::<scent_core::Result<_>>()?;
    let mut mean = vec![vec![0.0; per[0].first().map_or(0, Vec::len)]; x.len()];
    for p in &per {
        for (m, r) in mean.iter_mut().zip(p) {
            for (a, b) in m.iter_mut().zip(r) {
                *a += b;
            }
        }
    }
    let k = per.len() as f64;
    for m in &mut mean {
        for a in m.iter_mut() {
            *a /= k;
        }
    }
    Ok((mean, per))
}

fn mean_std(values: &[f64]) -> Value {
    if values.is_empty() {
        return json!(null);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    json!({ "mean": mean, "std": std, "n": values.len() })
}

fn fold_summary(reports: &[MetricReport]) -> Value {
    let col = |f: fn(&MetricReport) -> Option<f64>| reports.iter().filter_map(f).collect::<Vec<f64>>();
    json!({
        "micro_auc": mean_std(&col(|r| r.micro_auc)),
        "weighted_auc": mean_std(&col(|r| r.weighted_auc)),
        "adj_p_at_k": mean_std(&col(|r| r.adj_p_at_k)),
    })
}

struct ClassifierRun {
    report: Value,
    test_ids: Vec<String>,
    scores: Vec<Vec<f64>>,
}

fn classify_rows(j: &Joined, train: &[usize], folds: &[usize], test: &[usize], cfg: &RunConfig) -> Result<ClassifierRun> {
    let x_train = pick(&j.x, train);
    let y_train = pick(&j.y, train);
    let results = train_classifier(&x_train, &y_train, folds, &cfg.classify)?;
    let x_test = pick(&j.x, test);
    let y_test = pick(&j.y, test);
    let (mean, per) = ensemble(&results, &x_test)?;
    let k = cfg.eval.k;
    let metrics = evaluate_multilabel(&mean, &y_test, &j.names, k)?;
    let fold_reports = per
        .iter()
        .map(|s| evaluate_multilabel(s, &y_test, &j.names, k))
        .collect::<scent_core::Result<Vec<_>>>()?;
    let folds_json: Vec<Value> = results
        .iter()
        .zip(&fold_reports)
        .map(|(f, r)| {
            json!({
                "fold": f.fold,
                "best_epoch": f.best_epoch,
                "micro_auc": r.micro_auc,
                "weighted_auc": r.weighted_auc,
                "adj_p_at_k": r.adj_p_at_k,
                "history": f.history,
            })
        })
        .collect();
    let report = json!({
        "train": train.len(),
        "test": test.len(),
        "metrics": {
            "micro_auc": metrics.micro_auc,
            "weighted_auc": metrics.weighted_auc,
            "adj_p_at_k": metrics.adj_p_at_k,
            "k": metrics.k,
            "samples_without_positives": metrics.samples_without_positives,
        },
        "fold_summary": fold_summary(&fold_reports),
        "per_label": metrics.per_label_auc,
        "skipped": metrics.skipped_labels,
        "folds": folds_json,
    });
    Ok(ClassifierRun {
        report,
        test_ids: pick(&j.ids, test),
        scores: mean,
    })
}

fn load_joined(f: &ClassifierFlags, out: &mut Outcome) -> Result<Joined> {
    let emb = EmbeddingTable::load(&f.emb)?;
    let labels = LabelMatrix::load(&f.labels)?;
    out.inputs.push(f.emb.clone());
    out.inputs.push(f.labels.clone());
    join(&emb, &labels)
}

pub fn classify_cmd(a: &ClassifyArgs, cfg: &mut RunConfig) -> Result<Outcome> {
    let mut out = Outcome::default();
    let j = load_joined(&a.flags, &mut out)?;
    let assign = assignments(&j.ids, &j.y, a.flags.split.split.as_deref(), cfg, &a.common.out, &mut out)?;
    let p = partition(&assign)?;
    let run = classify_rows(&j, &p.pool, &p.folds, &p.test, cfg)?;
    write_json(&a.common.out, &run.report)?;
    out.output("report", a.common.out.clone());
    let pred = sidecar(&a.common.out, "predictions.csv");
    write_matrix_csv(&pred, &j.names, &run.test_ids, &run.scores)?;
    out.output("predictions", pred);
    out.summary = run.report["metrics"].clone();
    Ok(out)
}

pub fn scale_cmd(a: &ScaleArgs, cfg: &mut RunConfig) -> Result<Outcome> {
    let mut out = Outcome::default();
    let j = load_joined(&a.flags, &mut out)?;
    let assign = assignments(&j.ids, &j.y, a.flags.split.split.as_deref(), cfg, &a.common.out, &mut out)?;
    let p = partition(&assign)?;
    let pool_y = pick(&j.y, &p.pool);
    let opts = stratify_opts(cfg);
    let subs = nested_subsamples(&pool_y, &cfg.eval.fractions, &opts)?;
    let mut rows = Vec::new();
    for (fraction, sub) in cfg.eval.fractions.iter().zip(&subs) {
        let train: Vec<usize> = sub.selected.iter().map(|&i| p.pool[i]).collect();
        let folds = kfold(&pick(&j.y, &train), cfg.split.folds, &opts)?;
        let run = classify_rows(&j, &train, &folds, &p.test, cfg)?;
        let lost: Vec<&String> = sub.lost_labels.iter().map(|&l| &j.names[l]).collect();
        rows.push(json!({
            "fraction": fraction,
            "train": train.len(),
            "lost_labels": lost,
            "metrics": run.report["metrics"],
            "fold_summary": run.report["fold_summary"],
        }));
    }
    let report = json!({ "fractions": rows });
    write_json(&a.common.out, &report)?;
    out.output("report", a.common.out.clone());
    out.summary = report;
    Ok(out)
}

pub fn regress_cmd(a: &RegressArgs, cfg: &mut RunConfig) -> Result<Outcome> {
    let emb = EmbeddingTable::load(&a.emb)?;
    let ratings = RatingMatrix::load(&a.ratings)?;
    let mut x = Vec::new();
    let mut y = Vec::new();
    for (id, row) in ratings.ids().iter().zip(ratings.rows()) {
        if let Some(v) = emb.get(id) {
            x.push(v.to_vec());
            y.push(row.clone());
        }
    }
    if x.len() < ratings.len() {
        warn!("{} rated compounds have no embedding and are skipped", ratings.len() - x.len());
    }
    let r = &cfg.regress;
    let report = regress_repeated(&x, &y, &ratings.attribute_names, r.splits, r.ratio, r.lambda, cfg.seed)?;
    write_json(&a.common.out, &report)?;
    let mut out = Outcome {
        inputs: vec![a.emb.clone(), a.ratings.clone()],
        ..Outcome::default()
    };
    out.output("report", a.common.out.clone());
    let means: Vec<f64> = report.attributes.iter().filter_map(|s| s.mean_r).collect();
    out.summary = json!({ "compounds": x.len(), "mean_r": mean_std(&means), "pseudo_inverse_fits": report.pseudo_inverse_fits });
    Ok(out)
}

pub fn mask_cmd(a: &MaskArgs, cfg: &mut RunConfig) -> Result<Outcome> {
    let vocab = cfg.encoder.vocab;
    let spectra = read_spectra(&a.spectra, cfg, &vocab)?;
    let mut out = Outcome {
        inputs: vec![a.spectra.clone()],
        ..Outcome::default()
    };
    if let Some(p) = &a.init {
        out.inputs.push(p.clone());
    }
    let init = init_params(&cfg.encoder, a.init.as_deref(), cfg.seed)?;
    let (params, history) = train_masked_reconstruction(&spectra, &cfg.encoder, &cfg.mask, init)?;
    save_model(&a.common.out, &params, &cfg.encoder, json!({ "objective": "masked" }))?;
    let hist = sidecar(&a.common.out, "history.csv");
    history_out(&hist, &history)?;
    out.output("checkpoint", a.common.out.clone());
    out.output("history", hist);
    out.summary = json!({
        "spectra": spectra.len(),
        "first_val_loss": history.first().map(|h| h.val_loss),
        "last_val_loss": history.last().map(|h| h.val_loss),
    });
    Ok(out)
}

pub fn supervised_cmd(a: &SupervisedArgs, cfg: &mut RunConfig) -> Result<Outcome> {
    let labels = LabelMatrix::load(&a.labels)?;
    let vocab = cfg.encoder.vocab;
    let spectra = read_spectra(&a.spectra, cfg, &vocab)?;
    let mut out = Outcome {
        inputs: vec![a.spectra.clone(), a.labels.clone()],
        ..Outcome::default()
    };
    // One spectrum per labeled compound: the first in library order.
    let mut first: HashMap<&str, &MassSpectrum> = HashMap::new();
    for s in &spectra {
        first.entry(s.compound_id.as_str()).or_insert(s);
    }
    let mut ids = Vec::new();
    let mut rows = Vec::new();
    let mut specs = Vec::new();
    for (id, row) in labels.ids().iter().zip(labels.rows()) {
        if let Some(s) = first.get(id.as_str()) {
            ids.push(id.clone());
            rows.push(row.clone());
            specs.push((*s).clone());
        }
    }
    if ids.is_empty() {
        bail!("no labeled compound has a spectrum");
    }
    let assign = assignments(&ids, &rows, a.split.as_deref(), cfg, &a.common.out, &mut out)?;
    let p = partition(&assign)?;
    if let Some(i) = &a.init {
        out.inputs.push(i.clone());
    }
    let init = init_params(&cfg.encoder, a.init.as_deref(), cfg.seed)?;
    let train_specs = pick(&specs, &p.pool);
    let r = train_supervised_e2e(&train_specs, &pick(&rows, &p.pool), &cfg.encoder, &cfg.supervised, init)?;
    let test_refs: Vec<&MassSpectrum> = p.test.iter().map(|&i| &specs[i]).collect();
    let scores = predict_supervised(&test_refs, &r.params, &cfg.encoder)?;
    let y_test = pick(&rows, &p.test);
    let metrics = evaluate_multilabel(&scores, &y_test, &labels.label_names, cfg.eval.k)?;
    let report = json!({
        "train": p.pool.len(),
        "test": p.test.len(),
        "metrics": {
            "micro_auc": metrics.micro_auc,
            "weighted_auc": metrics.weighted_auc,
            "adj_p_at_k": metrics.adj_p_at_k,
            "k": metrics.k,
            "samples_without_positives": metrics.samples_without_positives,
        },
        "per_label": metrics.per_label_auc,
        "skipped": metrics.skipped_labels,
        "history": r.history,
    });
    write_json(&a.common.out, &report)?;
    out.output("report", a.common.out.clone());
    let pred = sidecar(&a.common.out, "predictions.csv");
    write_matrix_csv(&pred, &labels.label_names, &pick(&ids, &p.test), &scores)?;
    out.output("predictions", pred);
    out.summary = report["metrics"].clone();
    Ok(out)
}

pub fn bootstrap_cmd(a: &BootstrapArgs, cfg: &mut RunConfig) -> Result<Outcome> {
    let labels = LabelMatrix::load(&a.labels)?;
    let mut out = Outcome {
        inputs: vec![a.labels.clone()],
        ..Outcome::default()
    };
    let names = labels.label_names.clone();
    let k = cfg.eval.k;
    let mut metrics = BTreeMap::new();
    let mut per_label = BTreeMap::new();
    let mut skipped = BTreeMap::new();
    let mut boot = BTreeMap::new();
    let mut models: Vec<(String, Vec<Option<f64>>)> = Vec::new();
    for spec in &a.predictions {
        let (name, path) = spec
            .split_once('=')
            .ok_or_else(|| anyhow!("--pred expects name=path, got `{spec}`"))?;
        let path = PathBuf::from(path);
        let (cols, ids, scores) = read_matrix_csv(&path)?;
        out.inputs.push(path.clone());
        if cols != names {
            bail!("{}: label columns differ from {}", path.display(), a.labels.display());
        }
        let y: Vec<Vec<u8>> = ids
            .iter()
            .map(|id| {
                labels
                    .row(id)
                    .map(<[u8]>::to_vec)
                    .ok_or_else(|| anyhow!("{}: `{id}` has no labels", path.display()))
            })
            .collect::<Result<_>>()?;
        let report = evaluate_multilabel(&scores, &y, &names, k)?;
        let stat = |f: fn(&[Vec<f64>], &[Vec<u8>]) -> Option<f64>| {
            let (scores, y) = (&scores, &y);
            move |idx: &[usize]| f(&pick(scores, idx), &pick(y, idx))
        };
        let adj = |s: &[Vec<f64>], y: &[Vec<u8>]| mean_adjusted_precision_at_k(s, y, k).0;
        let n = ids.len();
        let ci = json!({
            "micro_auc": bootstrap_ci(n, stat(micro_auc), &cfg.bootstrap)?,
            "weighted_auc": bootstrap_ci(n, stat(weighted_auc), &cfg.bootstrap)?,
            "adj_p_at_k": bootstrap_ci(n, |idx: &[usize]| adj(&pick(&scores, idx), &pick(&y, idx)), &cfg.bootstrap)?,
        });
        metrics.insert(
            name.to_string(),
            json!({ "micro_auc": report.micro_auc, "weighted_auc": report.weighted_auc, "adj_p_at_k": report.adj_p_at_k, "k": k, "n": n }),
        );
        per_label.insert(name.to_string(), report.per_label_auc.clone());
        skipped.insert(name.to_string(), report.skipped_labels.clone());
        boot.insert(name.to_string(), ci);
        models.push((name.to_string(), per_label_auc(&scores, &y)));
    }
    let mut tests = Vec::new();
    for i in 0..models.len() {
        for jx in i + 1..models.len() {
            let (a_vals, b_vals): (Vec<f64>, Vec<f64>) = models[i]
                .1
                .iter()
                .zip(&models[jx].1)
                .filter_map(|(x, y)| Some((((*x)?), ((*y)?))))
                .unzip();
            let result = wilcoxon_signed_rank(&a_vals, &b_vals);
            tests.push(json!({
                "model_a": models[i].0,
                "model_b": models[jx].0,
                "n_labels": a_vals.len(),
                "result": result.as_ref().ok(),
                "note": result.as_ref().err().map(|e| e.to_string()),
            }));
        }
    }
    let bins = match &a.split {
        Some(p) if models.len() >= 2 => {
            let plan = read_plan(p, cfg)?;
            out.inputs.push(p.clone());
            let pool: Vec<usize> = plan
                .ids
                .iter()
                .zip(&plan.assignments)
                .filter(|(_, a)| matches!(a, Assignment::Fold(_)))
                .filter_map(|(id, _)| labels.position(id))
                .collect();
            let counts = labels.positive_counts(&pool);
            Some(frequency_bin_report(&models, &names, &counts, cfg.eval.bins)?)
        }
        _ => None,
    };
    let report = json!({
        "metrics": metrics,
        "per_label": per_label,
        "skipped": skipped,
        "bins": bins,
        "bootstrap": boot,
        "tests": tests,
    });
    write_json(&a.common.out, &report)?;
    out.output("report", a.common.out.clone());
    out.summary = json!({ "metrics": report["metrics"], "bootstrap": report["bootstrap"] });
    Ok(out)
}

pub fn pca_cmd(a: &PcaArgs, cfg: &mut RunConfig) -> Result<Outcome> {
    let emb = EmbeddingTable::load(&a.emb)?;
    let rows: Vec<Vec<f64>> = emb.iter().map(|(_, v)| v.to_vec()).collect();
    let r = pca_project(&rows, cfg.eval.pca_k)?;
    let names: Vec<String> = (1..=cfg.eval.pca_k).map(|c| format!("pc{c}")).collect();
    write_matrix_csv(&a.common.out, &names, emb.ids(), &r.projections)?;
    let mut out = Outcome {
        inputs: vec![a.emb.clone()],
        ..Outcome::default()
    };
    out.output("coordinates", a.common.out.clone());
    out.summary = json!({ "explained_variance_ratio": r.explained_variance_ratio });
    Ok(out)
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
    match v {
        Value::Number(n) => out.push((prefix.to_string(), n.to_string())),
        Value::Bool(b) => out.push((prefix.to_string(), b.to_string())),
        Value::Object(m) => {
            for (k, x) in m {
                let p = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&p, x, out);
            }
        }
        Value::Array(items) => {
            for (i, x) in items.iter().enumerate() {
                flatten(&format!("{prefix}.{i}"), x, out);
            }
        }
        Value::Null | Value::String(_) => {}
    }
}

/// Long-format CSV `source,key,value` of every numeric leaf, plus a
/// `<out>.bins.csv` with per-bin bar values when any input has bins.
pub fn report_cmd(a: &ReportArgs, _cfg: &mut RunConfig) -> Result<Outcome> {
    let mut out = Outcome::default();
    let mut w = csv::Writer::from_writer(create(&a.common.out)?);
    w.write_record(["source", "key", "value"])?;
    let mut bins: Vec<[String; 5]> = Vec::new();
    for path in &a.inputs {
        let v: Value = serde_json::from_reader(BufReader::new(
            File::open(path).with_context(|| format!("opening {}", path.display()))?,
        ))
        .with_context(|| format!("parsing {}", path.display()))?;
        out.inputs.push(path.clone());
        let source = path.display().to_string();
        let mut leaves = Vec::new();
        flatten("", &v, &mut leaves);
        for (k, x) in leaves {
            w.write_record([source.as_str(), &k, &x])?;
        }
        if let Some(b) = v.get("bins").filter(|b| !b.is_null()) {
            let report: scent_core::eval::FrequencyBinReport = serde_json::from_value(b.clone())?;
            for bin in &report.bins {
                for (m, name) in report.models.iter().enumerate() {
                    let f = |x: Option<f64>| x.map_or(String::new(), |x| x.to_string());
                    bins.push([source.clone(), bin.bin.to_string(), name.clone(), f(bin.means[m]), f(bin.sems[m])]);
                }
            }
        }
    }
    w.flush()?;
    out.output("table", a.common.out.clone());
    if !bins.is_empty() {
        let path = sidecar(&a.common.out, "bins.csv");
        let mut w = csv::Writer::from_writer(create(&path)?);
        w.write_record(["source", "bin", "model", "mean_auc", "sem"])?;
        for r in &bins {
            w.write_record(r)?;
        }
        w.flush()?;
        out.output("bins", path);
    }
    out.summary = json!({ "sources": a.inputs.len() });
    Ok(out)
}

/// Synthetic library, structure vectors, labels, ratings and raw
/// acquisitions under the directory `out`.
pub fn synth_cmd(a: &SynthArgs, cfg: &mut RunConfig) -> Result<Outcome> {
    let dir = &a.common.out;
    std::fs::create_dir_all(dir)?;
    let enc = &cfg.encoder;
    let syn = learnable_alignment(a.n, enc, 4, enc.max_peaks.clamp(4, 12), cfg.seed)?;
    let mut out = Outcome::default();
    let lib = dir.join("library.msp");
    write_text(&lib, &write_msp(&syn.spectra))?;
    out.output("library", lib);
    let structs = dir.join("structs.jsonl");
    let mut w = create(&structs)?;
    syn.structs.write_jsonl(&mut w)?;
    w.flush()?;
    out.output("structs", structs);
    let ids: Vec<String> = syn.spectra.iter().map(|s| s.compound_id.clone()).collect();
    let x: Vec<Vec<f64>> = ids.iter().map(|id| syn.structs.get(id).expect("present").to_vec()).collect();
    let rates: Vec<f64> = (0..a.labels).map(|l| 0.05 + 0.4 * l as f64 / a.labels.max(2) as f64).collect();
    let labels = projected_labels(&ids, &x, &rates, cfg.seed.wrapping_add(1))?;
    let labels_path = dir.join("labels.csv");
    let mut w = create(&labels_path)?;
    labels.write_csv(&mut w)?;
    w.flush()?;
    out.output("labels", labels_path);
    let ratings = linear_ratings(&ids, &x, 21, 2.0, cfg.seed.wrapping_add(2))?;
    let raw: Vec<Vec<f64>> = ratings.rows().iter().map(|r| r.iter().map(|v| v * RATING_SCALE).collect()).collect();
    let ratings_path = dir.join("ratings.csv");
    write_matrix_csv(&ratings_path, &ratings.attribute_names, ratings.ids(), &raw)?;
    out.output("ratings", ratings_path);
    let axis: Vec<u32> = (cfg.data.mz_lo..=cfg.data.mz_hi).collect();
    for (i, s) in syn.spectra.iter().take(a.acquisitions).enumerate() {
        let p = planted_acquisition(s, &axis, 80, 30, 5000.0, 0.5, cfg.seed.wrapping_add(10 + i as u64))?;
        let path = dir.join(format!("{}.csv", s.compound_id));
        let mut w = create(&path)?;
        p.acquisition.write_csv(&mut w)?;
        w.flush()?;
        out.output(&format!("acquisition{i}"), path);
    }
    out.summary = json!({ "compounds": a.n, "labels": a.labels });
    Ok(out)
}
