//! Command-line driver: argument parsing, config resolution, dispatch and
//! run records.

pub mod args;
pub mod commands;
pub mod config;
pub mod record;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Result};
use clap::Parser;
use toml::Table;

use args::{AblateMode, Cli, Command, Common, Overrides, RerunArgs};
use commands::Outcome;
use config::{load_file, parse_assignment, resolve, RunConfig};
use record::{hash_all, record_path, sha256_file, FileHash, RunRecord};

pub const THREADS_ENV: &str = "SCENT_THREADS";

/// Caps the global rayon pool from `SCENT_THREADS` when set.
pub fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| anyhow!("{THREADS_ENV} must be a positive integer, got `{v}`"))?;
    // A pool built earlier in the process wins; the cap is advisory then.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit status: 0 success, 1 validation or runtime error, 2 usage.
pub fn run_from<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let rest: Vec<String> = argv.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    match execute(cli.command, rest) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn execute(command: Command, argv: Vec<String>) -> Result<()> {
    match command {
        Command::Preprocess(a) => experiment("preprocess", &a.common, None, &a, argv, commands::preprocess_cmd),
        Command::PretrainCooc(a) => experiment("pretrain-cooc", &a.common, Some(a.seed.seed), &a, argv, commands::pretrain_cmd),
        Command::Align(a) => experiment("align", &a.common, Some(a.seed.seed), &a, argv, commands::align_cmd),
        Command::AlignGrid(a) => experiment("align-grid", &a.common, Some(a.seed.seed), &a, argv, commands::align_grid_cmd),
        Command::Embed(a) => experiment("embed", &a.common, None, &a, argv, commands::embed_cmd),
        Command::Classify(a) => experiment("classify", &a.common, Some(a.seed.seed), &a, argv, commands::classify_cmd),
        Command::Regress(a) => experiment("regress", &a.common, Some(a.seed.seed), &a, argv, commands::regress_cmd),
        Command::Ablate(AblateMode::Mask(a)) => experiment("ablate mask", &a.common, Some(a.seed.seed), &a, argv, commands::mask_cmd),
        Command::Ablate(AblateMode::Supervised(a)) => {
            experiment("ablate supervised", &a.common, Some(a.seed.seed), &a, argv, commands::supervised_cmd)
        }
        Command::Scale(a) => experiment("scale", &a.common, Some(a.seed.seed), &a, argv, commands::scale_cmd),
        Command::Bootstrap(a) => experiment("bootstrap", &a.common, Some(a.seed.seed), &a, argv, commands::bootstrap_cmd),
        Command::Pca(a) => experiment("pca", &a.common, None, &a, argv, commands::pca_cmd),
        Command::Report(a) => experiment("report", &a.common, None, &a, argv, commands::report_cmd),
        Command::Synth(a) => experiment("synth", &a.common, Some(a.seed.seed), &a, argv, commands::synth_cmd),
        Command::Rerun(a) => rerun(&a),
    }
}

/// Resolved config for a command: defaults, then `--config`, then `--set`
/// assignments, then typed flags.
pub fn resolve_for(common: &Common, flags: Table, seed: u64) -> Result<(RunConfig, Vec<PathBuf>)> {
    let mut inputs = Vec::new();
    let file = match &common.config {
        Some(p) => {
            inputs.push(p.clone());
            Some(load_file(p)?)
        }
        None => None,
    };
    let mut overlays = common
        .set
        .iter()
        .map(|s| parse_assignment(s))
        .collect::<Result<Vec<_>>>()?;
    overlays.push(flags);
    Ok((resolve(file.as_deref(), &overlays, seed)?, inputs))
}

fn experiment<A: Overrides>(
    name: &str,
    common: &Common,
    seed: Option<u64>,
    a: &A,
    argv: Vec<String>,
    run: fn(&A, &mut RunConfig) -> Result<Outcome>,
) -> Result<()> {
    let (mut cfg, config_inputs) = resolve_for(common, a.overrides(), seed.unwrap_or(0))?;
    let outcome = run(a, &mut cfg)?;
    let mut inputs = config_inputs;
    inputs.extend(outcome.inputs);
    let record = RunRecord {
        version: env!("CARGO_PKG_VERSION").to_string(),
        command: name.to_string(),
        argv,
        config: serde_json::to_value(&cfg)?,
        inputs: hash_all(&inputs)?,
        outputs: outcome
            .outputs
            .iter()
            .map(|(role, p)| {
                Ok((
                    role.clone(),
                    FileHash {
                        path: p.clone(),
                        sha256: sha256_file(p)?,
                    },
                ))
            })
            .collect::<Result<_>>()?,
        summary: outcome.summary,
    };
    record.write(&record_path(&common.out))?;
    Ok(())
}

fn replace_out(argv: &[String], out: &Path) -> Result<Vec<String>> {
    let mut next = Vec::with_capacity(argv.len());
    let mut found = false;
    let mut it = argv.iter();
    while let Some(a) = it.next() {
        if a == "--out" {
            it.next();
            next.push(a.clone());
            next.push(out.display().to_string());
            found = true;
        } else if a.starts_with("--out=") {
            next.push(format!("--out={}", out.display()));
            found = true;
        } else {
            next.push(a.clone());
        }
    }
    if !found {
        bail!("recorded arguments carry no --out");
    }
    Ok(next)
}

/// Per-role comparison of a rerun against its original record.
#[derive(Debug, Clone, PartialEq)]
pub struct RerunReport {
    pub identical: Vec<String>,
    pub differing: Vec<String>,
    pub config_identical: bool,
}

/// Checks recorded input hashes, re-executes the recorded arguments and
/// compares every output hash by role.
pub fn rerun_record(record: &Path, out: Option<&Path>) -> Result<RerunReport> {
    let old = RunRecord::read(record)?;
    for f in &old.inputs {
        let now = sha256_file(&f.path)?;
        if now != f.sha256 {
            bail!("input {} changed since the recorded run", f.path.display());
        }
    }
    let argv = match out {
        Some(p) => replace_out(&old.argv, p)?,
        None => old.argv.clone(),
    };
    let cli = Cli::try_parse_from(std::iter::once("scent".to_string()).chain(argv.iter().cloned()))
        .map_err(|e| anyhow!("recorded arguments no longer parse: {e}"))?;
    let new_out = match &cli.command {
        Command::Rerun(_) => bail!("a rerun record cannot itself be rerun"),
        _ => out_of(&argv)?,
    };
    execute(cli.command, argv)?;
    let new = RunRecord::read(&record_path(&new_out))?;
    let mut report = RerunReport {
        identical: Vec::new(),
        differing: Vec::new(),
        config_identical: new.config == old.config,
    };
    for (role, f) in &old.outputs {
        match new.outputs.get(role) {
            Some(g) if g.sha256 == f.sha256 => report.identical.push(role.clone()),
            _ => report.differing.push(role.clone()),
        }
    }
    for role in new.outputs.keys() {
        if !old.outputs.contains_key(role) {
            report.differing.push(role.clone());
        }
    }
    Ok(report)
}

fn out_of(argv: &[String]) -> Result<PathBuf> {
    let mut it = argv.iter();
    while let Some(a) = it.next() {
        if a == "--out" {
            return it.next().map(PathBuf::from).ok_or_else(|| anyhow!("--out without a value"));
        }
        if let Some(v) = a.strip_prefix("--out=") {
            return Ok(PathBuf::from(v));
        }
    }
    Err(anyhow!("recorded arguments carry no --out"))
}

fn rerun(a: &RerunArgs) -> Result<()> {
    let r = rerun_record(&a.record, a.out.as_deref())?;
    for role in &r.identical {
        println!("{role}: identical");
    }
    for role in &r.differing {
        println!("{role}: DIFFERENT");
    }
    println!("config: {}", if r.config_identical { "identical" } else { "DIFFERENT" });
    if !r.differing.is_empty() || !r.config_identical {
        bail!("rerun did not reproduce the recorded outputs");
    }
    Ok(())
}
