//! End-to-end acceptance checks, one PASS/FAIL line per criterion.
//!
//! Set `CI` to shorten the bootstrap coverage run to 1,000 replicates.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestRunner};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use scent_core::acquisition::{baseline_correct, preprocess, RawAcquisition};
use scent_core::alignment::{
    alignment_gradient_check, build_pairs, contrastive_loss, init_mlm_head, masked_reconstruction_loss, split_by_id,
    train_alignment, train_supervised_e2e, AlignmentConfig, SimilarityMatrix, SupervisedConfig,
};
use scent_core::downstream::{fit_ridge, ridge_stationarity_residual};
use scent_core::encoder::{build_peak_tokens, init_encoder_params, EncoderConfig, PeakTokens, PeakVocabulary};
use scent_core::eval::{
    adjusted_precision_at_k, bootstrap_mean, micro_auc, roc_auc, weighted_auc, wilcoxon_signed_rank, BootstrapConfig,
};
use scent_core::splits::{capacities, iterative_stratified_split, kfold, label_proportion_deviation, random_split, SplitPlan, StratifyOptions};
use scent_core::synthetic::{learnable_alignment, planted_acquisition, random_spectra, shuffle_targets, spectrum_cosine};
use scent_core::tensor::{finite_difference_check, multi_head_attention, AttentionWeights, Graph, ParamStore, Stencil, Tensor, Var};

type Check = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn main() {
    let criteria: Vec<(&str, fn() -> Check)> = vec![
        ("1 gradient correctness", gradients),
        ("2 contrastive loss anchors", loss_anchors),
        ("3 synthetic alignment", synthetic_alignment),
        ("4 metric oracles", metric_oracles),
        ("5 ridge solver", ridge),
        ("6 acquisition preprocessing", acquisition),
        ("7 statistics", statistics),
        ("8 stratified splitting", splitting),
        ("9 ablation sanity", ablations),
        ("10 reproducibility", reproducibility),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        let t = Instant::now();
        let r = f();
        let secs = t.elapsed().as_secs_f64();
        match r {
            Ok(detail) => println!("PASS {name} ({secs:.1}s): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name} ({secs:.1}s): {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------- 1

const INSTANCES: u64 = 20;
const GRAD_TOL: f64 = 1e-4;
const H: f64 = 1e-6;

/// Multiplies `y` by a fixed random tensor and sums, so every output
/// coordinate contributes a distinct weight.
fn weighted_sum(g: &mut Graph, y: Var, seed: u64) -> scent_core::Result<Var> {
    let shape = g.value(y).shape().to_vec();
    let w = Tensor::uniform(&shape, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
    let c = g.constant(w);
    let p = g.mul(y, c)?;
    Ok(g.sum(p))
}

fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

struct GradTally {
    worst: f64,
    worst_name: String,
    checks: usize,
}

impl GradTally {
    fn run<F>(&mut self, name: &str, f: F, x: &Tensor) -> Result<(), String>
    where
        F: Fn(&mut Graph, Var) -> scent_core::Result<Var>,
    {
        let r = finite_difference_check(f, x, H).map_err(|e| format!("{name}: {e}"))?;
        ensure(r.checked > 0, || format!("{name}: no coordinate checked"))?;
        self.checks += 1;
        if r.max_rel_error > self.worst {
            self.worst = r.max_rel_error;
            self.worst_name = name.to_string();
        }
        Ok(())
    }
}

fn primitive_instance(i: u64, tally: &mut GradTally) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + i);
    let n = rng.random_range(2..6);
    let k = rng.random_range(2..6);
    let m = rng.random_range(2..6);
    let s = 77 + i;

    let a = rand_t(&[n, k], &mut rng);
    let b = rand_t(&[k, m], &mut rng);
    let (a2, b2) = (a.clone(), b.clone());
    tally.run("matmul.lhs", move |g, x| {
        let c = g.constant(b2.clone());
        let y = g.matmul(x, c)?;
        weighted_sum(g, y, s)
    }, &a)?;
    tally.run("matmul.rhs", move |g, x| {
        let c = g.constant(a2.clone());
        let y = g.matmul(c, x)?;
        weighted_sum(g, y, s)
    }, &b)?;

    let bias = rand_t(&[k], &mut rng);
    let (a3, bias2) = (a.clone(), bias.clone());
    tally.run("add_bias.x", move |g, x| {
        let c = g.constant(bias2.clone());
        let y = g.add_bias(x, c)?;
        weighted_sum(g, y, s)
    }, &a)?;
    tally.run("add_bias.b", move |g, x| {
        let c = g.constant(a3.clone());
        let y = g.add_bias(c, x)?;
        weighted_sum(g, y, s)
    }, &bias)?;

    let w = rand_t(&[k, m], &mut rng);
    let bm = rand_t(&[m], &mut rng);
    let (a4, bm2) = (a.clone(), bm.clone());
    tally.run("linear.w", move |g, x| {
        let xa = g.constant(a4.clone());
        let c = g.constant(bm2.clone());
        let y = g.linear(xa, x, c)?;
        weighted_sum(g, y, s)
    }, &w)?;

    let other = rand_t(&[n, k], &mut rng);
    let o2 = other.clone();
    tally.run("add", move |g, x| {
        let c = g.constant(o2.clone());
        let y = g.add(x, c)?;
        weighted_sum(g, y, s)
    }, &a)?;
    let o3 = other.clone();
    tally.run("mul", move |g, x| {
        let c = g.constant(o3.clone());
        let y = g.mul(x, c)?;
        let y = g.mul(y, x)?;
        weighted_sum(g, y, s)
    }, &a)?;
    let factor = rng.random_range(-2.0..2.0);
    tally.run("scale", move |g, x| {
        let y = g.scale(x, factor);
        weighted_sum(g, y, s)
    }, &a)?;
    let factors: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
    tally.run("scale_rows", move |g, x| {
        let y = g.scale_rows(x, factors.clone())?;
        weighted_sum(g, y, s)
    }, &a)?;
    tally.run("relu", move |g, x| {
        let y = g.relu(x);
        weighted_sum(g, y, s)
    }, &a)?;

    let gamma = Tensor::uniform(&[k], 0.5, 1.5, &mut rng);
    let beta = rand_t(&[k], &mut rng);
    let (ga, be) = (gamma.clone(), beta.clone());
    tally.run("layer_norm.x", move |g, x| {
        let gv = g.constant(ga.clone());
        let bv = g.constant(be.clone());
        let y = g.layer_norm(x, gv, bv, 1e-5)?;
        weighted_sum(g, y, s)
    }, &a)?;
    let (xa, be) = (a.clone(), beta.clone());
    tally.run("layer_norm.gamma", move |g, x| {
        let xv = g.constant(xa.clone());
        let bv = g.constant(be.clone());
        let y = g.layer_norm(xv, x, bv, 1e-5)?;
        weighted_sum(g, y, s)
    }, &gamma)?;
    let (xa, ga) = (a.clone(), gamma.clone());
    tally.run("layer_norm.beta", move |g, x| {
        let xv = g.constant(xa.clone());
        let gv = g.constant(ga.clone());
        let y = g.layer_norm(xv, gv, x, 1e-5)?;
        weighted_sum(g, y, s)
    }, &beta)?;

    // attention over `batch` sequences of length `seq`
    let heads = rng.random_range(1..3);
    let d = heads * rng.random_range(1..4);
    let batch = rng.random_range(1..3);
    let seq = rng.random_range(2..5);
    let mut mask: Vec<bool> = (0..batch * seq).map(|_| rng.random_bool(0.75)).collect();
    for b in 0..batch {
        mask[b * seq] = true;
    }
    let q = rand_t(&[batch * seq, d], &mut rng);
    let kk = rand_t(&[batch * seq, d], &mut rng);
    let v = rand_t(&[batch * seq, d], &mut rng);
    for which in 0..3 {
        let (q2, k2, v2, m2) = (q.clone(), kk.clone(), v.clone(), mask.clone());
        let f = move |g: &mut Graph, x: Var| {
            let mut vars = [None, None, None];
            for (j, t) in [&q2, &k2, &v2].into_iter().enumerate() {
                vars[j] = Some(if j == which { x } else { g.constant(t.clone()) });
            }
            let y = g.attention(vars[0].unwrap(), vars[1].unwrap(), vars[2].unwrap(), batch, seq, heads, &m2)?;
            weighted_sum(g, y, s)
        };
        let x = [&q, &kk, &v][which];
        tally.run(["attention.q", "attention.k", "attention.v"][which], f, x)?;
    }
    let mut store = ParamStore::default();
    AttentionWeights::init(&mut store, "att", d, &mut rng);
    for name in ["att.bq", "att.bv", "att.bo"] {
        *store.get_mut(name).unwrap() = rand_t(&[d], &mut rng);
    }
    let m3 = mask.clone();
    tally.run("multi_head_attention", move |g, x| {
        let w = AttentionWeights::load(g, &store, "att")?;
        let y = multi_head_attention(g, x, &w, batch, seq, heads, &m3)?;
        weighted_sum(g, y, s)
    }, &q)?;

    let rows: Vec<usize> = (0..rng.random_range(1..8)).map(|_| rng.random_range(0..n)).collect();
    let r2 = rows.clone();
    tally.run("gather", move |g, x| {
        let y = g.gather(x, &r2)?;
        weighted_sum(g, y, s)
    }, &a)?;
    tally.run("select_rows", move |g, x| {
        let y = g.select_rows(x, &rows)?;
        weighted_sum(g, y, s)
    }, &a)?;
    tally.run("reshape", move |g, x| {
        let y = g.reshape(x, vec![k, n])?;
        weighted_sum(g, y, s)
    }, &a)?;
    tally.run("transpose", move |g, x| {
        let y = g.transpose(x)?;
        weighted_sum(g, y, s)
    }, &a)?;
    tally.run("l2_normalize_rows", move |g, x| {
        let y = g.l2_normalize_rows(x)?;
        weighted_sum(g, y, s)
    }, &a)?;
    let targets: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
    tally.run("softmax_cross_entropy", move |g, x| g.softmax_cross_entropy(x, &targets), &a)?;
    let y01: Vec<f64> = (0..n * k).map(|_| if rng.random_bool(0.4) { 1.0 } else { 0.0 }).collect();
    let pw: Vec<f64> = (0..k).map(|_| rng.random_range(1.0..10.0)).collect();
    let logits = Tensor::uniform(&[n, k], -4.0, 4.0, &mut rng);
    tally.run("weighted_bce", move |g, x| g.weighted_bce(x, &y01, &pw), &logits)?;
    tally.run("sum", |g, x| Ok(g.sum(x)), &a)?;
    tally.run("mean", |g, x| Ok(g.mean(x)), &a)?;
    Ok(())
}

fn composite_instance(i: u64, tally: &mut GradTally) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(2000 + i);
    let enc = EncoderConfig {
        d: 8,
        heads: 2,
        max_peaks: 6,
        proj_dim: 4,
        proj_hidden: (i % 3 == 2).then_some(16),
        norm_first: i % 2 == 1,
        vocab: PeakVocabulary::new(50, 69).unwrap(),
        ..EncoderConfig::default()
    };
    let syn = learnable_alignment(4, &enc, 2, 6, 3000 + i).map_err(|e| e.to_string())?;
    let (pairs, _) = build_pairs(&syn.spectra, &syn.structs);
    let store = init_encoder_params(&enc, None, &mut rng).map_err(|e| e.to_string())?;
    let tau = rng.random_range(0.05..1.0);
    let report = alignment_gradient_check(&pairs, &store, &enc, tau, 1e-2, Stencil::Ridders).map_err(|e| e.to_string())?;
    ensure(report.len() == store.len(), || "composite check skipped parameters".into())?;
    for (name, r) in report {
        tally.checks += 1;
        if r.max_rel_error > tally.worst {
            tally.worst = r.max_rel_error;
            tally.worst_name = format!("composite {name}");
        }
    }
    Ok(())
}

fn gradients() -> Check {
    let t = Instant::now();
    let mut tally = GradTally {
        worst: 0.0,
        worst_name: String::new(),
        checks: 0,
    };
    for i in 0..INSTANCES {
        primitive_instance(i, &mut tally)?;
        composite_instance(i, &mut tally)?;
    }
    let elapsed = t.elapsed();
    ensure(tally.worst < GRAD_TOL, || format!("max rel error {:.2e} at {}", tally.worst, tally.worst_name))?;
    ensure(elapsed < Duration::from_secs(60), || format!("took {elapsed:?}"))?;
    Ok(format!(
        "{} checks, max rel error {:.2e} ({}), {:.1}s",
        tally.checks,
        tally.worst,
        tally.worst_name,
        elapsed.as_secs_f64()
    ))
}

// ---------------------------------------------------------------- 2

fn loss_anchors() -> Check {
    let one = contrastive_loss(&SimilarityMatrix::from_values(1, 1, vec![0.37]).unwrap(), 0.03).unwrap();
    ensure(one == 0.0, || format!("N=1 gave {one}"))?;
    for n in [2usize, 4, 8, 512] {
        let s = SimilarityMatrix::from_values(n, n, vec![0.25; n * n]).unwrap();
        let l = contrastive_loss(&s, 0.03).unwrap();
        let want = (n as f64).ln();
        ensure((l - want).abs() <= 1e-12 * want.max(1.0), || format!("uniform N={n}: {l} vs {want}"))?;
    }
    let eye = SimilarityMatrix::from_values(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let l = contrastive_loss(&eye, 1.0).unwrap();
    let want = (1.0 + (-1f64).exp()).ln();
    ensure((l - 0.313262).abs() <= 1e-6 && (l - want).abs() < 1e-12, || format!("identity gave {l}"))?;
    Ok(format!("N=1 -> 0, uniform -> ln N for 2..512, identity -> {l:.6}"))
}

// ---------------------------------------------------------------- 3

fn synthetic_alignment() -> Check {
    let t = Instant::now();
    let enc = EncoderConfig {
        d: 64,
        heads: 4,
        layers: 2,
        max_peaks: 16,
        proj_dim: 64,
        vocab: PeakVocabulary::new(50, 149).unwrap(),
        ..EncoderConfig::default()
    };
    let cfg = AlignmentConfig {
        batch: 512,
        tau: 0.03,
        lr_encoder: 1e-3,
        lr_projection: 1e-3,
        max_epochs: 20,
        patience: 20,
        val_fraction: 0.1,
        ..AlignmentConfig::default()
    };
    let syn = learnable_alignment(2000, &enc, 4, 12, 7).map_err(|e| e.to_string())?;
    let (pairs, _) = build_pairs(&syn.spectra, &syn.structs);
    let ids: Vec<&str> = pairs.iter().map(|p| p.spectrum.compound_id.as_str()).collect();
    let (_, val) = split_by_id(&ids, cfg.val_fraction, cfg.seed);
    ensure(val.len() == 200, || format!("validation set has {} candidates", val.len()))?;
    let init = init_encoder_params(&enc, None, &mut ChaCha8Rng::seed_from_u64(1)).map_err(|e| e.to_string())?;
    let r = train_alignment(&pairs, &enc, &cfg, init.clone()).map_err(|e| e.to_string())?;
    let recall = r.best().val_recall1;
    ensure(recall >= 0.9, || format!("recall@1 {recall} after {:?}", r.history))?;

    let shuffled = shuffle_targets(&syn.structs, 8).map_err(|e| e.to_string())?;
    let (control_pairs, _) = build_pairs(&syn.spectra, &shuffled);
    let c = train_alignment(&control_pairs, &enc, &cfg, init).map_err(|e| e.to_string())?;
    let ln_n = (val.len() as f64).ln();
    let lowest = c.history.iter().map(|h| h.val_loss).fold(f64::INFINITY, f64::min);
    let best = c.best().val_loss;
    ensure(lowest >= 0.95 * ln_n && best <= 1.05 * ln_n, || {
        format!("control val loss best {best:.4}, lowest {lowest:.4}, ln N {ln_n:.4}")
    })?;
    let elapsed = t.elapsed();
    ensure(elapsed < Duration::from_secs(600), || format!("took {elapsed:?}"))?;
    Ok(format!(
        "recall@1 {recall:.3} over 200; control val loss {best:.3} vs ln N {ln_n:.3}; {:.0}s",
        elapsed.as_secs_f64()
    ))
}

// ---------------------------------------------------------------- 4

/// AUC as the fraction of (positive, negative) pairs ordered correctly,
/// ties counting one half.
fn pair_count_auc(scores: &[f64], labels: &[u8]) -> Option<f64> {
    let mut twice = 0u64;
    let (mut p, mut n) = (0u64, 0u64);
    for (i, &yi) in labels.iter().enumerate() {
        if yi == 0 {
            n += 1;
            continue;
        }
        p += 1;
        for (j, &yj) in labels.iter().enumerate() {
            if yj == 0 {
                twice += match scores[i].partial_cmp(&scores[j]).unwrap() {
                    std::cmp::Ordering::Greater => 2,
                    std::cmp::Ordering::Equal => 1,
                    std::cmp::Ordering::Less => 0,
                };
            }
        }
    }
    (p > 0 && n > 0).then(|| (twice as f64 / 2.0) / (p * n) as f64)
}

fn metric_oracles() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let mut undefined = 0;
    for _ in 0..200 {
        let n = rng.random_range(2..80);
        let levels = rng.random_range(2..8);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 / levels as f64).collect();
        let labels: Vec<u8> = (0..n).map(|_| rng.random_bool(0.4) as u8).collect();
        let got = roc_auc(&scores, &labels);
        let want = pair_count_auc(&scores, &labels);
        ensure(got == want, || format!("roc_auc {got:?} vs pair count {want:?} on {scores:?} / {labels:?}"))?;
        undefined += got.is_none() as usize;
    }
    for _ in 0..200 {
        let n = rng.random_range(2..40);
        let l = rng.random_range(1..8);
        let scores: Vec<Vec<f64>> = (0..n).map(|_| (0..l).map(|_| (rng.random_range(0..5) as f64) / 4.0).collect()).collect();
        let rates: Vec<f64> = (0..l).map(|_| [0.0, 0.1, 0.5, 1.0][rng.random_range(0..4)]).collect();
        let labels: Vec<Vec<u8>> = (0..n).map(|_| rates.iter().map(|&r| rng.random_bool(r) as u8).collect()).collect();
        let flat_s: Vec<f64> = scores.iter().flatten().copied().collect();
        let flat_y: Vec<u8> = labels.iter().flatten().copied().collect();
        let micro_want = pair_count_auc(&flat_s, &flat_y);
        let micro = micro_auc(&scores, &labels);
        ensure(
            match (micro, micro_want) {
                (Some(a), Some(b)) => (a - b).abs() <= 1e-12,
                (a, b) => a == b,
            },
            || format!("micro {micro:?} vs {micro_want:?}"),
        )?;
        let (mut num, mut den) = (0.0, 0.0);
        for j in 0..l {
            let col_s: Vec<f64> = scores.iter().map(|r| r[j]).collect();
            let col_y: Vec<u8> = labels.iter().map(|r| r[j]).collect();
            if let Some(a) = pair_count_auc(&col_s, &col_y) {
                let w = col_y.iter().filter(|&&y| y == 1).count() as f64;
                num += w * a;
                den += w;
            }
        }
        let weighted_want = (den > 0.0).then(|| num / den);
        let weighted = weighted_auc(&scores, &labels);
        ensure(
            match (weighted, weighted_want) {
                (Some(a), Some(b)) => (a - b).abs() <= 1e-12,
                (a, b) => a == b,
            },
            || format!("weighted {weighted:?} vs {weighted_want:?}"),
        )?;
    }
    // three positives all in the top five
    let s: Vec<f64> = (0..10).map(|i| 1.0 - i as f64 * 0.1).collect();
    let mut y = vec![0u8; 10];
    y[0] = 1;
    y[2] = 1;
    y[4] = 1;
    let a = adjusted_precision_at_k(&s, &y, 5);
    // eight positives, four of them in the top five
    let y8: Vec<u8> = vec![1, 1, 0, 1, 1, 1, 1, 1, 1, 0];
    let b = adjusted_precision_at_k(&s, &y8, 5);
    // two positives, one in the top five
    let mut y2 = vec![0u8; 10];
    y2[1] = 1;
    y2[7] = 1;
    let c = adjusted_precision_at_k(&s, &y2, 5);
    ensure(a == Some(1.0) && b == Some(0.8) && c == Some(0.5), || format!("adjusted P@5 gave {a:?} {b:?} {c:?}"))?;
    Ok(format!(
        "200 ranking cases exact ({undefined} single-class), 200 micro/weighted cases within 1e-12, P@5 cases 1.0/0.8/0.5"
    ))
}

// ---------------------------------------------------------------- 5

/// Gaussian elimination with partial pivoting on an augmented system.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    let d = a.len();
    for col in 0..d {
        let piv = (col..d).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..d {
            let f = a[r][col] / a[col][col];
            for c in col..d {
                a[r][c] -= f * a[col][c];
            }
            for c in 0..b[r].len() {
                b[r][c] -= f * b[col][c];
            }
        }
    }
    let t = b[0].len();
    let mut x = vec![vec![0.0; t]; d];
    for r in (0..d).rev() {
        for c in 0..t {
            let s: f64 = (r + 1..d).map(|j| a[r][j] * x[j][c]).sum();
            x[r][c] = (b[r][c] - s) / a[r][r];
        }
    }
    x
}

fn ridge_oracle(x: &[Vec<f64>], y: &[Vec<f64>], lambda: f64) -> Vec<Vec<f64>> {
    let n = x.len() as f64;
    let d = x[0].len();
    let t = y[0].len();
    let mu: Vec<f64> = (0..d).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let sd: Vec<f64> = (0..d)
        .map(|j| (x.iter().map(|r| (r[j] - mu[j]).powi(2)).sum::<f64>() / n).sqrt())
        .map(|s| if s > 0.0 { s } else { 1.0 })
        .collect();
    let ym: Vec<f64> = (0..t).map(|k| y.iter().map(|r| r[k]).sum::<f64>() / n).collect();
    let z: Vec<Vec<f64>> = x.iter().map(|r| (0..d).map(|j| (r[j] - mu[j]) / sd[j]).collect()).collect();
    let a: Vec<Vec<f64>> = (0..d)
        .map(|i| {
            (0..d)
                .map(|j| z.iter().map(|r| r[i] * r[j]).sum::<f64>() + if i == j { lambda } else { 0.0 })
                .collect()
        })
        .collect();
    let b: Vec<Vec<f64>> = (0..d)
        .map(|i| (0..t).map(|k| z.iter().zip(y).map(|(r, yr)| r[i] * (yr[k] - ym[k])).sum()).collect())
        .collect();
    solve(a, b)
}

fn ridge() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let (mut worst_res, mut worst_diff, mut worst_rec) = (0f64, 0f64, 0f64);
    for _ in 0..50 {
        let n = rng.random_range(20..80);
        let d = rng.random_range(1..10);
        let t = rng.random_range(1..4);
        let scale: Vec<f64> = (0..d).map(|_| rng.random_range(0.1..10.0)).collect();
        let x: Vec<Vec<f64>> = (0..n)
            .map(|_| scale.iter().map(|s| s * rng.random_range(-1.0..1.0) + 3.0).collect())
            .collect();
        let y: Vec<Vec<f64>> = (0..n).map(|_| (0..t).map(|_| rng.random_range(-5.0..5.0)).collect()).collect();
        let lambda = rng.random_range(0.01..10.0);
        let m = fit_ridge(&x, &y, lambda).map_err(|e| e.to_string())?;
        worst_res = worst_res.max(ridge_stationarity_residual(&m, &x, &y));
        let w = ridge_oracle(&x, &y, lambda);
        for (r, o) in m.weights.iter().zip(&w) {
            for (a, b) in r.iter().zip(o) {
                worst_diff = worst_diff.max((a - b).abs());
            }
        }

        let beta: Vec<Vec<f64>> = (0..d).map(|_| (0..t).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let c: Vec<f64> = (0..t).map(|_| rng.random_range(-2.0..2.0)).collect();
        let xs: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let ys: Vec<Vec<f64>> = xs
            .iter()
            .map(|r| (0..t).map(|k| c[k] + r.iter().zip(&beta).map(|(v, b)| v * b[k]).sum::<f64>()).collect())
            .collect();
        let m0 = fit_ridge(&xs, &ys, 0.0).map_err(|e| e.to_string())?;
        for (r, o) in m0.slopes().iter().zip(&beta) {
            for (a, b) in r.iter().zip(o) {
                worst_rec = worst_rec.max((a - b).abs());
            }
        }
        for (a, b) in m0.intercept.iter().zip(&c) {
            worst_rec = worst_rec.max((a - b).abs());
        }
    }
    ensure(worst_res < 1e-8, || format!("stationarity residual {worst_res:.2e}"))?;
    ensure(worst_diff < 1e-8, || format!("normal-equation mismatch {worst_diff:.2e}"))?;
    ensure(worst_rec < 1e-10, || format!("noiseless recovery error {worst_rec:.2e}"))?;
    Ok(format!(
        "50 systems: residual {worst_res:.1e}, oracle diff {worst_diff:.1e}, lambda-0 recovery {worst_rec:.1e}"
    ))
}

// ---------------------------------------------------------------- 6

fn acquisition() -> Check {
    let vocab = PeakVocabulary::new(50, 150).unwrap();
    let axis: Vec<u32> = (50..=150).collect();
    let spectra = random_spectra(100, &vocab, 5, 15, 66);
    let mut rng = ChaCha8Rng::seed_from_u64(67);
    let (mut located, mut min_cos) = (0usize, f64::INFINITY);
    for (i, s) in spectra.iter().enumerate() {
        let onset = rng.random_range(30..=60);
        let height = rng.random_range(2000.0..8000.0);
        let noise = rng.random_range(0.5..2.0);
        let p = planted_acquisition(s, &axis, 100, onset, height, noise, 700 + i as u64).map_err(|e| e.to_string())?;
        let out = preprocess(&p.acquisition, 20, &s.compound_id).map_err(|e| format!("case {i}: {e}"))?;
        located += (out.boundaries.sample_start as i64 - onset as i64).abs().le(&1) as usize;
        min_cos = min_cos.min(spectrum_cosine(&out.spectrum, s));

        let a = &p.acquisition;
        let count = (out.boundaries.bg_end + 1) as f64;
        for c in 0..a.n_channels() {
            let vals: Vec<f64> = (0..=out.boundaries.bg_end).map(|t| a.at(t, c)).collect();
            let mu = vals.iter().sum::<f64>() / count;
            let sd = (vals.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / count).sqrt();
            ensure(
                (mu - out.background.mean[c]).abs() <= 1e-9 * mu.abs().max(1.0)
                    && (sd - out.background.std[c]).abs() <= 1e-9 * sd.max(1.0),
                || format!("case {i} channel {c}: background stats differ"),
            )?;
        }
        let corrected: RawAcquisition = baseline_correct(a, &out.background).map_err(|e| e.to_string())?;
        for t in 0..a.n_times() {
            for c in 0..a.n_channels() {
                let want = (a.at(t, c) - (out.background.mean[c] + 5.0 * out.background.std[c])).max(0.0);
                ensure(corrected.at(t, c).to_bits() == want.to_bits(), || {
                    format!("case {i} ({t}, {c}): {} vs {want}", corrected.at(t, c))
                })?;
            }
        }
    }
    ensure(located >= 95, || format!("onset within one scan in {located}/100"))?;
    ensure(min_cos >= 0.99, || format!("minimum cosine {min_cos}"))?;
    Ok(format!("onset within one scan in {located}/100, baseline bit-exact, min cosine {min_cos:.4}"))
}

// ---------------------------------------------------------------- 7

fn midranks_oracle(v: &[f64]) -> Vec<f64> {
    v.iter()
        .map(|x| {
            let below = v.iter().filter(|y| *y < x).count() as f64;
            let equal = v.iter().filter(|y| *y == x).count() as f64;
            below + (equal + 1.0) / 2.0
        })
        .collect()
}

/// Two-sided p-value by enumerating all sign assignments: the fraction at
/// least as far from the null mean as the observed positive rank sum.
fn wilcoxon_enumerated(diffs: &[f64]) -> (f64, f64) {
    let nz: Vec<f64> = diffs.iter().copied().filter(|d| *d != 0.0).collect();
    let abs: Vec<f64> = nz.iter().map(|d| d.abs()).collect();
    let ranks = midranks_oracle(&abs);
    let total: f64 = ranks.iter().sum();
    let w_plus: f64 = ranks.iter().zip(&nz).filter(|(_, d)| **d > 0.0).map(|(r, _)| r).sum();
    let centre = total / 2.0;
    let observed = (w_plus - centre).abs();
    let n = nz.len();
    let mut extreme = 0u64;
    for mask in 0u32..(1 << n) {
        let t: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
        if (t - centre).abs() >= observed - 1e-9 {
            extreme += 1;
        }
    }
    (w_plus.min(total - w_plus), extreme as f64 / (1u64 << n) as f64)
}

fn statistics() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for case in 0..100 {
        let n = rng.random_range(1..=12);
        let (mut a, mut b) = (Vec::new(), Vec::new());
        while a.len() < n || a.iter().zip(&b).all(|(x, y)| x == y) {
            if a.len() == n {
                a.clear();
                b.clear();
            }
            let x: f64 = rng.random_range(0..10) as f64;
            a.push(x);
            b.push(if case % 2 == 0 { rng.random_range(0..10) as f64 } else { x + rng.random_range(-3.0..3.0) });
        }
        let diffs: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
        let (w, p) = wilcoxon_enumerated(&diffs);
        let r = wilcoxon_signed_rank(&a, &b).map_err(|e| e.to_string())?;
        ensure((r.w - w).abs() < 1e-12 && (r.p_value - p).abs() < 1e-12, || {
            format!("case {case}: w {} p {} vs enumerated w {w} p {p}", r.w, r.p_value)
        })?;
    }

    let replicates = if std::env::var_os("CI").is_some() { 1_000 } else { 10_000 };
    let mu = 2.0;
    let normal = rand_distr::Normal::new(mu, 1.0).unwrap();
    let mut covered = 0;
    for trial in 0..500u64 {
        let mut r = ChaCha8Rng::seed_from_u64(9000 + trial);
        let sample: Vec<f64> = (0..50).map(|_| rand_distr::Distribution::sample(&normal, &mut r)).collect();
        let cfg = BootstrapConfig {
            replicates,
            level: 0.95,
            seed: trial,
        };
        let ci = bootstrap_mean(&sample, &cfg).map_err(|e| e.to_string())?;
        covered += (ci.lo <= mu && mu <= ci.hi) as usize;
    }
    let coverage = covered as f64 / 500.0;
    ensure((0.92..=0.98).contains(&coverage), || format!("coverage {coverage}"))?;
    Ok(format!(
        "100 exact Wilcoxon cases match enumeration; bootstrap coverage {:.1}% ({replicates} replicates)",
        100.0 * coverage
    ))
}

// ---------------------------------------------------------------- 8

fn benchmark_labels(n: usize, l: usize, seed: u64) -> Vec<Vec<u8>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base: Vec<f64> = (0..l).map(|_| rng.random_range(0.02..0.4)).collect();
    (0..n)
        .map(|_| {
            let group = rng.random_range(0..4);
            (0..l)
                .map(|j| {
                    let boost = if j % 4 == group { 2.0 } else { 0.5 };
                    rng.random_bool((base[j] * boost).min(0.95)) as u8
                })
                .collect()
        })
        .collect()
}

fn splitting() -> Check {
    let labels = benchmark_labels(500, 20, 88);
    let ratios = [0.2; 5];
    let strat = kfold(&labels, 5, &StratifyOptions::new(2, 3)).map_err(|e| e.to_string())?;
    let dev = label_proportion_deviation(&labels, &strat, 5);
    let mut worst_random = f64::INFINITY;
    let mut mean_random = 0.0;
    for s in 0..100 {
        let r = random_split(500, &ratios, s).map_err(|e| e.to_string())?;
        let d = label_proportion_deviation(&labels, &r, 5);
        worst_random = worst_random.min(d);
        mean_random += d / 100.0;
    }
    ensure(dev < worst_random, || format!("stratified {dev} vs best random {worst_random}"))?;

    let mut runner = TestRunner::new(PropConfig {
        cases: 128,
        ..PropConfig::default()
    });
    let strategy = (
        prop::collection::vec(prop::collection::vec(0u8..2, 4), 8..60),
        prop::collection::vec(1u32..10, 2..5),
        1u8..=2,
        any::<u64>(),
    );
    runner
        .run(&strategy, |(labels, weights, order, seed)| {
            let total: u32 = weights.iter().sum();
            let ratios: Vec<f64> = weights.iter().map(|&w| w as f64 / total as f64).collect();
            let parts = ratios.len();
            let assign = iterative_stratified_split(&labels, &ratios, &StratifyOptions::new(order, seed))
                .map_err(|e| TestCaseError::fail(e.to_string()))?;
            prop_assert_eq!(assign.len(), labels.len());
            prop_assert!(assign.iter().all(|&a| a < parts));
            let caps = capacities(labels.len(), &ratios).unwrap();
            for (j, &c) in caps.iter().enumerate() {
                prop_assert_eq!(assign.iter().filter(|&&a| a == j).count(), c);
            }
            let ids: Vec<String> = (0..labels.len()).map(|i| format!("c{i}")).collect();
            let plan = SplitPlan::build(&ids, &labels, 0.2, 3, &StratifyOptions::new(order, seed))
                .map_err(|e| TestCaseError::fail(e.to_string()))?;
            let mut seen = plan.indices(scent_core::splits::Assignment::Test);
            for k in 0..3 {
                seen.extend(plan.indices(scent_core::splits::Assignment::Fold(k)));
            }
            seen.sort_unstable();
            prop_assert_eq!(seen, (0..labels.len()).collect::<Vec<_>>());
            Ok(())
        })
        .map_err(|e| format!("partition property: {e}"))?;
    Ok(format!(
        "deviation {dev:.4} vs random best {worst_random:.4} / mean {mean_random:.4}; partitions exhaustive and disjoint over 128 cases"
    ))
}

// ---------------------------------------------------------------- 9

fn ablations() -> Check {
    let enc = EncoderConfig {
        d: 64,
        heads: 4,
        max_peaks: 32,
        proj_dim: 8,
        ..EncoderConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut store = init_encoder_params(&enc, None, &mut rng).map_err(|e| e.to_string())?;
    init_mlm_head(&mut store, &enc, &mut rng);
    let spectra = random_spectra(128, &enc.vocab, 5, 32, 100);
    let tokens: Vec<PeakTokens> = spectra.iter().map(|s| build_peak_tokens(s, &enc).unwrap()).collect();
    let mut g = Graph::new();
    let l = masked_reconstruction_loss(&mut g, &store, &enc, &tokens, 0.15, &mut rng).map_err(|e| e.to_string())?;
    let initial = g.value(l).item();
    let uniform = (enc.vocab.size() as f64 - 3.0).ln();
    ensure((initial - uniform).abs() <= 0.1 * uniform, || format!("masked initial loss {initial} vs {uniform}"))?;

    let small = EncoderConfig {
        d: 32,
        heads: 4,
        max_peaks: 12,
        proj_dim: 16,
        vocab: PeakVocabulary::new(50, 149).unwrap(),
        ..EncoderConfig::default()
    };
    let spectra = random_spectra(64, &small.vocab, 4, 12, 101);
    let mut labels: Vec<Vec<u8>> = (0..64).map(|_| (0..8).map(|_| rng.random_bool(0.3) as u8).collect()).collect();
    for j in 0..8 {
        labels[j][j] = 1;
    }
    labels.shuffle(&mut rng);
    let init = init_encoder_params(&small, None, &mut rng).map_err(|e| e.to_string())?;
    let cfg = SupervisedConfig {
        batch: 16,
        lr_encoder: 1e-3,
        lr_head: 1e-3,
        max_epochs: 200,
        seed: 5,
        ..SupervisedConfig::default()
    };
    let r = train_supervised_e2e(&spectra, &labels, &small, &cfg, init).map_err(|e| e.to_string())?;
    let reached = r.history.iter().find(|h| h.train_micro_auc.is_some_and(|a| a >= 0.99));
    let best = r.history.iter().filter_map(|h| h.train_micro_auc).fold(0.0, f64::max);
    let epoch = reached.map(|h| h.epoch + 1).ok_or_else(|| format!("best training micro-AUC {best}"))?;
    Ok(format!(
        "masked initial loss {initial:.3} vs ln(V-3) {uniform:.3}; supervised micro-AUC >= 0.99 at epoch {epoch}"
    ))
}

// ---------------------------------------------------------------- 10

const SMALL_CONFIG: &str = "\
[encoder]
d = 32
heads = 4
max_peaks = 12
proj_dim = 16
[encoder.vocab]
mz_lo = 50
mz_hi = 149
[sgns]
dim = 32
epochs = 2
[align]
batch = 64
max_epochs = 3
lr_encoder = 0.001
val_fraction = 0.1
[classify]
lr = 0.001
max_epochs = 10
[regress]
splits = 10
[bootstrap]
replicates = 300
";

fn scent(dir: &Path, threads: &str, args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_scent"))
        .current_dir(dir)
        .env("SCENT_THREADS", threads)
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    ensure(out.status.success(), || {
        format!("scent {} failed: {}{}", args.join(" "), stdout, String::from_utf8_lossy(&out.stderr))
    })?;
    Ok(stdout)
}

fn reproducibility() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = dir.path();
    std::fs::write(d.join("small.toml"), SMALL_CONFIG).map_err(|e| e.to_string())?;
    let c = ["--config", "small.toml"];
    let runs: Vec<(&str, Vec<&str>)> = vec![
        ("data", vec!["synth", "--seed", "1", "--n", "300"]),
        ("pre.msp", vec!["preprocess", "--in", "data/syn0.csv", "--in", "data/syn1.csv"]),
        ("ecen.ckpt", vec!["pretrain-cooc", "--seed", "2", "--spectra", "data/library.msp"]),
        ("base.json", vec!["classify", "--seed", "3", "--emb", "data/structs.jsonl", "--labels", "data/labels.csv"]),
        (
            "model.ckpt",
            vec![
                "align", "--seed", "4", "--spectra", "data/library.msp", "--structs", "data/structs.jsonl", "--init",
                "ecen.ckpt", "--exclude", "base.json.split.csv",
            ],
        ),
        (
            "grid.ckpt",
            vec![
                "align-grid", "--seed", "4", "--spectra", "data/library.msp", "--structs", "data/structs.jsonl",
                "--grid", "0.03,0.1", "--epochs", "2",
            ],
        ),
        ("emb.jsonl", vec!["embed", "--spectra", "data/library.msp", "--model", "model.ckpt"]),
        (
            "cls.json",
            vec!["classify", "--seed", "5", "--emb", "emb.jsonl", "--labels", "data/labels.csv", "--split", "base.json.split.csv"],
        ),
        ("reg.json", vec!["regress", "--seed", "6", "--emb", "data/structs.jsonl", "--ratings", "data/ratings.csv"]),
        (
            "scale.json",
            vec![
                "scale", "--seed", "7", "--emb", "data/structs.jsonl", "--labels", "data/labels.csv", "--split",
                "base.json.split.csv", "--fractions", "0.5,1",
            ],
        ),
        (
            "boot.json",
            vec![
                "bootstrap", "--seed", "8", "--pred", "structs=base.json.predictions.csv", "--pred",
                "aligned=cls.json.predictions.csv", "--labels", "data/labels.csv", "--split", "base.json.split.csv",
            ],
        ),
        ("mask.ckpt", vec!["ablate", "mask", "--seed", "9", "--spectra", "data/library.msp", "--epochs", "2"]),
        (
            "sup.json",
            vec![
                "ablate", "supervised", "--seed", "10", "--spectra", "data/library.msp", "--labels", "data/labels.csv",
                "--split", "base.json.split.csv", "--epochs", "3",
            ],
        ),
        ("coords.csv", vec!["pca", "--emb", "emb.jsonl"]),
        ("table.csv", vec!["report", "--in", "cls.json", "--in", "boot.json", "--in", "reg.json"]),
    ];
    for (out, args) in &runs {
        let mut argv: Vec<&str> = args.clone();
        let at = if args[0] == "ablate" { 2 } else { 1 };
        if !matches!(args[0], "preprocess" | "embed" | "pca" | "report") {
            argv.splice(at..at, c);
        }
        argv.extend(["--out", out]);
        scent(d, "4", &argv)?;
    }
    let mut roles = 0;
    for (out, _) in &runs {
        let record = format!("{out}.run.json");
        let again = format!("again.{out}");
        let report = scent(d, "1", &["rerun", &record, "--out", &again])?;
        ensure(!report.contains("DIFFERENT"), || format!("{record}: {report}"))?;
        roles += report.lines().filter(|l| l.ends_with(": identical")).count();
    }
    Ok(format!(
        "{} recorded runs reproduced bit-identically on 1 thread vs 4 ({roles} outputs and configs)",
        runs.len()
    ))
}
