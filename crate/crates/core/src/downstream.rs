//! Heads on frozen embeddings: multi-label MLP classifier, ridge regression
//! for continuous ratings, and PCA.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{micro_auc, pearson_r};
use crate::splits::repeated_splits;
use crate::tensor::{Adam, Graph, ParamStore, Tensor, Var};

pub const POS_WEIGHT_MIN: f64 = 1.0;
pub const POS_WEIGHT_MAX: f64 = 100.0;

/// `negatives / positives` per label over `rows`, clipped to [1, 100].
/// A label without positives gets the upper bound.
pub fn pos_weights(labels: &[Vec<u8>], rows: &[usize]) -> Vec<f64> {
    let width = labels.first().map_or(0, Vec::len);
    (0..width)
        .map(|l| {
            let pos = rows.iter().filter(|&&i| labels[i][l] != 0).count();
            let neg = rows.len() - pos;
            if pos == 0 {
                POS_WEIGHT_MAX
            } else {
                (neg as f64 / pos as f64).clamp(POS_WEIGHT_MIN, POS_WEIGHT_MAX)
            }
        })
        .collect()
}

/// Mean weighted binary cross-entropy over all cells.
pub fn weighted_bce(logits: &[Vec<f64>], targets: &[Vec<f64>], pos_weight: &[f64]) -> Result<f64> {
    if pos_weight.iter().any(|w| !(*w > 0.0)) {
        return Err(Error::Config("pos_weight must be positive".into()));
    }
    let mut g = Graph::new();
    let z = g.constant(Tensor::from_rows(logits)?);
    let y: Vec<f64> = targets.iter().flatten().copied().collect();
    let l = g.weighted_bce(z, &y, pos_weight)?;
    Ok(g.value(l).item())
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Two affine layers with a ReLU between, hidden width `floor(ratio * input)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    pub params: ParamStore,
    pub input: usize,
    pub hidden: usize,
    pub labels: usize,
}

impl ClassifierHead {
    pub fn init<R: Rng>(input: usize, labels: usize, hidden_ratio: f64, rng: &mut R) -> Result<Self> {
        let mut params = ParamStore::new();
        let hidden = init_head_params(&mut params, input, labels, hidden_ratio, rng)?;
        Ok(Self {
            params,
            input,
            hidden,
            labels,
        })
    }

    /// Logits for a batch of embeddings.
    pub fn logits(&self, rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        if let Some(r) = rows.iter().find(|r| r.len() != self.input) {
            return Err(Error::Shape {
                op: "classifier_head",
                lhs: vec![r.len()],
                rhs: vec![self.input],
            });
        }
        if rows.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(rows)?);
        let z = head_forward(&mut g, &self.params, x)?;
        Ok(g.value(z).to_rows())
    }
}

/// Adds `head.w1/b1/w2/b2` to `store` and returns the hidden width.
pub fn init_head_params<R: Rng>(
    store: &mut ParamStore,
    input: usize,
    labels: usize,
    hidden_ratio: f64,
    rng: &mut R,
) -> Result<usize> {
    let hidden = (hidden_ratio * input as f64).floor() as usize;
    if hidden == 0 || labels == 0 {
        return Err(Error::Config(format!(
            "classifier head needs positive widths, got hidden {hidden} and {labels} labels"
        )));
    }
    store.insert("head.w1", Tensor::xavier(input, hidden, rng));
    store.insert("head.b1", Tensor::zeros(&[hidden]));
    store.insert("head.w2", Tensor::xavier(hidden, labels, rng));
    store.insert("head.b2", Tensor::zeros(&[labels]));
    Ok(hidden)
}

/// `relu(x W1 + b1) W2 + b2` using the `head.*` parameters of `store`.
pub fn head_forward(g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
    let w1 = g.param(store, "head.w1")?;
    let b1 = g.param(store, "head.b1")?;
    let w2 = g.param(store, "head.w2")?;
    let b2 = g.param(store, "head.b2")?;
    let h = g.linear(x, w1, b1)?;
    let h = g.relu(h);
    g.linear(h, w2, b2)
}

/// Sigmoid scores in [0, 1].
pub fn predict_labels(head: &ClassifierHead, rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    Ok(head
        .logits(rows)?
        .into_iter()
        .map(|r| r.into_iter().map(sigmoid).collect())
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub hidden_ratio: f64,
    pub batch: usize,
    pub lr: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            hidden_ratio: 0.5,
            batch: 64,
            lr: 1e-4,
            max_epochs: 50,
            patience: 5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    /// `None` when the validation cells hold a single class.
    pub val_micro_auc: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct FoldResult {
    pub fold: usize,
    pub head: ClassifierHead,
    pub history: Vec<ClassifierEpoch>,
    pub best_epoch: usize,
    pub pos_weight: Vec<f64>,
}

/// Trains one head on `train` rows, early-stopped on micro-AUC over `val` rows.
/// With an empty `val` the last epoch is kept.
pub fn train_head(
    x: &[Vec<f64>],
    labels: &[Vec<u8>],
    train: &[usize],
    val: &[usize],
    cfg: &ClassifierConfig,
    seed: u64,
) -> Result<(ClassifierHead, Vec<ClassifierEpoch>, usize, Vec<f64>)> {
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if cfg.batch == 0 || !(cfg.lr > 0.0) {
        return Err(Error::Config("classifier batch and learning rate must be positive".into()));
    }
    let input = x[train[0]].len();
    let n_labels = labels[train[0]].len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut head = ClassifierHead::init(input, n_labels, cfg.hidden_ratio, &mut rng)?;
    let pw = pos_weights(labels, train);
    let mut opt = Adam::new(cfg.lr);
    let mut order = train.to_vec();
    let mut history = Vec::new();
    let mut best: Option<(usize, Option<f64>, ParamStore)> = None;
    let val_x: Vec<Vec<f64>> = val.iter().map(|&i| x[i].clone()).collect();
    let val_y: Vec<Vec<u8>> = val.iter().map(|&i| labels[i].clone()).collect();
    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut losses = Vec::new();
        for chunk in order.chunks(cfg.batch) {
            let rows: Vec<Vec<f64>> = chunk.iter().map(|&i| x[i].clone()).collect();
            let y: Vec<f64> = chunk.iter().flat_map(|&i| labels[i].iter().map(|&v| v as f64)).collect();
            let mut g = Graph::new();
            let xv = g.constant(Tensor::from_rows(&rows)?);
            let z = head_forward(&mut g, &head.params, xv)?;
            let l = g.weighted_bce(z, &y, &pw)?;
            losses.push(g.value(l).item());
            let grads = g.backward(l)?;
            opt.step(&mut head.params, grads.params())?;
        }
        let val_micro_auc = if val.is_empty() {
            None
        } else {
            micro_auc(&predict_labels(&head, &val_x)?, &val_y)
        };
        history.push(ClassifierEpoch {
            epoch,
            train_loss: losses.iter().sum::<f64>() / losses.len() as f64,
            val_micro_auc,
        });
        let better = match &best {
            None => true,
            Some((_, b, _)) => match (val_micro_auc, b) {
                (Some(a), Some(b)) => a > *b,
                (Some(_), None) => true,
                (None, _) => val.is_empty(),
            },
        };
        if better {
            best = Some((epoch, val_micro_auc, head.params.clone()));
        }
        if let Some((b, _, _)) = &best {
            if epoch - b >= cfg.patience && !val.is_empty() {
                break;
            }
        }
    }
    let (best_epoch, _, params) = best.ok_or_else(|| Error::Config("max_epochs must be positive".into()))?;
    head.params = params;
    Ok((head, history, best_epoch, pw))
}

/// One head per fold: fold `k` validates, the others train. Folds run in
/// parallel; fold `k` draws from stream `k` of the master seed.
pub fn train_classifier(x: &[Vec<f64>], labels: &[Vec<u8>], folds: &[usize], cfg: &ClassifierConfig) -> Result<Vec<FoldResult>> {
    if x.len() != labels.len() || x.len() != folds.len() {
        return Err(Error::Shape {
            op: "train_classifier",
            lhs: vec![x.len(), labels.len()],
            rhs: vec![folds.len()],
        });
    }
    let k = folds.iter().max().map_or(0, |m| m + 1);
    (0..k)
        .into_par_iter()
        .map(|fold| {
            let train: Vec<usize> = (0..x.len()).filter(|&i| folds[i] != fold).collect();
            let val: Vec<usize> = (0..x.len()).filter(|&i| folds[i] == fold).collect();
            let (train, val) = if k == 1 { (val, Vec::new()) } else { (train, val) };
            let mut r = ChaCha8Rng::seed_from_u64(cfg.seed);
            r.set_stream(fold as u64);
            let (head, history, best_epoch, pos_weight) = train_head(x, labels, &train, &val, cfg, r.random())?;
            Ok(FoldResult {
                fold,
                head,
                history,
                best_epoch,
                pos_weight,
            })
        })
        .collect()
}

/// Linear model fitted on standardized features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RidgeModel {
    /// Coefficients in standardized feature space, `[d][targets]`.
    pub weights: Vec<Vec<f64>>,
    /// Intercept in original units.
    pub intercept: Vec<f64>,
    pub x_mean: Vec<f64>,
    /// Per-feature population standard deviation; 1 for constant features.
    pub x_scale: Vec<f64>,
    pub lambda: f64,
    /// The system was singular at lambda 0 and solved by pseudo-inverse.
    pub pseudo_inverse: bool,
}

impl RidgeModel {
    /// Coefficients in original feature units, `[d][targets]`.
    pub fn slopes(&self) -> Vec<Vec<f64>> {
        self.weights
            .iter()
            .zip(&self.x_scale)
            .map(|(row, s)| row.iter().map(|w| w / s).collect())
            .collect()
    }

    pub fn standardize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.x_mean)
            .zip(&self.x_scale)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }

    pub fn predict(&self, rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let slopes = self.slopes();
        rows.iter()
            .map(|r| {
                if r.len() != self.x_mean.len() {
                    return Err(Error::Shape {
                        op: "ridge_predict",
                        lhs: vec![r.len()],
                        rhs: vec![self.x_mean.len()],
                    });
                }
                Ok((0..self.intercept.len())
                    .map(|t| self.intercept[t] + r.iter().zip(&slopes).map(|(v, s)| v * s[t]).sum::<f64>())
                    .collect())
            })
            .collect()
    }
}

fn to_matrix(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let c = rows.first().map_or(0, Vec::len);
    DMatrix::from_fn(rows.len(), c, |i, j| rows[i][j])
}

/// Relative pivot size below which a lambda-0 system is treated as singular.
const SINGULAR_TOL: f64 = 1e-12;

/// Ridge regression `W = (X'X + lambda I)^-1 X'Y` on standardized X and
/// centered Y, solved by Cholesky. At lambda 0 a singular system falls back
/// to the minimum-norm pseudo-inverse solution.
pub fn fit_ridge(x: &[Vec<f64>], y: &[Vec<f64>], lambda: f64) -> Result<RidgeModel> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::Config(format!("ridge lambda must be non-negative, got {lambda}")));
    }
    let n = x.len();
    if n < 2 {
        return Err(Error::DatasetTooSmall { have: n, need: 2 });
    }
    if y.len() != n {
        return Err(Error::Shape {
            op: "fit_ridge",
            lhs: vec![n],
            rhs: vec![y.len()],
        });
    }
    let d = x[0].len();
    let t = y[0].len();
    if x.iter().any(|r| r.len() != d) || y.iter().any(|r| r.len() != t) {
        return Err(Error::Config("ragged ridge input".into()));
    }
    let nf = n as f64;
    let x_mean: Vec<f64> = (0..d).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / nf).collect();
    let x_scale: Vec<f64> = (0..d)
        .map(|j| {
            let v = x.iter().map(|r| (r[j] - x_mean[j]).powi(2)).sum::<f64>() / nf;
            if v > 0.0 {
                v.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    let y_mean: Vec<f64> = (0..t).map(|k| y.iter().map(|r| r[k]).sum::<f64>() / nf).collect();
    let xs = DMatrix::from_fn(n, d, |i, j| (x[i][j] - x_mean[j]) / x_scale[j]);
    let yc = DMatrix::from_fn(n, t, |i, k| y[i][k] - y_mean[k]);
    let xt = xs.transpose();
    let mut a = &xt * &xs;
    for j in 0..d {
        a[(j, j)] += lambda;
    }
    let b = &xt * &yc;
    let max_diag = (0..d).map(|j| a[(j, j)]).fold(0.0, f64::max);
    let chol = a.clone().cholesky().filter(|c| {
        let l = c.l_dirty();
        lambda > 0.0 || (0..d).all(|j| l[(j, j)] * l[(j, j)] > SINGULAR_TOL * max_diag.max(f64::MIN_POSITIVE))
    });
    let (w, pseudo_inverse) = match chol {
        Some(c) => (c.solve(&b), false),
        None if lambda == 0.0 => {
            let svd = xs.svd(true, true);
            let eps = SINGULAR_TOL.sqrt() * svd.singular_values.max();
            let pinv = svd
                .pseudo_inverse(eps)
                .map_err(|e| Error::Config(format!("pseudo-inverse failed: {e}")))?;
            log::warn!("ridge: singular system at lambda 0, using minimum-norm solution");
            (pinv * &yc, true)
        }
        None => return Err(Error::Config("ridge system is not positive definite".into())),
    };
    let weights: Vec<Vec<f64>> = (0..d).map(|j| (0..t).map(|k| w[(j, k)]).collect()).collect();
    let intercept: Vec<f64> = (0..t)
        .map(|k| y_mean[k] - (0..d).map(|j| x_mean[j] / x_scale[j] * weights[j][k]).sum::<f64>())
        .collect();
    if weights.iter().flatten().chain(&intercept).any(|v| !v.is_finite()) {
        return Err(Error::Config("ridge produced non-finite coefficients".into()));
    }
    Ok(RidgeModel {
        weights,
        intercept,
        x_mean,
        x_scale,
        lambda,
        pseudo_inverse,
    })
}

/// `max |(X'X + lambda I) W - X'Y|` on the model's standardized features.
pub fn ridge_stationarity_residual(model: &RidgeModel, x: &[Vec<f64>], y: &[Vec<f64>]) -> f64 {
    let n = x.len() as f64;
    let t = model.intercept.len();
    let y_mean: Vec<f64> = (0..t).map(|k| y.iter().map(|r| r[k]).sum::<f64>() / n).collect();
    let xs = to_matrix(&x.iter().map(|r| model.standardize(r)).collect::<Vec<_>>());
    let yc = DMatrix::from_fn(x.len(), t, |i, k| y[i][k] - y_mean[k]);
    let w = to_matrix(&model.weights);
    let mut a = xs.transpose() * &xs;
    for j in 0..a.nrows() {
        a[(j, j)] += model.lambda;
    }
    (a * w - xs.transpose() * yc).abs().max()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeSummary {
    pub name: String,
    /// Mean and sample standard deviation of Pearson r over splits where it is defined.
    pub mean_r: Option<f64>,
    pub std_r: Option<f64>,
    pub defined: usize,
    pub excluded: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionReport {
    pub lambda: f64,
    pub splits: usize,
    pub ratio: f64,
    pub attributes: Vec<AttributeSummary>,
    /// `per_split[s][a]`: Pearson r of attribute `a` on split `s`.
    pub per_split: Vec<Vec<Option<f64>>>,
    pub pseudo_inverse_fits: usize,
}

/// Fits ridge on `ratio` of the rows and scores per-attribute Pearson r on
/// the rest, over `splits` seeded random splits.
pub fn regress_repeated(
    x: &[Vec<f64>],
    y: &[Vec<f64>],
    names: &[String],
    splits: usize,
    ratio: f64,
    lambda: f64,
    seed: u64,
) -> Result<RegressionReport> {
    if x.len() < 10 {
        return Err(Error::DatasetTooSmall { have: x.len(), need: 10 });
    }
    let t = names.len();
    if y.iter().any(|r| r.len() != t) {
        return Err(Error::Shape {
            op: "regress_repeated",
            lhs: vec![y.first().map_or(0, Vec::len)],
            rhs: vec![t],
        });
    }
    let plan = repeated_splits(x.len(), splits, ratio, seed)?;
    let fits = plan
        .par_iter()
        .map(|(train, test)| {
            let pick = |rows: &[Vec<f64>], idx: &[usize]| idx.iter().map(|&i| rows[i].clone()).collect::<Vec<_>>();
            let model = fit_ridge(&pick(x, train), &pick(y, train), lambda)?;
            let pred = model.predict(&pick(x, test))?;
            let rs: Vec<Option<f64>> = (0..t)
                .map(|a| {
                    let p: Vec<f64> = pred.iter().map(|r| r[a]).collect();
                    let o: Vec<f64> = test.iter().map(|&i| y[i][a]).collect();
                    pearson_r(&p, &o)
                })
                .collect();
            Ok((rs, model.pseudo_inverse))
        })
        .collect::<Result<Vec<_>>>()?;
    let pseudo_inverse_fits = fits.iter().filter(|f| f.1).count();
    let per_split: Vec<Vec<Option<f64>>> = fits.into_iter().map(|f| f.0).collect();
    let attributes = (0..t)
        .map(|a| {
            let vals: Vec<f64> = per_split.iter().filter_map(|s| s[a]).collect();
            let m = vals.len() as f64;
            let mean = (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / m);
            let std = mean
                .filter(|_| vals.len() > 1)
                .map(|mu| (vals.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (m - 1.0)).sqrt());
            AttributeSummary {
                name: names[a].clone(),
                mean_r: mean,
                std_r: std,
                defined: vals.len(),
                excluded: per_split.len() - vals.len(),
            }
        })
        .collect();
    Ok(RegressionReport {
        lambda,
        splits,
        ratio,
        attributes,
        per_split,
        pseudo_inverse_fits,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaResult {
    pub projections: Vec<Vec<f64>>,
    /// Descending.
    pub explained_variance_ratio: Vec<f64>,
    pub components: Vec<Vec<f64>>,
}

/// Projects centered rows onto the top `k` covariance eigenvectors. Each
/// component's sign is fixed so its largest-magnitude entry is positive.
pub fn pca_project(rows: &[Vec<f64>], k: usize) -> Result<PcaResult> {
    let n = rows.len();
    if n < 2 {
        return Err(Error::DatasetTooSmall { have: n, need: 2 });
    }
    let d = rows[0].len();
    if k == 0 || k > d {
        return Err(Error::Config(format!("pca needs 1 <= k <= {d}, got {k}")));
    }
    let mean: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let xc = DMatrix::from_fn(n, d, |i, j| rows[i][j] - mean[j]);
    let cov = (xc.transpose() * &xc) / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let trace: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
    let mut components = Vec::with_capacity(k);
    let mut ratios = Vec::with_capacity(k);
    for &c in order.iter().take(k) {
        let mut v: Vec<f64> = eig.eigenvectors.column(c).iter().copied().collect();
        let lead = v.iter().copied().fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
        if lead < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        components.push(v);
        ratios.push(if trace > 0.0 { eig.eigenvalues[c].max(0.0) / trace } else { 0.0 });
    }
    let projections = (0..n)
        .map(|i| {
            components
                .iter()
                .map(|v| (0..d).map(|j| xc[(i, j)] * v[j]).sum())
                .collect()
        })
        .collect();
    Ok(PcaResult {
        projections,
        explained_variance_ratio: ratios,
        components,
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    use super::*;

    fn naive_bce(z: f64, y: f64, w: f64) -> f64 {
        let s = 1.0 / (1.0 + (-z).exp());
        -(w * y * s.ln() + (1.0 - y) * (1.0 - s).ln())
    }

    #[test]
    fn bce_examples() {
        let l = weighted_bce(&[vec![0.0, 0.0]], &[vec![1.0, 0.0]], &[1.0, 1.0]).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-15);
        assert!(weighted_bce(&[vec![800.0]], &[vec![1.0]], &[3.0]).unwrap() < 1e-300);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let z: Vec<Vec<f64>> = (0..6).map(|_| (0..4).map(|_| rng.random_range(-5.0..5.0)).collect()).collect();
        let y: Vec<Vec<f64>> = (0..6).map(|_| (0..4).map(|_| rng.random_range(0..2) as f64).collect()).collect();
        let w = [1.0, 2.5, 7.0, 100.0];
        let want: f64 = (0..6)
            .flat_map(|i| (0..4).map(move |j| (i, j)))
            .map(|(i, j)| naive_bce(z[i][j], y[i][j], w[j]))
            .sum::<f64>()
            / 24.0;
        assert!((weighted_bce(&z, &y, &w).unwrap() - want).abs() < 1e-9);
        assert!(weighted_bce(&z, &y, &[1.0, 0.0, 1.0, 1.0]).is_err());
    }

    #[test]
    fn pos_weight_counting() {
        let labels = vec![vec![1, 0, 0], vec![0, 0, 1], vec![0, 0, 1], vec![0, 0, 1], vec![0, 0, 0]];
        let w = pos_weights(&labels, &[0, 1, 2, 3, 4]);
        assert_eq!(w, vec![4.0, 100.0, 1.0]);
        let many: Vec<Vec<u8>> = (0..500).map(|i| vec![(i == 0) as u8]).collect();
        assert_eq!(pos_weights(&many, &(0..500).collect::<Vec<_>>()), vec![100.0]);
    }

    #[test]
    fn head_predictions() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut head = ClassifierHead::init(8, 3, 0.5, &mut rng).unwrap();
        assert_eq!(head.hidden, 4);
        assert!(matches!(predict_labels(&head, &[vec![0.0; 7]]), Err(Error::Shape { .. })));
        let rows: Vec<Vec<f64>> = (0..5).map(|_| (0..8).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let p = predict_labels(&head, &rows).unwrap();
        let rev: Vec<Vec<f64>> = rows.iter().rev().cloned().collect();
        let pr = predict_labels(&head, &rev).unwrap();
        assert!(p.iter().rev().zip(&pr).all(|(a, b)| a == b));
        for name in ["head.w1", "head.b1", "head.w2", "head.b2"] {
            head.params.get_mut(name).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        assert!(predict_labels(&head, &rows).unwrap().iter().flatten().all(|&s| s == 0.5));
    }

    #[test]
    fn classifier_overfits_small_set() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x: Vec<Vec<f64>> = (0..64).map(|_| (0..16).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let y: Vec<Vec<u8>> = x.iter().map(|r| vec![(r[0] > 0.0) as u8, (r[1] + r[2] > 0.3) as u8, rng.random_range(0..2)]).collect();
        let cfg = ClassifierConfig {
            lr: 1e-2,
            max_epochs: 200,
            batch: 64,
            ..ClassifierConfig::default()
        };
        let all: Vec<usize> = (0..64).collect();
        let (head, hist, _, _) = train_head(&x, &y, &all, &[], &cfg, 0).unwrap();
        assert_eq!(hist.len(), 200);
        let auc = micro_auc(&predict_labels(&head, &x).unwrap(), &y).unwrap();
        assert!(auc >= 0.99, "train micro-AUC {auc}");
    }

    #[test]
    fn classifier_folds_are_seeded() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<Vec<f64>> = (0..40).map(|_| (0..6).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let y: Vec<Vec<u8>> = x.iter().map(|r| vec![(r[0] > 0.0) as u8, (r[1] > 0.2) as u8]).collect();
        let folds: Vec<usize> = (0..40).map(|i| i % 4).collect();
        let cfg = ClassifierConfig {
            max_epochs: 3,
            seed: 11,
            ..ClassifierConfig::default()
        };
        let a = train_classifier(&x, &y, &folds, &cfg).unwrap();
        let b = train_classifier(&x, &y, &folds, &cfg).unwrap();
        assert_eq!(a.len(), 4);
        for (fa, fb) in a.iter().zip(&b) {
            assert_eq!(fa.history[0], fb.history[0]);
            assert_eq!(fa.head, fb.head);
        }
    }

    /// Gaussian elimination with partial pivoting on the normal equations.
    fn normal_equations(x: &[Vec<f64>], y: &[f64], lambda: f64) -> Vec<f64> {
        let d = x[0].len();
        let mut a = vec![vec![0.0; d + 1]; d];
        for i in 0..d {
            for j in 0..d {
                a[i][j] = x.iter().map(|r| r[i] * r[j]).sum::<f64>() + if i == j { lambda } else { 0.0 };
            }
            a[i][d] = x.iter().zip(y).map(|(r, v)| r[i] * v).sum();
        }
        for c in 0..d {
            let p = (c..d).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
            a.swap(c, p);
            for r in 0..d {
                if r != c {
                    let f = a[r][c] / a[c][c];
                    for k in c..=d {
                        a[r][k] -= f * a[c][k];
                    }
                }
            }
        }
        (0..d).map(|i| a[i][d] / a[i][i]).collect()
    }

    #[test]
    fn ridge_matches_independent_solve() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10 {
            let (n, d) = (30, 5);
            let x: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.random_range(-3.0..3.0)).collect()).collect();
            let y: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(0.0..5.0)]).collect();
            let lambda = rng.random_range(0.0..5.0);
            let m = fit_ridge(&x, &y, lambda).unwrap();
            assert!(ridge_stationarity_residual(&m, &x, &y) < 1e-8);
            let xs: Vec<Vec<f64>> = x.iter().map(|r| m.standardize(r)).collect();
            for t in 0..2 {
                let mu = y.iter().map(|r| r[t]).sum::<f64>() / n as f64;
                let yc: Vec<f64> = y.iter().map(|r| r[t] - mu).collect();
                let w = normal_equations(&xs, &yc, lambda);
                for j in 0..d {
                    assert!((w[j] - m.weights[j][t]).abs() < 1e-8);
                }
            }
        }
    }

    #[test]
    fn ridge_limits() {
        let x: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64 * 0.7 - 2.0]).collect();
        let y: Vec<Vec<f64>> = x.iter().map(|r| vec![2.0 * r[0]]).collect();
        let m = fit_ridge(&x, &y, 0.0).unwrap();
        assert!((m.slopes()[0][0] - 2.0).abs() < 1e-10);
        assert!(m.intercept[0].abs() < 1e-10);
        let big = fit_ridge(&x, &y, 1e15).unwrap();
        let mean = y.iter().map(|r| r[0]).sum::<f64>() / 10.0;
        assert!(big.slopes()[0][0].abs() < 1e-10 && (big.intercept[0] - mean).abs() < 1e-9);
        assert!(matches!(fit_ridge(&x, &y, -1.0), Err(Error::Config(_))));
    }

    #[test]
    fn ridge_singular_uses_pseudo_inverse() {
        // duplicated feature column
        let x: Vec<Vec<f64>> = (0..8).map(|i| vec![i as f64, i as f64, (i * i) as f64]).collect();
        let y: Vec<Vec<f64>> = x.iter().map(|r| vec![r[0] + 0.1 * r[2]]).collect();
        let m = fit_ridge(&x, &y, 0.0).unwrap();
        assert!(m.pseudo_inverse);
        assert!((m.weights[0][0] - m.weights[1][0]).abs() < 1e-8);
        let pred = m.predict(&x).unwrap();
        for (p, t) in pred.iter().zip(&y) {
            assert!((p[0] - t[0]).abs() < 1e-8);
        }
    }

    #[test]
    fn regression_on_linear_and_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let names: Vec<String> = (0..3).map(|i| format!("a{i}")).collect();
        let x: Vec<Vec<f64>> = (0..60).map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let y: Vec<Vec<f64>> = x.iter().map(|r| vec![r[0] + 2.0 * r[1], 3.0 - r[2], r[3] * 5.0 + r[0]]).collect();
        let rep = regress_repeated(&x, &y, &names, 20, 0.8, 1e-6, 0).unwrap();
        assert!(rep.attributes.iter().all(|a| a.mean_r.unwrap() >= 0.999));
        let noise_names: Vec<String> = (0..21).map(|i| format!("n{i}")).collect();
        let noise: Vec<Vec<f64>> = (0..50).map(|_| (0..21).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let rep = regress_repeated(&x[..50], &noise, &noise_names, 100, 0.8, 1.0, 1).unwrap();
        let grand = rep.attributes.iter().map(|a| a.mean_r.unwrap()).sum::<f64>() / 21.0;
        assert!(grand.abs() < 0.15, "{grand}");
        let one = regress_repeated(&x, &y, &names, 1, 0.8, 1.0, 2).unwrap();
        assert_eq!(one.per_split.len(), 1);
        assert!(one.attributes.iter().all(|a| a.std_r.is_none()));
    }

    #[test]
    fn constant_target_is_excluded() {
        let x: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64]).collect();
        let y: Vec<Vec<f64>> = x.iter().map(|r| vec![4.0, r[0]]).collect();
        let rep = regress_repeated(&x, &y, &["c".into(), "v".into()], 5, 0.8, 1.0, 0).unwrap();
        assert_eq!(rep.attributes[0].excluded, 5);
        assert!(rep.attributes[0].mean_r.is_none());
    }

    #[test]
    fn pca_examples() {
        let line: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64, 2.0 * i as f64 + 1.0]).collect();
        let p = pca_project(&line, 2).unwrap();
        assert!((p.explained_variance_ratio[0] - 1.0).abs() < 1e-9);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let iso: Vec<Vec<f64>> = (0..10_000)
            .map(|_| vec![StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng)])
            .collect();
        let p = pca_project(&iso, 2).unwrap();
        for r in &p.explained_variance_ratio {
            assert!((r - 0.5).abs() < 0.03);
        }
    }

    proptest! {
        #[test]
        fn pca_ratios_sorted_and_bounded(rows in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 4), 2..30)) {
            let p = pca_project(&rows, 3).unwrap();
            let s: f64 = p.explained_variance_ratio.iter().sum();
            prop_assert!(s <= 1.0 + 1e-12);
            prop_assert!(p.explained_variance_ratio.windows(2).all(|w| w[0] >= w[1]));
        }

        #[test]
        fn unit_weight_bce_is_plain_bce(z in prop::collection::vec(-20.0f64..20.0, 6), y in prop::collection::vec(0u8..2, 6)) {
            let zr = vec![z.clone()];
            let yr = vec![y.iter().map(|&v| v as f64).collect::<Vec<_>>()];
            let got = weighted_bce(&zr, &yr, &[1.0; 6]).unwrap();
            let want: f64 = z.iter().zip(&y).map(|(&zi, &yi)| {
                let yi = yi as f64;
                // log-sum-exp form of plain BCE
                zi.max(0.0) - zi * yi + (-zi.abs()).exp().ln_1p()
            }).sum::<f64>() / 6.0;
            prop_assert!((got - want).abs() < 1e-12);
        }

        #[test]
        fn scores_strictly_inside_unit_interval(z in -30.0f64..30.0) {
            let s = sigmoid(z);
            prop_assert!(s > 0.0 && s < 1.0);
        }

        #[test]
        fn pearson_invariant_to_positive_affine_targets(a in 0.1f64..10.0, b in -5.0f64..5.0, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x: Vec<Vec<f64>> = (0..15).map(|_| (0..2).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            let y: Vec<Vec<f64>> = x.iter().map(|r| vec![r[0] - r[1] + rng.random_range(-0.5..0.5)]).collect();
            let y2: Vec<Vec<f64>> = y.iter().map(|r| vec![a * r[0] + b]).collect();
            let r1 = regress_repeated(&x, &y, &["t".into()], 1, 0.8, 1.0, seed).unwrap();
            let r2 = regress_repeated(&x, &y2, &["t".into()], 1, 0.8, 1.0, seed).unwrap();
            prop_assert!((r1.per_split[0][0].unwrap() - r2.per_split[0][0].unwrap()).abs() < 1e-9);
        }
    }
}
