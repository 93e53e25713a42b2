use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::kernels::{matmul, matmul_at, matmul_bt, pairwise_sum, transpose};
use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    AddBias(usize, usize),
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    ScaleRows(usize, Vec<f64>),
    Relu(usize),
    Dropout(usize, Vec<f64>),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Attention {
        q: usize,
        k: usize,
        v: usize,
        batch: usize,
        seq: usize,
        heads: usize,
        probs: Vec<f64>,
        keep: Option<Vec<f64>>,
    },
    Gather(usize, Vec<usize>),
    SelectRows(usize, Vec<usize>),
    Reshape(usize),
    Transpose(usize),
    L2NormalizeRows(usize, Vec<f64>),
    SoftmaxCrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    WeightedBce {
        logits: usize,
        targets: Vec<f64>,
        pos_weight: Vec<f64>,
    },
    Sum(usize),
    Mean(usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// One forward pass, recorded for backpropagation.
///
/// A graph without dropout is fully deterministic. With dropout, masks come
/// from a ChaCha stream seeded at construction.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(String, usize)>,
    dropout: Option<(f64, ChaCha8Rng)>,
    relu_pattern: Option<Vec<bool>>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    /// Evaluation-mode graph: dropout disabled.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
            dropout: None,
            relu_pattern: None,
        }
    }

    /// Training-mode graph applying dropout with the given rate.
    pub fn with_dropout(rate: f64, seed: u64) -> Self {
        let mut g = Self::new();
        if rate > 0.0 {
            g.dropout = Some((rate, ChaCha8Rng::seed_from_u64(seed)));
        }
        g
    }

    /// Records the sign pattern of every ReLU input (used by gradient checks
    /// to detect kinks).
    pub fn track_relu_pattern(mut self) -> Self {
        self.relu_pattern = Some(Vec::new());
        self
    }

    pub fn relu_pattern(&self) -> Option<&[bool]> {
        self.relu_pattern.as_deref()
    }

    pub fn is_training(&self) -> bool {
        self.dropout.is_some()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].needs_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Input that receives a gradient.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Copies a named parameter in; its gradient is reported under the same
    /// name.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&(_, id)) = self.params.iter().find(|(n, _)| n == name) {
            return Ok(Var(id));
        }
        let v = self.leaf(store.get(name)?.clone());
        self.params.push((name.to_string(), v.0));
        Ok(v)
    }

    /// Makes later `param(_, name)` calls resolve to `v` instead of the store.
    pub fn bind_param(&mut self, name: &str, v: Var) {
        self.params.retain(|(n, _)| n != name);
        self.params.push((name.to_string(), v.0));
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if tb.shape().len() != 2 || ta.cols() != tb.shape()[0] {
            return Err(shape_err("matmul", ta, tb));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.shape()[1]);
        let mut shape = ta.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let out = Tensor::new(shape, matmul(ta.data(), tb.data(), m, k, n))?;
        let ng = self.needs(&[a.0, b.0]);
        Ok(self.push(out, Op::MatMul(a.0, b.0), ng))
    }

    /// Adds a bias vector to every row.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        if tb.len() != tx.cols() {
            return Err(shape_err("add_bias", tx, tb));
        }
        let c = tx.cols();
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + tb.data()[i % c])
            .collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let ng = self.needs(&[x.0, b.0]);
        Ok(self.push(out, Op::AddBias(x.0, b.0), ng))
    }

    /// `x w + b` over the last axis of `x`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("add", ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let ng = self.needs(&[a.0, b.0]);
        Ok(self.push(out, Op::Add(a.0, b.0), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("mul", ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let ng = self.needs(&[a.0, b.0]);
        Ok(self.push(out, Op::Mul(a.0, b.0), ng))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let t = self.value(x);
        let out = Tensor {
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|v| v * s).collect(),
        };
        let ng = self.needs(&[x.0]);
        self.push(out, Op::Scale(x.0, s), ng)
    }

    /// Multiplies row `i` by the constant `factors[i]`.
    pub fn scale_rows(&mut self, x: Var, factors: Vec<f64>) -> Result<Var> {
        let t = self.value(x);
        if factors.len() != t.rows() {
            return Err(Error::Shape {
                op: "scale_rows",
                lhs: t.shape().to_vec(),
                rhs: vec![factors.len()],
            });
        }
        let c = t.cols();
        let data = t
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v * factors[i / c])
            .collect();
        let out = Tensor::new(t.shape().to_vec(), data)?;
        let ng = self.needs(&[x.0]);
        Ok(self.push(out, Op::ScaleRows(x.0, factors), ng))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = &self.nodes[x.0].value;
        if let Some(p) = self.relu_pattern.as_mut() {
            p.extend(t.data().iter().map(|&v| v > 0.0));
        }
        let t = self.value(x);
        let out = Tensor {
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|&v| v.max(0.0)).collect(),
        };
        let ng = self.needs(&[x.0]);
        self.push(out, Op::Relu(x.0), ng)
    }

    /// Inverted dropout; identity in evaluation mode.
    pub fn dropout(&mut self, x: Var) -> Var {
        let Some((rate, rng)) = self.dropout.as_mut() else {
            return x;
        };
        let rate = *rate;
        let n = self.nodes[x.0].value.len();
        let keep_scale = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep_scale })
            .collect();
        let t = self.value(x);
        let out = Tensor {
            shape: t.shape().to_vec(),
            data: t.data().iter().zip(&mask).map(|(v, m)| v * m).collect(),
        };
        let ng = self.needs(&[x.0]);
        self.push(out, Op::Dropout(x.0, mask), ng)
    }

    /// Per-row standardization followed by `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let d = tx.cols();
        if tg.len() != d || tb.len() != d {
            return Err(shape_err("layer_norm", tx, tg));
        }
        let rows = tx.rows();
        let mut xhat = vec![0.0; tx.len()];
        let mut rstd = vec![0.0; rows];
        let mut data = vec![0.0; tx.len()];
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                data[r * d + j] = tg.data()[j] * h + tb.data()[j];
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let ng = self.needs(&[x.0, gamma.0, beta.0]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    /// Scaled dot-product attention over `batch` sequences of length `seq`.
    ///
    /// `q`, `k`, `v` hold `batch * seq` rows of width `d`, split into `heads`
    /// contiguous slices. `mask[b * seq + j]` marks key `j` of sequence `b`
    /// as valid; invalid keys get exactly zero weight. Dropout, when active,
    /// is applied to the attention weights.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        mask: &[bool],
    ) -> Result<Var> {
        let (tq, tk, tv) = (&self.nodes[q.0].value, &self.nodes[k.0].value, &self.nodes[v.0].value);
        let d = tq.cols();
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("width {d} not divisible by {heads} heads")));
        }
        if tk.shape() != tq.shape() || tv.shape() != tq.shape() {
            return Err(shape_err("attention", tq, tk));
        }
        if tq.rows() != batch * seq || mask.len() != batch * seq {
            return Err(Error::Shape {
                op: "attention",
                lhs: tq.shape().to_vec(),
                rhs: vec![batch, seq, mask.len()],
            });
        }
        let dh = d / heads;
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());

        let per_batch = heads * seq * seq;
        let mut probs = vec![0.0; batch * per_batch];
        probs
            .par_chunks_mut(per_batch)
            .enumerate()
            .for_each(|(b, pb)| {
                let m = &mask[b * seq..(b + 1) * seq];
                for h in 0..heads {
                    for i in 0..seq {
                        let qi = &qd[(b * seq + i) * d + h * dh..][..dh];
                        let row = &mut pb[(h * seq + i) * seq..][..seq];
                        let mut max = f64::NEG_INFINITY;
                        for j in 0..seq {
                            if m[j] {
                                let kj = &kd[(b * seq + j) * d + h * dh..][..dh];
                                let s = qi.iter().zip(kj).map(|(x, y)| x * y).sum::<f64>() * inv_sqrt;
                                row[j] = s;
                                max = max.max(s);
                            }
                        }
                        let mut z = 0.0;
                        for j in 0..seq {
                            if m[j] {
                                let e = (row[j] - max).exp();
                                row[j] = e;
                                z += e;
                            } else {
                                row[j] = 0.0;
                            }
                        }
                        if z > 0.0 {
                            row.iter_mut().for_each(|p| *p /= z);
                        }
                    }
                }
            });

        let keep = match self.dropout.as_mut() {
            Some((rate, rng)) => {
                let rate = *rate;
                let s = 1.0 / (1.0 - rate);
                Some(
                    (0..probs.len())
                        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { s })
                        .collect::<Vec<f64>>(),
                )
            }
            None => None,
        };

        let mut out = vec![0.0; batch * seq * d];
        out.par_chunks_mut(seq * d).enumerate().for_each(|(b, ob)| {
            for h in 0..heads {
                for i in 0..seq {
                    let o = &mut ob[i * d + h * dh..][..dh];
                    for j in 0..seq {
                        let idx = b * per_batch + (h * seq + i) * seq + j;
                        let mut p = probs[idx];
                        if let Some(kp) = &keep {
                            p *= kp[idx];
                        }
                        if p != 0.0 {
                            let vj = &vd[(b * seq + j) * d + h * dh..][..dh];
                            for (x, y) in o.iter_mut().zip(vj) {
                                *x += p * y;
                            }
                        }
                    }
                }
            }
        });
        let out = Tensor::new(tq.shape().to_vec(), out)?;
        let ng = self.needs(&[q.0, k.0, v.0]);
        Ok(self.push(
            out,
            Op::Attention {
                q: q.0,
                k: k.0,
                v: v.0,
                batch,
                seq,
                heads,
                probs,
                keep,
            },
            ng,
        ))
    }

    /// Attention weights recorded by an attention node (before dropout),
    /// laid out `[batch][head][query][key]`.
    pub fn attention_weights(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Row lookup into a 2-D table.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.shape().len() != 2 {
            return Err(Error::Shape {
                op: "gather",
                lhs: t.shape().to_vec(),
                rhs: vec![ids.len()],
            });
        }
        let (rows, d) = (t.shape()[0], t.shape()[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::Shape {
                op: "gather",
                lhs: t.shape().to_vec(),
                rhs: vec![bad],
            });
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::new(vec![ids.len(), d], data)?;
        let ng = self.needs(&[table.0]);
        Ok(self.push(out, Op::Gather(table.0, ids.to_vec()), ng))
    }

    /// Picks rows (over the flattened leading axes) into a 2-D result.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let d = t.cols();
        if let Some(&bad) = rows.iter().find(|&&r| r >= t.rows()) {
            return Err(Error::Shape {
                op: "select_rows",
                lhs: t.shape().to_vec(),
                rhs: vec![bad],
            });
        }
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            data.extend_from_slice(t.row(r));
        }
        let out = Tensor::new(vec![rows.len(), d], data)?;
        let ng = self.needs(&[x.0]);
        Ok(self.push(out, Op::SelectRows(x.0, rows.to_vec()), ng))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let ng = self.needs(&[x.0]);
        Ok(self.push(out, Op::Reshape(x.0), ng))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.shape().len() != 2 {
            return Err(Error::Shape {
                op: "transpose",
                lhs: t.shape().to_vec(),
                rhs: vec![],
            });
        }
        let (r, c) = (t.shape()[0], t.shape()[1]);
        let out = Tensor::new(vec![c, r], transpose(t.data(), r, c))?;
        let ng = self.needs(&[x.0]);
        Ok(self.push(out, Op::Transpose(x.0), ng))
    }

    /// Scales each row to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let norms: Vec<f64> = (0..t.rows())
            .map(|r| t.row(r).iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        if let Some(r) = norms.iter().position(|&n| n == 0.0 || !n.is_finite()) {
            return Err(Error::DegenerateEmbedding(r));
        }
        let c = t.cols();
        let data = t
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v / norms[i / c])
            .collect();
        let out = Tensor::new(t.shape().to_vec(), data)?;
        let ng = self.needs(&[x.0]);
        Ok(self.push(out, Op::L2NormalizeRows(x.0, norms), ng))
    }

    /// Mean over rows of `-log softmax(row)[target]`, stabilized by the row
    /// maximum.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let (rows, c) = (t.rows(), t.cols());
        if targets.len() != rows || targets.iter().any(|&k| k >= c) {
            return Err(Error::Shape {
                op: "softmax_cross_entropy",
                lhs: t.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let mut probs = vec![0.0; t.len()];
        let mut losses = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = t.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let shifted: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
            let z = pairwise_sum(&shifted);
            for j in 0..c {
                probs[r * c + j] = shifted[j] / z;
            }
            losses.push(z.ln() - (row[targets[r]] - max));
        }
        let loss = if rows == 0 { 0.0 } else { pairwise_sum(&losses) / rows as f64 };
        let ng = self.needs(&[logits.0]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits: logits.0,
                targets: targets.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// Mean over all cells of
    /// `w_l * y * softplus(-z) + (1 - y) * softplus(z)`.
    pub fn weighted_bce(&mut self, logits: Var, targets: &[f64], pos_weight: &[f64]) -> Result<Var> {
        let t = self.value(logits);
        if targets.len() != t.len() || pos_weight.len() != t.cols() {
            return Err(Error::Shape {
                op: "weighted_bce",
                lhs: t.shape().to_vec(),
                rhs: vec![targets.len(), pos_weight.len()],
            });
        }
        let c = t.cols();
        let cells: Vec<f64> = t
            .data()
            .iter()
            .zip(targets)
            .enumerate()
            .map(|(i, (&z, &y))| pos_weight[i % c] * y * softplus(-z) + (1.0 - y) * softplus(z))
            .collect();
        let loss = pairwise_sum(&cells) / cells.len().max(1) as f64;
        let ng = self.needs(&[logits.0]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::WeightedBce {
                logits: logits.0,
                targets: targets.to_vec(),
                pos_weight: pos_weight.to_vec(),
            },
            ng,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = pairwise_sum(self.value(x).data());
        let ng = self.needs(&[x.0]);
        self.push(Tensor::scalar(s), Op::Sum(x.0), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = pairwise_sum(t.data()) / t.len() as f64;
        let ng = self.needs(&[x.0]);
        self.push(Tensor::scalar(s), Op::Mean(x.0), ng)
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape {
                op: "backward",
                lhs: self.value(loss).shape().to_vec(),
                rhs: vec![1],
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.needs_grad {
                self.backprop(node, &g, &mut grads);
            }
            grads[i] = Some(g);
        }

        let by_name = self
            .params
            .iter()
            .filter_map(|(name, id)| {
                grads[*id].as_ref().map(|g| {
                    (
                        name.clone(),
                        Tensor {
                            shape: self.nodes[*id].value.shape().to_vec(),
                            data: g.clone(),
                        },
                    )
                })
            })
            .collect();
        Ok(Gradients { grads, by_name })
    }

    fn backprop(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let mut acc = |id: usize, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[id].needs_grad {
                return;
            }
            let slot = grads[id].get_or_insert_with(|| vec![0.0; nodes[id].value.len()]);
            f(slot);
        };
        let add_into = |dst: &mut [f64], src: &[f64]| {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        };

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (&nodes[*a].value, &nodes[*b].value);
                let (m, k, n) = (ta.rows(), ta.cols(), tb.shape()[1]);
                if nodes[*a].needs_grad {
                    let da = matmul_bt(g, tb.data(), m, n, k);
                    acc(*a, &mut |s| add_into(s, &da));
                }
                if nodes[*b].needs_grad {
                    let db = matmul_at(ta.data(), g, m, k, n);
                    acc(*b, &mut |s| add_into(s, &db));
                }
            }
            Op::AddBias(x, b) => {
                acc(*x, &mut |s| add_into(s, g));
                let c = nodes[*b].value.len();
                acc(*b, &mut |s| {
                    for (i, v) in g.iter().enumerate() {
                        s[i % c] += v;
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| add_into(s, g));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (nodes[*a].value.data(), nodes[*b].value.data());
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * vb[i];
                    }
                });
                acc(*b, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * va[i];
                    }
                });
            }
            Op::Scale(x, f) => acc(*x, &mut |s| {
                for (d, v) in s.iter_mut().zip(g) {
                    *d += v * f;
                }
            }),
            Op::ScaleRows(x, factors) => {
                let c = nodes[*x].value.cols();
                acc(*x, &mut |s| {
                    for (i, v) in g.iter().enumerate() {
                        s[i] += v * factors[i / c];
                    }
                })
            }
            Op::Relu(x) => {
                let xv = nodes[*x].value.data();
                acc(*x, &mut |s| {
                    for i in 0..s.len() {
                        if xv[i] > 0.0 {
                            s[i] += g[i];
                        }
                    }
                })
            }
            Op::Dropout(x, mask) => acc(*x, &mut |s| {
                for i in 0..s.len() {
                    s[i] += g[i] * mask[i];
                }
            }),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gam = nodes[*gamma].value.data();
                let d = gam.len();
                let rows = rstd.len();
                acc(*gamma, &mut |s| {
                    for (i, v) in g.iter().enumerate() {
                        s[i % d] += v * xhat[i];
                    }
                });
                acc(*beta, &mut |s| {
                    for (i, v) in g.iter().enumerate() {
                        s[i % d] += v;
                    }
                });
                acc(*x, &mut |s| {
                    for r in 0..rows {
                        let gr = &g[r * d..(r + 1) * d];
                        let xh = &xhat[r * d..(r + 1) * d];
                        let mut mean_dxh = 0.0;
                        let mut mean_dxh_xh = 0.0;
                        for j in 0..d {
                            let dxh = gr[j] * gam[j];
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * xh[j];
                        }
                        mean_dxh /= d as f64;
                        mean_dxh_xh /= d as f64;
                        for j in 0..d {
                            let dxh = gr[j] * gam[j];
                            s[r * d + j] += rstd[r] * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
                        }
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs,
                keep,
            } => {
                let (batch, seq, heads) = (*batch, *seq, *heads);
                let (qd, kd, vd) = (
                    nodes[*q].value.data(),
                    nodes[*k].value.data(),
                    nodes[*v].value.data(),
                );
                let d = nodes[*q].value.cols();
                let dh = d / heads;
                let inv_sqrt = 1.0 / (dh as f64).sqrt();
                let per_batch = heads * seq * seq;
                let parts: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = (0..batch)
                    .into_par_iter()
                    .map(|b| {
                        let mut dq = vec![0.0; seq * d];
                        let mut dk = vec![0.0; seq * d];
                        let mut dv = vec![0.0; seq * d];
                        let row_off = b * seq;
                        for h in 0..heads {
                            for i in 0..seq {
                                let gi = &g[(row_off + i) * d + h * dh..][..dh];
                                let base = b * per_batch + (h * seq + i) * seq;
                                let p = &probs[base..base + seq];
                                // dP (through dropout) and dV
                                let mut dp = vec![0.0; seq];
                                for j in 0..seq {
                                    if p[j] == 0.0 {
                                        continue;
                                    }
                                    let kp = keep.as_ref().map_or(1.0, |kk| kk[base + j]);
                                    let vj = &vd[(row_off + j) * d + h * dh..][..dh];
                                    dp[j] = gi.iter().zip(vj).map(|(x, y)| x * y).sum::<f64>() * kp;
                                    let w = p[j] * kp;
                                    if w != 0.0 {
                                        let dvj = &mut dv[j * d + h * dh..][..dh];
                                        for (o, x) in dvj.iter_mut().zip(gi) {
                                            *o += w * x;
                                        }
                                    }
                                }
                                let dot: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                                let qi = &qd[(row_off + i) * d + h * dh..][..dh];
                                for j in 0..seq {
                                    if p[j] == 0.0 {
                                        continue;
                                    }
                                    let ds = p[j] * (dp[j] - dot) * inv_sqrt;
                                    if ds == 0.0 {
                                        continue;
                                    }
                                    let kj = &kd[(row_off + j) * d + h * dh..][..dh];
                                    let dqi = &mut dq[i * d + h * dh..][..dh];
                                    for (o, x) in dqi.iter_mut().zip(kj) {
                                        *o += ds * x;
                                    }
                                    let dkj = &mut dk[j * d + h * dh..][..dh];
                                    for (o, x) in dkj.iter_mut().zip(qi) {
                                        *o += ds * x;
                                    }
                                }
                            }
                        }
                        (dq, dk, dv)
                    })
                    .collect();
                for (target, pick) in [(*q, 0usize), (*k, 1), (*v, 2)] {
                    acc(target, &mut |s| {
                        for (b, part) in parts.iter().enumerate() {
                            let src = match pick {
                                0 => &part.0,
                                1 => &part.1,
                                _ => &part.2,
                            };
                            add_into(&mut s[b * seq * d..(b + 1) * seq * d], src);
                        }
                    });
                }
            }
            Op::Gather(table, ids) => {
                let d = nodes[*table].value.cols();
                acc(*table, &mut |s| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut s[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                })
            }
            Op::SelectRows(x, rows) => {
                let d = nodes[*x].value.cols();
                acc(*x, &mut |s| {
                    for (r, &src) in rows.iter().enumerate() {
                        add_into(&mut s[src * d..(src + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                })
            }
            Op::Reshape(x) => acc(*x, &mut |s| add_into(s, g)),
            Op::Transpose(x) => {
                let t = &nodes[*x].value;
                let (r, c) = (t.shape()[0], t.shape()[1]);
                let gt = transpose(g, c, r);
                acc(*x, &mut |s| add_into(s, &gt));
            }
            Op::L2NormalizeRows(x, norms) => {
                let y = node.value.data();
                let c = node.value.cols();
                acc(*x, &mut |s| {
                    for (r, n) in norms.iter().enumerate() {
                        let yr = &y[r * c..(r + 1) * c];
                        let gr = &g[r * c..(r + 1) * c];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            s[r * c + j] += (gr[j] - yr[j] * dot) / n;
                        }
                    }
                })
            }
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let c = nodes[*logits].value.cols();
                let rows = targets.len();
                let scale = g[0] / rows as f64;
                acc(*logits, &mut |s| {
                    for r in 0..rows {
                        for j in 0..c {
                            let onehot = if j == targets[r] { 1.0 } else { 0.0 };
                            s[r * c + j] += scale * (probs[r * c + j] - onehot);
                        }
                    }
                })
            }
            Op::WeightedBce {
                logits,
                targets,
                pos_weight,
            } => {
                let z = nodes[*logits].value.data();
                let c = pos_weight.len();
                let scale = g[0] / z.len() as f64;
                acc(*logits, &mut |s| {
                    for i in 0..z.len() {
                        let y = targets[i];
                        let d = -pos_weight[i % c] * y * sigmoid(-z[i]) + (1.0 - y) * sigmoid(z[i]);
                        s[i] += scale * d;
                    }
                })
            }
            Op::Sum(x) => acc(*x, &mut |s| s.iter_mut().for_each(|v| *v += g[0])),
            Op::Mean(x) => {
                let n = nodes[*x].value.len() as f64;
                acc(*x, &mut |s| s.iter_mut().for_each(|v| *v += g[0] / n))
            }
        }
    }
}

/// Gradients from one reverse pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    by_name: BTreeMap<String, Tensor>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if it influenced the loss.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Parameter gradients keyed by parameter name.
    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.by_name
    }

    pub fn into_params(self) -> BTreeMap<String, Tensor> {
        self.by_name
    }
}

/// Projection weights of one self-attention block. Keys carry no bias: it
/// would add the same constant to every logit of a query and has no effect.
#[derive(Debug, Clone, Copy)]
pub struct AttentionWeights {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

impl AttentionWeights {
    /// Loads `{prefix}.wq`, `{prefix}.bq`, ... from the store.
    pub fn load(g: &mut Graph, store: &ParamStore, prefix: &str) -> Result<Self> {
        let mut p = |n: &str| g.param(store, &format!("{prefix}.{n}"));
        Ok(Self {
            wq: p("wq")?,
            bq: p("bq")?,
            wk: p("wk")?,
            wv: p("wv")?,
            bv: p("bv")?,
            wo: p("wo")?,
            bo: p("bo")?,
        })
    }

    /// Fresh Glorot-initialized weights for width `d` under `prefix`.
    pub fn init<R: Rng>(store: &mut ParamStore, prefix: &str, d: usize, rng: &mut R) {
        for n in ["q", "k", "v", "o"] {
            store.insert(format!("{prefix}.w{n}"), Tensor::xavier(d, d, rng));
            if n != "k" {
                store.insert(format!("{prefix}.b{n}"), Tensor::zeros(&[d]));
            }
        }
    }
}

/// Multi-head self-attention with input and output projections.
///
/// `x` has `batch * seq` rows of width `d`; `mask` marks valid positions.
pub fn multi_head_attention(
    g: &mut Graph,
    x: Var,
    w: &AttentionWeights,
    batch: usize,
    seq: usize,
    heads: usize,
    mask: &[bool],
) -> Result<Var> {
    let d = g.value(x).cols();
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::Config(format!("width {d} not divisible by {heads} heads")));
    }
    let q = g.linear(x, w.wq, w.bq)?;
    let k = g.matmul(x, w.wk)?;
    let v = g.linear(x, w.wv, w.bv)?;
    let a = g.attention(q, k, v, batch, seq, heads, mask)?;
    g.linear(a, w.wo, w.bo)
}
