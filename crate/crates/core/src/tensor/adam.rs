use std::collections::BTreeMap;

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

/// Bias-corrected Adam with optional per-prefix learning rates.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    groups: Vec<(String, f64)>,
    step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            groups: Vec::new(),
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Parameters whose name starts with `prefix` use `lr` instead of the
    /// default. The longest matching prefix wins.
    pub fn with_group(mut self, prefix: impl Into<String>, lr: f64) -> Self {
        self.groups.push((prefix.into(), lr));
        self.groups.sort_by(|a, b| b.0.len().cmp(&a.0.len()));
        self
    }

    pub fn lr_for(&self, name: &str) -> f64 {
        self.groups
            .iter()
            .find(|(p, _)| name.starts_with(p.as_str()))
            .map_or(self.lr, |g| g.1)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over every parameter that has a gradient. Gradients are
    /// validated before anything is modified.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, g) in grads {
            let p = params.get(name)?;
            if p.shape() != g.shape() {
                return Err(Error::Shape {
                    op: "adam_step",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            if !g.all_finite() {
                return Err(Error::NonFiniteGradient(name.clone()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, g) in grads {
            let lr = self.lr_for(name);
            let p = params.get_mut(name)?;
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for (i, (w, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                *w -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grads(name: &str, v: f64) -> BTreeMap<String, Tensor> {
        BTreeMap::from([(name.to_string(), Tensor::scalar(v))])
    }

    #[test]
    fn zero_grad_is_noop() {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::scalar(1.5));
        let mut opt = Adam::new(0.1);
        opt.step(&mut p, &grads("w", 0.0)).unwrap();
        assert_eq!(p.get("w").unwrap().item(), 1.5);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn first_step_is_lr_times_sign() {
        for g in [2.5, -0.03] {
            let mut p = ParamStore::new();
            p.insert("w", Tensor::scalar(0.0));
            let mut opt = Adam::new(0.01);
            opt.step(&mut p, &grads("w", g)).unwrap();
            let w = p.get("w").unwrap().item();
            assert!((w + 0.01 * f64::signum(g)).abs() < 1e-8, "{w}");
        }
    }

    #[test]
    fn converges_on_quadratic() {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::scalar(0.0));
        let mut opt = Adam::new(0.05);
        let mut steps = 0;
        while (p.get("w").unwrap().item() - 3.0).abs() >= 1e-3 {
            let w = p.get("w").unwrap().item();
            opt.step(&mut p, &grads("w", 2.0 * (w - 3.0))).unwrap();
            steps += 1;
            assert!(steps <= 2000);
        }
    }

    #[test]
    fn non_finite_gradient_names_tensor() {
        let mut p = ParamStore::new();
        p.insert("a", Tensor::scalar(1.0));
        p.insert("b", Tensor::scalar(1.0));
        let mut g = grads("a", 1.0);
        g.insert("b".into(), Tensor::scalar(f64::NAN));
        let mut opt = Adam::new(0.1);
        match opt.step(&mut p, &g) {
            Err(Error::NonFiniteGradient(n)) => assert_eq!(n, "b"),
            other => panic!("{other:?}"),
        }
        assert_eq!(p.get("a").unwrap().item(), 1.0);
        assert_eq!(opt.step_count(), 0);
    }

    #[test]
    fn prefix_groups() {
        let opt = Adam::new(1e-3).with_group("enc.", 1e-4).with_group("enc.tok", 5e-2);
        assert_eq!(opt.lr_for("enc.tok.table"), 5e-2);
        assert_eq!(opt.lr_for("enc.l0.wq"), 1e-4);
        assert_eq!(opt.lr_for("proj.w"), 1e-3);
    }
}
