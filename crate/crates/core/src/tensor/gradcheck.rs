use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    /// Max over checked coordinates of `|g - g_fd| / (|g| + |g_fd| + 1e-12)`.
    pub max_rel_error: f64,
    /// Coordinate with the largest error.
    pub worst: Option<usize>,
    pub checked: usize,
    /// Coordinates skipped because a ReLU input crossed zero within `±h`.
    pub excluded: usize,
}

fn eval<F>(f: &F, x: &Tensor) -> Result<(f64, Vec<bool>)>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new().track_relu_pattern();
    let v = g.leaf(x.clone());
    let out = f(&mut g, v)?;
    let y = g.value(out);
    if y.len() != 1 {
        return Err(Error::Shape {
            op: "finite_difference_check",
            lhs: y.shape().to_vec(),
            rhs: vec![1],
        });
    }
    let y = y.item();
    Ok((y, g.relu_pattern().unwrap_or_default().to_vec()))
}

/// Central-difference scheme used by [`finite_difference_check_with`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stencil {
    /// `(f(x+h) - f(x-h)) / 2h`, error `O(h^2)`.
    ThreePoint,
    /// `(f(x-2h) - 8f(x-h) + 8f(x+h) - f(x+2h)) / 12h`, error `O(h^4)`.
    FivePoint,
    /// Ridders' extrapolation of central differences over steps shrinking
    /// from `h`, keeping the estimate with the smallest internal error. Robust
    /// to both high curvature and very small derivatives.
    Ridders,
}

/// Compares the reverse-mode gradient of scalar `f` at `x` with central
/// differences of step `h`.
pub fn finite_difference_check<F>(f: F, x: &Tensor, h: f64) -> Result<GradCheck>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    finite_difference_check_with(f, x, h, Stencil::ThreePoint)
}

const RIDDERS_SHRINK: f64 = 1.4;
const RIDDERS_LEVELS: usize = 10;
const RIDDERS_SAFE: f64 = 2.0;

/// Ridders' polynomial extrapolation of `d(step)` towards step 0.
fn ridders(mut d: impl FnMut(f64) -> Result<f64>, h: f64) -> Result<f64> {
    let c2 = RIDDERS_SHRINK * RIDDERS_SHRINK;
    let mut prev: Vec<f64> = vec![d(h)?];
    let mut best = prev[0];
    let mut err = f64::INFINITY;
    let mut hh = h;
    for _ in 1..RIDDERS_LEVELS {
        hh /= RIDDERS_SHRINK;
        let mut row = vec![d(hh)?];
        let mut fac = c2;
        for j in 1..=prev.len() {
            let v = (row[j - 1] * fac - prev[j - 1]) / (fac - 1.0);
            fac *= c2;
            let e = (v - row[j - 1]).abs().max((v - prev[j - 1]).abs());
            if e <= err {
                err = e;
                best = v;
            }
            row.push(v);
        }
        let last = row.len() - 1;
        if (row[last] - prev[last - 1]).abs() >= RIDDERS_SAFE * err {
            break;
        }
        prev = row;
    }
    Ok(best)
}

/// As [`finite_difference_check`] with a chosen scheme. A coordinate is
/// excluded when any ReLU input changes sign across the probed points.
pub fn finite_difference_check_with<F>(f: F, x: &Tensor, h: f64, stencil: Stencil) -> Result<GradCheck>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let v = g.leaf(x.clone());
    let out = f(&mut g, v)?;
    let grads = g.backward(out)?;
    let analytic = grads.get(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.len()]);

    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        excluded: 0,
    };
    let mut probe = x.clone();
    for i in 0..x.len() {
        let x0 = probe.data()[i];
        let mut pattern: Option<Vec<bool>> = None;
        let mut kink = false;
        // central difference at step s; the subtraction comes first so an
        // input with no effect gives exactly zero
        let mut diff = |s: f64| -> Result<f64> {
            let mut ys = [0.0; 2];
            for (y_out, sign) in ys.iter_mut().zip([1.0, -1.0]) {
                probe.data_mut()[i] = x0 + sign * s;
                let (y, p) = eval(&f, &probe)?;
                *y_out = y;
                match &pattern {
                    Some(q) => kink |= *q != p,
                    None => pattern = Some(p),
                }
            }
            Ok(ys[0] - ys[1])
        };
        let fd = match stencil {
            Stencil::ThreePoint => diff(h)? / (2.0 * h),
            Stencil::FivePoint => (8.0 * diff(h)? - diff(2.0 * h)?) / (12.0 * h),
            Stencil::Ridders => ridders(|s| Ok(diff(s)? / (2.0 * s)), h)?,
        };
        probe.data_mut()[i] = x0;
        if kink {
            report.excluded += 1;
            continue;
        }
        let a = analytic[i];
        let rel = (a - fd).abs() / (a.abs() + fd.abs() + 1e-12);
        report.checked += 1;
        if rel > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(rel);
            report.worst = Some(i);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn sum_of_squares() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::uniform(&[3, 4], -2.0, 2.0, &mut rng);
        let r = finite_difference_check(
            |g, v| {
                let sq = g.mul(v, v)?;
                Ok(g.sum(sq))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert_eq!(r.checked, 12);
        assert!(r.max_rel_error < 1e-8, "{r:?}");
    }

    #[test]
    fn relu_kink_is_excluded() {
        let x = Tensor::vector(vec![1e-7, 0.8, -0.6]);
        let r = finite_difference_check(
            |g, v| {
                let a = g.relu(v);
                let sq = g.mul(a, a)?;
                Ok(g.sum(sq))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert_eq!(r.excluded, 1);
        assert_eq!(r.checked, 2);
    }

    #[test]
    fn five_point_stencil_is_more_accurate() {
        let x = Tensor::vector(vec![0.3, -1.2, 2.0]);
        let f = |g: &mut Graph, v: Var| {
            let c = g.mul(v, v)?;
            let c = g.mul(c, v)?;
            let c = g.mul(c, v)?;
            Ok(g.sum(c))
        };
        let three = finite_difference_check_with(f, &x, 1e-3, Stencil::ThreePoint).unwrap();
        let five = finite_difference_check_with(f, &x, 1e-3, Stencil::FivePoint).unwrap();
        assert!(five.max_rel_error < 1e-10, "{five:?}");
        assert!(five.max_rel_error < three.max_rel_error);
        let ridders = finite_difference_check_with(f, &x, 0.1, Stencil::Ridders).unwrap();
        assert!(ridders.max_rel_error < 1e-10, "{ridders:?}");
    }
}
