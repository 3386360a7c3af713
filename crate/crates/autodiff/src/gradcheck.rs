//! Central finite-difference checking of analytic gradients.

use crate::error::{AutodiffError, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// `max_i |a_i - n_i| / max(1e-12, |n_i|)`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / n.abs().max(1e-12))
        .fold(0.0, f64::max)
}

/// Central differences of a scalar function at the listed coordinates of `p`
/// (all coordinates when `indices` is `None`).
pub fn numeric_gradient<F>(
    mut value_at: F,
    p: &[f64],
    step: f64,
    indices: Option<&[usize]>,
) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let all: Vec<usize>;
    let idx = match indices {
        Some(i) => i,
        None => {
            all = (0..p.len()).collect();
            &all
        }
    };
    let mut q = p.to_vec();
    let mut out = Vec::with_capacity(idx.len());
    for &i in idx {
        q[i] = p[i] + step;
        let fp = value_at(&q)?;
        q[i] = p[i] - step;
        let fm = value_at(&q)?;
        q[i] = p[i];
        if !fp.is_finite() || !fm.is_finite() {
            return Err(AutodiffError::Numeric {
                op: "finite_diff_check",
                detail: format!("loss is non-finite when perturbing coordinate {i}"),
            });
        }
        out.push((fp - fm) / (2.0 * step));
    }
    Ok(out)
}

/// Builds the graph `f` on a fresh tape with `p` as its only differentiable
/// leaf; returns the loss value and `d loss / d p`.
pub fn analytic_gradient<F>(f: &mut F, p: &Tensor) -> Result<(f64, Vec<f64>)>
where
    F: FnMut(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let pv = g.variable(p.clone());
    let loss = f(&mut g, pv)?;
    let value = g.value(loss).item();
    if !value.is_finite() {
        return Err(AutodiffError::Numeric {
            op: "finite_diff_check",
            detail: format!("loss is {value}"),
        });
    }
    let grads = g.backward(loss)?;
    Ok((value, grads.get_or_zeros(&g, pv)))
}

/// Maximum relative error between the tape gradient of `f` and central
/// differences with the given step.
pub fn finite_diff_check<F>(mut f: F, p: &Tensor, step: f64) -> Result<f64>
where
    F: FnMut(&mut Graph, Var) -> Result<Var>,
{
    let (_, analytic) = analytic_gradient(&mut f, p)?;
    let shape = p.shape().to_vec();
    let numeric = numeric_gradient(
        |q| {
            let mut g = Graph::new();
            let pv = g.constant(Tensor::new(shape.clone(), q.to_vec())?);
            let loss = f(&mut g, pv)?;
            Ok(g.value(loss).item())
        },
        p.data(),
        step,
        None,
    )?;
    Ok(max_relative_error(&analytic, &numeric))
}
