//! Randomized finite-difference checks for every differentiable operation.

use crate::error::Result;
use crate::gradcheck::finite_diff_check;
use crate::graph::{Graph, Var};
use crate::rng::CounterRng;
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct OpCheck {
    pub op: &'static str,
    pub seed: u64,
    pub max_rel_error: f64,
}

impl OpCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= TOLERANCE
    }
}

fn random(rng: CounterRng, stream: u64, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n as u64)
        .map(|i| lo + (hi - lo) * rng.uniform(stream, i))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("positive shape")
}

/// Contracts an output with fixed random weights so that no output direction
/// is degenerate (a plain sum would zero every softmax gradient).
fn project(g: &mut Graph, out: Var, rng: CounterRng) -> Result<Var> {
    let w = random(rng, 999, g.shape(out), 0.5, 1.5);
    let w = g.constant(w);
    let prod = g.mul(out, w)?;
    g.sum(prod)
}

type Case = (
    &'static str,
    Vec<usize>,
    Box<dyn Fn(&mut Graph, Var, CounterRng) -> Result<Var>>,
);

fn cases() -> Vec<Case> {
    fn c(rng: CounterRng, g: &mut Graph, stream: u64, shape: &[usize]) -> Var {
        g.constant(random(rng, stream, shape, -1.0, 1.0))
    }
    vec![
        (
            "matmul.lhs",
            vec![2, 3, 4],
            Box::new(|g, p, r| {
                let b = c(r, g, 1, &[4, 5]);
                g.matmul(p, b)
            }),
        ),
        (
            "matmul.rhs",
            vec![4, 5],
            Box::new(|g, p, r| {
                let a = c(r, g, 1, &[2, 3, 4]);
                g.matmul(a, p)
            }),
        ),
        (
            "bmm.lhs",
            vec![2, 3, 4],
            Box::new(|g, p, r| {
                let b = c(r, g, 1, &[2, 4, 3]);
                g.bmm(p, b)
            }),
        ),
        (
            "bmm.rhs",
            vec![2, 4, 3],
            Box::new(|g, p, r| {
                let a = c(r, g, 1, &[2, 3, 4]);
                g.bmm(a, p)
            }),
        ),
        (
            "add",
            vec![3, 4],
            Box::new(|g, p, r| {
                let b = c(r, g, 1, &[3, 4]);
                g.add(p, b)
            }),
        ),
        (
            "sub",
            vec![3, 4],
            Box::new(|g, p, r| {
                let b = c(r, g, 1, &[3, 4]);
                g.sub(b, p)
            }),
        ),
        (
            "mul",
            vec![3, 4],
            Box::new(|g, p, r| {
                let b = c(r, g, 1, &[3, 4]);
                g.mul(p, b)
            }),
        ),
        ("scale", vec![3, 4], Box::new(|g, p, _| g.scale(p, -2.5))),
        (
            "add_bias",
            vec![4],
            Box::new(|g, p, r| {
                let x = c(r, g, 1, &[2, 3, 4]);
                g.add_bias(x, p)
            }),
        ),
        (
            "add_broadcast_batch",
            vec![3, 4],
            Box::new(|g, p, r| {
                let x = c(r, g, 1, &[2, 3, 4]);
                g.add_broadcast_batch(x, p)
            }),
        ),
        (
            "gelu",
            vec![3, 5],
            Box::new(|g, p, _| {
                let s = g.scale(p, 3.0)?;
                g.gelu(s)
            }),
        ),
        (
            "softmax_rows",
            vec![2, 3, 5],
            Box::new(|g, p, _| {
                let s = g.scale(p, 2.0)?;
                g.softmax_rows(s)
            }),
        ),
        (
            "layer_norm.x",
            vec![2, 3, 6],
            Box::new(|g, p, r| {
                let gm = g.constant(random(r, 1, &[6], 0.5, 1.5));
                let bt = c(r, g, 2, &[6]);
                g.layer_norm(p, gm, bt, 1e-6)
            }),
        ),
        (
            "layer_norm.affine",
            vec![6],
            Box::new(|g, p, r| {
                let x = c(r, g, 1, &[2, 3, 6]);
                let bt = c(r, g, 2, &[6]);
                let y = g.layer_norm(x, p, bt, 1e-6)?;
                let z = g.layer_norm(x, bt, p, 1e-6)?;
                g.add(y, z)
            }),
        ),
        (
            "dropout_with_mask",
            vec![4, 5],
            Box::new(|g, p, r| {
                let keep = r.keep_mask(7, 20, 0.3);
                g.dropout_with_mask(p, &keep, 0.3)
            }),
        ),
        (
            "sum",
            vec![3, 4],
            Box::new(|g, p, _| {
                let s = g.mul(p, p)?;
                g.sum(s)
            }),
        ),
        (
            "mean",
            vec![3, 4],
            Box::new(|g, p, _| {
                let s = g.mul(p, p)?;
                g.mean(s)
            }),
        ),
        (
            "mean_axis",
            vec![2, 3, 4],
            Box::new(|g, p, _| g.mean_axis(p, 1)),
        ),
        (
            "var_axis",
            vec![2, 3, 4],
            Box::new(|g, p, _| g.var_axis(p, 2)),
        ),
        (
            "concat",
            vec![2, 3, 4],
            Box::new(|g, p, r| {
                let b = c(r, g, 1, &[2, 2, 4]);
                g.concat(&[b, p, b], 1)
            }),
        ),
        (
            "slice",
            vec![2, 5, 3],
            Box::new(|g, p, _| g.slice(p, 1, 1, 4)),
        ),
        (
            "reshape",
            vec![2, 6],
            Box::new(|g, p, _| {
                let s = g.reshape(p, &[3, 4])?;
                let b = g.mul(s, s)?;
                g.sum(b)
            }),
        ),
        (
            "permute",
            vec![2, 3, 4],
            Box::new(|g, p, _| g.permute(p, &[2, 0, 1])),
        ),
        (
            "gather_rows",
            vec![4, 3],
            Box::new(|g, p, _| g.gather_rows(p, &[3, 0, 3, 1])),
        ),
        (
            "cross_entropy",
            vec![5, 3],
            Box::new(|g, p, _| {
                let s = g.scale(p, 2.0)?;
                g.cross_entropy(s, &[0, 2, 1, 1, 0])
            }),
        ),
        (
            "cdc_conv.x",
            vec![2, 2, 4, 4],
            Box::new(|g, p, r| {
                let w = c(r, g, 1, &[3, 2, 3, 3]);
                g.cdc_conv(p, w, 0.7)
            }),
        ),
        (
            "cdc_conv.w",
            vec![3, 2, 3, 3],
            Box::new(|g, p, r| {
                let x = c(r, g, 1, &[2, 2, 4, 4]);
                g.cdc_conv(x, p, 0.7)
            }),
        ),
        (
            "row_distances",
            vec![4, 3],
            Box::new(|g, p, r| g.row_distances(p, &random(r, 1, &[2, 3], -1.0, 1.0))),
        ),
    ]
}

/// Names of all checked operations.
pub fn op_names() -> Vec<&'static str> {
    cases().into_iter().map(|c| c.0).collect()
}

/// Runs every operation check for one seed.
pub fn check_all_ops(seed: u64) -> Result<Vec<OpCheck>> {
    let rng = CounterRng::new(seed);
    cases()
        .into_iter()
        .enumerate()
        .map(|(k, (op, shape, build))| {
            let r = rng.derive(k as u64);
            let p = random(r, 0, &shape, -1.0, 1.0);
            let err = finite_diff_check(
                |g, pv| {
                    let out = build(g, pv, r)?;
                    project(g, out, r)
                },
                &p,
                STEP,
            )?;
            Ok(OpCheck {
                op,
                seed,
                max_rel_error: err,
            })
        })
        .collect()
}
