mod conv;
mod elementwise;
mod linalg;
mod nn;
mod reduce;
mod shape;

use crate::graph::{GradSink, Op};
use crate::tensor::Tensor;

pub use conv::DEFAULT_THETA;
pub use nn::{gelu_scalar, DEFAULT_LN_EPS};

pub(crate) fn backward(op: &Op, out: &Tensor, g: &[f64], sink: &mut GradSink) {
    use Op::*;
    match op {
        Leaf => {}
        MatMul { a, b, rows, k, n } => linalg::matmul_backward(*a, *b, *rows, *k, *n, g, sink),
        BatchMatMul {
            a,
            b,
            batch,
            m,
            k,
            n,
        } => linalg::bmm_backward(*a, *b, *batch, *m, *k, *n, g, sink),
        Add { a, b } => {
            sink.add(*a, g);
            sink.add(*b, g);
        }
        Sub { a, b } => {
            sink.add(*a, g);
            if let Some(s) = sink.slot(*b) {
                s.iter_mut().zip(g).for_each(|(d, x)| *d -= x);
            }
        }
        Mul { a, b } => elementwise::mul_backward(*a, *b, g, sink),
        Scale { a, factor } => {
            if let Some(s) = sink.slot(*a) {
                s.iter_mut().zip(g).for_each(|(d, x)| *d += factor * x);
            }
        }
        AddLastDim { x, bias } => elementwise::add_last_dim_backward(*x, *bias, g, sink),
        AddLeadingDim { x, p } => elementwise::add_leading_dim_backward(*x, *p, g, sink),
        Gelu { a } => nn::gelu_backward(*a, g, sink),
        Softmax { a } => nn::softmax_backward(*a, out, g, sink),
        LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => nn::layer_norm_backward(*x, *gamma, *beta, xhat, rstd, g, sink),
        Dropout { a, mask } => {
            if let Some(s) = sink.slot(*a) {
                for ((d, x), m) in s.iter_mut().zip(g).zip(mask) {
                    *d += x * m;
                }
            }
        }
        Sum { a } => {
            if let Some(s) = sink.slot(*a) {
                s.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        Mean { a } => {
            if let Some(s) = sink.slot(*a) {
                let k = g[0] / s.len() as f64;
                s.iter_mut().for_each(|d| *d += k);
            }
        }
        MeanAxis {
            a,
            outer,
            len,
            inner,
        } => reduce::mean_axis_backward(*a, *outer, *len, *inner, g, sink),
        VarAxis {
            a,
            outer,
            len,
            inner,
        } => reduce::var_axis_backward(*a, *outer, *len, *inner, g, sink),
        Concat {
            parts,
            outer,
            widths,
        } => shape::concat_backward(parts, *outer, widths, g, sink),
        Slice {
            a,
            outer,
            width,
            start,
            end,
        } => shape::slice_backward(*a, *outer, *width, *start, *end, g, sink),
        Reshape { a } => sink.add(*a, g),
        Permute { a, perm } => shape::permute_backward(*a, perm, g, sink),
        Gather { table, ids } => shape::gather_backward(*table, ids, g, sink),
        CrossEntropy {
            logits,
            labels,
            probs,
        } => nn::cross_entropy_backward(*logits, labels, probs, g, sink),
        CdcConv { x, w, theta } => conv::cdc_backward(*x, *w, *theta, g, sink),
        RowDistances {
            c,
            protos,
            n_protos,
        } => nn::row_distances_backward(*c, protos, *n_protos, out, g, sink),
    }
}
