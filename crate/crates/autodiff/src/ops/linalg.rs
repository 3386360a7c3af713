use crate::error::{shape_err, Result};
use crate::graph::{GradSink, Graph, Op, Var};
use crate::tensor::Tensor;

/// `out[r, j] = sum_k a[r, k] * b[k, j]` on row-major slices.
pub(crate) fn gemm_acc(a: &[f64], b: &[f64], out: &mut [f64], rows: usize, k: usize, n: usize) {
    for r in 0..rows {
        let arow = &a[r * k..(r + 1) * k];
        let orow = &mut out[r * n..(r + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `da += g · bᵀ`
fn grad_lhs(g: &[f64], b: &[f64], da: &mut [f64], rows: usize, k: usize, n: usize) {
    for r in 0..rows {
        let grow = &g[r * n..(r + 1) * n];
        let drow = &mut da[r * k..(r + 1) * k];
        for (p, d) in drow.iter_mut().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            *d += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `db += aᵀ · g`
fn grad_rhs(a: &[f64], g: &[f64], db: &mut [f64], rows: usize, k: usize, n: usize) {
    for r in 0..rows {
        let arow = &a[r * k..(r + 1) * k];
        let grow = &g[r * n..(r + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let drow = &mut db[p * n..(p + 1) * n];
            for (d, &gv) in drow.iter_mut().zip(grow) {
                *d += av * gv;
            }
        }
    }
}

impl Graph {
    /// `a[..., K] @ b[K, N] -> [..., N]`; leading axes of `a` are flattened
    /// into rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sb.len() != 2 || *sa.last().unwrap() != sb[0] {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let (k, n) = (sb[0], sb[1]);
        let rows = self.value(a).len() / k;
        let mut out = vec![0.0; rows * n];
        gemm_acc(self.data(a), self.data(b), &mut out, rows, k, n);
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::MatMul { a, b, rows, k, n }))
    }

    /// Batched product `a[B, M, K] @ b[B, K, N] -> [B, M, N]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(shape_err("bmm", &sa, &sb));
        }
        let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; batch * m * n];
        let (ad, bd) = (self.data(a), self.data(b));
        for i in 0..batch {
            gemm_acc(
                &ad[i * m * k..(i + 1) * m * k],
                &bd[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let value = Tensor::new(vec![batch, m, n], out)?;
        Ok(self.push(
            value,
            Op::BatchMatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
            },
        ))
    }
}

pub(crate) fn matmul_backward(
    a: Var,
    b: Var,
    rows: usize,
    k: usize,
    n: usize,
    g: &[f64],
    sink: &mut GradSink,
) {
    let bd = sink.value(b).data();
    if let Some(da) = sink.slot(a) {
        grad_lhs(g, bd, da, rows, k, n);
    }
    let ad = sink.value(a).data();
    if let Some(db) = sink.slot(b) {
        grad_rhs(ad, g, db, rows, k, n);
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn bmm_backward(
    a: Var,
    b: Var,
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    g: &[f64],
    sink: &mut GradSink,
) {
    let bd = sink.value(b).data();
    if let Some(da) = sink.slot(a) {
        for i in 0..batch {
            grad_lhs(
                &g[i * m * n..(i + 1) * m * n],
                &bd[i * k * n..(i + 1) * k * n],
                &mut da[i * m * k..(i + 1) * m * k],
                m,
                k,
                n,
            );
        }
    }
    let ad = sink.value(a).data();
    if let Some(db) = sink.slot(b) {
        for i in 0..batch {
            grad_rhs(
                &ad[i * m * k..(i + 1) * m * k],
                &g[i * m * n..(i + 1) * m * n],
                &mut db[i * k * n..(i + 1) * k * n],
                m,
                k,
                n,
            );
        }
    }
}
