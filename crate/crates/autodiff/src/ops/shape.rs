use crate::error::{shape_err, AutodiffError, Result};
use crate::graph::{GradSink, Graph, Op, Var};
use crate::tensor::{strides, Tensor};

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Source offset for every output element of a permutation.
fn permute_index(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n: usize = shape.iter().product();
    let mut idx = vec![0usize; out_shape.len()];
    let mut out = Vec::with_capacity(n);
    let mut off = 0usize;
    for _ in 0..n {
        out.push(off);
        for ax in (0..idx.len()).rev() {
            idx[ax] += 1;
            off += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    out
}

impl Graph {
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).reshaped(shape.to_vec())?;
        Ok(self.push(v, Op::Reshape { a }))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let mut seen = vec![false; sa.len()];
        if perm.len() != sa.len()
            || perm
                .iter()
                .any(|&p| p >= sa.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(shape_err("permute", &sa, perm));
        }
        let src = permute_index(&sa, perm);
        let ad = self.data(a);
        let data = src.iter().map(|&i| ad[i]).collect();
        let v = Tensor::new(perm.iter().map(|&p| sa[p]).collect(), data)?;
        Ok(self.push(
            v,
            Op::Permute {
                a,
                perm: perm.to_vec(),
            },
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose_last2(&mut self, a: Var) -> Result<Var> {
        let n = self.shape(a).len();
        if n < 2 {
            return Err(shape_err("transpose_last2", self.shape(a), &[]));
        }
        let mut perm: Vec<usize> = (0..n).collect();
        perm.swap(n - 1, n - 2);
        self.permute(a, &perm)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(shape_err("concat", &first, &[axis]));
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(i, (x, y))| i != axis && x != y)
            {
                return Err(shape_err("concat", &first, s));
            }
            widths.push(s[axis] * inner);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(outer * total);
        for o in 0..outer {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.data(p)[o * w..(o + 1) * w]);
            }
        }
        let mut shape = first;
        shape[axis] = total / inner;
        let v = Tensor::new(shape, data)?;
        Ok(self.push(
            v,
            Op::Concat {
                parts: parts.to_vec(),
                outer,
                widths,
            },
        ))
    }

    /// Half-open range `start..end` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() || start >= end || end > sa[axis] {
            return Err(shape_err("slice", &sa, &[axis, start, end]));
        }
        let (outer, len, inner) = split_axis(&sa, axis);
        let width = len * inner;
        let ad = self.data(a);
        let mut data = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            data.extend_from_slice(&ad[o * width + start * inner..o * width + end * inner]);
        }
        let mut shape = sa;
        shape[axis] = end - start;
        let v = Tensor::new(shape, data)?;
        Ok(self.push(
            v,
            Op::Slice {
                a,
                outer,
                width,
                start: start * inner,
                end: end * inner,
            },
        ))
    }

    /// Embedding lookup: rows `ids` of `table[N, C]`, giving `[ids.len(), C]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 || ids.is_empty() {
            return Err(shape_err("gather_rows", &st, &[ids.len()]));
        }
        let c = st[1];
        if let Some(&bad) = ids.iter().find(|&&i| i >= st[0]) {
            return Err(AutodiffError::Invalid(format!(
                "row {bad} out of range for table {st:?}"
            )));
        }
        let td = self.data(table);
        let data = ids
            .iter()
            .flat_map(|&i| td[i * c..(i + 1) * c].iter().copied())
            .collect();
        let v = Tensor::new(vec![ids.len(), c], data)?;
        Ok(self.push(
            v,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        ))
    }
}

pub(crate) fn permute_backward(a: Var, perm: &[usize], g: &[f64], sink: &mut GradSink) {
    let sa = sink.value(a).shape();
    let src = permute_index(sa, perm);
    if let Some(s) = sink.slot(a) {
        for (&i, gv) in src.iter().zip(g) {
            s[i] += gv;
        }
    }
}

pub(crate) fn concat_backward(
    parts: &[Var],
    outer: usize,
    widths: &[usize],
    g: &[f64],
    sink: &mut GradSink,
) {
    let total: usize = widths.iter().sum();
    let mut offset = 0;
    for (&p, &w) in parts.iter().zip(widths) {
        if let Some(s) = sink.slot(p) {
            for o in 0..outer {
                let src = &g[o * total + offset..o * total + offset + w];
                for (d, v) in s[o * w..(o + 1) * w].iter_mut().zip(src) {
                    *d += v;
                }
            }
        }
        offset += w;
    }
}

pub(crate) fn slice_backward(
    a: Var,
    outer: usize,
    width: usize,
    start: usize,
    end: usize,
    g: &[f64],
    sink: &mut GradSink,
) {
    let w = end - start;
    if let Some(s) = sink.slot(a) {
        for o in 0..outer {
            for (d, v) in s[o * width + start..o * width + end]
                .iter_mut()
                .zip(&g[o * w..(o + 1) * w])
            {
                *d += v;
            }
        }
    }
}

pub(crate) fn gather_backward(table: Var, ids: &[usize], g: &[f64], sink: &mut GradSink) {
    if let Some(s) = sink.slot(table) {
        let c = g.len() / ids.len();
        for (r, &i) in ids.iter().enumerate() {
            for j in 0..c {
                s[i * c + j] += g[r * c + j];
            }
        }
    }
}
