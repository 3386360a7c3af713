use crate::error::{shape_err, Result};
use crate::graph::{GradSink, Graph, Op, Var};
use crate::tensor::Tensor;

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    )
}

fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    s[axis] = 1;
    s
}

impl Graph {
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::scalar(self.data(a).iter().sum());
        Ok(self.push(v, Op::Sum { a }))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len() as f64;
        let v = Tensor::scalar(self.data(a).iter().sum::<f64>() / n);
        Ok(self.push(v, Op::Mean { a }))
    }

    /// Mean along `axis`, which is kept with size 1.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() {
            return Err(shape_err("mean_axis", &sa, &[axis]));
        }
        let (outer, len, inner) = axis_split(&sa, axis);
        let ad = self.data(a);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += ad[(o * len + l) * inner + i];
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= len as f64);
        let v = Tensor::new(reduced_shape(&sa, axis), out)?;
        Ok(self.push(
            v,
            Op::MeanAxis {
                a,
                outer,
                len,
                inner,
            },
        ))
    }

    /// Population variance along `axis` (divides by the axis length).
    pub fn var_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() {
            return Err(shape_err("var_axis", &sa, &[axis]));
        }
        let (outer, len, inner) = axis_split(&sa, axis);
        let v = Tensor::new(
            reduced_shape(&sa, axis),
            population_variance(self.data(a), outer, len, inner),
        )?;
        Ok(self.push(
            v,
            Op::VarAxis {
                a,
                outer,
                len,
                inner,
            },
        ))
    }
}

fn means(a: &[f64], outer: usize, len: usize, inner: usize) -> Vec<f64> {
    let mut m = vec![0.0; outer * inner];
    for o in 0..outer {
        for l in 0..len {
            for i in 0..inner {
                m[o * inner + i] += a[(o * len + l) * inner + i];
            }
        }
    }
    m.iter_mut().for_each(|v| *v /= len as f64);
    m
}

pub(crate) fn population_variance(a: &[f64], outer: usize, len: usize, inner: usize) -> Vec<f64> {
    let m = means(a, outer, len, inner);
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        for l in 0..len {
            for i in 0..inner {
                let d = a[(o * len + l) * inner + i] - m[o * inner + i];
                out[o * inner + i] += d * d;
            }
        }
    }
    out.iter_mut().for_each(|v| *v /= len as f64);
    out
}

pub(crate) fn mean_axis_backward(
    a: Var,
    outer: usize,
    len: usize,
    inner: usize,
    g: &[f64],
    sink: &mut GradSink,
) {
    if let Some(s) = sink.slot(a) {
        for o in 0..outer {
            for l in 0..len {
                for i in 0..inner {
                    s[(o * len + l) * inner + i] += g[o * inner + i] / len as f64;
                }
            }
        }
    }
}

pub(crate) fn var_axis_backward(
    a: Var,
    outer: usize,
    len: usize,
    inner: usize,
    g: &[f64],
    sink: &mut GradSink,
) {
    let ad = sink.value(a).data();
    let m = means(ad, outer, len, inner);
    if let Some(s) = sink.slot(a) {
        for o in 0..outer {
            for l in 0..len {
                for i in 0..inner {
                    let k = (o * len + l) * inner + i;
                    s[k] += g[o * inner + i] * 2.0 * (ad[k] - m[o * inner + i]) / len as f64;
                }
            }
        }
    }
}
