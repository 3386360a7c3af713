use crate::error::{shape_err, Result};
use crate::graph::{GradSink, Graph, Op, Var};
use crate::tensor::Tensor;

impl Graph {
    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(self.shape(a).to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_with(a, b, |x, y| x + y)?;
        Ok(self.push(v, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_with(a, b, |x, y| x - y)?;
        Ok(self.push(v, Op::Sub { a, b }))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_with(a, b, |x, y| x * y)?;
        Ok(self.push(v, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let data = self.data(a).iter().map(|x| x * factor).collect();
        let v = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(v, Op::Scale { a, factor }))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    /// Sums several same-shaped nodes left to right.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let (&first, rest) = terms
            .split_first()
            .ok_or_else(|| crate::AutodiffError::Invalid("add_all of no terms".into()))?;
        rest.iter().try_fold(first, |acc, &t| self.add(acc, t))
    }

    /// `x[..., C] + bias[C]`, the bias broadcast over all leading axes.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        let c = *sx.last().unwrap();
        if sb != [c] {
            return Err(shape_err("add_bias", sx, sb));
        }
        let bd = self.data(bias);
        let data = self
            .data(x)
            .chunks(c)
            .flat_map(|row| row.iter().zip(bd).map(|(a, b)| a + b))
            .collect();
        let v = Tensor::new(sx.to_vec(), data)?;
        Ok(self.push(v, Op::AddLastDim { x, bias }))
    }

    /// `x[B, ...] + p[...]`, `p` broadcast over the leading batch axis.
    pub fn add_broadcast_batch(&mut self, x: Var, p: Var) -> Result<Var> {
        let (sx, sp) = (self.shape(x), self.shape(p));
        if sx.len() != sp.len() + 1 || sx[1..] != *sp {
            return Err(shape_err("add_broadcast_batch", sx, sp));
        }
        let inner = self.value(p).len();
        let pd = self.data(p);
        let data = self
            .data(x)
            .chunks(inner)
            .flat_map(|blk| blk.iter().zip(pd).map(|(a, b)| a + b))
            .collect();
        let v = Tensor::new(sx.to_vec(), data)?;
        Ok(self.push(v, Op::AddLeadingDim { x, p }))
    }
}

pub(crate) fn mul_backward(a: Var, b: Var, g: &[f64], sink: &mut GradSink) {
    let (ad, bd) = (sink.value(a).data(), sink.value(b).data());
    if let Some(s) = sink.slot(a) {
        for ((d, gv), bv) in s.iter_mut().zip(g).zip(bd) {
            *d += gv * bv;
        }
    }
    if let Some(s) = sink.slot(b) {
        for ((d, gv), av) in s.iter_mut().zip(g).zip(ad) {
            *d += gv * av;
        }
    }
}

pub(crate) fn add_last_dim_backward(x: Var, bias: Var, g: &[f64], sink: &mut GradSink) {
    sink.add(x, g);
    if let Some(s) = sink.slot(bias) {
        let c = s.len();
        for row in g.chunks(c) {
            for (d, v) in s.iter_mut().zip(row) {
                *d += v;
            }
        }
    }
}

pub(crate) fn add_leading_dim_backward(x: Var, p: Var, g: &[f64], sink: &mut GradSink) {
    sink.add(x, g);
    if let Some(s) = sink.slot(p) {
        let inner = s.len();
        for blk in g.chunks(inner) {
            for (d, v) in s.iter_mut().zip(blk) {
                *d += v;
            }
        }
    }
}
