use crate::error::{shape_err, AutodiffError, Result};
use crate::graph::{GradSink, Graph, Op, Var};
use crate::rng::CounterRng;
use crate::tensor::Tensor;

pub const DEFAULT_LN_EPS: f64 = 1e-6;

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_K * (x + GELU_C * x * x * x);
    let t = u.tanh();
    let du = GELU_K * (1.0 + 3.0 * GELU_C * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(AutodiffError::Numeric {
            op,
            detail: format!("element {i} is {}", data[i]),
        }),
        None => Ok(()),
    }
}

impl Graph {
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let data = self.data(a).iter().map(|&x| gelu_scalar(x)).collect();
        let v = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(v, Op::Gelu { a }))
    }

    /// Softmax over the last axis, max-subtracted per row.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        check_finite("softmax_rows", self.data(a))?;
        let l = *self.shape(a).last().unwrap();
        let mut out = self.data(a).to_vec();
        for row in out.chunks_mut(l) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            row.iter_mut().for_each(|v| *v /= z);
        }
        let v = Tensor::new(self.shape(a).to_vec(), out)?;
        Ok(self.push(v, Op::Softmax { a }))
    }

    /// Normalizes each vector along the last axis, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let c = *sx.last().unwrap();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_err("layer_norm", &sx, self.shape(gamma)));
        }
        let (gd, bd) = (self.data(gamma), self.data(beta));
        let rows = self.value(x).len() / c;
        let mut xhat = vec![0.0; rows * c];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * c];
        for (r, row) in self.data(x).chunks(c).enumerate() {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            if !rs.is_finite() {
                return Err(AutodiffError::Numeric {
                    op: "layer_norm",
                    detail: format!("row {r} has zero variance and eps = {eps}"),
                });
            }
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = h * gd[j] + bd[j];
            }
        }
        let v = Tensor::new(sx, out)?;
        Ok(self.push(
            v,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        ))
    }

    /// Inverted dropout with an explicit keep mask: kept entries are scaled by
    /// `1 / (1 - rate)`.
    pub fn dropout_with_mask(&mut self, a: Var, keep: &[bool], rate: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(AutodiffError::Config(format!(
                "dropout rate {rate} outside [0, 1)"
            )));
        }
        if keep.len() != self.value(a).len() {
            return Err(shape_err("dropout_with_mask", self.shape(a), &[keep.len()]));
        }
        let scale = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = keep.iter().map(|&k| if k { scale } else { 0.0 }).collect();
        let data = self.data(a).iter().zip(&mask).map(|(x, m)| x * m).collect();
        let v = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(v, Op::Dropout { a, mask }))
    }

    /// Inverted dropout whose mask is drawn from `(rng, stream)`; replaying the
    /// same pair reproduces the mask.
    pub fn dropout(&mut self, a: Var, rate: f64, rng: CounterRng, stream: u64) -> Result<Var> {
        let keep = rng.keep_mask(stream, self.value(a).len(), rate);
        self.dropout_with_mask(a, &keep, rate)
    }

    /// Mean softmax cross-entropy of `logits[B, K]` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let sl = self.shape(logits).to_vec();
        if sl.len() != 2 || sl[0] != labels.len() {
            return Err(shape_err("cross_entropy", &sl, &[labels.len()]));
        }
        let k = sl[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(AutodiffError::Invalid(format!(
                "label {bad} out of range for {k} classes"
            )));
        }
        check_finite("cross_entropy", self.data(logits))?;
        let mut probs = vec![0.0; sl[0] * k];
        let mut total = 0.0;
        for (i, row) in self.data(logits).chunks(k).enumerate() {
            let top = (0..k).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            let m = row[top];
            // log-sum-exp as m + ln(1 + rest), exact for confident rows
            let rest: f64 = (0..k)
                .filter(|&j| j != top)
                .map(|j| (row[j] - m).exp())
                .sum();
            let lse = m + rest.ln_1p();
            total += (m - row[labels[i]]) + rest.ln_1p();
            for j in 0..k {
                probs[i * k + j] = (row[j] - lse).exp();
            }
        }
        let v = Tensor::scalar(total / labels.len() as f64);
        Ok(self.push(
            v,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Euclidean distances from each row of `c[B, C]` to each row of the
    /// constant table `protos[D, C]`, giving `[B, D]`. No gradient reaches the
    /// table.
    pub fn row_distances(&mut self, c: Var, protos: &Tensor) -> Result<Var> {
        let sc = self.shape(c).to_vec();
        let sp = protos.shape();
        if sc.len() != 2 || sp.len() != 2 || sc[1] != sp[1] {
            return Err(shape_err("row_distances", &sc, sp));
        }
        let (b, dim, n) = (sc[0], sc[1], sp[0]);
        let cd = self.data(c);
        let pd = protos.data();
        let mut out = vec![0.0; b * n];
        for i in 0..b {
            for d in 0..n {
                let s: f64 = (0..dim)
                    .map(|j| {
                        let t = cd[i * dim + j] - pd[d * dim + j];
                        t * t
                    })
                    .sum();
                out[i * n + d] = s.sqrt();
            }
        }
        let v = Tensor::new(vec![b, n], out)?;
        Ok(self.push(
            v,
            Op::RowDistances {
                c,
                protos: pd.to_vec(),
                n_protos: n,
            },
        ))
    }
}

pub(crate) fn gelu_backward(a: Var, g: &[f64], sink: &mut GradSink) {
    let ad = sink.value(a).data();
    if let Some(s) = sink.slot(a) {
        for ((d, gv), &x) in s.iter_mut().zip(g).zip(ad) {
            *d += gv * gelu_grad(x);
        }
    }
}

pub(crate) fn softmax_backward(a: Var, out: &Tensor, g: &[f64], sink: &mut GradSink) {
    let l = *out.shape().last().unwrap();
    if let Some(s) = sink.slot(a) {
        for ((drow, yrow), grow) in s.chunks_mut(l).zip(out.data().chunks(l)).zip(g.chunks(l)) {
            let dot: f64 = yrow.iter().zip(grow).map(|(y, g)| y * g).sum();
            for ((d, y), gv) in drow.iter_mut().zip(yrow).zip(grow) {
                *d += y * (gv - dot);
            }
        }
    }
}

pub(crate) fn layer_norm_backward(
    x: Var,
    gamma: Var,
    beta: Var,
    xhat: &[f64],
    rstd: &[f64],
    g: &[f64],
    sink: &mut GradSink,
) {
    let gd = sink.value(gamma).data();
    let c = gd.len();
    if let Some(s) = sink.slot(gamma) {
        for (grow, hrow) in g.chunks(c).zip(xhat.chunks(c)) {
            for j in 0..c {
                s[j] += grow[j] * hrow[j];
            }
        }
    }
    if let Some(s) = sink.slot(beta) {
        for grow in g.chunks(c) {
            for j in 0..c {
                s[j] += grow[j];
            }
        }
    }
    if let Some(s) = sink.slot(x) {
        for (r, ((drow, grow), hrow)) in s
            .chunks_mut(c)
            .zip(g.chunks(c))
            .zip(xhat.chunks(c))
            .enumerate()
        {
            let mut mean_dh = 0.0;
            let mut mean_dh_h = 0.0;
            for j in 0..c {
                let dh = grow[j] * gd[j];
                mean_dh += dh;
                mean_dh_h += dh * hrow[j];
            }
            mean_dh /= c as f64;
            mean_dh_h /= c as f64;
            for j in 0..c {
                let dh = grow[j] * gd[j];
                drow[j] += rstd[r] * (dh - mean_dh - hrow[j] * mean_dh_h);
            }
        }
    }
}

pub(crate) fn cross_entropy_backward(
    logits: Var,
    labels: &[usize],
    probs: &[f64],
    g: &[f64],
    sink: &mut GradSink,
) {
    let b = labels.len();
    if let Some(s) = sink.slot(logits) {
        let k = s.len() / b;
        let f = g[0] / b as f64;
        for i in 0..b {
            for j in 0..k {
                let onehot = if j == labels[i] { 1.0 } else { 0.0 };
                s[i * k + j] += f * (probs[i * k + j] - onehot);
            }
        }
    }
}

pub(crate) fn row_distances_backward(
    c: Var,
    protos: &[f64],
    n: usize,
    out: &Tensor,
    g: &[f64],
    sink: &mut GradSink,
) {
    let cd = sink.value(c).data();
    let dim = protos.len() / n;
    let od = out.data();
    if let Some(s) = sink.slot(c) {
        let b = s.len() / dim;
        for i in 0..b {
            for d in 0..n {
                let dist = od[i * n + d];
                // Subgradient zero at the non-differentiable point.
                if dist == 0.0 {
                    continue;
                }
                let k = g[i * n + d] / dist;
                for j in 0..dim {
                    s[i * dim + j] += k * (cd[i * dim + j] - protos[d * dim + j]);
                }
            }
        }
    }
}
