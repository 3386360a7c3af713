use crate::error::{shape_err, AutodiffError, Result};
use crate::graph::{GradSink, Graph, Op, Var};
use crate::tensor::Tensor;

/// Default central-difference weight.
pub const DEFAULT_THETA: f64 = 0.7;

struct Dims {
    batch: usize,
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
}

/// Visits every in-bounds (output pixel, kernel tap) pair as
/// `(x_neighbor_index, x_center_index, w_index, y_index)`.
fn for_each_tap(d: &Dims, mut f: impl FnMut(usize, usize, usize, usize)) {
    for b in 0..d.batch {
        for o in 0..d.cout {
            for i in 0..d.h {
                for j in 0..d.w {
                    let y = ((b * d.cout + o) * d.h + i) * d.w + j;
                    for c in 0..d.cin {
                        let xbase = (b * d.cin + c) * d.h * d.w;
                        let center = xbase + i * d.w + j;
                        for u in 0..3 {
                            let ii = i + u;
                            if ii < 1 || ii > d.h {
                                continue;
                            }
                            for v in 0..3 {
                                let jj = j + v;
                                if jj < 1 || jj > d.w {
                                    continue;
                                }
                                let xi = xbase + (ii - 1) * d.w + (jj - 1);
                                let wi = ((o * d.cin + c) * 3 + u) * 3 + v;
                                f(xi, center, wi, y);
                            }
                        }
                    }
                }
            }
        }
    }
}

impl Graph {
    /// Central difference 3×3 convolution, stride 1, zero padding 1:
    /// `y(p0) = Σ w(pn)·x(p0+pn) − θ·x(p0)·Σ w(pn)` where both sums run over
    /// the taps that land inside the image. With `theta = 0` this is a plain
    /// convolution.
    pub fn cdc_conv(&mut self, x: Var, w: Var, theta: f64) -> Result<Var> {
        if !(0.0..=1.0).contains(&theta) {
            return Err(AutodiffError::Config(format!(
                "cdc theta {theta} outside [0, 1]"
            )));
        }
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sw[1] != sx[1] || sw[2] != 3 || sw[3] != 3 {
            return Err(shape_err("cdc_conv", &sx, &sw));
        }
        let d = Dims {
            batch: sx[0],
            cin: sx[1],
            cout: sw[0],
            h: sx[2],
            w: sx[3],
        };
        let (xd, wd) = (self.data(x), self.data(w));
        let mut out = vec![0.0; d.batch * d.cout * d.h * d.w];
        for_each_tap(&d, |xi, ci, wi, yi| {
            out[yi] += wd[wi] * (xd[xi] - theta * xd[ci]);
        });
        let v = Tensor::new(vec![d.batch, d.cout, d.h, d.w], out)?;
        Ok(self.push(v, Op::CdcConv { x, w, theta }))
    }
}

pub(crate) fn cdc_backward(x: Var, w: Var, theta: f64, g: &[f64], sink: &mut GradSink) {
    let (sx, sw) = (sink.value(x).shape(), sink.value(w).shape());
    let d = Dims {
        batch: sx[0],
        cin: sx[1],
        cout: sw[0],
        h: sx[2],
        w: sx[3],
    };
    let (xd, wd) = (sink.value(x).data(), sink.value(w).data());
    if let Some(dx) = sink.slot(x) {
        for_each_tap(&d, |xi, ci, wi, yi| {
            let k = g[yi] * wd[wi];
            dx[xi] += k;
            dx[ci] -= theta * k;
        });
    }
    if let Some(dw) = sink.slot(w) {
        for_each_tap(&d, |xi, ci, wi, yi| {
            dw[wi] += g[yi] * (xd[xi] - theta * xd[ci]);
        });
    }
}
