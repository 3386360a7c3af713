//! Independent oracles shared by the integration tests. Nothing here calls
//! the library code it is used to check.
#![allow(dead_code)]

/// Straight-line two-gradient rule. Returns the output and the case label.
pub fn regrad_oracle(
    gi: &[f64],
    gj: &[f64],
    ssp_i: f64,
    ssp_j: f64,
    ui: f64,
    uj: f64,
    re: f64,
) -> (Vec<f64>, &'static str) {
    let n = gi.len();
    let mut d = 0.0;
    let mut ni = 0.0;
    let mut nj = 0.0;
    for k in 0..n {
        d += gi[k] * gj[k];
        ni += gi[k] * gi[k];
        nj += gj[k] * gj[k];
    }
    let conflict = d < 0.0;
    let i_slower = ssp_i >= ssp_j;
    let mut out = vec![0.0; n];
    if i_slower {
        if ni == 0.0 {
            for k in 0..n {
                out[k] = gi[k] + gj[k];
            }
            return (out, "degenerate");
        }
        let s = (-re * uj).exp();
        let c = d / ni;
        for k in 0..n {
            out[k] = if conflict {
                gi[k] + (gj[k] - c * gi[k]) * s
            } else {
                gi[k] + c * gi[k] * s
            };
        }
        (out, if conflict { "b2" } else { "b1" })
    } else {
        if nj == 0.0 {
            for k in 0..n {
                out[k] = gi[k] + gj[k];
            }
            return (out, "degenerate");
        }
        let s = (-re * ui).exp();
        let c = d / nj;
        for k in 0..n {
            out[k] = if conflict {
                (gi[k] - c * gj[k]) * s + gj[k]
            } else {
                c * gj[k] * s + gj[k]
            };
        }
        (out, if conflict { "c2" } else { "c1" })
    }
}

/// Mann-Whitney statistic by counting every (spoof, live) pair.
pub fn auc_pairs(live: &[f64], spoof: &[f64]) -> f64 {
    let mut wins = 0.0;
    for &s in spoof {
        for &l in live {
            if s > l {
                wins += 1.0;
            } else if s == l {
                wins += 0.5;
            }
        }
    }
    wins / (live.len() * spoof.len()) as f64
}

/// Exhaustive threshold sweep: candidates are -inf, +inf and midpoints of
/// adjacent distinct scores; "spoof" means score > threshold. Picks the
/// smallest |FAR - FRR|, then the smallest HTER, then the smallest threshold.
/// FAR counts spoofs accepted as live, FRR lives rejected. Returns
/// (threshold, far, frr).
pub fn hter_sweep(live: &[f64], spoof: &[f64]) -> (f64, f64, f64) {
    let mut all: Vec<f64> = live.iter().chain(spoof).copied().collect();
    all.sort_by(f64::total_cmp);
    all.dedup();
    let mut cands = vec![f64::NEG_INFINITY];
    for w in all.windows(2) {
        cands.push(0.5 * (w[0] + w[1]));
    }
    cands.push(f64::INFINITY);
    let mut best: Option<(f64, f64, f64)> = None;
    for t in cands {
        let far = spoof.iter().filter(|&&x| x <= t).count() as f64 / spoof.len() as f64;
        let frr = live.iter().filter(|&&x| x > t).count() as f64 / live.len() as f64;
        let better = match best {
            None => true,
            Some((_, bf, br)) => {
                let (gap, bgap) = ((far - frr).abs(), (bf - br).abs());
                gap < bgap || (gap == bgap && far + frr < bf + br)
            }
        };
        if better {
            best = Some((t, far, frr));
        }
    }
    best.unwrap()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Small splitmix-style generator so oracles do not share the library's RNG.
pub struct Lcg(pub u64);

impl Lcg {
    pub fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    pub fn unit(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.unit()
    }

    pub fn vec(&mut self, n: usize, lo: f64, hi: f64) -> Vec<f64> {
        (0..n).map(|_| self.range(lo, hi)).collect()
    }
}
