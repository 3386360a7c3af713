//! AUC and equal-error-threshold HTER over a scored set.

use serde::{Deserialize, Serialize};

use crate::error::{MmdgError, Result};
use crate::losses::{LIVE, SPOOF};

/// Spoofness scores with binary labels (0 live, 1 spoof).
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSet {
    pub scores: Vec<f64>,
    pub labels: Vec<usize>,
}

impl ScoreSet {
    pub fn new(scores: Vec<f64>, labels: Vec<usize>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(MmdgError::Metric(format!(
                "{} scores for {} labels",
                scores.len(),
                labels.len()
            )));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(MmdgError::Metric("scores must be finite".into()));
        }
        if labels.iter().any(|&l| l != LIVE && l != SPOOF) {
            return Err(MmdgError::Metric(
                "labels must be 0 (live) or 1 (spoof)".into(),
            ));
        }
        Ok(Self { scores, labels })
    }

    pub fn from_groups(live: &[f64], spoof: &[f64]) -> Result<Self> {
        let scores = live.iter().chain(spoof).copied().collect();
        let labels = std::iter::repeat_n(LIVE, live.len())
            .chain(std::iter::repeat_n(SPOOF, spoof.len()))
            .collect();
        Self::new(scores, labels)
    }

    pub fn n_live(&self) -> usize {
        self.labels.iter().filter(|&&l| l == LIVE).count()
    }

    pub fn n_spoof(&self) -> usize {
        self.labels.len() - self.n_live()
    }

    fn require_both(&self) -> Result<(usize, usize)> {
        let (l, s) = (self.n_live(), self.n_spoof());
        if l == 0 || s == 0 {
            return Err(MmdgError::Metric(format!(
                "metrics need both classes, got {l} live and {s} spoof"
            )));
        }
        Ok((l, s))
    }

    /// Scores grouped by distinct value in ascending order, with
    /// `(value, live count, spoof count)` per group.
    fn groups(&self) -> Vec<(f64, usize, usize)> {
        let mut idx: Vec<usize> = (0..self.scores.len()).collect();
        idx.sort_by(|&a, &b| self.scores[a].total_cmp(&self.scores[b]));
        let mut out: Vec<(f64, usize, usize)> = Vec::new();
        for i in idx {
            let v = self.scores[i];
            let spoof = usize::from(self.labels[i] == SPOOF);
            match out.last_mut() {
                Some(last) if last.0 == v => {
                    last.1 += 1 - spoof;
                    last.2 += spoof;
                }
                _ => out.push((v, 1 - spoof, spoof)),
            }
        }
        out
    }
}

/// Fraction of (spoof, live) pairs ranked correctly, ties counting one half.
pub fn auc(s: &ScoreSet) -> Result<f64> {
    let (n_live, n_spoof) = s.require_both()?;
    // Twice the pair count, kept integral.
    let mut twice = 0u128;
    let mut live_below = 0u128;
    for (_, l, sp) in s.groups() {
        twice += sp as u128 * (2 * live_below + l as u128);
        live_below += l as u128;
    }
    Ok(twice as f64 / (2.0 * n_live as f64 * n_spoof as f64))
}

/// One point of the threshold sweep. Scores above `threshold` are called spoof.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub threshold: f64,
    /// Spoofs accepted as live.
    pub far: f64,
    /// Lives rejected as spoof.
    pub frr: f64,
}

impl OperatingPoint {
    pub fn hter(&self) -> f64 {
        0.5 * (self.far + self.frr)
    }
}

/// Operating points at `-inf`, every midpoint between adjacent distinct
/// scores, and `+inf`.
pub fn sweep(s: &ScoreSet) -> Result<Vec<OperatingPoint>> {
    let (n_live, n_spoof) = s.require_both()?;
    let groups = s.groups();
    let mut out = Vec::with_capacity(groups.len() + 1);
    let (mut live_at_or_below, mut spoof_at_or_below) = (0usize, 0usize);
    let point = |t: f64, lb: usize, sb: usize| OperatingPoint {
        threshold: t,
        far: sb as f64 / n_spoof as f64,
        frr: (n_live - lb) as f64 / n_live as f64,
    };
    out.push(point(f64::NEG_INFINITY, 0, 0));
    for (k, &(v, l, sp)) in groups.iter().enumerate() {
        live_at_or_below += l;
        spoof_at_or_below += sp;
        let t = match groups.get(k + 1) {
            Some(next) => 0.5 * (v + next.0),
            None => f64::INFINITY,
        };
        out.push(point(t, live_at_or_below, spoof_at_or_below));
    }
    Ok(out)
}

/// Operating point where FAR and FRR are closest; ties prefer lower HTER,
/// then the smaller threshold.
pub fn hter(s: &ScoreSet) -> Result<OperatingPoint> {
    let pts = sweep(s)?;
    let key = |p: &OperatingPoint| ((p.far - p.frr).abs(), p.hter(), p.threshold);
    Ok(pts
        .into_iter()
        .min_by(|a, b| {
            let (x, y) = (key(a), key(b));
            x.0.total_cmp(&y.0)
                .then(x.1.total_cmp(&y.1))
                .then(x.2.total_cmp(&y.2))
        })
        .expect("sweep has at least two points"))
}

/// `threshold,far,frr` rows of the full sweep.
pub fn roc_csv(s: &ScoreSet) -> Result<String> {
    let mut out = String::from("threshold,far,frr\n");
    for p in sweep(s)? {
        out.push_str(&format!("{},{},{}\n", p.threshold, p.far, p.frr));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub protocol: String,
    pub hter: f64,
    pub auc: f64,
    pub threshold: f64,
    pub n_live: usize,
    pub n_spoof: usize,
}

pub fn report(protocol: &str, s: &ScoreSet) -> Result<MetricReport> {
    let op = hter(s)?;
    Ok(MetricReport {
        protocol: protocol.to_string(),
        hter: op.hter(),
        auc: auc(s)?,
        threshold: op.threshold,
        n_live: s.n_live(),
        n_spoof: s.n_spoof(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separated() {
        let s = ScoreSet::from_groups(&[0.1, 0.2], &[0.8, 0.9]).unwrap();
        assert_eq!(auc(&s).unwrap(), 1.0);
        assert_eq!(hter(&s).unwrap().hter(), 0.0);
    }

    #[test]
    fn ties() {
        let s = ScoreSet::from_groups(&[0.5, 0.5], &[0.5]).unwrap();
        assert_eq!(auc(&s).unwrap(), 0.5);
        assert_eq!(hter(&s).unwrap().hter(), 0.5);
        let s = ScoreSet::from_groups(&[0.4], &[0.6, 0.3]).unwrap();
        assert_eq!(auc(&s).unwrap(), 0.5);
    }

    #[test]
    fn single_class_is_an_error() {
        let s = ScoreSet::from_groups(&[0.1], &[]).unwrap();
        assert!(matches!(auc(&s), Err(MmdgError::Metric(_))));
        assert!(matches!(hter(&s), Err(MmdgError::Metric(_))));
    }

    #[test]
    fn csv_has_header_and_extremes() {
        let s = ScoreSet::from_groups(&[0.1], &[0.9]).unwrap();
        let csv = roc_csv(&s).unwrap();
        assert!(csv.starts_with("threshold,far,frr\n-inf,0,1\n"));
        assert!(csv.ends_with("inf,1,0\n"));
    }
}
