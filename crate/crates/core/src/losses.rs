//! Domain prototypes, the single-side prototypical loss, classification
//! losses and the combined objective.

use mmdg_autodiff::{Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{MmdgError, Result};
use crate::modality::{Modality, PerModality};

pub const LIVE: usize = 0;
pub const SPOOF: usize = 1;

/// One shared live domain plus one spoof domain per source dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainSet {
    pub n_sources: usize,
}

impl DomainSet {
    pub fn len(&self) -> usize {
        1 + self.n_sources
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Live samples share domain 0; spoof samples of source `k` map to `1 + k`.
    pub fn domain_of(&self, label: usize, source: usize) -> Result<usize> {
        match label {
            LIVE => Ok(0),
            SPOOF if source < self.n_sources => Ok(1 + source),
            SPOOF => Err(MmdgError::Data(format!(
                "source index {source} outside {} training sources",
                self.n_sources
            ))),
            _ => Err(MmdgError::Data(format!(
                "label {label} is not live (0) or spoof (1)"
            ))),
        }
    }
}

/// Per-modality, per-domain feature centroids.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeTable {
    pub momentum: f64,
    pub dim: usize,
    /// `centroids[m][d]`, `None` until first observed.
    pub centroids: PerModality<Vec<Option<Vec<f64>>>>,
    pub counts: PerModality<Vec<u64>>,
}

impl PrototypeTable {
    pub fn new(domains: DomainSet, dim: usize, momentum: f64) -> Self {
        let n = domains.len();
        Self {
            momentum,
            dim,
            centroids: std::array::from_fn(|_| vec![None; n]),
            counts: std::array::from_fn(|_| vec![0; n]),
        }
    }

    pub fn n_domains(&self) -> usize {
        self.centroids[0].len()
    }

    pub fn is_initialized(&self) -> bool {
        self.centroids.iter().all(|v| v.iter().all(Option::is_some))
    }

    /// Centroids of one modality as a `[D, C]` tensor.
    pub fn matrix(&self, m: Modality) -> Result<Tensor> {
        let mut data = Vec::with_capacity(self.n_domains() * self.dim);
        for (d, c) in self.centroids[m.index()].iter().enumerate() {
            let c = c.as_ref().ok_or_else(|| {
                MmdgError::Sequencing(format!(
                    "prototype of domain {d} for modality {m} is uninitialized"
                ))
            })?;
            data.extend_from_slice(c);
        }
        Ok(Tensor::new(vec![self.n_domains(), self.dim], data)?)
    }

    /// Moves each observed domain's centroid toward the batch mean of its
    /// features (`[B, C]` per modality). A first observation is copied as is.
    pub fn update(&mut self, features: &PerModality<&Tensor>, domains: &[usize]) -> Result<()> {
        let n = self.n_domains();
        if let Some(&d) = domains.iter().find(|&&d| d >= n) {
            return Err(MmdgError::Data(format!(
                "domain id {d} outside {n} domains"
            )));
        }
        for (m, feat) in features.iter().enumerate() {
            if feat.shape() != [domains.len(), self.dim] {
                return Err(MmdgError::Data(format!(
                    "features {:?} do not match {} samples of width {}",
                    feat.shape(),
                    domains.len(),
                    self.dim
                )));
            }
            for d in 0..n {
                let mut sum = vec![0.0; self.dim];
                let mut k = 0u64;
                for (row, _) in domains.iter().enumerate().filter(|(_, &x)| x == d) {
                    for (s, v) in sum
                        .iter_mut()
                        .zip(&feat.data()[row * self.dim..(row + 1) * self.dim])
                    {
                        *s += v;
                    }
                    k += 1;
                }
                if k == 0 {
                    continue;
                }
                let mean = sum.into_iter().map(|s| s / k as f64);
                let slot = &mut self.centroids[m][d];
                *slot = Some(match slot.take() {
                    None => mean.collect(),
                    Some(old) => old
                        .iter()
                        .zip(mean)
                        .map(|(o, b)| self.momentum * o + (1.0 - self.momentum) * b)
                        .collect(),
                });
                self.counts[m][d] += k;
            }
        }
        Ok(())
    }
}

/// Mean over the batch of the cross-entropy of negative Euclidean distances
/// from each feature row to every prototype, with the sample's own domain as
/// target. The prototypes enter as constants.
pub fn ssp_loss(
    g: &mut Graph,
    features: Var,
    domains: &[usize],
    table: &PrototypeTable,
    m: Modality,
) -> Result<Var> {
    let protos = table.matrix(m)?;
    if let Some(&d) = domains.iter().find(|&&d| d >= table.n_domains()) {
        return Err(MmdgError::Data(format!(
            "domain id {d} outside {} domains",
            table.n_domains()
        )));
    }
    let dist = g.row_distances(features, &protos)?;
    let logits = g.neg(dist)?;
    Ok(g.cross_entropy(logits, domains)?)
}

#[derive(Debug, Clone, Copy)]
pub struct ClassificationLosses {
    /// Mean of the per-modality losses.
    pub total: Var,
    /// Cross-entropy of each modality's logits.
    pub per_modality: PerModality<Var>,
    /// Each modality's share of `total` (its loss divided by three).
    pub parts: PerModality<Var>,
}

pub fn check_labels(labels: &[usize]) -> Result<()> {
    match labels.iter().find(|&&l| l > SPOOF) {
        Some(l) => Err(MmdgError::Data(format!(
            "label {l} is not live (0) or spoof (1)"
        ))),
        None => Ok(()),
    }
}

pub fn classification_losses(
    g: &mut Graph,
    logits: &PerModality<Var>,
    labels: &[usize],
) -> Result<ClassificationLosses> {
    check_labels(labels)?;
    let mut per = Vec::with_capacity(3);
    let mut parts = Vec::with_capacity(3);
    for &z in logits {
        let l = g.cross_entropy(z, labels)?;
        parts.push(g.scale(l, 1.0 / 3.0)?);
        per.push(l);
    }
    let total = g.add_all(&parts)?;
    Ok(ClassificationLosses {
        total,
        per_modality: per.try_into().unwrap(),
        parts: parts.try_into().unwrap(),
    })
}

/// `ce + lambda · Σ_m ssp_m` on the tape.
pub fn final_loss(g: &mut Graph, ce: Var, ssp: &PerModality<Var>, lambda: f64) -> Result<Var> {
    if !(lambda >= 0.0) {
        return Err(MmdgError::Config(format!(
            "lambda {lambda} must be nonnegative"
        )));
    }
    let s = g.add_all(ssp)?;
    let s = g.scale(s, lambda)?;
    Ok(g.add(ce, s)?)
}

pub fn final_loss_value(ce: f64, ssp: &[f64; 3], lambda: f64) -> f64 {
    ce + lambda * ssp.iter().sum::<f64>()
}

/// Population variance of the three SSP losses.
pub fn ssp_variance(ssp: &[f64; 3]) -> f64 {
    let mean = ssp.iter().sum::<f64>() / 3.0;
    ssp.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / 3.0
}
