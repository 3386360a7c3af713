//! Monte-Carlo-dropout token uncertainty.
//!
//! Maps are plain tensors, never tape nodes: uncertainty only modulates the
//! computation and receives no gradient.

use std::io::Write;

use mmdg_autodiff::{CounterRng, Tensor};

use crate::error::{MmdgError, Result};
use crate::modality::Modality;

/// Per-token nonnegative uncertainty of one block, shape `[B, L, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyMap {
    pub block_index: usize,
    pub values: Tensor,
}

impl UncertaintyMap {
    pub fn new(block_index: usize, values: Tensor) -> Result<Self> {
        let s = values.shape();
        if s.len() != 3 || s[2] != 1 {
            return Err(MmdgError::Config(format!(
                "uncertainty map must be [B, L, 1], got {s:?}"
            )));
        }
        if values.data().iter().any(|&v| !(v >= 0.0)) {
            return Err(MmdgError::Data(
                "uncertainty values must be nonnegative".into(),
            ));
        }
        Ok(Self {
            block_index,
            values,
        })
    }

    pub fn zeros(block_index: usize, batch: usize, tokens: usize) -> Self {
        Self {
            block_index,
            values: Tensor::zeros(&[batch, tokens, 1]),
        }
    }

    pub fn batch(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn tokens(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn at(&self, b: usize, token: usize) -> f64 {
        self.values.data()[b * self.tokens() + token]
    }
}

/// Scalar uncertainty of one modality over a batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModalityUncertainty {
    pub modality: Modality,
    pub u: f64,
}

/// Draws `t` inverted-dropout samples of `x2` (`[B, L, C]`) and returns, per
/// token, the channel mean of the population variance across samples.
pub fn mc_token_variance(
    x2: &Tensor,
    block_index: usize,
    rate: f64,
    t: usize,
    rng: CounterRng,
) -> Result<UncertaintyMap> {
    if t < 2 {
        return Err(MmdgError::Config(format!(
            "need at least 2 Monte-Carlo samples, got {t}"
        )));
    }
    if !(0.0..1.0).contains(&rate) {
        return Err(MmdgError::Config(format!(
            "MC dropout rate {rate} outside [0, 1)"
        )));
    }
    let s = x2.shape();
    if s.len() != 3 {
        return Err(MmdgError::Config(format!(
            "expected [B, L, C] tokens, got {s:?}"
        )));
    }
    let (b, l, c) = (s[0], s[1], s[2]);
    let scale = 1.0 / (1.0 - rate);
    let tf = t as f64;
    let mut samples = vec![0.0; t];
    let mut out = vec![0.0; b * l];
    for (tok, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for ch in 0..c {
            let i = tok * c + ch;
            let v = x2.data()[i];
            for (k, sample) in samples.iter_mut().enumerate() {
                let keep = rng.uniform(k as u64, i as u64) >= rate;
                *sample = if keep { v * scale } else { 0.0 };
            }
            let (lo, hi) = samples
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| {
                    (a.min(x), b.max(x))
                });
            if lo == hi {
                continue;
            }
            let mean = samples.iter().sum::<f64>() / tf;
            acc += samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / tf;
        }
        *o = acc / c as f64;
    }
    UncertaintyMap::new(block_index, Tensor::new(vec![b, l, 1], out)?)
}

/// `exp(-r_e · u)`, in `(0, 1]` for `u ≥ 0`.
pub fn gate(u: f64, r_e: f64) -> f64 {
    (-r_e * u).exp()
}

pub fn gate_tensor(u: &Tensor, r_e: f64) -> Result<Tensor> {
    check_penalty(r_e)?;
    Ok(Tensor::new(
        u.shape().to_vec(),
        u.data().iter().map(|&v| gate(v, r_e)).collect(),
    )?)
}

pub fn check_penalty(r_e: f64) -> Result<()> {
    if r_e < 0.0 || !r_e.is_finite() {
        return Err(MmdgError::Config(format!(
            "gate penalty r_e = {r_e} must be finite and nonnegative"
        )));
    }
    Ok(())
}

/// Batch mean of the class-token (token 0) entry of the final block's map.
pub fn modality_uncertainty(
    modality: Modality,
    last_block_map: &UncertaintyMap,
) -> ModalityUncertainty {
    let b = last_block_map.batch();
    let u = (0..b).map(|i| last_block_map.at(i, 0)).sum::<f64>() / b as f64;
    ModalityUncertainty { modality, u }
}

/// Writes a map as a flat little-endian dump: `B` and `L` as `u64`, then
/// `B·L` `f64` values.
pub fn write_map_dump(map: &UncertaintyMap, out: &mut impl Write) -> std::io::Result<()> {
    out.write_all(&(map.batch() as u64).to_le_bytes())?;
    out.write_all(&(map.tokens() as u64).to_le_bytes())?;
    for v in map.values.data() {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_map_dump(bytes: &[u8], block_index: usize) -> Result<UncertaintyMap> {
    let word = |i: usize| -> Result<[u8; 8]> {
        bytes
            .get(i * 8..i * 8 + 8)
            .map(|s| s.try_into().unwrap())
            .ok_or_else(|| MmdgError::Data("truncated uncertainty dump".into()))
    };
    let b = u64::from_le_bytes(word(0)?) as usize;
    let l = u64::from_le_bytes(word(1)?) as usize;
    let vals = (0..b * l)
        .map(|i| word(2 + i).map(f64::from_le_bytes))
        .collect::<Result<Vec<_>>>()?;
    UncertaintyMap::new(block_index, Tensor::new(vec![b, l, 1], vals)?)
}
