//! Leave-one-out, missing-modality and two-versus-two protocols, and
//! imputation of absent modalities.

use mmdg_autodiff::{CounterRng, Tensor};
use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::error::{MmdgError, Result};
use crate::modality::Modality;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProtocolSpec {
    pub name: String,
    /// 1: leave-one-out; 2: leave-one-out with missing modalities; 3: two
    /// domains to the other two.
    pub family: u8,
    pub train: Vec<String>,
    pub test: Vec<String>,
    /// Modalities absent at test time; never RGB.
    pub missing: Vec<Modality>,
}

impl ProtocolSpec {
    fn new(family: u8, train: Vec<String>, test: Vec<String>, missing: Vec<Modality>) -> Self {
        let mut name = format!("{}_{}", train.concat(), test.concat());
        if !missing.is_empty() {
            let tag: String = missing
                .iter()
                .map(|m| m.short().to_ascii_lowercase())
                .collect();
            name.push_str("_missing_");
            name.push_str(&tag);
        }
        Self {
            name,
            family,
            train,
            test,
            missing,
        }
    }

    /// Same split with a different set of missing modalities.
    pub fn with_missing(&self, missing: Vec<Modality>) -> Result<Self> {
        check_missing(&missing)?;
        let family = match (missing.is_empty(), self.family) {
            (false, _) => 2,
            (true, 2) => 1,
            (true, f) => f,
        };
        Ok(Self::new(
            family,
            self.train.clone(),
            self.test.clone(),
            missing,
        ))
    }
}

pub fn check_missing(missing: &[Modality]) -> Result<()> {
    if missing.contains(&Modality::Rgb) {
        return Err(MmdgError::Protocol("RGB can not be missing".into()));
    }
    Ok(())
}

/// Missing-modality scenarios of the second protocol family.
pub fn missing_scenarios() -> [Vec<Modality>; 3] {
    [
        vec![Modality::Depth],
        vec![Modality::Infrared],
        vec![Modality::Depth, Modality::Infrared],
    ]
}

/// All eighteen protocol specs over exactly four domains.
pub fn build_protocols(domains: &[&str]) -> Result<Vec<ProtocolSpec>> {
    if domains.len() != 4 {
        return Err(MmdgError::Protocol(format!(
            "need exactly 4 domains, got {}",
            domains.len()
        )));
    }
    let mut sorted = domains.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != 4 {
        return Err(MmdgError::Protocol("domain names must be distinct".into()));
    }
    let name = |d: &str| d.to_string();
    let mut loo = Vec::with_capacity(4);
    for held in domains {
        let train = domains
            .iter()
            .filter(|d| *d != held)
            .map(|d| name(d))
            .collect();
        loo.push(ProtocolSpec::new(1, train, vec![name(held)], vec![]));
    }
    let mut out = loo.clone();
    for spec in &loo {
        for missing in missing_scenarios() {
            out.push(ProtocolSpec::new(
                2,
                spec.train.clone(),
                spec.test.clone(),
                missing,
            ));
        }
    }
    let (a, b) = ([domains[0], domains[3]], [domains[1], domains[2]]);
    out.push(ProtocolSpec::new(
        3,
        a.map(name).to_vec(),
        b.map(name).to_vec(),
        vec![],
    ));
    out.push(ProtocolSpec::new(
        3,
        b.map(name).to_vec(),
        a.map(name).to_vec(),
        vec![],
    ));
    Ok(out)
}

pub fn find_protocol<'a>(specs: &'a [ProtocolSpec], name: &str) -> Result<&'a ProtocolSpec> {
    specs
        .iter()
        .find(|s| s.name == name)
        .ok_or_else(|| MmdgError::Protocol(format!("unknown protocol {name:?}")))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Imputation {
    /// All-zero images.
    #[default]
    Zero,
    /// Uniform noise in `[0, 1]`, seeded.
    Noise,
    /// A copy of the RGB images.
    DuplicateRgb,
}

/// Replaces the images of the `missing` modalities.
pub fn impute_missing(
    batch: &Batch,
    missing: &[Modality],
    policy: Imputation,
    seed: u64,
) -> Result<Batch> {
    check_missing(missing)?;
    let mut out = batch.clone();
    for &m in missing {
        let shape = batch.images[m.index()].shape().to_vec();
        out.images[m.index()] = match policy {
            Imputation::Zero => Tensor::zeros(&shape),
            Imputation::Noise => {
                let rng = CounterRng::new(seed);
                let n: usize = shape.iter().product();
                let data = (0..n as u64)
                    .map(|i| rng.uniform(m.index() as u64, i))
                    .collect();
                Tensor::new(shape, data)?
            }
            Imputation::DuplicateRgb => batch.images[Modality::Rgb.index()].clone(),
        };
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_and_names() {
        let specs = build_protocols(&["c", "p", "s", "w"]).unwrap();
        assert_eq!(specs.len(), 18);
        assert_eq!(specs.iter().filter(|s| s.family == 1).count(), 4);
        assert_eq!(specs.iter().filter(|s| s.family == 2).count(), 12);
        assert_eq!(specs.iter().filter(|s| s.family == 3).count(), 2);
        let w = find_protocol(&specs, "cps_w").unwrap();
        assert!(!w.train.contains(&"w".to_string()));
        let ps = find_protocol(&specs, "ps_cw").unwrap();
        assert_eq!(ps.test, vec!["c", "w"]);
        assert!(find_protocol(&specs, "cps_w_missing_di").is_ok());
    }

    #[test]
    fn wrong_domain_count() {
        assert!(build_protocols(&["c", "p", "s"]).is_err());
        assert!(build_protocols(&["c", "c", "s", "w"]).is_err());
    }

    #[test]
    fn rgb_can_not_be_dropped() {
        assert!(check_missing(&[Modality::Rgb]).is_err());
    }
}
