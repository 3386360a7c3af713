//! Per-modality gradient decomposition and rebalancing.
//!
//! Every trainable tensor receives one classification gradient per modality.
//! Pairs are combined by [`regrad2`], which keeps the slower modality's
//! gradient intact and adds the faster one either projected onto it (no
//! conflict) or with the conflicting component removed, damped by the
//! faster modality's uncertainty. Three modalities are folded pairwise by
//! [`fold_three`].

use std::collections::{BTreeMap, HashMap};

use mmdg_autodiff::{Graph, Var};
use serde::{Deserialize, Serialize};

use crate::error::{MmdgError, Result};
use crate::modality::{Modality, PerModality};
use crate::uem::gate;

/// Which rule combined a pair of gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Case {
    /// No conflict, `i` slower.
    B1,
    /// Conflict, `i` slower.
    B2,
    /// No conflict, `i` faster.
    C1,
    /// Conflict, `i` faster.
    C2,
    /// The projection base had zero norm; the plain sum was returned.
    Degenerate,
    /// Modulation was disabled for this pair; the plain sum was returned.
    Passthrough,
}

impl Case {
    pub const ALL: [Case; 6] = [
        Case::B1,
        Case::B2,
        Case::C1,
        Case::C2,
        Case::Degenerate,
        Case::Passthrough,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Case::B1 => "b1",
            Case::B2 => "b2",
            Case::C1 => "c1",
            Case::C2 => "c2",
            Case::Degenerate => "degenerate",
            Case::Passthrough => "passthrough",
        }
    }

    pub fn is_conflict(self) -> bool {
        matches!(self, Case::B2 | Case::C2)
    }
}

/// Selects the case from the inner product and the speed ordering. A zero
/// inner product counts as non-conflicting.
pub fn classify(dot: f64, i_slower: bool) -> Case {
    match (dot < 0.0, i_slower) {
        (false, true) => Case::B1,
        (true, true) => Case::B2,
        (false, false) => Case::C1,
        (true, false) => Case::C2,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModulationMode {
    /// Plain sum of the modality gradients.
    Off,
    /// Modulate every pair.
    #[default]
    Full,
    /// Modulate only conflicting pairs.
    ConflictedOnly,
    /// Modulate only non-conflicting pairs.
    UnconflictedOnly,
}

impl ModulationMode {
    pub const ALL: [ModulationMode; 4] = [
        ModulationMode::Off,
        ModulationMode::ConflictedOnly,
        ModulationMode::UnconflictedOnly,
        ModulationMode::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModulationMode::Off => "off",
            ModulationMode::Full => "full",
            ModulationMode::ConflictedOnly => "conflicted-only",
            ModulationMode::UnconflictedOnly => "unconflicted-only",
        }
    }

    fn applies(self, case: Case) -> bool {
        match self {
            ModulationMode::Off => false,
            ModulationMode::Full => true,
            ModulationMode::ConflictedOnly => case.is_conflict(),
            ModulationMode::UnconflictedOnly => !case.is_conflict(),
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn plain_sum(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// Combines `g_i` and `g_j`; `i` is the slower modality iff `ssp_i >= ssp_j`.
pub fn regrad2(
    g_i: &[f64],
    g_j: &[f64],
    ssp_i: f64,
    ssp_j: f64,
    u_i: f64,
    u_j: f64,
    r_e: f64,
) -> (Vec<f64>, Case) {
    regrad2_mode(g_i, g_j, ssp_i, ssp_j, u_i, u_j, r_e, ModulationMode::Full)
}

#[allow(clippy::too_many_arguments)]
pub fn regrad2_mode(
    g_i: &[f64],
    g_j: &[f64],
    ssp_i: f64,
    ssp_j: f64,
    u_i: f64,
    u_j: f64,
    r_e: f64,
    mode: ModulationMode,
) -> (Vec<f64>, Case) {
    assert_eq!(g_i.len(), g_j.len(), "regrad2 operands differ in length");
    let d = dot(g_i, g_j);
    let case = classify(d, ssp_i >= ssp_j);
    if !mode.applies(case) {
        return (plain_sum(g_i, g_j), Case::Passthrough);
    }
    let (base, other, u) = match case {
        Case::B1 | Case::B2 => (g_i, g_j, u_j),
        _ => (g_j, g_i, u_i),
    };
    let nn = dot(base, base);
    if nn == 0.0 {
        return (plain_sum(g_i, g_j), Case::Degenerate);
    }
    let coef = d / nn;
    let damp = gate(u, r_e);
    let out = match case {
        // base + coef·base·U
        Case::B1 | Case::C1 => base.iter().map(|b| b + coef * b * damp).collect(),
        // base + (other − coef·base)·U
        _ => base
            .iter()
            .zip(other)
            .map(|(b, o)| b + (o - coef * b) * damp)
            .collect(),
    };
    (out, case)
}

/// Speed order of the three modalities, fastest first: ascending SSP loss,
/// ties in `R < D < I` order.
pub fn speed_order(ssp: &[f64; 3]) -> [Modality; 3] {
    let mut order = Modality::ALL;
    order.sort_by(|a, b| {
        ssp[a.index()]
            .total_cmp(&ssp[b.index()])
            .then(a.index().cmp(&b.index()))
    });
    order
}

/// Folds three modality gradients: the two faster ones are combined first
/// (slower of the pair as `i`), then the slowest is combined with the result,
/// which carries the pair's minimum SSP and mean uncertainty.
pub fn fold_three(
    g: [&[f64]; 3],
    ssp: &[f64; 3],
    u: &[f64; 3],
    r_e: f64,
    mode: ModulationMode,
) -> (Vec<f64>, [Case; 2]) {
    let [fast, mid, slow] = speed_order(ssp).map(Modality::index);
    let (pair, c1) = regrad2_mode(
        g[mid], g[fast], ssp[mid], ssp[fast], u[mid], u[fast], r_e, mode,
    );
    let proxy_ssp = ssp[mid].min(ssp[fast]);
    let proxy_u = 0.5 * (u[mid] + u[fast]);
    let (out, c2) = regrad2_mode(
        g[slow], &pair, ssp[slow], proxy_ssp, u[slow], proxy_u, r_e, mode,
    );
    (out, [c1, c2])
}

/// Per-batch SSP losses, optionally smoothed by an exponential moving average.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceState {
    pub ssp: [f64; 3],
    pub ema_decay: Option<f64>,
    pub initialized: bool,
}

impl ConvergenceState {
    pub fn new(ema_decay: Option<f64>) -> Self {
        Self {
            ssp: [0.0; 3],
            ema_decay,
            initialized: false,
        }
    }

    pub fn observe(&mut self, batch_ssp: [f64; 3]) {
        match self.ema_decay {
            Some(d) if self.initialized => {
                for (s, b) in self.ssp.iter_mut().zip(batch_ssp) {
                    *s = d * *s + (1.0 - d) * b;
                }
            }
            _ => self.ssp = batch_ssp,
        }
        self.initialized = true;
    }

    /// Fastest first.
    pub fn ranking(&self) -> [Modality; 3] {
        speed_order(&self.ssp)
    }
}

/// Gradients of one trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGradients {
    /// Classification-loss gradient per modality; these sum to the full
    /// classification gradient.
    pub per_modality: PerModality<Vec<f64>>,
    /// Gradient of the summed SSP losses, never modulated.
    pub ssp: Vec<f64>,
}

pub type ModalityGradients = BTreeMap<String, ParamGradients>;

/// One backward pass per modality component plus one for the SSP sum.
/// `ce_parts[m]` must be modality `m`'s share of the total classification
/// loss, so the parts add up to it.
pub fn decompose_gradients(
    g: &Graph,
    bound: &HashMap<String, Var>,
    trainable: &[String],
    ce_parts: &PerModality<Var>,
    ssp_total: Var,
) -> Result<ModalityGradients> {
    let mut vars = Vec::with_capacity(trainable.len());
    for name in trainable {
        let v = bound.get(name).ok_or_else(|| {
            MmdgError::Sequencing(format!("parameter {name} was not used by the forward pass"))
        })?;
        vars.push(*v);
    }
    let per: Vec<_> = ce_parts
        .iter()
        .map(|&l| g.backward(l))
        .collect::<std::result::Result<_, _>>()?;
    let ssp = g.backward(ssp_total)?;
    let mut out = ModalityGradients::new();
    for (name, &v) in trainable.iter().zip(&vars) {
        out.insert(
            name.clone(),
            ParamGradients {
                per_modality: std::array::from_fn(|m| per[m].get_or_zeros(g, v)),
                ssp: ssp.get_or_zeros(g, v),
            },
        );
    }
    Ok(out)
}

/// Case counts per parameter group (`adapter.block{i}`, `head`, ...).
pub type CaseHistogram = BTreeMap<String, BTreeMap<&'static str, usize>>;

pub fn param_group(name: &str) -> &str {
    let mut parts = name.splitn(3, '.');
    match (parts.next(), parts.next()) {
        (Some(a), Some(b)) if a == "adapter" || a == "backbone" => &name[..a.len() + 1 + b.len()],
        (Some(a), _) => a,
        _ => name,
    }
}

/// Final gradient per parameter: the folded classification gradient plus
/// `lambda` times the SSP gradient.
pub fn apply_modulation(
    mg: &ModalityGradients,
    state: &ConvergenceState,
    u: &[f64; 3],
    r_e: f64,
    lambda: f64,
    mode: ModulationMode,
) -> (BTreeMap<String, Vec<f64>>, CaseHistogram) {
    let mut out = BTreeMap::new();
    let mut hist = CaseHistogram::new();
    for (name, pg) in mg {
        let [r, d, i] = &pg.per_modality;
        let (mut fin, cases) = fold_three([r, d, i], &state.ssp, u, r_e, mode);
        for (f, s) in fin.iter_mut().zip(&pg.ssp) {
            *f += lambda * s;
        }
        let h = hist.entry(param_group(name).to_string()).or_default();
        for c in cases {
            *h.entry(c.name()).or_insert(0) += 1;
        }
        out.insert(name.clone(), fin);
    }
    (out, hist)
}
