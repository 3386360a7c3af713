//! Uncertainty-guided cross-modal adapter and the three-branch fusion wiring.
//!
//! Each adapter takes query tokens from a source modality and key/value tokens
//! from the destination modality. Query rows are damped by the source
//! modality's token uncertainty before the softmax, the attended tokens are
//! refined on the patch grid by a central difference convolution followed by
//! a pointwise convolution and GELU, and finally projected back to the
//! backbone width by a zero-initialized up-projection.

use mmdg_autodiff::{Graph, Tensor, Var};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::BlockTaps;
use crate::error::{MmdgError, Result};
use crate::modality::{Modality, PerModality};
use crate::params::{glorot, uniform, Binder, ParamStore};
use crate::uem::{check_penalty, gate, UncertaintyMap};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    /// Penalty intensity `r_e` of the exponential gate.
    pub r_e: f64,
    /// Central difference weight.
    pub theta: f64,
    /// When false the query rows are not gated at all.
    pub gate: bool,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            r_e: 1.0,
            theta: mmdg_autodiff::DEFAULT_THETA,
            gate: true,
        }
    }
}

/// Tensors of one adapter. Projections are `[in, out]` matrices applied on
/// the right; `cdc_weight` is `[C_a, C_a, 3, 3]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterParams {
    pub q_weight: Tensor,
    pub q_bias: Tensor,
    pub k_weight: Tensor,
    pub k_bias: Tensor,
    pub v_weight: Tensor,
    pub v_bias: Tensor,
    pub cdc_weight: Tensor,
    pub pw_weight: Tensor,
    pub pw_bias: Tensor,
    pub up_weight: Tensor,
    pub up_bias: Tensor,
}

const FIELDS: [&str; 11] = [
    "q.weight",
    "q.bias",
    "k.weight",
    "k.bias",
    "v.weight",
    "v.bias",
    "cdc.weight",
    "pw.weight",
    "pw.bias",
    "up.weight",
    "up.bias",
];

impl AdapterParams {
    /// Random projections with a zero up-projection, so a fresh adapter
    /// contributes nothing.
    pub fn init(c: usize, width: usize, rng: &mut ChaCha8Rng) -> Self {
        let cdc_bound = (6.0 / (18 * width) as f64).sqrt();
        Self {
            q_weight: glorot(rng, c, width),
            q_bias: Tensor::zeros(&[width]),
            k_weight: glorot(rng, c, width),
            k_bias: Tensor::zeros(&[width]),
            v_weight: glorot(rng, c, width),
            v_bias: Tensor::zeros(&[width]),
            cdc_weight: uniform(rng, &[width, width, 3, 3], cdc_bound),
            pw_weight: glorot(rng, width, width),
            pw_bias: Tensor::zeros(&[width]),
            up_weight: Tensor::zeros(&[width, c]),
            up_bias: Tensor::zeros(&[c]),
        }
    }

    fn tensors(&self) -> [&Tensor; 11] {
        [
            &self.q_weight,
            &self.q_bias,
            &self.k_weight,
            &self.k_bias,
            &self.v_weight,
            &self.v_bias,
            &self.cdc_weight,
            &self.pw_weight,
            &self.pw_bias,
            &self.up_weight,
            &self.up_bias,
        ]
    }

    /// Registers all tensors under `prefix` as trainable.
    pub fn register(&self, store: &mut ParamStore, prefix: &str) {
        for (field, t) in FIELDS.iter().zip(self.tensors()) {
            store.insert(format!("{prefix}.{field}"), t.clone(), true);
        }
    }

    /// Records the tensors on a tape as differentiable leaves.
    pub fn bind(&self, g: &mut Graph) -> AdapterVars {
        let v = self.tensors().map(|t| g.variable(t.clone()));
        AdapterVars::from_array(v)
    }
}

/// Tape handles of one adapter's parameters.
#[derive(Debug, Clone, Copy)]
pub struct AdapterVars {
    pub q_weight: Var,
    pub q_bias: Var,
    pub k_weight: Var,
    pub k_bias: Var,
    pub v_weight: Var,
    pub v_bias: Var,
    pub cdc_weight: Var,
    pub pw_weight: Var,
    pub pw_bias: Var,
    pub up_weight: Var,
    pub up_bias: Var,
}

impl AdapterVars {
    fn from_array(v: [Var; 11]) -> Self {
        Self {
            q_weight: v[0],
            q_bias: v[1],
            k_weight: v[2],
            k_bias: v[3],
            v_weight: v[4],
            v_bias: v[5],
            cdc_weight: v[6],
            pw_weight: v[7],
            pw_bias: v[8],
            up_weight: v[9],
            up_bias: v[10],
        }
    }

    pub fn from_store(g: &mut Graph, binder: &mut Binder, prefix: &str) -> Result<Self> {
        let mut v = Vec::with_capacity(11);
        for field in FIELDS {
            v.push(binder.var(g, &format!("{prefix}.{field}"))?);
        }
        Ok(Self::from_array(v.try_into().unwrap()))
    }
}

/// Directed fusion edges per block. Depth and infrared never exchange tokens
/// directly; both talk only to RGB.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FusionTopology {
    pub edges: Vec<(Modality, Modality)>,
}

impl Default for FusionTopology {
    fn default() -> Self {
        use Modality::*;
        Self {
            edges: vec![(Depth, Rgb), (Infrared, Rgb), (Rgb, Depth), (Rgb, Infrared)],
        }
    }
}

impl FusionTopology {
    /// Sources feeding `dst`, in edge order.
    pub fn sources(&self, dst: Modality) -> Vec<Modality> {
        self.edges
            .iter()
            .filter(|e| e.1 == dst)
            .map(|e| e.0)
            .collect()
    }
}

pub fn edge_prefix(block: usize, src: Modality, dst: Modality) -> String {
    format!("adapter.block{block}.edge{}->{}", src.short(), dst.short())
}

/// Registers fresh adapters for every block and edge.
pub fn init_adapters(
    store: &mut ParamStore,
    topology: &FusionTopology,
    n_blocks: usize,
    c: usize,
    width: usize,
    rng: &mut ChaCha8Rng,
) {
    for b in 0..n_blocks {
        for &(src, dst) in &topology.edges {
            AdapterParams::init(c, width, rng).register(store, &edge_prefix(b, src, dst));
        }
    }
}

fn project(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    Ok(g.add_bias(y, b)?)
}

/// Attention weights `[B, L, L]` of queries `q` over keys `k`, with row `i`
/// of the logits scaled by `gate(u_src[i])` before the softmax when gating is on.
pub fn gated_attention(
    g: &mut Graph,
    q: Var,
    k: Var,
    u_src: &UncertaintyMap,
    cfg: &AdapterConfig,
) -> Result<Var> {
    let s = g.shape(q).to_vec();
    let (b, l, width) = (s[0], s[1], s[2]);
    if u_src.batch() != b || u_src.tokens() != l {
        return Err(MmdgError::Config(format!(
            "uncertainty map [{}, {}] does not match tokens [{b}, {l}]",
            u_src.batch(),
            u_src.tokens()
        )));
    }
    check_penalty(cfg.r_e)?;
    let kt = g.transpose_last2(k)?;
    let mut logits = g.bmm(q, kt)?;
    if cfg.gate {
        let mut mask = Vec::with_capacity(b * l * l);
        for bi in 0..b {
            for i in 0..l {
                let w = gate(u_src.at(bi, i), cfg.r_e);
                mask.extend(std::iter::repeat_n(w, l));
            }
        }
        let mask = g.constant(Tensor::new(vec![b, l, l], mask)?);
        logits = g.mul(logits, mask)?;
    }
    let logits = g.scale(logits, 1.0 / (width as f64).sqrt())?;
    Ok(g.softmax_rows(logits)?)
}

/// Adapter output `[B, L, C]` for source query tokens `x_src3`, destination
/// key/value tokens `x_dst3`, and the source modality's uncertainty map.
pub fn adapter_forward(
    g: &mut Graph,
    params: &AdapterVars,
    u_src: &UncertaintyMap,
    x_src3: Var,
    x_dst3: Var,
    cfg: &AdapterConfig,
) -> Result<Var> {
    let s = g.shape(x_src3).to_vec();
    if s.len() != 3 || g.shape(x_dst3) != s.as_slice() {
        return Err(MmdgError::Config(format!(
            "adapter inputs must share a [B, L, C] shape, got {s:?} and {:?}",
            g.shape(x_dst3)
        )));
    }
    let (b, l) = (s[0], s[1]);
    if u_src.batch() != b || u_src.tokens() != l {
        return Err(MmdgError::Config(format!(
            "uncertainty map [{}, {}] does not match tokens [{b}, {l}]",
            u_src.batch(),
            u_src.tokens()
        )));
    }
    let patches = l - 1;
    let side = (patches as f64).sqrt().round() as usize;
    if side * side != patches {
        return Err(MmdgError::Config(format!(
            "{patches} patch tokens do not form a square grid"
        )));
    }
    check_penalty(cfg.r_e)?;

    let q = project(g, x_src3, params.q_weight, params.q_bias)?;
    let k = project(g, x_dst3, params.k_weight, params.k_bias)?;
    let v = project(g, x_dst3, params.v_weight, params.v_bias)?;
    let width = g.shape(q)[2];

    let attn = gated_attention(g, q, k, u_src, cfg)?;
    let ctx = g.bmm(attn, v)?;

    let refined = if patches == 0 {
        ctx
    } else {
        let cls = g.slice(ctx, 1, 0, 1)?;
        let grid = g.slice(ctx, 1, 1, l)?;
        let grid = g.permute(grid, &[0, 2, 1])?;
        let grid = g.reshape(grid, &[b, width, side, side])?;
        let grid = g.cdc_conv(grid, params.cdc_weight, cfg.theta)?;
        let grid = g.reshape(grid, &[b, width, patches])?;
        let grid = g.permute(grid, &[0, 2, 1])?;
        let grid = project(g, grid, params.pw_weight, params.pw_bias)?;
        let grid = g.gelu(grid)?;
        g.concat(&[cls, grid], 1)?
    };
    project(g, refined, params.up_weight, params.up_bias)
}

/// Fuses one block's taps across modalities:
/// `out_dst = Σ_src A(u_src, x_src3, x_dst3) + x_dst3 + x_dst4`.
pub fn fuse_block(
    g: &mut Graph,
    binder: &mut Binder,
    block: usize,
    taps: &PerModality<BlockTaps>,
    maps: &PerModality<UncertaintyMap>,
    topology: &FusionTopology,
    cfg: &AdapterConfig,
) -> Result<PerModality<Var>> {
    let mut outs = Vec::with_capacity(3);
    for dst in Modality::ALL {
        let t = taps[dst.index()];
        let mut terms = Vec::with_capacity(4);
        for src in topology.sources(dst) {
            let vars = AdapterVars::from_store(g, binder, &edge_prefix(block, src, dst))?;
            let x_src = taps[src.index()].x3;
            terms.push(adapter_forward(
                g,
                &vars,
                &maps[src.index()],
                x_src,
                t.x3,
                cfg,
            )?);
        }
        terms.push(t.x3);
        terms.push(t.x4);
        outs.push(g.add_all(&terms)?);
    }
    Ok(outs.try_into().unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn topology_has_no_depth_infrared_edge() {
        let t = FusionTopology::default();
        assert_eq!(
            t.sources(Modality::Rgb),
            vec![Modality::Depth, Modality::Infrared]
        );
        assert_eq!(t.sources(Modality::Depth), vec![Modality::Rgb]);
        assert_eq!(t.sources(Modality::Infrared), vec![Modality::Rgb]);
        assert_eq!(t.edges.len(), 4);
    }

    #[test]
    fn edge_names() {
        assert_eq!(
            edge_prefix(2, Modality::Rgb, Modality::Depth),
            "adapter.block2.edgeR->D"
        );
    }

    #[test]
    fn single_token_identity_adapter() {
        let one = |s: &[usize]| Tensor::filled(s, 1.0);
        let zero = |s: &[usize]| Tensor::zeros(s);
        let p = AdapterParams {
            q_weight: one(&[1, 1]),
            q_bias: zero(&[1]),
            k_weight: one(&[1, 1]),
            k_bias: zero(&[1]),
            v_weight: one(&[1, 1]),
            v_bias: zero(&[1]),
            cdc_weight: {
                let mut w = zero(&[1, 1, 3, 3]);
                w.data_mut()[4] = 1.0;
                w
            },
            pw_weight: one(&[1, 1]),
            pw_bias: zero(&[1]),
            up_weight: one(&[1, 1]),
            up_bias: zero(&[1]),
        };
        let mut g = Graph::new();
        let vars = p.bind(&mut g);
        let src = g.constant(Tensor::new(vec![1, 1, 1], vec![1.0]).unwrap());
        let dst = g.constant(Tensor::new(vec![1, 1, 1], vec![2.0]).unwrap());
        let cfg = AdapterConfig {
            r_e: 1.0,
            theta: 0.0,
            gate: true,
        };
        let out = adapter_forward(
            &mut g,
            &vars,
            &UncertaintyMap::zeros(0, 1, 1),
            src,
            dst,
            &cfg,
        )
        .unwrap();
        assert_eq!(g.data(out), &[2.0]);
    }

    #[test]
    fn non_square_grid_is_rejected() {
        let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let p = AdapterParams::init(4, 2, &mut rng);
        let mut g = Graph::new();
        let vars = p.bind(&mut g);
        let x = g.constant(Tensor::zeros(&[1, 4, 4]));
        let err = adapter_forward(
            &mut g,
            &vars,
            &UncertaintyMap::zeros(0, 1, 4),
            x,
            x,
            &AdapterConfig::default(),
        );
        assert!(matches!(err, Err(MmdgError::Config(_))));
    }
}
