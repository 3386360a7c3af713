//! Finite-difference check of the full path: backbone blocks, uncertainty-gated
//! adapters, shared head and the combined loss.
//!
//! Each parameter tensor is checked along a direction that agrees in sign
//! with its analytic gradient, so the directional derivative cannot cancel
//! to zero and the relative error stays well conditioned.

use mmdg_autodiff::{CounterRng, Graph, Tensor};

use crate::backbone::BackboneConfig;
use crate::error::Result;
use crate::losses::{classification_losses, final_loss, ssp_loss, DomainSet, PrototypeTable};
use crate::modality::Modality;
use crate::model::{ForwardOptions, Model, ModelConfig, UncertaintySource};
use crate::params::{Binder, ParamStore};
use crate::uem::UncertaintyMap;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Directional derivatives below this magnitude are compared absolutely.
/// Key biases have an identically zero gradient (softmax is shift invariant
/// along each row), where a relative error would only measure round-off.
pub const FLOOR: f64 = 1e-6;
const LAMBDA: f64 = 0.3;

#[derive(Debug, Clone, PartialEq)]
pub struct CompositeCheck {
    pub seed: u64,
    /// Relative error of the directional derivative per parameter tensor.
    pub per_tensor: Vec<(String, f64)>,
}

impl CompositeCheck {
    pub fn max_rel_error(&self) -> f64 {
        self.per_tensor.iter().map(|(_, e)| *e).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() <= TOLERANCE
    }
}

struct Fixture {
    model: Model,
    images: [Tensor; 3],
    labels: Vec<usize>,
    domains: Vec<usize>,
    prototypes: PrototypeTable,
    opts: ForwardOptions,
}

fn random(rng: CounterRng, stream: u64, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n as u64)
        .map(|i| lo + (hi - lo) * rng.uniform(stream, i))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("positive shape")
}

fn fixture(seed: u64) -> Result<Fixture> {
    let cfg = ModelConfig {
        backbone: BackboneConfig {
            image_size: 8,
            patch_size: 4,
            hidden_c: 8,
            heads: 2,
            n_blocks: 2,
            mlp_ratio: 2,
            dropout_rate: 0.1,
        },
        adapter_width: 4,
        ..ModelConfig::desk()
    };
    let rng = CounterRng::new(seed);
    let mut model = Model::new(cfg.clone(), seed)?;
    // Perturb every tensor so no gradient path is switched off by a zero
    // initialization, and make everything trainable.
    let names: Vec<String> = model.store.iter().map(|(n, _)| n.to_string()).collect();
    for (k, name) in names.iter().enumerate() {
        let t = model.store.tensor_mut(name)?;
        let noise = random(rng.derive(1), k as u64, t.shape(), -0.3, 0.3);
        for (v, n) in t.data_mut().iter_mut().zip(noise.data()) {
            *v += n;
        }
    }
    model.store.set_trainable_prefix("", true);

    let (b, l) = (3, cfg.backbone.tokens());
    let images = [0, 1, 2].map(|m| random(rng.derive(2), m, &[b, 8, 8, 3], 0.0, 1.0));
    let maps = (0..cfg.backbone.n_blocks)
        .map(|blk| {
            [0, 1, 2].map(|m| {
                let v = random(rng.derive(3), (blk * 3 + m) as u64, &[b, l, 1], 0.0, 1.0);
                UncertaintyMap::new(blk, v).expect("nonnegative")
            })
        })
        .collect();
    let c = cfg.backbone.hidden_c;
    let domains = DomainSet { n_sources: 2 };
    let mut prototypes = PrototypeTable::new(domains, c, 0.9);
    for m in 0..3 {
        for d in 0..domains.len() {
            let p = random(rng.derive(4), (m * 3 + d) as u64, &[c], -1.0, 1.0);
            prototypes.centroids[m][d] = Some(p.data().to_vec());
        }
    }
    Ok(Fixture {
        model,
        images,
        labels: vec![0, 1, 1],
        domains: vec![0, 1, 2],
        prototypes,
        opts: ForwardOptions {
            dropout: Some(rng.derive(5)),
            uncertainty: UncertaintySource::Fixed(maps),
            use_adapters: true,
        },
    })
}

/// Records the combined loss; returns the graph, loss node and bound names.
fn loss(
    f: &Fixture,
    store: &ParamStore,
) -> Result<(
    Graph,
    mmdg_autodiff::Var,
    std::collections::HashMap<String, mmdg_autodiff::Var>,
)> {
    let mut g = Graph::new();
    let mut binder = Binder::new(store);
    let out = f.model.forward(&mut g, &mut binder, &f.images, &f.opts)?;
    let ce = classification_losses(&mut g, &out.logits, &f.labels)?;
    let mut ssp = Vec::with_capacity(3);
    for m in Modality::ALL {
        ssp.push(ssp_loss(
            &mut g,
            out.class_tokens[m.index()],
            &f.domains,
            &f.prototypes,
            m,
        )?);
    }
    let ssp: [_; 3] = ssp.try_into().unwrap();
    let l = final_loss(&mut g, ce.total, &ssp, LAMBDA)?;
    Ok((g, l, binder.into_bound()))
}

pub fn composite_check(seed: u64) -> Result<CompositeCheck> {
    let f = fixture(seed)?;
    let (g, l, bound) = loss(&f, &f.model.store)?;
    let grads = g.backward(l)?;
    let rng = CounterRng::new(seed).derive(6);
    let mut per_tensor = Vec::new();
    let names: Vec<String> = f.model.store.iter().map(|(n, _)| n.to_string()).collect();
    for (k, name) in names.iter().enumerate() {
        let Some(&v) = bound.get(name) else { continue };
        let analytic = grads.get_or_zeros(&g, v);
        let dir: Vec<f64> = analytic
            .iter()
            .enumerate()
            .map(|(i, a)| {
                let r = 0.5 + rng.uniform(k as u64, i as u64);
                if *a < 0.0 {
                    -r
                } else {
                    r
                }
            })
            .collect();
        let a: f64 = analytic.iter().zip(&dir).map(|(x, d)| x * d).sum();
        let eval = |sign: f64| -> Result<f64> {
            let mut store = f.model.store.clone();
            for (p, d) in store.tensor_mut(name)?.data_mut().iter_mut().zip(&dir) {
                *p += sign * STEP * d;
            }
            let (g2, l2, _) = loss(&f, &store)?;
            Ok(g2.value(l2).item())
        };
        let numeric = (eval(1.0)? - eval(-1.0)?) / (2.0 * STEP);
        per_tensor.push((name.clone(), (a - numeric).abs() / numeric.abs().max(FLOOR)));
    }
    Ok(CompositeCheck { seed, per_tensor })
}
