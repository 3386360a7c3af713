//! Three-branch network: a frozen, weight-shared backbone per modality, fused
//! block by block through the adapters, followed by a shared linear head.

use mmdg_autodiff::{CounterRng, Graph, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::{fuse_block, init_adapters, AdapterConfig, FusionTopology};
use crate::backbone::{block_forward, init_backbone, patchify, BackboneConfig};
use crate::error::{MmdgError, Result};
use crate::modality::{Modality, PerModality};
use crate::params::{glorot, Binder, ParamStore};
use crate::uem::{mc_token_variance, UncertaintyMap};

pub const HEAD_WEIGHT: &str = "head.weight";
pub const HEAD_BIAS: &str = "head.bias";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    /// Adapter bottleneck width; `0` selects half the hidden width.
    pub adapter_width: usize,
    pub adapter: AdapterConfig,
    /// Monte-Carlo samples per uncertainty map.
    pub mc_samples: usize,
}

impl ModelConfig {
    pub fn desk() -> Self {
        Self {
            backbone: BackboneConfig::desk(),
            adapter_width: 0,
            adapter: AdapterConfig::default(),
            mc_samples: 4,
        }
    }

    pub fn width(&self) -> usize {
        if self.adapter_width == 0 {
            (self.backbone.hidden_c / 2).max(1)
        } else {
            self.adapter_width
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.mc_samples < 2 {
            return Err(MmdgError::Config(format!(
                "mc_samples must be at least 2, got {}",
                self.mc_samples
            )));
        }
        if !(0.0..=1.0).contains(&self.adapter.theta) {
            return Err(MmdgError::Config(format!(
                "theta {} outside [0, 1]",
                self.adapter.theta
            )));
        }
        crate::uem::check_penalty(self.adapter.r_e)
    }
}

/// Where the per-block uncertainty maps come from.
#[derive(Debug, Clone)]
pub enum UncertaintySource {
    /// Fresh Monte-Carlo sampling from this key.
    Sample(CounterRng),
    /// Precomputed maps, one entry per block.
    Fixed(Vec<PerModality<UncertaintyMap>>),
}

#[derive(Debug, Clone)]
pub struct ForwardOptions {
    /// Residual dropout key; `None` runs the deterministic path.
    pub dropout: Option<CounterRng>,
    pub uncertainty: UncertaintySource,
    /// When false every block output is `x3 + x4`, as if all adapters were zero.
    pub use_adapters: bool,
}

impl ForwardOptions {
    pub fn train(seed: CounterRng) -> Self {
        Self {
            dropout: Some(seed.derive(1)),
            uncertainty: UncertaintySource::Sample(seed.derive(2)),
            use_adapters: true,
        }
    }

    pub fn eval(seed: CounterRng) -> Self {
        Self {
            dropout: None,
            uncertainty: UncertaintySource::Sample(seed.derive(2)),
            use_adapters: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Final class token per modality, `[B, C]`.
    pub class_tokens: PerModality<Var>,
    /// Head logits per modality, `[B, 2]`.
    pub logits: PerModality<Var>,
    /// Uncertainty maps per block.
    pub maps: Vec<PerModality<UncertaintyMap>>,
}

impl ForwardOutput {
    pub fn last_maps(&self) -> &PerModality<UncertaintyMap> {
        self.maps.last().expect("at least one block")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub topology: FusionTopology,
}

impl Model {
    /// Random frozen backbone, zero-output adapters and a random head.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        init_backbone(&mut store, &cfg.backbone, &mut rng)?;
        let topology = FusionTopology::default();
        let c = cfg.backbone.hidden_c;
        init_adapters(
            &mut store,
            &topology,
            cfg.backbone.n_blocks,
            c,
            cfg.width(),
            &mut rng,
        );
        store.insert(HEAD_WEIGHT, glorot(&mut rng, c, 2), true);
        store.insert(HEAD_BIAS, Tensor::zeros(&[2]), true);
        Ok(Self {
            cfg,
            store,
            topology,
        })
    }

    /// Records a forward pass of `images` (`[B, H, W, 3]` per modality).
    pub fn forward(
        &self,
        g: &mut Graph,
        binder: &mut Binder,
        images: &PerModality<Tensor>,
        opts: &ForwardOptions,
    ) -> Result<ForwardOutput> {
        let cfg = &self.cfg.backbone;
        let b = images[0].shape().first().copied().unwrap_or(0);
        if b == 0 || images.iter().any(|t| t.shape().first() != Some(&b)) {
            return Err(MmdgError::Data(
                "modalities must share a nonempty batch".into(),
            ));
        }
        if let UncertaintySource::Fixed(maps) = &opts.uncertainty {
            if maps.len() != cfg.n_blocks {
                return Err(MmdgError::Config(format!(
                    "{} fixed uncertainty maps for {} blocks",
                    maps.len(),
                    cfg.n_blocks
                )));
            }
        }
        let mut x = Vec::with_capacity(3);
        for img in images {
            x.push(patchify(g, binder, img, cfg)?);
        }
        let mut x: PerModality<Var> = x.try_into().unwrap();
        let mut all_maps = Vec::with_capacity(cfg.n_blocks);
        for blk in 0..cfg.n_blocks {
            let mut taps = Vec::with_capacity(3);
            for m in Modality::ALL {
                let stream = (blk * 3 + m.index()) as u64;
                let drop = opts.dropout.map(|r| (r, stream));
                taps.push(block_forward(g, binder, cfg, x[m.index()], blk, drop)?);
            }
            let taps: PerModality<_> = taps.try_into().unwrap();
            let maps: PerModality<UncertaintyMap> = match &opts.uncertainty {
                UncertaintySource::Sample(rng) => {
                    let mut v = Vec::with_capacity(3);
                    for m in Modality::ALL {
                        let key = rng.derive((blk * 3 + m.index()) as u64);
                        let x2 = g.value(taps[m.index()].x2);
                        v.push(mc_token_variance(
                            x2,
                            blk,
                            cfg.dropout_rate,
                            self.cfg.mc_samples,
                            key,
                        )?);
                    }
                    v.try_into().unwrap()
                }
                UncertaintySource::Fixed(maps) => maps[blk].clone(),
            };
            x = if opts.use_adapters {
                fuse_block(
                    g,
                    binder,
                    blk,
                    &taps,
                    &maps,
                    &self.topology,
                    &self.cfg.adapter,
                )?
            } else {
                let mut out = Vec::with_capacity(3);
                for t in &taps {
                    out.push(g.add(t.x3, t.x4)?);
                }
                out.try_into().unwrap()
            };
            all_maps.push(maps);
        }
        let w = binder.var(g, HEAD_WEIGHT)?;
        let bias = binder.var(g, HEAD_BIAS)?;
        let c = cfg.hidden_c;
        let mut class_tokens = Vec::with_capacity(3);
        let mut logits = Vec::with_capacity(3);
        for xm in x {
            let cls = g.slice(xm, 1, 0, 1)?;
            let cls = g.reshape(cls, &[b, c])?;
            let z = g.matmul(cls, w)?;
            logits.push(g.add_bias(z, bias)?);
            class_tokens.push(cls);
        }
        Ok(ForwardOutput {
            class_tokens: class_tokens.try_into().unwrap(),
            logits: logits.try_into().unwrap(),
            maps: all_maps,
        })
    }

    /// Spoof probability from the softmax of the mean per-modality logits.
    pub fn scores(g: &Graph, out: &ForwardOutput) -> Vec<f64> {
        let b = g.shape(out.logits[0])[0];
        (0..b)
            .map(|i| {
                let mut z = [0.0; 2];
                for l in &out.logits {
                    let d = g.data(*l);
                    z[0] += d[2 * i] / 3.0;
                    z[1] += d[2 * i + 1] / 3.0;
                }
                1.0 / (1.0 + (z[0] - z[1]).exp())
            })
            .collect()
    }
}
