//! Plain ViT backbone, shared and frozen across the three modality branches.
//!
//! Parameters live under `backbone.*`:
//! `patch_embed.{weight,bias}`, `cls_token`, `pos_embed`, and per block
//! `block{i}.{ln1,attn,ln2,mlp}.*`.

use mmdg_autodiff::{CounterRng, Graph, Tensor, Var, DEFAULT_LN_EPS};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MmdgError, Result};
use crate::params::{glorot, uniform, Binder, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub hidden_c: usize,
    pub heads: usize,
    pub n_blocks: usize,
    pub mlp_ratio: usize,
    pub dropout_rate: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl BackboneConfig {
    /// Small configuration used for tests and synthetic experiments.
    pub fn desk() -> Self {
        Self {
            image_size: 32,
            patch_size: 8,
            hidden_c: 32,
            heads: 4,
            n_blocks: 4,
            mlp_ratio: 2,
            dropout_rate: 0.1,
        }
    }

    /// ViT-B/16 at 224 px: 14×14 patches plus a class token, width 768,
    /// 12 blocks.
    pub fn paper() -> Self {
        Self {
            image_size: 224,
            patch_size: 16,
            hidden_c: 768,
            heads: 12,
            n_blocks: 12,
            mlp_ratio: 4,
            dropout_rate: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(MmdgError::Config(m));
        if self.image_size == 0
            || self.patch_size == 0
            || !self.image_size.is_multiple_of(self.patch_size)
        {
            return bad(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.heads == 0 || self.hidden_c == 0 || !self.hidden_c.is_multiple_of(self.heads) {
            return bad(format!(
                "hidden size {} not divisible by {} heads",
                self.hidden_c, self.heads
            ));
        }
        if self.n_blocks == 0 || self.mlp_ratio == 0 {
            return bad("n_blocks and mlp_ratio must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout rate {} outside [0, 1)", self.dropout_rate));
        }
        Ok(())
    }

    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    /// Token count `L`: patches plus the class token.
    pub fn tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_c / self.heads
    }
}

/// Intermediate outputs of one block.
#[derive(Debug, Clone, Copy)]
pub struct BlockTaps {
    /// LN1(x)
    pub x1: Var,
    /// MHSA(x1)
    pub x2: Var,
    /// LN2(x + x2)
    pub x3: Var,
    /// MLP(x3)
    pub x4: Var,
}

pub fn block_prefix(i: usize) -> String {
    format!("backbone.block{i}")
}

/// Registers randomly initialized, frozen backbone parameters.
pub fn init_backbone(
    store: &mut ParamStore,
    cfg: &BackboneConfig,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    cfg.validate()?;
    let c = cfg.hidden_c;
    let hidden = c * cfg.mlp_ratio;
    store.insert(
        "backbone.patch_embed.weight",
        glorot(rng, cfg.patch_dim(), c),
        false,
    );
    store.insert("backbone.patch_embed.bias", Tensor::zeros(&[c]), false);
    store.insert("backbone.cls_token", uniform(rng, &[1, c], 0.5), false);
    store.insert(
        "backbone.pos_embed",
        uniform(rng, &[cfg.tokens(), c], 0.1),
        false,
    );
    for i in 0..cfg.n_blocks {
        let p = block_prefix(i);
        for ln in ["ln1", "ln2"] {
            store.insert(format!("{p}.{ln}.gamma"), Tensor::filled(&[c], 1.0), false);
            store.insert(format!("{p}.{ln}.beta"), Tensor::zeros(&[c]), false);
        }
        store.insert(format!("{p}.attn.qkv.weight"), glorot(rng, c, 3 * c), false);
        store.insert(format!("{p}.attn.qkv.bias"), Tensor::zeros(&[3 * c]), false);
        store.insert(format!("{p}.attn.proj.weight"), glorot(rng, c, c), false);
        store.insert(format!("{p}.attn.proj.bias"), Tensor::zeros(&[c]), false);
        store.insert(format!("{p}.mlp.fc1.weight"), glorot(rng, c, hidden), false);
        store.insert(format!("{p}.mlp.fc1.bias"), Tensor::zeros(&[hidden]), false);
        store.insert(format!("{p}.mlp.fc2.weight"), glorot(rng, hidden, c), false);
        store.insert(format!("{p}.mlp.fc2.bias"), Tensor::zeros(&[c]), false);
    }
    Ok(())
}

/// Rearranges `[B, H, W, 3]` pixels into `[B, N, P·P·3]` patch rows, patches
/// in raster order and pixels within a patch in `(row, col, channel)` order.
pub fn extract_patches(images: &Tensor, cfg: &BackboneConfig) -> Result<Tensor> {
    let s = images.shape();
    if s.len() != 4 || s[1] != cfg.image_size || s[2] != cfg.image_size || s[3] != 3 {
        return Err(MmdgError::Config(format!(
            "expected images [B, {0}, {0}, 3], got {s:?}",
            cfg.image_size
        )));
    }
    cfg.validate()?;
    let (b, side, p, grid) = (s[0], cfg.image_size, cfg.patch_size, cfg.grid_side());
    let src = images.data();
    let mut out = Vec::with_capacity(images.len());
    for bi in 0..b {
        for gy in 0..grid {
            for gx in 0..grid {
                for py in 0..p {
                    let row = (bi * side + gy * p + py) * side + gx * p;
                    out.extend_from_slice(&src[row * 3..(row + p) * 3]);
                }
            }
        }
    }
    Ok(Tensor::new(
        vec![b, cfg.num_patches(), cfg.patch_dim()],
        out,
    )?)
}

/// Token sequence `[B, L, C]`: class token followed by projected patches,
/// plus positional embedding.
pub fn patchify(
    g: &mut Graph,
    binder: &mut Binder,
    images: &Tensor,
    cfg: &BackboneConfig,
) -> Result<Var> {
    let b = images.shape()[0];
    let patches = g.constant(extract_patches(images, cfg)?);
    let w = binder.var(g, "backbone.patch_embed.weight")?;
    let bias = binder.var(g, "backbone.patch_embed.bias")?;
    let tokens = g.matmul(patches, w)?;
    let tokens = g.add_bias(tokens, bias)?;
    let cls = binder.var(g, "backbone.cls_token")?;
    let cls = g.gather_rows(cls, &vec![0; b])?;
    let cls = g.reshape(cls, &[b, 1, cfg.hidden_c])?;
    let seq = g.concat(&[cls, tokens], 1)?;
    let pos = binder.var(g, "backbone.pos_embed")?;
    Ok(g.add_broadcast_batch(seq, pos)?)
}

fn linear(g: &mut Graph, binder: &mut Binder, x: Var, prefix: &str) -> Result<Var> {
    let w = binder.var(g, &format!("{prefix}.weight"))?;
    let b = binder.var(g, &format!("{prefix}.bias"))?;
    let y = g.matmul(x, w)?;
    Ok(g.add_bias(y, b)?)
}

fn layer_norm(g: &mut Graph, binder: &mut Binder, x: Var, prefix: &str) -> Result<Var> {
    let gamma = binder.var(g, &format!("{prefix}.gamma"))?;
    let beta = binder.var(g, &format!("{prefix}.beta"))?;
    Ok(g.layer_norm(x, gamma, beta, DEFAULT_LN_EPS)?)
}

/// Multi-head self-attention over `[B, L, C]`.
fn mhsa(
    g: &mut Graph,
    binder: &mut Binder,
    x: Var,
    prefix: &str,
    cfg: &BackboneConfig,
) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (b, l, c, h, d) = (s[0], s[1], s[2], cfg.heads, cfg.head_dim());
    let qkv = linear(g, binder, x, &format!("{prefix}.qkv"))?;
    let qkv = g.reshape(qkv, &[b, l, 3, h, d])?;
    let qkv = g.permute(qkv, &[2, 0, 3, 1, 4])?;
    let mut parts = Vec::with_capacity(3);
    for k in 0..3 {
        let t = g.slice(qkv, 0, k, k + 1)?;
        parts.push(g.reshape(t, &[b * h, l, d])?);
    }
    let kt = g.transpose_last2(parts[1])?;
    let scores = g.bmm(parts[0], kt)?;
    let scores = g.scale(scores, 1.0 / (d as f64).sqrt())?;
    let attn = g.softmax_rows(scores)?;
    let ctx = g.bmm(attn, parts[2])?;
    let ctx = g.reshape(ctx, &[b, h, l, d])?;
    let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = g.reshape(ctx, &[b, l, c])?;
    linear(g, binder, ctx, &format!("{prefix}.proj"))
}

/// Runs block `block_index` on `x`. When `dropout` is given, the MHSA output
/// entering the residual is passed through seeded inverted dropout; the
/// returned `x2` tap is always the undropped MHSA output.
pub fn block_forward(
    g: &mut Graph,
    binder: &mut Binder,
    cfg: &BackboneConfig,
    x: Var,
    block_index: usize,
    dropout: Option<(CounterRng, u64)>,
) -> Result<BlockTaps> {
    if block_index >= cfg.n_blocks {
        return Err(MmdgError::Config(format!(
            "block index {block_index} out of range for {} blocks",
            cfg.n_blocks
        )));
    }
    let p = block_prefix(block_index);
    let x1 = layer_norm(g, binder, x, &format!("{p}.ln1"))?;
    let x2 = mhsa(g, binder, x1, &format!("{p}.attn"), cfg)?;
    let x2_res = match dropout {
        Some((rng, stream)) if cfg.dropout_rate > 0.0 => {
            g.dropout(x2, cfg.dropout_rate, rng, stream)?
        }
        _ => x2,
    };
    let res = g.add(x, x2_res)?;
    let x3 = layer_norm(g, binder, res, &format!("{p}.ln2"))?;
    let h = linear(g, binder, x3, &format!("{p}.mlp.fc1"))?;
    let h = g.gelu(h)?;
    let x4 = linear(g, binder, h, &format!("{p}.mlp.fc2"))?;
    Ok(BlockTaps { x1, x2, x3, x4 })
}
