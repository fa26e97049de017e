//! Vision-transformer backbone shared by teacher and student.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{attention_layer, AttentionStats, AttentionWeights, TokenPartition};
use crate::error::{Error, Result};
use crate::params::{self, add_layer_norm, add_linear, trunc_normal, Bound, ParamStore, INIT_STD};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub channels: usize,
    /// Side of the global crop; fixes the size of the positional table.
    pub image_size: usize,
    /// Resample the positional grid for crops of another size.
    pub interpolate_pos: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            patch_size: 4,
            embed_dim: 64,
            depth: 4,
            heads: 4,
            mlp_ratio: 4,
            channels: 3,
            image_size: 32,
            interpolate_pos: true,
        }
    }
}

impl EncoderConfig {
    /// ViT-S/16 at 224².
    pub fn vit_small() -> Self {
        Self {
            patch_size: 16,
            embed_dim: 384,
            depth: 12,
            heads: 6,
            mlp_ratio: 4,
            channels: 3,
            image_size: 224,
            interpolate_pos: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image size {} is not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embedding width {} is not divisible by {} heads",
                self.embed_dim, self.heads
            )));
        }
        if self.depth == 0 || self.channels == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("depth, channels and mlp_ratio must be positive".into()));
        }
        Ok(())
    }

    /// Patch-grid side of the global crop.
    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Patch count `N = HW / P²` for an `h × w` crop.
    pub fn num_patches(&self, h: usize, w: usize) -> Result<usize> {
        let p = self.patch_size;
        if h % p != 0 || w % p != 0 {
            return Err(Error::Config(format!(
                "{h}x{w} crop is not divisible by patch size {p}"
            )));
        }
        Ok((h / p) * (w / p))
    }

    pub fn init_params<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        self.validate()?;
        let (d, p, c) = (self.embed_dim, self.patch_size, self.channels);
        let n = self.grid_side() * self.grid_side();
        add_linear(store, "patch_embed", c * p * p, d, rng)?;
        store.insert("cls_token", trunc_normal(&[d], INIT_STD, rng))?;
        store.insert("pos_embed", trunc_normal(&[n + 1, d], INIT_STD, rng))?;
        for i in 0..self.depth {
            let b = format!("blocks.{i}");
            add_layer_norm(store, &format!("{b}.norm1"), d)?;
            for proj in ["q", "k", "v", "o"] {
                add_linear(store, &format!("{b}.attn.{proj}"), d, d, rng)?;
            }
            add_layer_norm(store, &format!("{b}.norm2"), d)?;
            add_linear(store, &format!("{b}.mlp.fc1"), d, d * self.mlp_ratio, rng)?;
            add_linear(store, &format!("{b}.mlp.fc2"), d * self.mlp_ratio, d, rng)?;
        }
        add_layer_norm(store, "norm", d)
    }
}

/// Per-layer token outputs `[B, N+1, d]`, row 0 being [CLS]. Index `l - 1`
/// holds the output of layer `l`.
#[derive(Clone, Debug)]
pub struct LayerOutputs {
    pub layers: Vec<Var>,
}

impl LayerOutputs {
    pub fn last(&self) -> Var {
        *self.layers.last().expect("encoder has at least one layer")
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Output of 1-based layer `l`.
    pub fn layer(&self, l: usize) -> Option<Var> {
        l.checked_sub(1).and_then(|i| self.layers.get(i).copied())
    }
}

/// Splits `[B, C, H, W]` images into `[B, N, C·P·P]` patch rows; each row is
/// flattened in `(channel, y, x)` order.
pub fn patchify(images: &Tensor, patch: usize) -> Result<Tensor> {
    let s = images.shape();
    if s.len() != 4 {
        return Err(Error::Dimension {
            op: "patchify",
            lhs: s.to_vec(),
            rhs: vec![],
        });
    }
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::Config(format!(
            "{h}x{w} images are not divisible by patch size {patch}"
        )));
    }
    let (gh, gw) = (h / patch, w / patch);
    let src = images.data();
    let mut out = Vec::with_capacity(src.len());
    for bi in 0..b {
        for py in 0..gh {
            for px in 0..gw {
                for ch in 0..c {
                    for y in 0..patch {
                        let row = ((bi * c + ch) * h + py * patch + y) * w + px * patch;
                        out.extend_from_slice(&src[row..row + patch]);
                    }
                }
            }
        }
    }
    Tensor::new(vec![b, gh * gw, c * patch * patch], out)
}

/// Linear projection of every `P×P` patch to the embedding width.
pub fn patch_embed(tape: &mut Tape, p: &Bound<'_>, images: &Tensor, cfg: &EncoderConfig) -> Result<Var> {
    if images.shape().get(1) != Some(&cfg.channels) {
        return Err(Error::Dimension {
            op: "patch_embed",
            lhs: images.shape().to_vec(),
            rhs: vec![cfg.channels],
        });
    }
    let patches = tape.constant(patchify(images, cfg.patch_size)?);
    params::linear(tape, p, "patch_embed", patches)
}

/// Cubic convolution kernel (a = −0.75), the weighting used by common
/// bicubic resamplers.
fn cubic_weights(t: f64) -> [f64; 4] {
    const A: f64 = -0.75;
    let near = |x: f64| ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0;
    let far = |x: f64| ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A;
    [far(t + 1.0), near(t), near(1.0 - t), far(2.0 - t)]
}

/// `[out, in]` matrix resampling a 1-D signal of length `n_in` to `n_out`
/// with half-pixel centres and clamped borders.
pub fn bicubic_matrix_1d(n_in: usize, n_out: usize) -> Vec<f64> {
    let mut m = vec![0.0; n_out * n_in];
    let scale = n_in as f64 / n_out as f64;
    for o in 0..n_out {
        let src = (o as f64 + 0.5) * scale - 0.5;
        let base = src.floor();
        let w = cubic_weights(src - base);
        for (tap, wt) in w.iter().enumerate() {
            let i = (base as isize + tap as isize - 1).clamp(0, n_in as isize - 1) as usize;
            m[o * n_in + i] += wt;
        }
    }
    m
}

/// Matrix mapping a flattened `gh_in × gw_in` grid to `gh_out × gw_out` by
/// separable bicubic interpolation.
pub fn grid_resample_matrix(from: (usize, usize), to: (usize, usize)) -> Tensor {
    let my = bicubic_matrix_1d(from.0, to.0);
    let mx = bicubic_matrix_1d(from.1, to.1);
    let (n_in, n_out) = (from.0 * from.1, to.0 * to.1);
    let mut m = vec![0.0; n_out * n_in];
    for oy in 0..to.0 {
        for ox in 0..to.1 {
            let row = (oy * to.1 + ox) * n_in;
            for iy in 0..from.0 {
                let wy = my[oy * from.0 + iy];
                if wy == 0.0 {
                    continue;
                }
                for ix in 0..from.1 {
                    m[row + iy * from.1 + ix] = wy * mx[ox * from.1 + ix];
                }
            }
        }
    }
    Tensor::from_parts(vec![n_out, n_in], m)
}

/// Positional table for a `grid` of patches: the stored table for the
/// native grid, otherwise the patch part resampled and the [CLS] row kept.
pub fn positional_table(tape: &mut Tape, p: &Bound<'_>, cfg: &EncoderConfig, grid: (usize, usize)) -> Result<Var> {
    let pos = p.var("pos_embed")?;
    let side = cfg.grid_side();
    if grid == (side, side) {
        return Ok(pos);
    }
    if !cfg.interpolate_pos || grid.0 == 0 || grid.1 == 0 {
        return Err(Error::Config(format!(
            "no positional table for a {}x{} patch grid (native {side}x{side})",
            grid.0, grid.1
        )));
    }
    let cls = tape.gather_rows(pos, &[0])?;
    let idx: Vec<usize> = (1..=side * side).collect();
    let patches = tape.gather_rows(pos, &idx)?;
    let resample = tape.constant(grid_resample_matrix((side, side), grid));
    let resampled = tape.matmul(resample, patches)?;
    tape.concat(&[cls, resampled], 0)
}

/// Prepends the [CLS] embedding and adds positional embeddings.
pub fn prepend_cls_and_pos(
    tape: &mut Tape,
    p: &Bound<'_>,
    cfg: &EncoderConfig,
    tokens: Var,
    grid: (usize, usize),
) -> Result<Var> {
    let s = tape.shape(tokens).to_vec();
    if s.len() != 3 || s[1] != grid.0 * grid.1 {
        return Err(Error::Dimension {
            op: "prepend_cls_and_pos",
            lhs: s,
            rhs: vec![grid.0 * grid.1],
        });
    }
    let (b, d) = (s[0], s[2]);
    let zeros = tape.constant(Tensor::zeros(&[b, 1, d]));
    let cls = tape.add(zeros, p.var("cls_token")?)?;
    let seq = tape.concat(&[cls, tokens], 1)?;
    let pos = positional_table(tape, p, cfg, grid)?;
    tape.add(seq, pos)
}

/// Runs the transformer blocks (pre-norm: LN → attention → residual → LN →
/// MLP → residual). Uses the split attention kernel when `partitions` are
/// given, dense attention otherwise.
pub fn encode(
    tape: &mut Tape,
    p: &Bound<'_>,
    cfg: &EncoderConfig,
    tokens: Var,
    partitions: Option<&[TokenPartition]>,
) -> Result<(LayerOutputs, AttentionStats)> {
    let n = tape.shape(tokens)[1];
    if let Some(parts) = partitions {
        if let Some(bad) = parts.iter().find(|q| q.n_total() != n) {
            return Err(Error::Contract(format!(
                "partition over {} tokens for a {n}-token sequence",
                bad.n_total()
            )));
        }
    }
    let mut x = tokens;
    let mut layers = Vec::with_capacity(cfg.depth);
    let mut stats = AttentionStats::default();
    for i in 0..cfg.depth {
        let b = format!("blocks.{i}");
        let h = params::layer_norm(tape, p, &format!("{b}.norm1"), x)?;
        let weights = AttentionWeights {
            q: p.var(&format!("{b}.attn.q.weight"))?,
            k: p.var(&format!("{b}.attn.k.weight"))?,
            v: p.var(&format!("{b}.attn.v.weight"))?,
            o: p.var(&format!("{b}.attn.o.weight"))?,
            q_bias: Some(p.var(&format!("{b}.attn.q.bias"))?),
            k_bias: Some(p.var(&format!("{b}.attn.k.bias"))?),
            v_bias: Some(p.var(&format!("{b}.attn.v.bias"))?),
            o_bias: Some(p.var(&format!("{b}.attn.o.bias"))?),
        };
        let att = attention_layer(tape, h, &weights, cfg.heads, partitions)?;
        stats += att.stats;
        x = tape.add(x, att.output)?;
        let h = params::layer_norm(tape, p, &format!("{b}.norm2"), x)?;
        let h = params::linear(tape, p, &format!("{b}.mlp.fc1"), h)?;
        let h = tape.gelu(h);
        let h = params::linear(tape, p, &format!("{b}.mlp.fc2"), h)?;
        x = tape.add(x, h)?;
        layers.push(x);
    }
    // blocks run once per call; count sequences, not layers
    if cfg.depth > 0 {
        let per_layer = |v: u64| v / cfg.depth as u64;
        stats.efficient_sequences = per_layer(stats.efficient_sequences);
        stats.standard_sequences = per_layer(stats.standard_sequences);
    }
    Ok((LayerOutputs { layers }, stats))
}

/// Embeds `images: [B, C, H, W]` and runs the encoder. Per-sample partitions
/// (over `N+1` tokens) select the split attention kernel.
pub fn forward_images(
    tape: &mut Tape,
    p: &Bound<'_>,
    cfg: &EncoderConfig,
    images: &Tensor,
    partitions: Option<&[TokenPartition]>,
) -> Result<(LayerOutputs, AttentionStats)> {
    let s = images.shape();
    if s.len() != 4 {
        return Err(Error::Dimension {
            op: "forward_images",
            lhs: s.to_vec(),
            rhs: vec![],
        });
    }
    cfg.num_patches(s[2], s[3])?;
    let grid = (s[2] / cfg.patch_size, s[3] / cfg.patch_size);
    let tokens = patch_embed(tape, p, images, cfg)?;
    let seq = prepend_cls_and_pos(tape, p, cfg, tokens, grid)?;
    encode(tape, p, cfg, seq, partitions)
}

/// Final layer norm applied to the last block output before the heads.
pub fn final_norm(tape: &mut Tape, p: &Bound<'_>, last: Var) -> Result<Var> {
    params::layer_norm(tape, p, "norm", last)
}
