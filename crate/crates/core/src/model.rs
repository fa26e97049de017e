//! Full teacher/student forward pass and loss assembly for one batch.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::AttentionStats;
use crate::error::{Error, Result};
use crate::heads::{cluster_head, reconstruction_head, ClusterConfig, ReconConfig, Role, Which};
use crate::losses::{
    l_clust_class, l_clust_patch, l_mask, memax_with_entropy, total_loss, LossTerms, LossValues, MaskLossMode,
    ReconTarget,
};
use crate::params::{Bound, ParamStore};
use crate::tensor::{Tape, Tensor, Var};
use crate::views::TrainBatch;
use crate::vit::{final_norm, forward_images, EncoderConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub recon: ReconConfig,
    pub cluster: ClusterConfig,
    pub mask_loss: MaskLossMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            recon: ReconConfig::default(),
            cluster: ClusterConfig::default(),
            mask_loss: MaskLossMode::Mean,
        }
    }
}

impl ModelConfig {
    /// Smallest configuration used for long CPU runs and gradient checks:
    /// `d = 32`, two blocks of two heads, 8-pixel patches.
    pub fn tiny() -> Self {
        Self {
            encoder: EncoderConfig {
                patch_size: 8,
                embed_dim: 32,
                depth: 2,
                heads: 2,
                mlp_ratio: 2,
                channels: 3,
                image_size: 32,
                interpolate_pos: true,
            },
            recon: ReconConfig::default(),
            cluster: ClusterConfig {
                clusters: 64,
                proj_hidden: 64,
                embed_dim: 32,
                ..ClusterConfig::default()
            },
            mask_loss: MaskLossMode::Mean,
        }
    }

    /// Recon layers and widths filled in from the encoder.
    pub fn recon(&self) -> ReconConfig {
        self.recon.resolved(&self.encoder)
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.recon().validate(self.encoder.depth)?;
        self.cluster.validate()
    }

    /// Student parameters: encoder, reconstruction head, projection heads
    /// and clustering layers.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<ParamStore> {
        self.validate()?;
        let mut store = ParamStore::new();
        self.encoder.init_params(&mut store, rng)?;
        self.recon().init_params(&self.encoder, &mut store, rng)?;
        self.cluster.init_params(self.encoder.embed_dim, &mut store, rng)?;
        Ok(store)
    }
}

/// Final-normed encoder outputs split into the [CLS] row `[B, d]` and the
/// patch rows `[B, N, d]`.
fn split_tokens(tape: &mut Tape, x: Var) -> Result<(Var, Var)> {
    let s = tape.shape(x).to_vec();
    let (b, n1, d) = (s[0], s[1], s[2]);
    let cls = tape.gather_rows(x, &[0])?;
    let cls = tape.reshape(cls, &[b, d])?;
    let idx: Vec<usize> = (1..n1).collect();
    let patches = tape.gather_rows(x, &idx)?;
    Ok((cls, patches))
}

/// Rows `[start, start + len)` along axis 0.
fn slice_batch(tape: &mut Tape, x: Var, start: usize, len: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let inner: usize = s[1..].iter().product();
    let flat = tape.reshape(x, &[s[0], inner])?;
    let idx: Vec<usize> = (start..start + len).collect();
    let rows = tape.gather_rows(flat, &idx)?;
    let mut shape = s;
    shape[0] = len;
    tape.reshape(rows, &shape)
}

fn slice_tensor(t: &Tensor, start: usize, len: usize) -> Tensor {
    let inner = t.numel() / t.shape()[0];
    let mut shape = t.shape().to_vec();
    shape[0] = len;
    Tensor::new(shape, t.data()[start * inner..(start + len) * inner].to_vec()).expect("in-range slice")
}

/// Teacher class and patch distributions on the clean global views, as
/// detached values.
pub struct TeacherTargets {
    /// `[2B, K]`.
    pub class: Tensor,
    /// `[2B, N, K]`.
    pub patch: Tensor,
}

/// Teacher forward on `images: [2B, C, G, G]`. The teacher's parameters are
/// bound without gradients and its outputs leave the tape as plain values.
pub fn teacher_targets(teacher: &ParamStore, cfg: &ModelConfig, images: &Tensor) -> Result<TeacherTargets> {
    let mut tape = Tape::new();
    let p = teacher.bind(&mut tape, false);
    let (layers, _) = forward_images(&mut tape, &p, &cfg.encoder, images, None)?;
    let x = final_norm(&mut tape, &p, layers.last())?;
    let (cls, patches) = split_tokens(&mut tape, x)?;
    let class = cluster_head(&mut tape, &p, &cfg.cluster, Which::Class, Role::Teacher, cls)?;
    let patch = cluster_head(&mut tape, &p, &cfg.cluster, Which::Patch, Role::Teacher, patches)?;
    Ok(TeacherTargets {
        class: tape.value(class).clone(),
        patch: tape.value(patch).clone(),
    })
}

/// Everything one training step produces before the backward pass.
pub struct StepForward {
    pub terms: LossTerms,
    pub total: Var,
    pub values: LossValues,
    /// Entropy of the mean student class distribution.
    pub class_entropy: f64,
    /// Attention work of the student forward passes.
    pub student_attention: AttentionStats,
}

/// Student forward on the corrupted globals (split attention) and locals
/// (dense attention) and the four loss terms against `targets`.
pub fn student_losses(
    tape: &mut Tape,
    p: &Bound<'_>,
    cfg: &ModelConfig,
    batch: &TrainBatch,
    targets: &TeacherTargets,
    step: u64,
) -> Result<StepForward> {
    let b = batch.batch;
    let enc = &cfg.encoder;
    let g = batch.global_corrupted.shape()[2];
    let grid = (g / enc.patch_size, g / enc.patch_size);

    let (layers, mut stats) = forward_images(tape, p, enc, &batch.global_corrupted, Some(&batch.partitions))?;
    let recon = reconstruction_head(tape, p, &cfg.recon(), enc, &layers, grid)?;
    let x = final_norm(tape, p, layers.last())?;
    let (cls, patches) = split_tokens(tape, x)?;
    let s_class = cluster_head(tape, p, &cfg.cluster, Which::Class, Role::Student, cls)?;
    let s_patch = cluster_head(tape, p, &cfg.cluster, Which::Patch, Role::Student, patches)?;

    let mut local_class = Vec::new();
    let mut local_all = None;
    if let Some(locals) = &batch.locals {
        let (layers, st) = forward_images(tape, p, enc, locals, None)?;
        stats += st;
        let x = final_norm(tape, p, layers.last())?;
        let (cls, _) = split_tokens(tape, x)?;
        let all = cluster_head(tape, p, &cfg.cluster, Which::Class, Role::Student, cls)?;
        for m in 0..batch.locals_per_image {
            local_class.push(slice_batch(tape, all, m * b, b)?);
        }
        local_all = Some(all);
    }

    let lm = l_mask(
        tape,
        &[ReconTarget {
            clean: &batch.global_clean,
            recon,
            mask: &batch.pixel_masks,
        }],
        cfg.mask_loss,
    )?;

    let s1 = slice_batch(tape, s_class, 0, b)?;
    let s2 = slice_batch(tape, s_class, b, b)?;
    let t1 = slice_tensor(&targets.class, 0, b);
    let t2 = slice_tensor(&targets.class, b, b);
    let lc = l_clust_class(tape, [&t1, &t2], [s1, s2], &local_class)?;

    let sp1 = slice_batch(tape, s_patch, 0, b)?;
    let sp2 = slice_batch(tape, s_patch, b, b)?;
    let tp1 = slice_tensor(&targets.patch, 0, b);
    let tp2 = slice_tensor(&targets.patch, b, b);
    let lp = l_clust_patch(tape, [&tp1, &tp2], [sp1, sp2])?;

    let mut class_dists = vec![s_class];
    class_dists.extend(local_all);
    let (lme, hc) = memax_with_entropy(tape, &class_dists, &[s_patch], cfg.cluster.alpha1, cfg.cluster.alpha2)?;

    let terms = LossTerms {
        l_mask: lm,
        l_clust_class: lc,
        l_clust_patch: lp,
        l_memax: lme,
    };
    let (total, values) = total_loss(tape, &terms, step)?;
    let class_entropy = tape.value(hc).item()?;
    Ok(StepForward {
        terms,
        total,
        values,
        class_entropy,
        student_attention: stats,
    })
}

/// L2-normalised teacher [CLS] embeddings `[B, d]` after the final norm.
pub fn embed(params: &ParamStore, cfg: &ModelConfig, images: &Tensor) -> Result<Tensor> {
    if images.shape().len() != 4 {
        return Err(Error::Dimension {
            op: "embed",
            lhs: images.shape().to_vec(),
            rhs: vec![],
        });
    }
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, false);
    let (layers, _) = forward_images(&mut tape, &p, &cfg.encoder, images, None)?;
    let x = final_norm(&mut tape, &p, layers.last())?;
    let (cls, _) = split_tokens(&mut tape, x)?;
    let z = tape.l2_normalize(cls, 1e-12)?;
    Ok(tape.value(z).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::views::{build_batch, AugConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn batch(seed: u64, b: usize, locals: usize) -> TrainBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let imgs: Vec<Tensor> = (0..b).map(|_| Tensor::from_fn(&[3, 32, 32], |_| rng.gen())).collect();
        let refs: Vec<&Tensor> = imgs.iter().collect();
        let cfg = AugConfig { locals, ..AugConfig::default() };
        build_batch(&refs, &cfg, 8, &mut rng).unwrap()
    }

    #[test]
    fn tiny_forward_is_finite_and_counts_split_attention() {
        let cfg = ModelConfig::tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let student = cfg.init_params(&mut rng).unwrap();
        let teacher = student.clone();
        let tb = batch(1, 3, 2);
        let targets = teacher_targets(&teacher, &cfg, &tb.global_clean).unwrap();
        assert_eq!(targets.class.shape(), &[6, 64]);
        assert_eq!(targets.patch.shape(), &[6, 16, 64]);
        let mut tape = Tape::new();
        let p = student.bind(&mut tape, true);
        let out = student_losses(&mut tape, &p, &cfg, &tb, &targets, 0).unwrap();
        assert!(out.values.total().is_finite());
        assert_eq!(out.student_attention.efficient_sequences, 6);
        assert_eq!(out.student_attention.standard_sequences, 6);
        let k = 64f64;
        assert!(out.class_entropy <= k.ln() + 1e-12 && out.class_entropy >= 0.0);
        let recomputed = out.values.l_mask + out.values.l_clust_class + out.values.l_clust_patch + out.values.l_memax;
        assert!((tape.value(out.total).item().unwrap() - recomputed).abs() <= 1e-12);
    }

    #[test]
    fn backward_reaches_student_only() {
        let cfg = ModelConfig::tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let student = cfg.init_params(&mut rng).unwrap();
        let teacher = student.clone();
        let tb = batch(3, 2, 1);
        let targets = teacher_targets(&teacher, &cfg, &tb.global_clean).unwrap();
        let mut tape = Tape::new();
        let tp = teacher.bind(&mut tape, false);
        let p = student.bind(&mut tape, true);
        let out = student_losses(&mut tape, &p, &cfg, &tb, &targets, 0).unwrap();
        tape.backward(out.total).unwrap();
        for &v in tp.vars() {
            assert!(tape.grad(v).is_none());
        }
        let grads = p.grads(&mut tape);
        assert!(grads.iter().all(Tensor::is_finite));
        assert!(grads.iter().any(|g| g.norm_sq() > 0.0));
    }

    #[test]
    fn embeddings_are_unit_norm() {
        let cfg = ModelConfig::tiny();
        let params = cfg.init_params(&mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let imgs = Tensor::from_fn(&[3, 3, 32, 32], |_| rng.gen());
        let z = embed(&params, &cfg, &imgs).unwrap();
        assert_eq!(z.shape(), &[3, 32]);
        for row in z.data().chunks(32) {
            assert!((row.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
