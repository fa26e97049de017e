//! Reconstruction head and the class/patch clustering heads.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{self, add_linear, trunc_normal, Bound, ParamStore, INIT_STD};
use crate::tensor::{Tape, Tensor, Var};
use crate::vit::{EncoderConfig, LayerOutputs};

/// Default layer set: every `max(1, ⌊depth/6⌋)`-th layer from `⌈depth/2⌉`
/// up to `depth`. Depth 12 gives {6, 8, 10, 12}; depth 4 gives {2, 3, 4}.
pub fn default_layer_set(depth: usize) -> Vec<usize> {
    if depth == 0 {
        return Vec::new();
    }
    let step = (depth / 6).max(1);
    let first = depth.div_ceil(2).max(1);
    let mut layers: Vec<usize> = (first..=depth).step_by(step).collect();
    if layers.last() != Some(&depth) {
        layers.push(depth);
    }
    layers
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconConfig {
    /// 1-based encoder layers summed as the head input; empty selects
    /// [`default_layer_set`].
    pub layers: Vec<usize>,
    /// Widths of the linear + GELU stack before the transposed convolution;
    /// empty selects two layers of the embedding width.
    pub hidden: Vec<usize>,
}

impl ReconConfig {
    /// Fills empty fields with the defaults for `enc`.
    pub fn resolved(&self, enc: &EncoderConfig) -> Self {
        let auto = Self::for_encoder(enc);
        Self {
            layers: if self.layers.is_empty() { auto.layers } else { self.layers.clone() },
            hidden: if self.hidden.is_empty() { auto.hidden } else { self.hidden.clone() },
        }
    }

    pub fn for_encoder(enc: &EncoderConfig) -> Self {
        Self {
            layers: default_layer_set(enc.depth),
            hidden: vec![enc.embed_dim, enc.embed_dim],
        }
    }

    pub fn validate(&self, depth: usize) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config("reconstruction layer set is empty".into()));
        }
        if let Some(&l) = self.layers.iter().find(|&&l| l == 0 || l > depth) {
            return Err(Error::Config(format!(
                "reconstruction layer {l} outside 1..={depth}"
            )));
        }
        if !self.layers.contains(&depth) {
            return Err(Error::Config(format!(
                "reconstruction layer set must include the last layer {depth}"
            )));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config("reconstruction hidden widths must be positive".into()));
        }
        Ok(())
    }

    pub fn init_params<R: Rng + ?Sized>(
        &self,
        enc: &EncoderConfig,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<()> {
        self.validate(enc.depth)?;
        let mut width = enc.embed_dim;
        for (i, &h) in self.hidden.iter().enumerate() {
            add_linear(store, &format!("recon.fc{i}"), width, h, rng)?;
            width = h;
        }
        let p = enc.patch_size;
        store.insert(
            "recon.deconv.weight",
            trunc_normal(&[width, enc.channels, p, p], INIT_STD, rng),
        )?;
        store.insert("recon.deconv.bias", Tensor::zeros(&[enc.channels]))
    }
}

/// Pixel reconstruction `[B, C, gh·P, gw·P]` from the patch rows of the
/// layers in `cfg.layers`, summed.
pub fn reconstruction_head(
    tape: &mut Tape,
    p: &Bound<'_>,
    cfg: &ReconConfig,
    enc: &EncoderConfig,
    outputs: &LayerOutputs,
    grid: (usize, usize),
) -> Result<Var> {
    cfg.validate(outputs.len())?;
    let mut sum: Option<Var> = None;
    for &l in &cfg.layers {
        let x = outputs
            .layer(l)
            .ok_or_else(|| Error::Config(format!("encoder has no layer {l}")))?;
        sum = Some(match sum {
            Some(s) => tape.add(s, x)?,
            None => x,
        });
    }
    let sum = sum.expect("validated non-empty layer set");
    let s = tape.shape(sum).to_vec();
    let n = grid.0 * grid.1;
    if s.len() != 3 || s[1] != n + 1 {
        return Err(Error::Dimension {
            op: "reconstruction_head",
            lhs: s,
            rhs: vec![n + 1],
        });
    }
    let b = s[0];
    let rows: Vec<usize> = (1..=n).collect();
    let mut h = tape.gather_rows(sum, &rows)?;
    for i in 0..cfg.hidden.len() {
        h = params::linear(tape, p, &format!("recon.fc{i}"), h)?;
        h = tape.gelu(h);
    }
    let width = *tape.shape(h).last().expect("rank 3");
    let h = tape.reshape(h, &[b, grid.0, grid.1, width])?;
    let h = tape.permute(h, &[0, 3, 1, 2])?;
    let w = p.var("recon.deconv.weight")?;
    let bias = p.var("recon.deconv.bias")?;
    tape.conv_transpose2d(h, w, Some(bias), enc.patch_size)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Which {
    Class,
    Patch,
}

impl Which {
    fn prefix(self) -> &'static str {
        match self {
            Which::Class => "class",
            Which::Patch => "patch",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Student,
    Teacher,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterConfig {
    pub clusters: usize,
    pub tau_student: f64,
    pub tau_teacher: f64,
    pub proj_hidden: usize,
    pub embed_dim: usize,
    pub alpha1: f64,
    pub alpha2: f64,
    /// Unit-normalise each prototype column so logits are cosine
    /// similarities.
    pub cosine_prototypes: bool,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            clusters: 64,
            tau_student: 0.1,
            tau_teacher: 0.04,
            proj_hidden: 128,
            embed_dim: 64,
            alpha1: 1.0,
            alpha2: 0.1,
            cosine_prototypes: false,
        }
    }
}

/// Normalisation floor for the projection output.
const L2_EPS: f64 = 1e-12;

impl ClusterConfig {
    pub fn vit_small() -> Self {
        Self {
            clusters: 8192,
            proj_hidden: 2048,
            embed_dim: 256,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.clusters < 2 {
            return Err(Error::Config(format!("need at least 2 clusters, got {}", self.clusters)));
        }
        if !(self.tau_teacher > 0.0 && self.tau_teacher < self.tau_student) {
            return Err(Error::Config(format!(
                "temperatures must satisfy 0 < teacher ({}) < student ({})",
                self.tau_teacher, self.tau_student
            )));
        }
        if !(self.alpha1 >= 0.0 && self.alpha2 >= 0.0) {
            return Err(Error::Config("ME-MAX weights must be non-negative".into()));
        }
        if self.proj_hidden == 0 || self.embed_dim == 0 {
            return Err(Error::Config("projection widths must be positive".into()));
        }
        Ok(())
    }

    pub fn temperature(&self, role: Role) -> f64 {
        match role {
            Role::Student => self.tau_student,
            Role::Teacher => self.tau_teacher,
        }
    }

    pub fn init_params<R: Rng + ?Sized>(&self, d: usize, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        self.validate()?;
        for which in [Which::Class, Which::Patch] {
            let pre = which.prefix();
            add_linear(store, &format!("{pre}_proj.fc1"), d, self.proj_hidden, rng)?;
            add_linear(store, &format!("{pre}_proj.fc2"), self.proj_hidden, self.proj_hidden, rng)?;
            add_linear(store, &format!("{pre}_proj.fc3"), self.proj_hidden, self.embed_dim, rng)?;
            store.insert(
                format!("{pre}_cluster.weight"),
                trunc_normal(&[self.embed_dim, self.clusters], INIT_STD, rng),
            )?;
        }
        Ok(())
    }
}

/// Projection MLP, L2 normalisation, bias-free clustering layer and softmax
/// at the role's temperature. `embedding: [.., d]` maps to `[.., K]`.
pub fn cluster_head(
    tape: &mut Tape,
    p: &Bound<'_>,
    cfg: &ClusterConfig,
    which: Which,
    role: Role,
    embedding: Var,
) -> Result<Var> {
    let pre = which.prefix();
    let h = params::linear(tape, p, &format!("{pre}_proj.fc1"), embedding)?;
    let h = tape.gelu(h);
    let h = params::linear(tape, p, &format!("{pre}_proj.fc2"), h)?;
    let h = tape.gelu(h);
    let z = params::linear(tape, p, &format!("{pre}_proj.fc3"), h)?;
    let z = tape.l2_normalize(z, L2_EPS)?;
    let mut w = p.var(&format!("{pre}_cluster.weight"))?;
    if cfg.cosine_prototypes {
        let wt = tape.transpose(w, 0, 1)?;
        let wt = tape.l2_normalize(wt, L2_EPS)?;
        w = tape.transpose(wt, 0, 1)?;
    }
    let logits = tape.matmul(z, w)?;
    let axis = tape.shape(logits).len() - 1;
    tape.softmax(logits, axis, cfg.temperature(role))
}
