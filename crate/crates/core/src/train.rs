//! Teacher/student training loop.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::AttentionStats;
use crate::checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::losses::LossValues;
use crate::model::{student_losses, teacher_targets};
use crate::optim::{clip_global_norm, ema_update, AdamW};
use crate::params::ParamStore;
use crate::tensor::{Tape, Tensor};
use crate::views::{build_batch, TrainBatch};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub seed: u64,
    /// Checkpoint period in steps; 0 writes only the initial and final ones.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            batch_size: 16,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

pub const METRICS_HEADER: &str = "step,l_mask,l_clust_class,l_clust_patch,l_memax,total,lr,ema,entropy_mean";

/// Everything that evolves during training. Per-step randomness is derived
/// from `(seed, step)`, so no generator state needs saving.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub student: ParamStore,
    pub teacher: ParamStore,
    /// Moments for student parameters only.
    pub opt: AdamW,
    /// Completed steps.
    pub step: u64,
    pub seed: u64,
}

impl TrainState {
    /// Fresh student from `cfg.train.seed`; the teacher starts as a copy.
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
        let student = cfg.model.init_params(&mut rng)?;
        Ok(Self {
            teacher: student.clone(),
            opt: AdamW::new(&student),
            student,
            step: 0,
            seed: cfg.train.seed,
        })
    }
}

/// Generator for everything random in step `step`.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

/// Draws `batch` dataset indices (with replacement across steps, without
/// within a step when the dataset is large enough).
pub fn sample_indices<R: Rng + ?Sized>(len: usize, batch: usize, rng: &mut R) -> Vec<usize> {
    if batch <= len {
        rand::seq::index::sample(rng, len, batch).into_vec()
    } else {
        (0..batch).map(|_| rng.gen_range(0..len)).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    /// 1-based index of the finished step.
    pub step: u64,
    pub losses: LossValues,
    pub lr: f64,
    pub ema: f64,
    pub entropy_mean: f64,
    pub grad_norm: f64,
    pub attention: AttentionStats,
}

impl StepReport {
    pub fn csv_row(&self) -> String {
        let l = &self.losses;
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.step,
            l.l_mask,
            l.l_clust_class,
            l.l_clust_patch,
            l.l_memax,
            l.total(),
            self.lr,
            self.ema,
            self.entropy_mean
        )
    }
}

/// One optimisation step on a prepared batch: teacher targets, student
/// losses, backward, clipped AdamW update, EMA update.
pub fn train_step(state: &mut TrainState, cfg: &RunConfig, batch: &TrainBatch) -> Result<StepReport> {
    let t = state.step;
    let total = cfg.train.steps;
    let lr = cfg.optim.lr_at(t, total);
    let ema = cfg.optim.ema_at(t, total);

    let targets = teacher_targets(&state.teacher, &cfg.model, &batch.global_clean)?;
    let mut tape = Tape::new();
    let p = state.student.bind(&mut tape, true);
    let fwd = student_losses(&mut tape, &p, &cfg.model, batch, &targets, t)?;
    tape.backward(fwd.total)?;
    let mut grads = p.grads(&mut tape);
    drop(tape);
    let grad_norm = clip_global_norm(&mut grads, cfg.optim.clip);
    if !grad_norm.is_finite() {
        return Err(Error::TrainingFault {
            step: t,
            component: "gradient",
            last_checkpoint: None,
        });
    }
    state.opt.step(&mut state.student, &grads, lr, &cfg.optim)?;
    ema_update(&mut state.teacher, &state.student, ema)?;
    state.step += 1;
    Ok(StepReport {
        step: state.step,
        losses: fwd.values,
        lr,
        ema,
        entropy_mean: fwd.class_entropy,
        grad_norm,
        attention: fwd.student_attention,
    })
}

/// Samples the batch for the next step of `state` and trains on it.
pub fn next_step(state: &mut TrainState, cfg: &RunConfig, images: &[Tensor]) -> Result<StepReport> {
    if images.is_empty() {
        return Err(Error::Ingestion("training set is empty".into()));
    }
    let mut rng = step_rng(state.seed, state.step);
    let idx = sample_indices(images.len(), cfg.train.batch_size, &mut rng);
    let refs: Vec<&Tensor> = idx.iter().map(|&i| &images[i]).collect();
    let batch = build_batch(&refs, &cfg.augment, cfg.model.encoder.patch_size, &mut rng)?;
    train_step(state, cfg, &batch)
}

/// Where a run writes its artefacts.
pub struct RunOutput<'a> {
    pub dir: &'a Path,
}

impl RunOutput<'_> {
    pub fn metrics_path(&self) -> PathBuf {
        self.dir.join("metrics.csv")
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.dir.join("checkpoints")
    }
}

fn open_metrics(path: &Path) -> Result<File> {
    let fresh = !path.exists();
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    if fresh {
        writeln!(f, "{METRICS_HEADER}").map_err(|e| Error::io(path, e))?;
    }
    Ok(f)
}

/// Trains `state` up to `cfg.train.steps`. With an output directory, metrics
/// rows are appended to `metrics.csv` and checkpoints written under
/// `checkpoints/` (the starting state, every `checkpoint_every` steps and
/// the final state). A fault reports the last checkpoint written.
pub fn run(
    state: &mut TrainState,
    cfg: &RunConfig,
    images: &[Tensor],
    out: Option<RunOutput<'_>>,
    mut on_step: impl FnMut(&StepReport),
) -> Result<Vec<StepReport>> {
    let mut metrics = match &out {
        Some(o) => {
            std::fs::create_dir_all(o.dir).map_err(|e| Error::io(o.dir, e))?;
            Some(open_metrics(&o.metrics_path())?)
        }
        None => None,
    };
    let save = |state: &TrainState| -> Result<Option<PathBuf>> {
        match &out {
            Some(o) => {
                let dir = checkpoint::step_dir(&o.checkpoints(), state.step);
                checkpoint::save(state, cfg, &dir)?;
                Ok(Some(dir))
            }
            None => Ok(None),
        }
    };
    let mut last_checkpoint = save(state)?;
    let mut reports = Vec::new();
    while state.step < cfg.train.steps {
        let report = match next_step(state, cfg, images) {
            Ok(r) => r,
            Err(Error::TrainingFault { step, component, .. }) => {
                return Err(Error::TrainingFault {
                    step,
                    component,
                    last_checkpoint,
                })
            }
            Err(e) => return Err(e),
        };
        if let (Some(f), Some(o)) = (metrics.as_mut(), &out) {
            writeln!(f, "{}", report.csv_row()).map_err(|e| Error::io(o.metrics_path(), e))?;
        }
        on_step(&report);
        reports.push(report);
        let every = cfg.train.checkpoint_every;
        if state.step == cfg.train.steps || (every > 0 && state.step % every == 0) {
            last_checkpoint = save(state)?.or(last_checkpoint);
        }
    }
    Ok(reports)
}
