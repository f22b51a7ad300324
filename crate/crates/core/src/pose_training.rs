//! Two-stage training of the forecaster.
//!
//! Stage 1 trains the person/group/decoder parameters on the coarse pose
//! loss with teacher-forced rollout; stage 2 trains every parameter on the
//! composite loss (refined + weighted coarse) with closed-loop rollout.

use crate::ad::{Tape, Var};
use crate::forecaster::{ForecastError, ModelKind, PoseModel};
use crate::nn::{clip_global_norm, Adam};
use crate::pose_data::SceneClip;
use ndarray::Array1;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("bad training config: {0}")]
    BadConfig(String),
    #[error("loss shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite loss {loss} at iteration {iteration}; aborting")]
    NonFinite { iteration: usize, loss: f64 },
    #[error(transparent)]
    Forecast(#[from] ForecastError),
}

/// Training hyperparameters. Serializable so runs can be driven by a JSON
/// config file that mirrors this struct.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Learning rate.
    pub lr: f64,
    /// Weight of the coarse-pose term inside the stage-2 loss.
    pub w_s1: f64,
    /// Global gradient-norm ceiling.
    pub clip_norm: f64,
    /// 1 = coarse model, teacher forcing; 2 = full model, closed loop.
    pub stage: u8,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    /// Group-assignment softmax temperature.
    pub temperature: f64,
    /// Perturb assignment logits with Gumbel noise during training.
    pub gumbel: bool,
    /// Divide each person's loss by (steps x joints); keeps the documented
    /// sum-over-time-and-joints form when false (the default).
    pub per_joint_mean: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-5,
            w_s1: 0.1,
            clip_norm: 5.0,
            stage: 1,
            epochs: 1,
            batch: 4,
            seed: 0,
            temperature: 0.1,
            gumbel: false,
            per_joint_mean: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.lr > 0.0) {
            return Err(TrainError::BadConfig(format!("lr must be > 0, got {}", self.lr)));
        }
        if self.w_s1 < 0.0 {
            return Err(TrainError::BadConfig(format!("w_s1 must be >= 0, got {}", self.w_s1)));
        }
        if !(self.clip_norm > 0.0) {
            return Err(TrainError::BadConfig(format!(
                "clip_norm must be > 0, got {}",
                self.clip_norm
            )));
        }
        if self.stage != 1 && self.stage != 2 {
            return Err(TrainError::BadConfig(format!("stage must be 1 or 2, got {}", self.stage)));
        }
        if self.batch == 0 {
            return Err(TrainError::BadConfig("batch must be >= 1".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(TrainError::BadConfig(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Coarse pose loss: squared error summed over time and joints, averaged
/// over persons. Inputs are `[step][person]` vectors of 2J coordinates.
pub fn loss_stage1(
    t: &Tape,
    coarse: &[Vec<Var>],
    gt: &[Vec<Var>],
    per_joint_mean: bool,
) -> Result<Var, TrainError> {
    if coarse.len() != gt.len() {
        return Err(TrainError::Shape(format!(
            "{} predicted steps vs {} ground-truth steps",
            coarse.len(),
            gt.len()
        )));
    }
    let t2 = coarse.len();
    if t2 == 0 {
        return Err(TrainError::Shape("empty sequence".into()));
    }
    let n = coarse[0].len();
    if n == 0 {
        return Err(TrainError::Shape("no persons".into()));
    }
    let mut per_person: Vec<Var> = Vec::with_capacity(n);
    let mut dim = 0usize;
    for i in 0..n {
        let mut step_terms = Vec::with_capacity(t2);
        for (step, (c_row, g_row)) in coarse.iter().zip(gt).enumerate() {
            if c_row.len() != n || g_row.len() != n {
                return Err(TrainError::Shape(format!(
                    "step {step}: {} predicted vs {} ground-truth persons (expected {n})",
                    c_row.len(),
                    g_row.len()
                )));
            }
            let (cs, gs) = (t.shape(c_row[i]), t.shape(g_row[i]));
            if cs != gs {
                return Err(TrainError::Shape(format!(
                    "step {step} person {i}: predicted {cs:?} vs ground truth {gs:?}"
                )));
            }
            dim = cs[0];
            step_terms.push(t.sq_diff_sum(c_row[i], g_row[i]));
        }
        per_person.push(t.add_n(&step_terms));
    }
    let mut loss = t.scale(t.add_n(&per_person), 1.0 / n as f64);
    if per_joint_mean {
        loss = t.scale(loss, 1.0 / (t2 * dim / 2) as f64);
    }
    Ok(loss)
}

/// Composite second-stage loss: refined-pose term plus `w_s1` times the
/// coarse-pose term.
pub fn loss_stage2(
    t: &Tape,
    refined: &[Vec<Var>],
    coarse: &[Vec<Var>],
    gt: &[Vec<Var>],
    w_s1: f64,
    per_joint_mean: bool,
) -> Result<Var, TrainError> {
    let mse2 = loss_stage1(t, refined, gt, per_joint_mean)?;
    let mse1 = loss_stage1(t, coarse, gt, per_joint_mean)?;
    Ok(t.add(mse2, t.scale(mse1, w_s1)))
}

/// One loss-curve entry.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub iteration: usize,
    pub stage: u8,
    pub loss: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub rows: Vec<LossRow>,
}

impl TrainReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.rows.last().map(|r| r.loss)
    }
}

/// Render the loss curve as `iteration,stage,loss` CSV.
pub fn loss_csv(rows: &[LossRow]) -> String {
    let mut out = String::from("iteration,stage,loss\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.iteration, r.stage, r.loss));
    }
    out
}

/// Ground-truth future poses of `clip` as tape leaves, `[step][person]`.
pub fn future_pose_leaves(t: &Tape, clip: &SceneClip) -> Vec<Vec<Var>> {
    (0..clip.t2)
        .map(|step| {
            clip.tracks
                .iter()
                .map(|tr| t.leaf1(Array1::from_vec(tr.poses[clip.t1 + step].flat())))
                .collect()
        })
        .collect()
}

/// Forward pass and loss for one clip under the configured stage.
fn clip_loss(
    model: &PoseModel,
    t: &Tape,
    vars: &[Var],
    clip: &SceneClip,
    cfg: &TrainConfig,
    gumbel: Option<&mut ChaCha8Rng>,
) -> Result<Var, TrainError> {
    let mut gumbel = gumbel;
    let gt = future_pose_leaves(t, clip);
    let snap = model.encode_observations(t, vars, clip, cfg.temperature, gumbel.as_deref_mut())?;
    let teacher = (cfg.stage == 1).then_some(gt.as_slice());
    let rollout = model.rollout_coarse(
        t,
        vars,
        snap,
        clip.t2,
        teacher,
        cfg.temperature,
        gumbel.as_deref_mut(),
    )?;
    if cfg.stage == 1 {
        loss_stage1(t, &rollout.poses, &gt, cfg.per_joint_mean)
    } else {
        let refined = match model.kind {
            ModelKind::Mg => model.refine_poses(t, vars, &rollout.poses)?,
            _ => rollout.poses.clone(),
        };
        loss_stage2(t, &refined, &rollout.poses, &gt, cfg.w_s1, cfg.per_joint_mean)
    }
}

const GUMBEL_SALT: u64 = 0x6c75_6d62_6567_2121;

/// Run `cfg.epochs` epochs starting at `start_epoch` with an existing
/// optimizer. Batch composition depends only on `(seed, epoch)`, so a run
/// interrupted at an epoch boundary and resumed with the saved optimizer
/// state reproduces the uninterrupted run exactly.
pub fn train_resumable(
    model: &mut PoseModel,
    clips: &[SceneClip],
    cfg: &TrainConfig,
    opt: &mut Adam,
    start_epoch: usize,
) -> Result<TrainReport, TrainError> {
    cfg.validate()?;
    if clips.is_empty() {
        return Err(TrainError::BadConfig("no training clips".into()));
    }
    let batches_per_epoch = clips.len().div_ceil(cfg.batch);
    let mut report = TrainReport::default();
    for epoch in start_epoch..start_epoch + cfg.epochs {
        let mut order: Vec<usize> = (0..clips.len()).collect();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        shuffle_rng.set_stream(epoch as u64);
        order.shuffle(&mut shuffle_rng);
        let mut gumbel_rng = cfg.gumbel.then(|| {
            let mut r = ChaCha8Rng::seed_from_u64(cfg.seed ^ GUMBEL_SALT);
            r.set_stream(epoch as u64);
            r
        });
        for (bi, batch) in order.chunks(cfg.batch).enumerate() {
            let iteration = epoch * batches_per_epoch + bi;
            let t = Tape::new();
            let vars = model.store.bind(&t);
            let mut losses = Vec::with_capacity(batch.len());
            for &ci in batch {
                losses.push(clip_loss(model, &t, &vars, &clips[ci], cfg, gumbel_rng.as_mut())?);
            }
            let loss = t.scale(t.add_n(&losses), 1.0 / batch.len() as f64);
            let loss_val = t.scalar(loss);
            if !loss_val.is_finite() {
                return Err(TrainError::NonFinite { iteration, loss: loss_val });
            }
            let grads = t.backward(loss);
            let mut grad_vec = model.store.collect_grads(&grads, &vars);
            if cfg.stage == 1 {
                for id in model.refiner_param_ids() {
                    grad_vec[id.0].fill(0.0);
                }
            }
            clip_global_norm(&mut grad_vec, cfg.clip_norm);
            let post: f64 = grad_vec
                .iter()
                .map(|g| g.iter().map(|x| x * x).sum::<f64>())
                .sum::<f64>()
                .sqrt();
            assert!(
                post <= cfg.clip_norm + 1e-9,
                "post-clip gradient norm {post} exceeds ceiling {}",
                cfg.clip_norm
            );
            opt.step(&mut model.store, &grad_vec);
            report.rows.push(LossRow { iteration, stage: cfg.stage, loss: loss_val });
        }
    }
    Ok(report)
}

/// Train from scratch with a fresh optimizer.
pub fn train(
    model: &mut PoseModel,
    clips: &[SceneClip],
    cfg: &TrainConfig,
) -> Result<TrainReport, TrainError> {
    let mut opt = Adam::new(&model.store, cfg.lr);
    train_resumable(model, clips, cfg, &mut opt, 0)
}
