//! Hierarchical pose forecasting: person-level recurrent encoding, coarse
//! autoregressive rollout conditioned on group context, and joint-level
//! spatio-temporal refinement.
//!
//! Three model kinds share the person cell and coarse decoder:
//! `Mg` (dynamic groups + refiner), `Vanilla` (zero context, no refiner),
//! and `Social` (grid pooling of neighbor states as context, no refiner).

use crate::ad::{Tape, Var};
use crate::group_dynamics::{
    assign_groups, init_groups, soft_group_context, update_group_states, GroupAssignment,
    GroupError, GroupStates, InteractionParams,
};
use crate::nn::{Linear, LstmCell, ParamId, ParamStore, StLstmCell, xavier};
use crate::pose_data::{kinematic_order, SceneClip};
use ndarray::{Array1, ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Social pooling grid: GRID x GRID cells covering a window of
/// +-HALF_WIDTH (scene units) around the target person.
const SOCIAL_GRID: usize = 4;
const SOCIAL_HALF_WIDTH: f64 = 0.25;

#[derive(Debug, Error)]
pub enum ForecastError {
    #[error("clip must contain at least 1 observed frame")]
    NoObservations,
    #[error("forecast horizon must be at least 1")]
    BadHorizon,
    #[error("model kind {0:?} has no refiner")]
    NoRefiner(ModelKind),
    #[error("clip declares {expected} joints but model was built for {got}")]
    JointMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Group(#[from] GroupError),
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Mg,
    Vanilla,
    Social,
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ModelKind::Mg => "mg",
            ModelKind::Vanilla => "vanilla",
            ModelKind::Social => "social",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for ModelKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mg" => Ok(ModelKind::Mg),
            "vanilla" => Ok(ModelKind::Vanilla),
            "social" => Ok(ModelKind::Social),
            other => Err(format!("unknown model kind {other:?} (expected mg|vanilla|social)")),
        }
    }
}

/// State and projection sizes of the forecaster.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub j: usize,
    pub h_p: usize,
    pub g_size: usize,
    pub h_r: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { j: 14, h_p: 256, g_size: 256, h_r: 128 }
    }
}

struct MgParams {
    inter: InteractionParams,
    w_hg: ParamId,
    group: LstmCell,
}

struct RefinerParams {
    cell: StLstmCell,
    head: Linear,
}

/// The forecaster: shared person cell and coarse decoder plus the
/// kind-specific interaction machinery.
pub struct PoseModel {
    pub cfg: ModelConfig,
    pub kind: ModelKind,
    pub store: ParamStore,
    person: LstmCell,
    decoder: Linear,
    mg: Option<MgParams>,
    pool: Option<ParamId>,
    refiner: Option<RefinerParams>,
}

impl PoseModel {
    pub fn new(cfg: ModelConfig, kind: ModelKind, seed: u64) -> PoseModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let input = 2 * cfg.j + 4 + cfg.g_size;
        let person = LstmCell::new(&mut store, &mut rng, "person", input, cfg.h_p);
        let decoder = Linear::new(&mut store, &mut rng, "decoder", cfg.h_p + cfg.g_size, 2 * cfg.j, true);
        let mut mg = None;
        let mut pool = None;
        let mut refiner = None;
        match kind {
            ModelKind::Mg => {
                let inter = InteractionParams::new(&mut store, &mut rng, "inter", cfg.h_p);
                let w_hg = store.register(
                    "group_proj.w",
                    xavier(&mut rng, &[cfg.g_size, cfg.h_p], cfg.h_p, cfg.g_size),
                );
                let group = LstmCell::new(&mut store, &mut rng, "group", cfg.g_size, cfg.g_size);
                mg = Some(MgParams { inter, w_hg, group });
                let cell = StLstmCell::new(&mut store, &mut rng, "refiner", 2, cfg.h_r);
                // zero head: refinement starts as the identity
                let head = Linear {
                    w: store.register("refiner_head.w", ArrayD::zeros(IxDyn(&[2, cfg.h_r]))),
                    b: Some(store.register("refiner_head.b", ArrayD::zeros(IxDyn(&[2])))),
                };
                refiner = Some(RefinerParams { cell, head });
            }
            ModelKind::Social => {
                let pooled = SOCIAL_GRID * SOCIAL_GRID * cfg.h_p;
                pool = Some(store.register(
                    "pool.w",
                    xavier(&mut rng, &[cfg.g_size, pooled], pooled, cfg.g_size),
                ));
            }
            ModelKind::Vanilla => {}
        }
        PoseModel { cfg, kind, store, person, decoder, mg, pool, refiner }
    }

    /// Parameter indices belonging to the joint refiner (empty for kinds
    /// without one). Stage-1 training must not move these.
    pub fn refiner_param_ids(&self) -> Vec<ParamId> {
        match &self.refiner {
            Some(r) => {
                let mut ids = vec![r.cell.wx, r.cell.wht, r.cell.whs, r.cell.b, r.head.w];
                ids.extend(r.head.b);
                ids
            }
            None => Vec::new(),
        }
    }

    fn context(
        &self,
        t: &Tape,
        vars: &[Var],
        group: &Option<(GroupAssignment, GroupStates)>,
        person_h: &[Var],
        positions: &[[f64; 4]],
        i: usize,
    ) -> Var {
        match self.kind {
            ModelKind::Vanilla => t.zeros(&[self.cfg.g_size]),
            ModelKind::Social => social_context(
                t,
                vars[self.pool.expect("social model has pool weights").0],
                person_h,
                positions,
                i,
                self.cfg.h_p,
            ),
            ModelKind::Mg => {
                let (asg, states) = group.as_ref().expect("mg model tracks groups");
                soft_group_context(t, asg, states, i)
            }
        }
    }

    /// Advance assignment and group states from freshly updated person states.
    fn step_groups(
        &self,
        t: &Tape,
        vars: &[Var],
        group: Option<(GroupAssignment, GroupStates)>,
        person_h: &[Var],
        temperature: f64,
        gumbel: Option<&mut ChaCha8Rng>,
    ) -> Result<Option<(GroupAssignment, GroupStates)>, ForecastError> {
        let Some(mg) = &self.mg else { return Ok(None) };
        let (prev_asg, prev_states) = group.expect("mg model tracks groups");
        let iv = mg.inter.bind(vars);
        let asg = assign_groups(t, person_h, &prev_asg, &iv, temperature, gumbel)?;
        let states = update_group_states(
            t,
            &asg,
            person_h,
            &prev_states,
            vars[mg.w_hg.0],
            &mg.group,
            vars,
        )?;
        Ok(Some((asg, states)))
    }

    /// Run the person cells over the observed frames, re-estimating groups
    /// after every step. Returns the final-step snapshot.
    pub fn encode_observations(
        &self,
        t: &Tape,
        vars: &[Var],
        clip: &SceneClip,
        temperature: f64,
        mut gumbel: Option<&mut ChaCha8Rng>,
    ) -> Result<Snapshot, ForecastError> {
        if clip.t1 < 1 {
            return Err(ForecastError::NoObservations);
        }
        if clip.j != self.cfg.j {
            return Err(ForecastError::JointMismatch { expected: clip.j, got: self.cfg.j });
        }
        let n = clip.n();
        let mut person_h: Vec<Var> = (0..n).map(|_| t.zeros(&[self.cfg.h_p])).collect();
        let mut person_c: Vec<Var> = (0..n).map(|_| t.zeros(&[self.cfg.h_p])).collect();
        let mut group = match self.kind {
            ModelKind::Mg => {
                let asg = init_groups(t, n)?;
                let counts = asg.counts();
                let states = GroupStates::zeros(t, n - 1, self.cfg.g_size, counts);
                Some((asg, states))
            }
            _ => None,
        };
        let mut history = Vec::new();
        if let Some((asg, _)) = &group {
            history.push(AssignmentRecord::from_assignment(t, asg));
        }

        let mut last_pose: Vec<Var> = Vec::new();
        let mut last_loc: Vec<[f64; 4]> = Vec::new();
        for step in 0..clip.t1 {
            let positions: Vec<[f64; 4]> = clip.tracks.iter().map(|tr| tr.location[step]).collect();
            let pose_vars: Vec<Var> = clip
                .tracks
                .iter()
                .map(|tr| t.leaf1(Array1::from_vec(tr.poses[step].flat())))
                .collect();
            let mut new_h = Vec::with_capacity(n);
            let mut new_c = Vec::with_capacity(n);
            for i in 0..n {
                let ctx = self.context(t, vars, &group, &person_h, &positions, i);
                let loc = t.leaf1(Array1::from_vec(positions[i].to_vec()));
                let x = t.concat1(&[pose_vars[i], loc, ctx]);
                let (h, c) = self.person.step(t, vars, x, person_h[i], person_c[i]);
                new_h.push(h);
                new_c.push(c);
            }
            person_h = new_h;
            person_c = new_c;
            group = self.step_groups(t, vars, group, &person_h, temperature, gumbel.as_deref_mut())?;
            if let Some((asg, _)) = &group {
                history.push(AssignmentRecord::from_assignment(t, asg));
            }
            if step + 1 == clip.t1 {
                last_pose = pose_vars;
                last_loc = positions;
            }
        }
        Ok(Snapshot { person_h, person_c, group, last_pose, last_loc, history })
    }

    /// Autoregressive coarse prediction for `t2` steps. The person cell
    /// consumes the previous pose (its own prediction, or the ground truth
    /// when `teacher` is given), the last observed location, and the group
    /// context; the decoder then emits the step's pose from the new person
    /// state and that context, and group states advance.
    pub fn rollout_coarse(
        &self,
        t: &Tape,
        vars: &[Var],
        snapshot: Snapshot,
        t2: usize,
        teacher: Option<&[Vec<Var>]>,
        temperature: f64,
        mut gumbel: Option<&mut ChaCha8Rng>,
    ) -> Result<Rollout, ForecastError> {
        if t2 < 1 {
            return Err(ForecastError::BadHorizon);
        }
        if let Some(teacher) = teacher {
            assert!(teacher.len() + 1 >= t2, "teacher sequence shorter than horizon");
        }
        let Snapshot { mut person_h, mut person_c, mut group, last_pose, last_loc, mut history } =
            snapshot;
        let n = person_h.len();
        let mut poses: Vec<Vec<Var>> = Vec::with_capacity(t2);
        let mut prev_pose: Vec<Var> = last_pose.clone();
        for step in 0..t2 {
            let mut new_h = Vec::with_capacity(n);
            let mut new_c = Vec::with_capacity(n);
            let mut step_poses = Vec::with_capacity(n);
            let mut contexts = Vec::with_capacity(n);
            for i in 0..n {
                let ctx = self.context(t, vars, &group, &person_h, &last_loc, i);
                let loc = t.leaf1(Array1::from_vec(last_loc[i].to_vec()));
                let x = t.concat1(&[prev_pose[i], loc, ctx]);
                let (h, c) = self.person.step(t, vars, x, person_h[i], person_c[i]);
                new_h.push(h);
                new_c.push(c);
                contexts.push(ctx);
            }
            for i in 0..n {
                let dec_in = t.concat1(&[new_h[i], contexts[i]]);
                step_poses.push(self.decoder.apply(t, vars, dec_in));
            }
            person_h = new_h;
            person_c = new_c;
            group = self.step_groups(t, vars, group, &person_h, temperature, gumbel.as_deref_mut())?;
            if let Some((asg, _)) = &group {
                history.push(AssignmentRecord::from_assignment(t, asg));
            }
            prev_pose = match teacher {
                Some(gt) if step + 1 < t2 => gt[step].clone(),
                _ => step_poses.clone(),
            };
            poses.push(step_poses);
        }
        Ok(Rollout {
            poses,
            snapshot: Snapshot { person_h, person_c, group, last_pose, last_loc, history: Vec::new() },
            history,
        })
    }

    /// Joint-level refinement: a spatio-temporal cell walks the schedule of
    /// [`refine_schedule`] per person, reading each coarse joint coordinate
    /// and the states of (same joint, previous step) and (previous joint,
    /// same step), and emits an additive delta per joint.
    pub fn refine_poses(
        &self,
        t: &Tape,
        vars: &[Var],
        coarse: &[Vec<Var>],
    ) -> Result<Vec<Vec<Var>>, ForecastError> {
        let refiner = self.refiner.as_ref().ok_or(ForecastError::NoRefiner(self.kind))?;
        let j = self.cfg.j;
        let t2 = coarse.len();
        let n = if t2 > 0 { coarse[0].len() } else { 0 };
        let schedule = refine_schedule(j, t2);
        let mut refined: Vec<Vec<Var>> = vec![Vec::with_capacity(n); t2];
        for i in 0..n {
            let zero = t.zeros(&[self.cfg.h_r]);
            let mut h_time: Vec<Var> = vec![zero; j];
            let mut c_time: Vec<Var> = vec![zero; j];
            let mut deltas: Vec<Vec<Option<Var>>> = vec![vec![None; j]; t2];
            let mut h_spatial = zero;
            let mut c_spatial = zero;
            let mut current_step = 0usize;
            for &(step, joint) in &schedule {
                if step != current_step {
                    current_step = step;
                    h_spatial = zero;
                    c_spatial = zero;
                }
                let xj = t.slice1(coarse[step][i], 2 * joint, 2 * joint + 2);
                let (h, c) = refiner.cell.step(
                    t,
                    vars,
                    xj,
                    h_time[joint],
                    c_time[joint],
                    h_spatial,
                    c_spatial,
                );
                deltas[step][joint] = Some(refiner.head.apply(t, vars, h));
                h_time[joint] = h;
                c_time[joint] = c;
                h_spatial = h;
                c_spatial = c;
            }
            for (step, row) in deltas.into_iter().enumerate() {
                let parts: Vec<Var> = row.into_iter().map(|d| d.expect("schedule covers all joints")).collect();
                let delta = t.concat1(&parts);
                refined[step].push(t.add(coarse[step][i], delta));
            }
        }
        Ok(refined)
    }

    /// Full pipeline on a fresh tape: encode, roll out `t2` steps closed
    /// loop, refine (identity for kinds without a refiner), extract values
    /// clamped to the unit square.
    pub fn forecast(
        &self,
        clip: &SceneClip,
        t2: usize,
        temperature: f64,
    ) -> Result<ForecastResult, ForecastError> {
        let t = Tape::new();
        let vars = self.store.bind(&t);
        let snap = self.encode_observations(&t, &vars, clip, temperature, None)?;
        let rollout = self.rollout_coarse(&t, &vars, snap, t2, None, temperature, None)?;
        let refined_vars = match self.kind {
            ModelKind::Mg => self.refine_poses(&t, &vars, &rollout.poses)?,
            _ => rollout.poses.clone(),
        };
        let n = clip.n();
        let extract = |vs: &[Vec<Var>]| -> Vec<Vec<Vec<f64>>> {
            (0..n)
                .map(|i| {
                    (0..t2)
                        .map(|step| {
                            t.value(vs[step][i])
                                .iter()
                                .map(|&x| x.clamp(0.0, 1.0))
                                .collect()
                        })
                        .collect()
                })
                .collect()
        };
        Ok(ForecastResult {
            coarse: extract(&rollout.poses),
            refined: extract(&refined_vars),
            assignments: rollout.history,
        })
    }
}

/// Pooled neighbor context: the window of +-0.25 scene units around person
/// i, cut into a 4x4 grid; neighbor hidden states are summed per cell from
/// their box centers, concatenated, and linearly embedded (no bias, so an
/// empty window yields a zero context).
pub fn social_context(
    t: &Tape,
    w_pool: Var,
    person_h: &[Var],
    positions: &[[f64; 4]],
    i: usize,
    h_p: usize,
) -> Var {
    let cell_size = 2.0 * SOCIAL_HALF_WIDTH / SOCIAL_GRID as f64;
    let (cx, cy) = (positions[i][0], positions[i][1]);
    let mut cells: Vec<Vec<Var>> = vec![Vec::new(); SOCIAL_GRID * SOCIAL_GRID];
    for (jp, pos) in positions.iter().enumerate() {
        if jp == i {
            continue;
        }
        let dx = pos[0] - cx + SOCIAL_HALF_WIDTH;
        let dy = pos[1] - cy + SOCIAL_HALF_WIDTH;
        if !(0.0..2.0 * SOCIAL_HALF_WIDTH).contains(&dx)
            || !(0.0..2.0 * SOCIAL_HALF_WIDTH).contains(&dy)
        {
            continue;
        }
        let col = ((dx / cell_size) as usize).min(SOCIAL_GRID - 1);
        let row = ((dy / cell_size) as usize).min(SOCIAL_GRID - 1);
        cells[row * SOCIAL_GRID + col].push(person_h[jp]);
    }
    let parts: Vec<Var> = cells
        .into_iter()
        .map(|members| {
            if members.is_empty() {
                t.zeros(&[h_p])
            } else {
                t.add_n(&members)
            }
        })
        .collect();
    let pooled = t.concat1(&parts);
    t.matvec(w_pool, pooled)
}

/// Refiner visit order: time-major over the prediction steps, joints in
/// kinematic-tree depth-first order within each step.
pub fn refine_schedule(j: usize, t2: usize) -> Vec<(usize, usize)> {
    let order = kinematic_order(j);
    (0..t2)
        .flat_map(|step| order.iter().map(move |&jx| (step, jx)))
        .collect()
}

/// Model state after consuming the observed frames.
pub struct Snapshot {
    pub person_h: Vec<Var>,
    pub person_c: Vec<Var>,
    pub group: Option<(GroupAssignment, GroupStates)>,
    /// Observed pose at the last input frame, per person.
    pub last_pose: Vec<Var>,
    /// Observed location at the last input frame, held fixed during rollout.
    pub last_loc: Vec<[f64; 4]>,
    /// Assignment after initialization and after every encode step.
    pub history: Vec<AssignmentRecord>,
}

/// Coarse rollout output: `poses[step][person]` plus the final model state
/// and the accumulated assignment history.
pub struct Rollout {
    pub poses: Vec<Vec<Var>>,
    pub snapshot: Snapshot,
    pub history: Vec<AssignmentRecord>,
}

/// One step's group assignment, extracted off the tape.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AssignmentRecord {
    pub soft: Vec<Vec<f64>>,
    pub hard: Vec<usize>,
}

impl AssignmentRecord {
    fn from_assignment(t: &Tape, asg: &GroupAssignment) -> Self {
        AssignmentRecord {
            soft: asg.soft.iter().map(|&row| t.value(row).iter().copied().collect()).collect(),
            hard: asg.hard.clone(),
        }
    }
}

/// Forecast output: `[person][step][2J]` coordinates clamped to the unit
/// square, plus the per-step assignment history (empty for kinds that do
/// not track groups). `refined` equals `coarse` plus the refiner's deltas.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ForecastResult {
    pub coarse: Vec<Vec<Vec<f64>>>,
    pub refined: Vec<Vec<Vec<f64>>>,
    pub assignments: Vec<AssignmentRecord>,
}
