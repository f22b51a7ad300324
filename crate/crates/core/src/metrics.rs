//! Evaluation metrics: piecewise joint score, per-step pose MSE, image
//! MSE/PSNR over frame sequences, and a classifier-based action evaluation.
//!
//! All metrics are pure functions of their inputs (the action classifier is
//! seeded), so evaluation reports are reproducible byte for byte.

use crate::ad::{Tape, Var};
use crate::nn::{Adam, Linear, LstmCell, ParamStore};
use crate::pose_data::SceneClip;
use image::RgbImage;
use ndarray::Array1;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("{what}: length mismatch ({a} vs {b})")]
    LengthMismatch { what: &'static str, a: usize, b: usize },
    #[error("bad metric parameters: {0}")]
    BadParams(String),
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("bad labels: {0}")]
    BadLabels(String),
}

/// Tolerance parameters of the joint score. Distances are measured in
/// pixels at `resolution`; normalized coordinates are scaled by
/// `resolution - 1` before the distance is taken (matching rasterization).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointScoreParams {
    pub mu: f64,
    pub sigma_sq: f64,
    pub resolution: usize,
}

impl Default for JointScoreParams {
    fn default() -> Self {
        JointScoreParams { mu: 5.0, sigma_sq: 72.0, resolution: 256 }
    }
}

impl JointScoreParams {
    pub fn validate(&self) -> Result<(), MetricsError> {
        if self.mu < 0.0 {
            return Err(MetricsError::BadParams(format!("mu must be >= 0, got {}", self.mu)));
        }
        if !(self.sigma_sq > 0.0) {
            return Err(MetricsError::BadParams(format!(
                "sigma_sq must be > 0, got {}",
                self.sigma_sq
            )));
        }
        if self.resolution < 2 {
            return Err(MetricsError::BadParams(format!(
                "resolution must be >= 2, got {}",
                self.resolution
            )));
        }
        Ok(())
    }
}

/// Score a pixel-space error distance: 1 inside the tolerance radius,
/// a Gaussian falloff beyond it (continuous at the boundary).
pub fn joint_score_from_distance(dist: f64, params: &JointScoreParams) -> f64 {
    if dist < params.mu {
        1.0
    } else {
        (-(dist - params.mu).powi(2) / (2.0 * params.sigma_sq)).exp()
    }
}

/// Score one predicted joint against its reference, both in normalized
/// [0,1] coordinates.
pub fn joint_score(pred: (f64, f64), reference: (f64, f64), params: &JointScoreParams) -> f64 {
    let s = (params.resolution - 1) as f64;
    let dx = (pred.0 - reference.0) * s;
    let dy = (pred.1 - reference.1) * s;
    joint_score_from_distance(dx.hypot(dy), params)
}

/// One prediction step's aggregate quality.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepEval {
    /// 0-based index into the prediction horizon.
    pub step: usize,
    /// Mean over persons and joints of the squared joint error, in
    /// normalized coordinate units.
    pub mse: f64,
    /// Mean joint score over persons and joints.
    pub joint_score: f64,
}

/// Per-step pose quality of a forecast. Inputs are `[person][step][2J]`
/// (the forecast-result layout); the reference must match exactly.
pub fn sequence_pose_eval(
    pred: &[Vec<Vec<f64>>],
    reference: &[Vec<Vec<f64>>],
    params: &JointScoreParams,
) -> Result<Vec<StepEval>, MetricsError> {
    params.validate()?;
    if pred.len() != reference.len() {
        return Err(MetricsError::LengthMismatch {
            what: "persons",
            a: pred.len(),
            b: reference.len(),
        });
    }
    if pred.is_empty() {
        return Err(MetricsError::EmptyInput("no persons"));
    }
    let t2 = pred[0].len();
    let mut rows = Vec::with_capacity(t2);
    for step in 0..t2 {
        let mut se_sum = 0.0;
        let mut score_sum = 0.0;
        let mut joints = 0usize;
        for (pp, rp) in pred.iter().zip(reference) {
            if pp.len() != t2 || rp.len() != t2 {
                return Err(MetricsError::LengthMismatch {
                    what: "steps",
                    a: pp.len(),
                    b: rp.len(),
                });
            }
            let (ps, rs) = (&pp[step], &rp[step]);
            if ps.len() != rs.len() || ps.len() % 2 != 0 {
                return Err(MetricsError::LengthMismatch {
                    what: "coordinates",
                    a: ps.len(),
                    b: rs.len(),
                });
            }
            for j in 0..ps.len() / 2 {
                let d = (ps[2 * j] - rs[2 * j], ps[2 * j + 1] - rs[2 * j + 1]);
                se_sum += d.0 * d.0 + d.1 * d.1;
                score_sum +=
                    joint_score((ps[2 * j], ps[2 * j + 1]), (rs[2 * j], rs[2 * j + 1]), params);
                joints += 1;
            }
        }
        rows.push(StepEval {
            step,
            mse: se_sum / joints as f64,
            joint_score: score_sum / joints as f64,
        });
    }
    Ok(rows)
}

/// Ground-truth future poses of a clip in the forecast-result layout
/// `[person][step][2J]`.
pub fn future_ground_truth(clip: &SceneClip) -> Vec<Vec<Vec<f64>>> {
    clip.tracks
        .iter()
        .map(|tr| (0..clip.t2).map(|s| tr.poses[clip.t1 + s].flat()).collect())
        .collect()
}

/// Mean squared error (8-bit scale) and PSNR over aligned frame sequences.
/// A perfect match has MSE 0; its PSNR is infinite and reported as `None`.
pub fn image_mse_psnr(
    generated: &[RgbImage],
    goal: &[RgbImage],
) -> Result<(f64, Option<f64>), MetricsError> {
    if generated.len() != goal.len() {
        return Err(MetricsError::LengthMismatch {
            what: "frames",
            a: generated.len(),
            b: goal.len(),
        });
    }
    if generated.is_empty() {
        return Err(MetricsError::EmptyInput("no frames"));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (a, b) in generated.iter().zip(goal) {
        if a.dimensions() != b.dimensions() {
            return Err(MetricsError::LengthMismatch {
                what: "frame pixels",
                a: (a.width() * a.height()) as usize,
                b: (b.width() * b.height()) as usize,
            });
        }
        for (pa, pb) in a.pixels().zip(b.pixels()) {
            for c in 0..3 {
                let d = pa.0[c] as f64 - pb.0[c] as f64;
                sum += d * d;
                count += 1;
            }
        }
    }
    let mse = sum / count as f64;
    let psnr = if mse == 0.0 { None } else { Some(10.0 * (255.0 * 255.0 / mse).log10()) };
    Ok((mse, psnr))
}

/// Rand index between two labelings of the same items: the fraction of
/// item pairs on which the labelings agree about co-membership. 1.0 means
/// identical partitions up to label renaming.
pub fn rand_index(a: &[usize], b: &[usize]) -> Result<f64, MetricsError> {
    if a.len() != b.len() {
        return Err(MetricsError::LengthMismatch { what: "labelings", a: a.len(), b: b.len() });
    }
    if a.len() < 2 {
        return Err(MetricsError::EmptyInput("need at least two items"));
    }
    let mut agree = 0usize;
    let mut total = 0usize;
    for i in 0..a.len() {
        for j in i + 1..a.len() {
            let same_a = a[i] == a[j];
            let same_b = b[i] == b[j];
            agree += usize::from(same_a == same_b);
            total += 1;
        }
    }
    Ok(agree as f64 / total as f64)
}

/// One classifier sample: per-step feature vectors plus an action label.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LabeledSequence {
    pub steps: Vec<Vec<f64>>,
    pub label: i64,
}

/// Action-classifier evaluation settings.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ActionEvalConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ActionEvalConfig {
    fn default() -> Self {
        ActionEvalConfig { hidden: 16, epochs: 150, lr: 0.05, seed: 0 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ActionEvalReport {
    /// Accuracy over all test sequences.
    pub overall: f64,
    /// Accuracy over test sequences whose true label is not the training
    /// set's majority class.
    pub non_majority: f64,
    /// The training set's most frequent label (ties broken toward the
    /// smaller label value).
    pub majority_label: i64,
    pub test_count: usize,
    pub non_majority_count: usize,
}

struct ActionClassifier {
    store: ParamStore,
    cell: LstmCell,
    head: Linear,
    labels: Vec<i64>,
    hidden: usize,
}

impl ActionClassifier {
    fn logits(&self, t: &Tape, vars: &[Var], sample: &LabeledSequence) -> Var {
        let mut h = t.zeros(&[self.hidden]);
        let mut c = t.zeros(&[self.hidden]);
        for step in &sample.steps {
            let x = t.leaf1(Array1::from_vec(step.clone()));
            let (h2, c2) = self.cell.step(t, vars, x, h, c);
            h = h2;
            c = c2;
        }
        self.head.apply(t, vars, h)
    }

    fn predict(&self, sample: &LabeledSequence) -> i64 {
        let t = Tape::new();
        let vars = self.store.bind(&t);
        let z = t.value(self.logits(&t, &vars, sample));
        let mut best = 0usize;
        for k in 1..z.len() {
            if z[[k]] > z[[best]] {
                best = k;
            }
        }
        self.labels[best]
    }
}

/// Train a small recurrent classifier on the real sequences and measure its
/// accuracy on the generated ones, overall and with the training majority
/// class excluded.
pub fn action_eval(
    train: &[LabeledSequence],
    test: &[LabeledSequence],
    cfg: &ActionEvalConfig,
) -> Result<ActionEvalReport, MetricsError> {
    if train.is_empty() {
        return Err(MetricsError::EmptyInput("no training sequences"));
    }
    if test.is_empty() {
        return Err(MetricsError::EmptyInput("no test sequences"));
    }
    let feat = train[0].steps.first().map(|s| s.len()).unwrap_or(0);
    if feat == 0 {
        return Err(MetricsError::EmptyInput("empty feature vectors"));
    }
    for s in train.iter().chain(test) {
        if s.steps.is_empty() || s.steps.iter().any(|st| st.len() != feat) {
            return Err(MetricsError::BadLabels(format!(
                "inconsistent feature width (expected {feat})"
            )));
        }
    }

    // label vocabulary and majority class come from the training set
    let mut labels: Vec<i64> = train.iter().map(|s| s.label).collect();
    labels.sort_unstable();
    labels.dedup();
    if labels.len() < 2 {
        return Err(MetricsError::BadLabels("need at least 2 classes".into()));
    }
    let majority_label = labels
        .iter()
        .copied()
        .max_by_key(|&l| {
            (
                train.iter().filter(|s| s.label == l).count(),
                std::cmp::Reverse(l),
            )
        })
        .expect("nonempty labels");
    for s in test {
        if !labels.contains(&s.label) {
            return Err(MetricsError::BadLabels(format!(
                "test label {} never seen in training",
                s.label
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParamStore::new();
    let cell = LstmCell::new(&mut store, &mut rng, "action.lstm", feat, cfg.hidden);
    let head = Linear::new(&mut store, &mut rng, "action.head", cfg.hidden, labels.len(), true);
    let mut clf = ActionClassifier { store, cell, head, labels: labels.clone(), hidden: cfg.hidden };

    let mut opt = Adam::new(&clf.store, cfg.lr);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        let mut erng = ChaCha8Rng::seed_from_u64(cfg.seed);
        erng.set_stream(epoch as u64 + 1);
        order.shuffle(&mut erng);
        let t = Tape::new();
        let vars = clf.store.bind(&t);
        let mut losses = Vec::with_capacity(train.len());
        for &si in &order {
            let sample = &train[si];
            let z = clf.logits(&t, &vars, sample);
            let p = t.softmax_t(z, 1.0);
            let y = labels.iter().position(|&l| l == sample.label).expect("vocab");
            losses.push(t.neg(t.ln(t.at(p, y))));
        }
        let loss = t.scale(t.add_n(&losses), 1.0 / losses.len() as f64);
        let grads = t.backward(loss);
        let gvec = clf.store.collect_grads(&grads, &vars);
        opt.step(&mut clf.store, &gvec);
    }

    let mut correct = 0usize;
    let mut nm_correct = 0usize;
    let mut nm_total = 0usize;
    for s in test {
        let hit = clf.predict(s) == s.label;
        correct += hit as usize;
        if s.label != majority_label {
            nm_total += 1;
            nm_correct += hit as usize;
        }
    }
    Ok(ActionEvalReport {
        overall: correct as f64 / test.len() as f64,
        non_majority: if nm_total == 0 { 0.0 } else { nm_correct as f64 / nm_total as f64 },
        majority_label,
        test_count: test.len(),
        non_majority_count: nm_total,
    })
}
