//! Scene data model: poses, tracks, clips, posemap rasterization, JSONL
//! ingestion, and a synthetic multi-person scene generator used as the
//! ground-truth oracle in desk-scale experiments.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub const DEFAULT_J: usize = 14;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed clip record: {msg}")]
    Malformed { line: usize, msg: String },
    #[error("invalid synthesis config: {0}")]
    BadConfig(String),
    #[error("{path}: {msg}")]
    BadImage { path: PathBuf, msg: String },
}

/// One person's pose in one frame: J joint positions normalized to the
/// person crop, plus per-joint visibility.
#[derive(Clone, Debug, PartialEq)]
pub struct Pose {
    pub joints: Vec<(f64, f64)>,
    pub visibility: Vec<bool>,
}

impl Pose {
    pub fn len(&self) -> usize {
        self.joints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.joints.is_empty()
    }

    pub fn visible_count(&self) -> usize {
        self.visibility.iter().filter(|&&v| v).count()
    }

    fn validate(&self, j: usize) -> Result<(), String> {
        if self.joints.len() != j || self.visibility.len() != j {
            return Err(format!("expected {j} joints, found {}", self.joints.len()));
        }
        for (idx, (&(x, y), &vis)) in self.joints.iter().zip(&self.visibility).enumerate() {
            if vis && !((0.0..=1.0).contains(&x) && (0.0..=1.0).contains(&y)) {
                return Err(format!("visible joint {idx} at ({x}, {y}) outside [0,1]"));
            }
        }
        Ok(())
    }

    /// Flatten to `[x_0, y_0, x_1, y_1, ...]`.
    pub fn flat(&self) -> Vec<f64> {
        self.joints.iter().flat_map(|&(x, y)| [x, y]).collect()
    }

    pub fn from_flat(flat: &[f64]) -> Pose {
        assert!(flat.len() % 2 == 0, "flat pose length must be even");
        let joints: Vec<(f64, f64)> = flat.chunks(2).map(|c| (c[0], c[1])).collect();
        let visibility = vec![true; joints.len()];
        Pose { joints, visibility }
    }
}

/// One person across a whole clip: a pose and a scene-normalized
/// `(cx, cy, w, h)` box per timestep.
#[derive(Clone, Debug, PartialEq)]
pub struct PersonTrack {
    pub person_id: i64,
    pub poses: Vec<Pose>,
    pub location: Vec<[f64; 4]>,
}

/// A multi-person clip: `T1` observed frames followed by `T2` future frames.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneClip {
    pub clip_id: String,
    pub t1: usize,
    pub t2: usize,
    pub j: usize,
    pub tracks: Vec<PersonTrack>,
    pub labels: Option<Vec<i64>>,
    pub true_groups: Option<Vec<usize>>,
}

impl SceneClip {
    pub fn n(&self) -> usize {
        self.tracks.len()
    }

    pub fn total_len(&self) -> usize {
        self.t1 + self.t2
    }

    pub fn validate(&self) -> Result<(), String> {
        let t = self.total_len();
        if self.tracks.len() < 2 {
            return Err(format!("clip has {} tracks, need at least 2", self.tracks.len()));
        }
        for tr in &self.tracks {
            if tr.poses.len() != t {
                return Err(format!(
                    "person {} has {} poses, clip spans {t} steps",
                    tr.person_id,
                    tr.poses.len()
                ));
            }
            if tr.location.len() != t {
                return Err(format!(
                    "person {} has {} boxes, clip spans {t} steps",
                    tr.person_id,
                    tr.location.len()
                ));
            }
            for pose in &tr.poses {
                pose.validate(self.j)
                    .map_err(|e| format!("person {}: {e}", tr.person_id))?;
            }
        }
        if let Some(labels) = &self.labels {
            if labels.len() != self.tracks.len() {
                return Err(format!(
                    "{} labels for {} tracks",
                    labels.len(),
                    self.tracks.len()
                ));
            }
        }
        if let Some(groups) = &self.true_groups {
            if groups.len() != self.tracks.len() {
                return Err(format!(
                    "{} group ids for {} tracks",
                    groups.len(),
                    self.tracks.len()
                ));
            }
        }
        Ok(())
    }
}

/// Binary joint-dot image: pixels are 0 or 255.
#[derive(Clone, Debug, PartialEq)]
pub struct PosemapImage {
    pub h: usize,
    pub w: usize,
    pub pixels: Vec<u8>,
}

impl PosemapImage {
    pub fn white_count(&self) -> usize {
        self.pixels.iter().filter(|&&p| p > 0).count()
    }

    /// (H, W) array with values in {0, 1}.
    pub fn to_array(&self) -> Array2<f64> {
        Array2::from_shape_vec(
            (self.h, self.w),
            self.pixels.iter().map(|&p| if p > 0 { 1.0 } else { 0.0 }).collect(),
        )
        .expect("posemap dims")
    }

    /// (1, H, W) tensor with values in {0, 1}.
    pub fn to_tensor(&self) -> Array3<f64> {
        self.to_array().insert_axis(ndarray::Axis(0))
    }
}

// ---- wire format ----

#[derive(Serialize, Deserialize)]
struct WireTrack {
    person_id: i64,
    boxes: Vec<[f64; 4]>,
    poses: Vec<Vec<[f64; 3]>>,
}

#[derive(Serialize, Deserialize)]
struct WireClip {
    clip_id: String,
    #[serde(rename = "T1")]
    t1: usize,
    #[serde(rename = "T2")]
    t2: usize,
    #[serde(rename = "J")]
    j: usize,
    tracks: Vec<WireTrack>,
    #[serde(skip_serializing_if = "Option::is_none")]
    labels: Option<Vec<i64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    true_groups: Option<Vec<usize>>,
}

impl From<&SceneClip> for WireClip {
    fn from(c: &SceneClip) -> WireClip {
        WireClip {
            clip_id: c.clip_id.clone(),
            t1: c.t1,
            t2: c.t2,
            j: c.j,
            tracks: c
                .tracks
                .iter()
                .map(|tr| WireTrack {
                    person_id: tr.person_id,
                    boxes: tr.location.clone(),
                    poses: tr
                        .poses
                        .iter()
                        .map(|p| {
                            p.joints
                                .iter()
                                .zip(&p.visibility)
                                .map(|(&(x, y), &v)| [x, y, if v { 1.0 } else { 0.0 }])
                                .collect()
                        })
                        .collect(),
                })
                .collect(),
            labels: c.labels.clone(),
            true_groups: c.true_groups.clone(),
        }
    }
}

impl From<WireClip> for SceneClip {
    fn from(w: WireClip) -> SceneClip {
        SceneClip {
            clip_id: w.clip_id,
            t1: w.t1,
            t2: w.t2,
            j: w.j,
            tracks: w
                .tracks
                .into_iter()
                .map(|tr| PersonTrack {
                    person_id: tr.person_id,
                    location: tr.boxes,
                    poses: tr
                        .poses
                        .into_iter()
                        .map(|joints| Pose {
                            visibility: joints.iter().map(|t| t[2] != 0.0).collect(),
                            joints: joints.iter().map(|t| (t[0], t[1])).collect(),
                        })
                        .collect(),
                })
                .collect(),
            labels: w.labels,
            true_groups: w.true_groups,
        }
    }
}

/// Clips that passed validation plus the count of clips that did not.
#[derive(Debug)]
pub struct LoadOutcome {
    pub clips: Vec<SceneClip>,
    pub skipped: usize,
    pub warnings: Vec<String>,
}

/// Read line-delimited JSON clips. A line that is not valid JSON is a hard
/// error; a structurally valid clip that fails the data invariants is
/// skipped and counted.
pub fn load_clips(path: &Path) -> Result<LoadOutcome, DataError> {
    let file = std::fs::File::open(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let reader = BufReader::new(file);
    let mut clips = Vec::new();
    let mut warnings = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let wire: WireClip = serde_json::from_str(&line).map_err(|e| DataError::Malformed {
            line: idx + 1,
            msg: e.to_string(),
        })?;
        let clip: SceneClip = wire.into();
        match clip.validate() {
            Ok(()) => clips.push(clip),
            Err(msg) => warnings.push(format!("line {}: clip {:?} skipped: {msg}", idx + 1, clip.clip_id)),
        }
    }
    Ok(LoadOutcome {
        clips,
        skipped: warnings.len(),
        warnings,
    })
}

/// Write clips as line-delimited JSON, replacing any existing file.
pub fn write_clips(clips: &[SceneClip], path: &Path) -> Result<(), DataError> {
    let mut out = std::fs::File::create(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    for clip in clips {
        let wire: WireClip = clip.into();
        let line = serde_json::to_string(&wire).expect("clip serialization cannot fail");
        writeln!(out, "{line}").map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })?;
    }
    Ok(())
}

/// Drop tracks whose worst frame has fewer than `min_joints` visible joints,
/// then drop clips left with fewer than `min_targets` tracks. Labels and
/// group metadata stay aligned with the surviving tracks.
pub fn filter_clips(clips: Vec<SceneClip>, min_joints: usize, min_targets: usize) -> Vec<SceneClip> {
    assert!(min_targets >= 1, "min_targets must be at least 1");
    clips
        .into_iter()
        .filter_map(|mut clip| {
            let keep: Vec<bool> = clip
                .tracks
                .iter()
                .map(|tr| tr.poses.iter().all(|p| p.visible_count() >= min_joints))
                .collect();
            let select = |v: &mut Vec<_>| {
                let mut it = keep.iter();
                v.retain(|_| *it.next().unwrap());
            };
            select(&mut clip.tracks);
            if let Some(labels) = &mut clip.labels {
                let mut it = keep.iter();
                labels.retain(|_| *it.next().unwrap());
            }
            if let Some(groups) = &mut clip.true_groups {
                let mut it = keep.iter();
                groups.retain(|_| *it.next().unwrap());
            }
            (clip.tracks.len() >= min_targets).then_some(clip)
        })
        .collect()
}

/// Draw a white disk of the given radius at each visible joint on a black
/// canvas. Joint coordinates map to pixel centers via `round(x * (W-1))`,
/// with halves rounding away from zero.
pub fn rasterize_posemap(pose: &Pose, h: usize, w: usize, radius: usize) -> PosemapImage {
    assert!(h >= 8 && w >= 8, "posemap must be at least 8x8");
    assert!(radius >= 1, "radius must be at least 1");
    let mut pixels = vec![0u8; h * w];
    let r2 = (radius * radius) as i64;
    for (&(x, y), &vis) in pose.joints.iter().zip(&pose.visibility) {
        if !vis {
            continue;
        }
        let cx = (x * (w - 1) as f64).round() as i64;
        let cy = (y * (h - 1) as f64).round() as i64;
        let r = radius as i64;
        for dy in -r..=r {
            for dx in -r..=r {
                if dx * dx + dy * dy > r2 {
                    continue;
                }
                let (px, py) = (cx + dx, cy + dy);
                if px < 0 || py < 0 || px >= w as i64 || py >= h as i64 {
                    continue;
                }
                pixels[py as usize * w + px as usize] = 255;
            }
        }
    }
    PosemapImage { h, w, pixels }
}

pub fn save_posemap_png(map: &PosemapImage, path: &Path) -> Result<(), DataError> {
    let img = image::GrayImage::from_raw(map.w as u32, map.h as u32, map.pixels.clone())
        .expect("posemap buffer matches dims");
    img.save(path).map_err(|e| DataError::BadImage {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

pub fn load_posemap_png(path: &Path) -> Result<PosemapImage, DataError> {
    let img = image::open(path)
        .map_err(|e| DataError::BadImage {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let pixels = img.into_raw().iter().map(|&p| if p >= 128 { 255 } else { 0 }).collect();
    Ok(PosemapImage { h, w, pixels })
}

// ---- synthetic scenes ----

/// Configuration for [`synth_scene`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n: usize,
    pub t1: usize,
    pub t2: usize,
    pub j: usize,
    pub groups: usize,
    /// Standard deviation of per-person joint noise, in crop units.
    pub noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n: 6,
            t1: 6,
            t2: 5,
            j: DEFAULT_J,
            groups: 2,
            noise: 0.01,
        }
    }
}

/// Joint order for the default 14-joint skeleton:
/// head, neck, L/R shoulder, L/R elbow, L/R wrist, L/R hip, L/R knee, L/R ankle.
const SKELETON_14: [(f64, f64); 14] = [
    (0.50, 0.08), // head
    (0.50, 0.22), // neck
    (0.36, 0.26), // left shoulder
    (0.64, 0.26), // right shoulder
    (0.30, 0.44), // left elbow
    (0.70, 0.44), // right elbow
    (0.26, 0.60), // left wrist
    (0.74, 0.60), // right wrist
    (0.42, 0.58), // left hip
    (0.58, 0.58), // right hip
    (0.41, 0.76), // left knee
    (0.59, 0.76), // right knee
    (0.40, 0.94), // left ankle
    (0.60, 0.94), // right ankle
];

/// Depth-first traversal of the default skeleton tree rooted at the neck;
/// other joint counts fall back to index order (a simple chain).
pub fn kinematic_order(j: usize) -> Vec<usize> {
    if j == 14 {
        vec![1, 0, 2, 4, 6, 3, 5, 7, 8, 10, 12, 9, 11, 13]
    } else {
        (0..j).collect()
    }
}

/// Per-joint oscillation amplitude: extremities swing most.
fn joint_amplitude(j: usize, idx: usize) -> f64 {
    if j == 14 {
        match idx {
            6 | 7 | 12 | 13 => 0.055, // wrists, ankles
            4 | 5 | 10 | 11 => 0.035, // elbows, knees
            2 | 3 | 8 | 9 => 0.015,   // shoulders, hips
            _ => 0.008,               // head, neck
        }
    } else {
        0.015 + 0.04 * ((idx % 3) as f64) / 2.0
    }
}

fn rest_joint(j: usize, idx: usize) -> (f64, f64) {
    if j == 14 {
        SKELETON_14[idx]
    } else {
        // evenly spaced ring around the crop center
        let a = 2.0 * std::f64::consts::PI * idx as f64 / j as f64;
        (0.5 + 0.2 * a.cos(), 0.5 + 0.2 * a.sin())
    }
}

/// Generate one deterministic multi-person clip. Persons in the same true
/// group share a translation velocity and a phase-locked limb oscillation;
/// per-person Gaussian noise is added on top.
pub fn synth_scene(cfg: &SynthConfig, seed: u64) -> Result<SceneClip, DataError> {
    if cfg.n < 2 {
        return Err(DataError::BadConfig(format!("n = {} but need at least 2 people", cfg.n)));
    }
    if cfg.groups == 0 || cfg.groups > cfg.n - 1 {
        return Err(DataError::BadConfig(format!(
            "groups = {} not in 1..={} for n = {}",
            cfg.groups,
            cfg.n - 1,
            cfg.n
        )));
    }
    if cfg.t1 == 0 || cfg.t2 == 0 {
        return Err(DataError::BadConfig("t1 and t2 must be positive".into()));
    }
    if cfg.j == 0 {
        return Err(DataError::BadConfig("j must be positive".into()));
    }
    if !(cfg.noise >= 0.0) {
        return Err(DataError::BadConfig(format!("noise = {} must be non-negative", cfg.noise)));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t_total = cfg.t1 + cfg.t2;

    struct GroupMotion {
        vel: (f64, f64),
        omega: f64,
        phase: f64,
        // unit direction per joint
        dir: Vec<(f64, f64)>,
    }
    let motions: Vec<GroupMotion> = (0..cfg.groups)
        .map(|g| {
            let ang = rng.random_range(0.0..std::f64::consts::TAU);
            let speed = rng.random_range(0.008..0.018);
            let omega = 0.55 + 0.85 * g as f64 + rng.random_range(-0.08..0.08);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let dir = (0..cfg.j)
                .map(|_| {
                    let a = rng.random_range(0.0..std::f64::consts::TAU);
                    (a.cos(), a.sin())
                })
                .collect();
            GroupMotion { vel: (speed * ang.cos(), speed * ang.sin()), omega, phase, dir }
        })
        .collect();

    // contiguous group blocks over person slots, as even as possible
    let mut member_group: Vec<usize> = (0..cfg.n).map(|i| i * cfg.groups / cfg.n).collect();
    member_group.shuffle(&mut rng);

    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut tracks = Vec::with_capacity(cfg.n);
    for (pid, &g) in member_group.iter().enumerate() {
        let m = &motions[g];
        let start = (rng.random_range(0.28..0.52), rng.random_range(0.28..0.52));
        let (bw, bh) = (0.16, 0.3);
        let mut poses = Vec::with_capacity(t_total);
        let mut location = Vec::with_capacity(t_total);
        for t in 0..t_total {
            let osc = (m.omega * t as f64 + m.phase).sin();
            let joints: Vec<(f64, f64)> = (0..cfg.j)
                .map(|jx| {
                    let (rx, ry) = rest_joint(cfg.j, jx);
                    let amp = joint_amplitude(cfg.j, jx);
                    let (dx, dy) = m.dir[jx];
                    let nx = if cfg.noise > 0.0 { cfg.noise * normal.sample(&mut rng) } else { 0.0 };
                    let ny = if cfg.noise > 0.0 { cfg.noise * normal.sample(&mut rng) } else { 0.0 };
                    (
                        (rx + amp * osc * dx + nx).clamp(0.0, 1.0),
                        (ry + amp * osc * dy + ny).clamp(0.0, 1.0),
                    )
                })
                .collect();
            poses.push(Pose { visibility: vec![true; cfg.j], joints });
            location.push([
                (start.0 + m.vel.0 * t as f64).clamp(0.0, 1.0),
                (start.1 + m.vel.1 * t as f64).clamp(0.0, 1.0),
                bw,
                bh,
            ]);
        }
        tracks.push(PersonTrack { person_id: pid as i64, poses, location });
    }

    let clip = SceneClip {
        clip_id: format!("synth-{seed}"),
        t1: cfg.t1,
        t2: cfg.t2,
        j: cfg.j,
        labels: Some(member_group.iter().map(|&g| g as i64).collect()),
        true_groups: Some(member_group),
        tracks,
    };
    debug_assert!(clip.validate().is_ok());
    Ok(clip)
}
