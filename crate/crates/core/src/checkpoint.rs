//! Model checkpoints: named parameter arrays behind a JSON manifest.
//!
//! Layout: the magic `SCKPT1\n`, a little-endian u64 manifest byte length,
//! the JSON manifest (model family and geometry, parameter names and shapes,
//! epoch, optimizer flag), then every parameter's f64 values little-endian
//! in manifest order, then — when saved with an optimizer — the Adam step
//! and its first/second-moment arrays in the same order.

use crate::ada_render::{Discriminator, RenderArch, RenderModel};
use crate::forecaster::{ModelConfig, ModelKind, PoseModel};
use crate::nn::{Adam, ParamStore};
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const CHECKPOINT_MAGIC: &[u8; 7] = b"SCKPT1\n";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint {path}: {msg}")]
    Io { path: PathBuf, msg: String },
    #[error("{path} is not a checkpoint (bad magic)")]
    BadMagic { path: PathBuf },
    #[error("checkpoint {path} has unsupported version {version} (supported: {CHECKPOINT_VERSION})")]
    UnsupportedVersion { path: PathBuf, version: u32 },
    #[error("checkpoint {path}: bad manifest: {msg}")]
    BadManifest { path: PathBuf, msg: String },
    #[error("checkpoint {path} is truncated: {msg}")]
    Truncated { path: PathBuf, msg: String },
    #[error("checkpoint {path} does not fit the model: {msg}")]
    Mismatch { path: PathBuf, msg: String },
    #[error("checkpoint {path}: parameter {name} holds non-finite values")]
    NonFinite { path: PathBuf, name: String },
    #[error("expected a {expected} checkpoint, {path} holds a {got} model")]
    WrongFamily { path: PathBuf, expected: &'static str, got: &'static str },
    #[error(transparent)]
    BadModel(#[from] crate::ada_render::RenderError),
}

/// What kind of network a checkpoint holds, with enough geometry to rebuild it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ModelSpec {
    Pose { kind: ModelKind, config: ModelConfig, stage: u8 },
    Render { arch: RenderArch },
    Discriminator { arch: RenderArch },
}

impl ModelSpec {
    pub fn family(&self) -> &'static str {
        match self {
            ModelSpec::Pose { .. } => "pose",
            ModelSpec::Render { .. } => "render",
            ModelSpec::Discriminator { .. } => "discriminator",
        }
    }
}

/// Saved optimizer state; hand it to [`AdamState::restore_into`] after
/// building a fresh optimizer over the loaded parameters.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<ArrayD<f64>>,
    pub v: Vec<ArrayD<f64>>,
}

impl AdamState {
    pub fn restore_into(self, opt: &mut Adam) {
        opt.restore(self.step, self.m, self.v);
    }
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    spec: ModelSpec,
    /// Completed training epochs (pose) or iterations (render); 0 for a
    /// freshly initialized model.
    epoch: usize,
    params: Vec<ParamEntry>,
    adam: bool,
}

// ---- low-level write / read ----

fn io_err(path: &Path) -> impl Fn(io::Error) -> CheckpointError + '_ {
    move |e| CheckpointError::Io { path: path.to_path_buf(), msg: e.to_string() }
}

fn write_arrays<'a, W: Write>(
    w: &mut W,
    arrays: impl Iterator<Item = &'a ArrayD<f64>>,
) -> io::Result<()> {
    for arr in arrays {
        for &v in arr.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn write_checkpoint(
    path: &Path,
    spec: &ModelSpec,
    store: &ParamStore,
    epoch: usize,
    adam: Option<&Adam>,
) -> Result<(), CheckpointError> {
    let manifest = Manifest {
        version: CHECKPOINT_VERSION,
        spec: spec.clone(),
        epoch,
        params: store
            .iter()
            .map(|p| ParamEntry { name: p.name.clone(), shape: p.value.shape().to_vec() })
            .collect(),
        adam: adam.is_some(),
    };
    let mjson = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut w = io::BufWriter::new(fs::File::create(path).map_err(io_err(path))?);
    (|| -> io::Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&(mjson.len() as u64).to_le_bytes())?;
        w.write_all(&mjson)?;
        write_arrays(&mut w, store.iter().map(|p| &p.value))?;
        if let Some(opt) = adam {
            let (step, m, v) = opt.state();
            w.write_all(&step.to_le_bytes())?;
            write_arrays(&mut w, m.iter())?;
            write_arrays(&mut w, v.iter())?;
        }
        w.flush()
    })()
    .map_err(io_err(path))
}

struct RawCheckpoint {
    manifest: Manifest,
    params: Vec<ArrayD<f64>>,
    adam: Option<AdamState>,
}

fn read_exact_or(
    r: &mut impl Read,
    buf: &mut [u8],
    path: &Path,
    what: &str,
) -> Result<(), CheckpointError> {
    r.read_exact(buf).map_err(|_| CheckpointError::Truncated {
        path: path.to_path_buf(),
        msg: format!("unreadable {what}"),
    })
}

fn read_arrays(
    r: &mut impl Read,
    entries: &[ParamEntry],
    path: &Path,
    what: &str,
) -> Result<Vec<ArrayD<f64>>, CheckpointError> {
    entries
        .iter()
        .map(|e| {
            let n: usize = e.shape.iter().product();
            let mut buf = vec![0u8; n * 8];
            read_exact_or(r, &mut buf, path, &format!("{what} data for {}", e.name))?;
            let vals: Vec<f64> =
                buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            ArrayD::from_shape_vec(IxDyn(&e.shape), vals).map_err(|e| {
                CheckpointError::BadManifest { path: path.to_path_buf(), msg: e.to_string() }
            })
        })
        .collect()
}

fn read_checkpoint(path: &Path) -> Result<RawCheckpoint, CheckpointError> {
    let mut r = io::BufReader::new(fs::File::open(path).map_err(io_err(path))?);
    let mut magic = [0u8; 7];
    read_exact_or(&mut r, &mut magic, path, "magic")?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic { path: path.to_path_buf() });
    }
    let mut len8 = [0u8; 8];
    read_exact_or(&mut r, &mut len8, path, "manifest length")?;
    let mlen = u64::from_le_bytes(len8) as usize;
    if mlen > 1 << 26 {
        return Err(CheckpointError::BadManifest {
            path: path.to_path_buf(),
            msg: format!("implausible manifest length {mlen}"),
        });
    }
    let mut mjson = vec![0u8; mlen];
    read_exact_or(&mut r, &mut mjson, path, "manifest")?;
    let manifest: Manifest = serde_json::from_slice(&mjson).map_err(|e| {
        CheckpointError::BadManifest { path: path.to_path_buf(), msg: e.to_string() }
    })?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(CheckpointError::UnsupportedVersion {
            path: path.to_path_buf(),
            version: manifest.version,
        });
    }
    let params = read_arrays(&mut r, &manifest.params, path, "parameter")?;
    for (entry, arr) in manifest.params.iter().zip(&params) {
        if !arr.iter().all(|v| v.is_finite()) {
            return Err(CheckpointError::NonFinite {
                path: path.to_path_buf(),
                name: entry.name.clone(),
            });
        }
    }
    let adam = if manifest.adam {
        let mut step8 = [0u8; 8];
        read_exact_or(&mut r, &mut step8, path, "optimizer step")?;
        let m = read_arrays(&mut r, &manifest.params, path, "optimizer first-moment")?;
        let v = read_arrays(&mut r, &manifest.params, path, "optimizer second-moment")?;
        Some(AdamState { step: u64::from_le_bytes(step8), m, v })
    } else {
        None
    };
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(io_err(path))? != 0 {
        return Err(CheckpointError::BadManifest {
            path: path.to_path_buf(),
            msg: "trailing bytes after declared contents".into(),
        });
    }
    Ok(RawCheckpoint { manifest, params, adam })
}

/// Copy checkpointed arrays into a freshly constructed model's store. Every
/// name must resolve and every shape must match, bijectively.
fn fill_store(
    store: &mut ParamStore,
    entries: &[ParamEntry],
    params: Vec<ArrayD<f64>>,
    path: &Path,
) -> Result<(), CheckpointError> {
    if store.len() != entries.len() {
        return Err(CheckpointError::Mismatch {
            path: path.to_path_buf(),
            msg: format!("model has {} parameters, checkpoint {}", store.len(), entries.len()),
        });
    }
    for (entry, value) in entries.iter().zip(params) {
        let id = store.find(&entry.name).ok_or_else(|| CheckpointError::Mismatch {
            path: path.to_path_buf(),
            msg: format!("model has no parameter named {}", entry.name),
        })?;
        if store.value(id).shape() != entry.shape.as_slice() {
            return Err(CheckpointError::Mismatch {
                path: path.to_path_buf(),
                msg: format!(
                    "{} shaped {:?} in the model but {:?} in the checkpoint",
                    entry.name,
                    store.value(id).shape(),
                    entry.shape
                ),
            });
        }
        *store.value_mut(id) = value;
    }
    Ok(())
}

/// Manifest header without the parameter data — cheap inspection for CLI
/// validation and error messages.
#[derive(Clone, Debug)]
pub struct CheckpointInfo {
    pub spec: ModelSpec,
    pub epoch: usize,
    pub has_adam: bool,
    pub param_count: usize,
}

pub fn peek(path: &Path) -> Result<CheckpointInfo, CheckpointError> {
    let raw = read_checkpoint(path)?;
    Ok(CheckpointInfo {
        spec: raw.manifest.spec,
        epoch: raw.manifest.epoch,
        has_adam: raw.adam.is_some(),
        param_count: raw.manifest.params.len(),
    })
}

// ---- pose model ----

pub struct LoadedPose {
    pub model: PoseModel,
    pub stage: u8,
    pub epoch: usize,
    pub adam: Option<AdamState>,
}

pub fn save_pose_model(
    path: &Path,
    model: &PoseModel,
    stage: u8,
    epoch: usize,
    adam: Option<&Adam>,
) -> Result<(), CheckpointError> {
    let spec = ModelSpec::Pose { kind: model.kind, config: model.cfg, stage };
    write_checkpoint(path, &spec, &model.store, epoch, adam)
}

pub fn load_pose_model(path: &Path) -> Result<LoadedPose, CheckpointError> {
    let raw = read_checkpoint(path)?;
    let (kind, config, stage) = match raw.manifest.spec {
        ModelSpec::Pose { kind, config, stage } => (kind, config, stage),
        ref other => {
            return Err(CheckpointError::WrongFamily {
                path: path.to_path_buf(),
                expected: "pose",
                got: other.family(),
            })
        }
    };
    let mut model = PoseModel::new(config, kind, 0);
    fill_store(&mut model.store, &raw.manifest.params, raw.params, path)?;
    Ok(LoadedPose { model, stage, epoch: raw.manifest.epoch, adam: raw.adam })
}

// ---- rendering models ----

pub struct LoadedRender {
    pub model: RenderModel,
    pub epoch: usize,
    pub adam: Option<AdamState>,
}

pub fn save_render_model(
    path: &Path,
    model: &RenderModel,
    epoch: usize,
    adam: Option<&Adam>,
) -> Result<(), CheckpointError> {
    let spec = ModelSpec::Render { arch: model.arch };
    write_checkpoint(path, &spec, &model.store, epoch, adam)
}

pub fn load_render_model(path: &Path) -> Result<LoadedRender, CheckpointError> {
    let raw = read_checkpoint(path)?;
    let arch = match raw.manifest.spec {
        ModelSpec::Render { arch } => arch,
        ref other => {
            return Err(CheckpointError::WrongFamily {
                path: path.to_path_buf(),
                expected: "render",
                got: other.family(),
            })
        }
    };
    let mut model = RenderModel::new(arch, 0)?;
    fill_store(&mut model.store, &raw.manifest.params, raw.params, path)?;
    Ok(LoadedRender { model, epoch: raw.manifest.epoch, adam: raw.adam })
}

pub struct LoadedDiscriminator {
    pub model: Discriminator,
    pub epoch: usize,
    pub adam: Option<AdamState>,
}

pub fn save_discriminator(
    path: &Path,
    model: &Discriminator,
    arch: &RenderArch,
    epoch: usize,
    adam: Option<&Adam>,
) -> Result<(), CheckpointError> {
    let spec = ModelSpec::Discriminator { arch: *arch };
    write_checkpoint(path, &spec, &model.store, epoch, adam)
}

pub fn load_discriminator(path: &Path) -> Result<LoadedDiscriminator, CheckpointError> {
    let raw = read_checkpoint(path)?;
    let arch = match raw.manifest.spec {
        ModelSpec::Discriminator { arch } => arch,
        ref other => {
            return Err(CheckpointError::WrongFamily {
                path: path.to_path_buf(),
                expected: "discriminator",
                got: other.family(),
            })
        }
    };
    let mut model = Discriminator::new(&arch, 0)?;
    fill_store(&mut model.store, &raw.manifest.params, raw.params, path)?;
    Ok(LoadedDiscriminator { model, epoch: raw.manifest.epoch, adam: raw.adam })
}
