//! Command-line surface binding the pipeline into reproducible batch
//! experiments: synthesize data, train the forecaster and the renderer,
//! roll out forecasts, render frames, and score results.
//!
//! Every command resolves its paths against `--workdir`, is deterministic
//! given its seed, and writes a `manifest.json` (config hash, code version,
//! seeds, outputs) beside its outputs. Exit codes: 0 success, 2 validation
//! error, 3 runtime failure.

use crate::ada_render::{
    gan_train_resumable, load_rgb_png, load_triples, render_loss_csv, save_rgb_png, save_triples,
    synth_triples, Discriminator, FeatureExtractor, RenderArch, RenderError, RenderModel,
    RenderTrainConfig, TripleSynthConfig,
};
use crate::checkpoint::{
    load_discriminator, load_pose_model, load_render_model, save_discriminator, save_pose_model,
    save_render_model, CheckpointError,
};
use crate::forecaster::{
    AssignmentRecord, ForecastError, ForecastResult, ModelConfig, ModelKind, PoseModel,
};
use crate::metrics::{
    future_ground_truth, image_mse_psnr, rand_index, sequence_pose_eval, JointScoreParams,
    MetricsError, StepEval,
};
use crate::nn::Adam;
use crate::pose_data::{
    load_clips, rasterize_posemap, save_posemap_png, synth_scene, write_clips, DataError, Pose,
    SceneClip, SynthConfig,
};
use crate::pose_training::{loss_csv, train_resumable, TrainConfig, TrainError};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

/// JSON-schema the `eval` report validates against.
pub const EVAL_REPORT_SCHEMA: &str = include_str!("../assets/eval_report.schema.json");

const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

// ---- errors and exit codes ----

/// Command failures split by exit code: bad inputs or configuration exit
/// with 2, failures while executing exit with 3.
#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Validation(m) | CliError::Runtime(m) => m,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<ForecastError> for CliError {
    fn from(e: ForecastError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::BadConfig(_) | TrainError::Forecast(_) => {
                CliError::Validation(e.to_string())
            }
            TrainError::Shape(_) | TrainError::NonFinite { .. } => {
                CliError::Runtime(e.to_string())
            }
        }
    }
}

impl From<RenderError> for CliError {
    fn from(e: RenderError) -> Self {
        match e {
            RenderError::NonFinite { .. } | RenderError::DegenerateCalibration(_) => {
                CliError::Runtime(e.to_string())
            }
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Io { .. } => CliError::Runtime(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

fn runtime_io(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Runtime(format!("{}: {e}", path.display()))
}

// ---- argument surface ----

#[derive(Parser, Debug)]
#[command(
    name = "scenecast",
    version,
    about = "Multi-person pose forecasting and appearance rendering"
)]
pub struct Cli {
    /// Root all relative paths are resolved against.
    #[arg(long, global = true, default_value = ".")]
    pub workdir: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate synthetic multi-person clips.
    Synth(SynthArgs),
    /// Generate synthetic (posemap, reference, goal) training triples.
    SynthTriples(SynthTriplesArgs),
    /// Train the pose forecaster (stage 1 or 2).
    TrainPose(TrainPoseArgs),
    /// Train the appearance renderer adversarially.
    TrainRender(TrainRenderArgs),
    /// Roll out future poses from a trained forecaster.
    Forecast(ForecastArgs),
    /// Render forecast poses into appearance frames.
    Render(RenderArgs),
    /// Score predictions against references.
    Eval(EvalArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Output clip file (one JSON object per line).
    #[arg(long)]
    pub out: PathBuf,
    /// Number of clips.
    #[arg(long)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// JSON file mirroring the scene-synthesis config; flags below override
    /// its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub t1: Option<usize>,
    #[arg(long)]
    pub t2: Option<usize>,
    #[arg(long)]
    pub j: Option<usize>,
    #[arg(long)]
    pub groups: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
}

#[derive(Args, Debug)]
pub struct SynthTriplesArgs {
    /// Output directory; receives the PNGs, an index.jsonl, and the manifest.
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// JSON file mirroring the triple-synthesis config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub resolution: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TrainPoseArgs {
    /// Training clips (line-delimited JSON).
    #[arg(long)]
    pub clips: PathBuf,
    /// Output directory; receives pose.ckpt, loss.csv, and the manifest.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON file with {"kind", "model", "train"} sections; flags below
    /// override individual fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// 1 trains the coarse path, 2 the full model.
    #[arg(long)]
    pub stage: Option<u8>,
    /// Forecaster family: mg, social, or vanilla.
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Stage-2 initialization: a stage-1 checkpoint whose weights seed the
    /// full model (fresh optimizer, epoch counter reset).
    #[arg(long)]
    pub init_from: Option<PathBuf>,
    /// Continue a previous run from its output directory (same stage,
    /// optimizer state restored, epochs count on top).
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainRenderArgs {
    /// Triple index (index.jsonl written by synth-triples).
    #[arg(long)]
    pub triples: PathBuf,
    /// Output directory; receives render.ckpt, disc.ckpt, loss.csv, and the
    /// manifest.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON file with {"arch", "train", "extractor_seed"} sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Named architecture variant (e.g. 5-5-10, 8-5-10).
    #[arg(long)]
    pub arch: Option<String>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub adv_weight: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Perceptual-feature extractor checkpoint; defaults to the seeded
    /// fixed extractor.
    #[arg(long)]
    pub extractor: Option<PathBuf>,
    /// Continue a previous run from its output directory.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ForecastArgs {
    /// Input clips (line-delimited JSON).
    #[arg(long)]
    pub clips: PathBuf,
    /// Forecaster checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Output forecast JSON.
    #[arg(long)]
    pub out: PathBuf,
    /// Expected forecaster family; rejected if the checkpoint disagrees.
    #[arg(long)]
    pub model: Option<String>,
    /// Group-assignment softmax temperature.
    #[arg(long, default_value_t = 0.1)]
    pub temperature: f64,
    /// Also rasterize predicted poses as PNG posemaps under this directory.
    #[arg(long)]
    pub posemaps: Option<PathBuf>,
    /// Posemap side length in pixels.
    #[arg(long, default_value_t = 64)]
    pub resolution: usize,
    /// Joint disk radius in pixels.
    #[arg(long, default_value_t = 2)]
    pub radius: usize,
    /// Worker threads over clips; results are reduced in input order.
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
}

#[derive(Args, Debug)]
pub struct RenderArgs {
    /// Forecast JSON produced by the forecast command.
    #[arg(long)]
    pub forecast: PathBuf,
    /// Reference appearance: a single PNG used for every person, or a
    /// directory holding person_<id>.png files.
    #[arg(long)]
    pub references: PathBuf,
    /// Renderer checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Output directory; one subdirectory per clip and person.
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Joint disk radius in pixels for the intermediate posemaps.
    #[arg(long, default_value_t = 2)]
    pub radius: usize,
    /// Render the coarse predictions instead of the refined ones.
    #[arg(long, default_value_t = false)]
    pub coarse: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Predictions: forecast JSON (pose/groups mode) or a frame directory
    /// (frames mode).
    #[arg(long)]
    pub pred: PathBuf,
    /// Reference: clip file or forecast JSON (pose mode), clip file with
    /// group metadata (groups mode), or a frame directory (frames mode).
    #[arg(long = "ref")]
    pub reference: PathBuf,
    /// pose, frames, or groups.
    #[arg(long)]
    pub mode: String,
    /// Output report JSON.
    #[arg(long)]
    pub out: PathBuf,
    /// Joint-score tolerance in pixels.
    #[arg(long, default_value_t = 5.0)]
    pub mu: f64,
    /// Joint-score falloff variance in squared pixels.
    #[arg(long, default_value_t = 72.0)]
    pub sigma_sq: f64,
    /// Pixel grid the joint score measures distances on.
    #[arg(long, default_value_t = 256)]
    pub eval_resolution: usize,
    /// Also export the aggregate table as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

// ---- dispatch ----

/// Run a parsed invocation, mapping failures onto the documented exit codes.
pub fn run(cli: Cli) -> i32 {
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.exit_code()
        }
    }
}

fn dispatch(cli: &Cli) -> Result<(), CliError> {
    let wd = &cli.workdir;
    match &cli.command {
        Command::Synth(a) => cmd_synth(wd, a),
        Command::SynthTriples(a) => cmd_synth_triples(wd, a),
        Command::TrainPose(a) => cmd_train_pose(wd, a),
        Command::TrainRender(a) => cmd_train_render(wd, a),
        Command::Forecast(a) => cmd_forecast(wd, a),
        Command::Render(a) => cmd_render(wd, a),
        Command::Eval(a) => cmd_eval(wd, a),
    }
}

// ---- shared plumbing ----

fn under(workdir: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        workdir.join(p)
    }
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

fn load_config_or_default<T: DeserializeOwned + Default>(
    path: Option<&Path>,
) -> Result<T, CliError> {
    match path {
        None => Ok(T::default()),
        Some(p) => read_json(p),
    }
}

fn parse_model_kind(name: &str) -> Result<ModelKind, CliError> {
    name.parse::<ModelKind>()
        .map_err(|_| CliError::Validation(format!("unknown model kind {name:?}")))
}

fn require_input(path: &Path, what: &str) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Validation(format!("{what} {} does not exist", path.display())))
    }
}

fn ensure_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(runtime_io(path))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(runtime_io(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Runtime(format!("serializing {}: {e}", path.display())))?;
    text.push('\n');
    write_text(path, &text)
}

/// Reproducibility record written beside every command's outputs.
#[derive(Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub code_version: String,
    /// SHA-256 of the fully resolved configuration (file values plus flag
    /// overrides), hex encoded.
    pub config_sha256: String,
    pub seeds: Vec<u64>,
    pub outputs: Vec<String>,
}

fn sha256_hex(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    let mut hex = String::with_capacity(64);
    for byte in digest {
        let _ = write!(hex, "{byte:02x}");
    }
    hex
}

fn write_manifest<C: Serialize>(
    path: &Path,
    command: &str,
    config: &C,
    seeds: Vec<u64>,
    outputs: Vec<String>,
) -> Result<(), CliError> {
    let config_json = serde_json::to_string(config)
        .map_err(|e| CliError::Runtime(format!("serializing config: {e}")))?;
    let manifest = RunManifest {
        command: command.to_string(),
        code_version: CODE_VERSION.to_string(),
        config_sha256: sha256_hex(&config_json),
        seeds,
        outputs,
    };
    write_json(path, &manifest)
}

/// Manifest path for a command whose primary output is a single file.
fn sibling_manifest(out: &Path) -> PathBuf {
    let name = out.file_name().map(|n| n.to_string_lossy()).unwrap_or_default();
    out.with_file_name(format!("{name}.manifest.json"))
}

/// Map `f` over `items` with `workers` threads, reducing in input order.
fn parallel_map<T, R, F>(items: &[T], workers: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    let workers = workers.clamp(1, items.len().max(1));
    if workers == 1 {
        return items.iter().map(f).collect();
    }
    let mut indexed: Vec<(usize, R)> = std::thread::scope(|scope| {
        let f = &f;
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                scope.spawn(move || {
                    let mut part = Vec::new();
                    let mut i = w;
                    while i < items.len() {
                        part.push((i, f(&items[i])));
                        i += workers;
                    }
                    part
                })
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
    });
    indexed.sort_by_key(|(i, _)| *i);
    indexed.into_iter().map(|(_, r)| r).collect()
}

// ---- synth ----

fn cmd_synth(wd: &Path, a: &SynthArgs) -> Result<(), CliError> {
    let mut cfg: SynthConfig = load_config_or_default(a.config.as_ref().map(|p| under(wd, p)).as_deref())?;
    if let Some(n) = a.n {
        cfg.n = n;
    }
    if let Some(t1) = a.t1 {
        cfg.t1 = t1;
    }
    if let Some(t2) = a.t2 {
        cfg.t2 = t2;
    }
    if let Some(j) = a.j {
        cfg.j = j;
    }
    if let Some(groups) = a.groups {
        cfg.groups = groups;
    }
    if let Some(noise) = a.noise {
        cfg.noise = noise;
    }

    let mut clips = Vec::with_capacity(a.count);
    for i in 0..a.count {
        clips.push(synth_scene(&cfg, a.seed.wrapping_add(i as u64))?);
    }
    let out = under(wd, &a.out);
    if let Some(parent) = out.parent() {
        ensure_dir(parent)?;
    }
    write_clips(&clips, &out).map_err(|e| CliError::Runtime(e.to_string()))?;
    let out_name = a.out.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    write_manifest(&sibling_manifest(&out), "synth", &cfg, vec![a.seed], vec![out_name])?;
    println!("wrote {} clips", clips.len());
    Ok(())
}

// ---- synth-triples ----

fn cmd_synth_triples(wd: &Path, a: &SynthTriplesArgs) -> Result<(), CliError> {
    let mut cfg: TripleSynthConfig =
        load_config_or_default(a.config.as_ref().map(|p| under(wd, p)).as_deref())?;
    if let Some(count) = a.count {
        cfg.count = count;
    }
    if let Some(resolution) = a.resolution {
        cfg.resolution = resolution;
    }

    let triples = synth_triples(&cfg, a.seed)?;
    let out_dir = under(wd, &a.out_dir);
    ensure_dir(&out_dir)?;
    let index = save_triples(&out_dir, &triples)?;
    let index_name =
        index.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    write_manifest(
        &out_dir.join("manifest.json"),
        "synth-triples",
        &cfg,
        vec![a.seed],
        vec![index_name],
    )?;
    println!("wrote {} triples", triples.len());
    Ok(())
}

// ---- train-pose ----

/// Resolved forecaster training configuration: family, geometry, and
/// optimization settings.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainPoseSpec {
    pub kind: ModelKind,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for TrainPoseSpec {
    fn default() -> Self {
        TrainPoseSpec {
            kind: ModelKind::Mg,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

const POSE_CKPT: &str = "pose.ckpt";

fn cmd_train_pose(wd: &Path, a: &TrainPoseArgs) -> Result<(), CliError> {
    let mut spec: TrainPoseSpec =
        load_config_or_default(a.config.as_ref().map(|p| under(wd, p)).as_deref())?;
    if let Some(name) = &a.model {
        spec.kind = parse_model_kind(name)?;
    }
    if let Some(stage) = a.stage {
        spec.train.stage = stage;
    }
    if let Some(epochs) = a.epochs {
        spec.train.epochs = epochs;
    }
    if let Some(batch) = a.batch {
        spec.train.batch = batch;
    }
    if let Some(lr) = a.lr {
        spec.train.lr = lr;
    }
    if let Some(seed) = a.seed {
        spec.train.seed = seed;
    }
    if let Some(temperature) = a.temperature {
        spec.train.temperature = temperature;
    }

    let clips_path = under(wd, &a.clips);
    require_input(&clips_path, "clip file")?;
    let outcome = load_clips(&clips_path)?;
    if outcome.skipped > 0 {
        eprintln!("warning: skipped {} invalid clips", outcome.skipped);
    }
    if outcome.clips.is_empty() {
        return Err(CliError::Validation(format!(
            "{} holds no usable clips",
            clips_path.display()
        )));
    }

    // Assemble model, optimizer, and starting epoch from scratch, a
    // warm-start checkpoint, or a resumed run.
    let (mut model, mut opt, start_epoch) = match (&a.resume, &a.init_from) {
        (Some(_), Some(_)) => {
            return Err(CliError::Validation(
                "--resume and --init-from are mutually exclusive".into(),
            ))
        }
        (Some(dir), None) => {
            let ckpt = under(wd, dir).join(POSE_CKPT);
            require_input(&ckpt, "resume checkpoint")?;
            let loaded = load_pose_model(&ckpt)?;
            if let Some(stage) = a.stage {
                if stage != loaded.stage {
                    return Err(CliError::Validation(format!(
                        "--stage {stage} conflicts with the resumed run's stage {}",
                        loaded.stage
                    )));
                }
            }
            spec.kind = loaded.model.kind;
            spec.model = loaded.model.cfg;
            spec.train.stage = loaded.stage;
            let adam = loaded.adam.ok_or_else(|| {
                CliError::Validation(format!(
                    "{} holds no optimizer state; use --init-from for a warm start",
                    ckpt.display()
                ))
            })?;
            let mut opt = Adam::new(&loaded.model.store, spec.train.lr);
            adam.restore_into(&mut opt);
            (loaded.model, opt, loaded.epoch)
        }
        (None, init) => {
            if spec.train.stage == 2 && init.is_none() {
                return Err(CliError::Validation(
                    "stage 2 requires --init-from with a stage-1 checkpoint".into(),
                ));
            }
            let model = match init {
                Some(p) => {
                    let ckpt = under(wd, p);
                    require_input(&ckpt, "initialization checkpoint")?;
                    let loaded = load_pose_model(&ckpt)?;
                    if let Some(name) = &a.model {
                        let asked = parse_model_kind(name)?;
                        if asked != loaded.model.kind {
                            return Err(CliError::Validation(format!(
                                "--model {asked} conflicts with the checkpoint's {} model",
                                loaded.model.kind
                            )));
                        }
                    }
                    spec.kind = loaded.model.kind;
                    spec.model = loaded.model.cfg;
                    loaded.model
                }
                None => PoseModel::new(spec.model, spec.kind, spec.train.seed),
            };
            let opt = Adam::new(&model.store, spec.train.lr);
            (model, opt, 0)
        }
    };

    if model.cfg.j != outcome.clips[0].j {
        return Err(CliError::Validation(format!(
            "model expects {} joints but the clips have {}",
            model.cfg.j, outcome.clips[0].j
        )));
    }

    let report = train_resumable(&mut model, &outcome.clips, &spec.train, &mut opt, start_epoch)?;

    let out_dir = under(wd, &a.out);
    ensure_dir(&out_dir)?;
    save_pose_model(
        &out_dir.join(POSE_CKPT),
        &model,
        spec.train.stage,
        start_epoch + spec.train.epochs,
        Some(&opt),
    )?;
    write_text(&out_dir.join("loss.csv"), &loss_csv(&report.rows))?;
    write_manifest(
        &out_dir.join("manifest.json"),
        "train-pose",
        &spec,
        vec![spec.train.seed],
        vec![POSE_CKPT.into(), "loss.csv".into()],
    )?;
    match report.final_loss() {
        Some(loss) => println!("trained {} iterations, final loss {loss}", report.rows.len()),
        None => println!("trained 0 iterations"),
    }
    Ok(())
}

// ---- train-render ----

/// Resolved renderer training configuration: architecture, GAN settings,
/// and the perceptual-extractor seed.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainRenderSpec {
    pub arch: RenderArch,
    pub train: RenderTrainConfig,
    /// Seed of the fixed perceptual extractor (ignored when --extractor
    /// points at a saved one).
    pub extractor_seed: u64,
}

impl Default for TrainRenderSpec {
    fn default() -> Self {
        TrainRenderSpec {
            arch: RenderArch::default(),
            train: RenderTrainConfig::default(),
            extractor_seed: 0,
        }
    }
}

const RENDER_CKPT: &str = "render.ckpt";
const DISC_CKPT: &str = "disc.ckpt";
const RENDER_STATE: &str = "train_state.json";
const DISC_SEED_SALT: u64 = 0xD15C;

/// Run state a resumed renderer training needs beyond the checkpoints: the
/// style weight is calibrated once against the untrained network, so a
/// resumed run must reuse it rather than recalibrate.
#[derive(Serialize, Deserialize)]
struct RenderRunState {
    gamma: f64,
}

fn cmd_train_render(wd: &Path, a: &TrainRenderArgs) -> Result<(), CliError> {
    let mut spec: TrainRenderSpec =
        load_config_or_default(a.config.as_ref().map(|p| under(wd, p)).as_deref())?;
    if let Some(name) = &a.arch {
        spec.arch = RenderArch::named(name)?;
    }
    if let Some(iters) = a.iters {
        spec.train.iters = iters;
    }
    if let Some(adv) = a.adv_weight {
        spec.train.adv_weight = adv;
    }
    if let Some(lr) = a.lr {
        spec.train.lr = lr;
    }
    if let Some(seed) = a.seed {
        spec.train.seed = seed;
    }

    let index = under(wd, &a.triples);
    require_input(&index, "triple index")?;
    let triples = load_triples(&index)?;

    let fx = match &a.extractor {
        Some(p) => {
            let path = under(wd, p);
            require_input(&path, "extractor checkpoint")?;
            FeatureExtractor::load(&path)?
        }
        None => FeatureExtractor::seeded(spec.extractor_seed),
    };

    let (mut gen, mut disc, mut g_opt, mut d_opt, start_iter) = match &a.resume {
        Some(dir) => {
            let dir = under(wd, dir);
            let gpath = dir.join(RENDER_CKPT);
            let dpath = dir.join(DISC_CKPT);
            let spath = dir.join(RENDER_STATE);
            require_input(&gpath, "resume checkpoint")?;
            require_input(&dpath, "resume discriminator checkpoint")?;
            require_input(&spath, "resume state file")?;
            let state: RenderRunState = read_json(&spath)?;
            spec.train.weights.gamma = state.gamma;
            spec.train.calibrate = false;
            let g = load_render_model(&gpath)?;
            let d = load_discriminator(&dpath)?;
            if a.arch.is_some() && g.model.arch != spec.arch {
                return Err(CliError::Validation(format!(
                    "--arch conflicts with the resumed run's {} architecture",
                    g.model.arch
                )));
            }
            spec.arch = g.model.arch;
            let g_adam = g.adam.ok_or_else(|| {
                CliError::Validation(format!("{} holds no optimizer state", gpath.display()))
            })?;
            let d_adam = d.adam.ok_or_else(|| {
                CliError::Validation(format!("{} holds no optimizer state", dpath.display()))
            })?;
            let mut g_opt = Adam::new(&g.model.store, spec.train.lr);
            let mut d_opt = Adam::new(&d.model.store, spec.train.lr);
            g_adam.restore_into(&mut g_opt);
            d_adam.restore_into(&mut d_opt);
            (g.model, d.model, g_opt, d_opt, g.epoch)
        }
        None => {
            let gen = RenderModel::new(spec.arch, spec.train.seed)?;
            let disc = Discriminator::new(&spec.arch, spec.train.seed ^ DISC_SEED_SALT)?;
            let g_opt = Adam::new(&gen.store, spec.train.lr);
            let d_opt = Adam::new(&disc.store, spec.train.lr);
            (gen, disc, g_opt, d_opt, 0)
        }
    };

    let report = gan_train_resumable(
        &mut gen,
        &mut disc,
        &triples,
        &fx,
        &spec.train,
        &mut g_opt,
        &mut d_opt,
        start_iter,
    )?;

    let out_dir = under(wd, &a.out);
    ensure_dir(&out_dir)?;
    let end_iter = start_iter + spec.train.iters;
    save_render_model(&out_dir.join(RENDER_CKPT), &gen, end_iter, Some(&g_opt))?;
    save_discriminator(&out_dir.join(DISC_CKPT), &disc, &spec.arch, end_iter, Some(&d_opt))?;
    write_text(&out_dir.join("loss.csv"), &render_loss_csv(&report.losses))?;
    write_json(&out_dir.join(RENDER_STATE), &RenderRunState { gamma: report.gamma })?;
    write_manifest(
        &out_dir.join("manifest.json"),
        "train-render",
        &spec,
        vec![spec.train.seed, spec.extractor_seed],
        vec![RENDER_CKPT.into(), DISC_CKPT.into(), RENDER_STATE.into(), "loss.csv".into()],
    )?;
    if let Some(at) = report.collapse_warning_at {
        eprintln!("warning: discriminator loss collapsed to zero around iteration {at}");
    }
    match report.losses.last() {
        Some(row) => println!(
            "trained {} iterations, final generator loss {}",
            report.losses.len(),
            row.gen_total
        ),
        None => println!("trained 0 iterations"),
    }
    Ok(())
}

// ---- forecast ----

/// On-disk forecast format: per-clip coarse and refined poses plus the
/// group-assignment history.
#[derive(Serialize, Deserialize)]
pub struct ForecastDump {
    pub model: ModelKind,
    pub temperature: f64,
    pub clips: Vec<ClipForecast>,
}

#[derive(Serialize, Deserialize)]
pub struct ClipForecast {
    pub clip_id: String,
    pub person_ids: Vec<i64>,
    pub t1: usize,
    pub t2: usize,
    pub j: usize,
    /// `[person][step][2J]` predicted coordinates before refinement.
    pub coarse: Vec<Vec<Vec<f64>>>,
    /// `[person][step][2J]` final predicted coordinates.
    pub refined: Vec<Vec<Vec<f64>>>,
    pub assignments: Vec<AssignmentRecord>,
}

#[derive(Serialize)]
struct ForecastManifestConfig<'a> {
    checkpoint: String,
    model: ModelKind,
    temperature: f64,
    resolution: usize,
    radius: usize,
    posemaps: Option<&'a Path>,
}

fn cmd_forecast(wd: &Path, a: &ForecastArgs) -> Result<(), CliError> {
    let clips_path = under(wd, &a.clips);
    require_input(&clips_path, "clip file")?;
    let outcome = load_clips(&clips_path)?;
    if outcome.skipped > 0 {
        eprintln!("warning: skipped {} invalid clips", outcome.skipped);
    }
    let ckpt_path = under(wd, &a.checkpoint);
    require_input(&ckpt_path, "checkpoint")?;
    let loaded = load_pose_model(&ckpt_path)?;
    if let Some(name) = &a.model {
        let asked = parse_model_kind(name)?;
        if asked != loaded.model.kind {
            return Err(CliError::Validation(format!(
                "--model {asked} conflicts with the checkpoint's {} model",
                loaded.model.kind
            )));
        }
    }

    let model = &loaded.model;
    let results: Vec<Result<ForecastResult, ForecastError>> =
        parallel_map(&outcome.clips, a.workers, |clip| {
            model.forecast(clip, clip.t2, a.temperature)
        });
    let mut clips = Vec::with_capacity(results.len());
    for (clip, result) in outcome.clips.iter().zip(results) {
        let fc = result?;
        clips.push(ClipForecast {
            clip_id: clip.clip_id.clone(),
            person_ids: clip.tracks.iter().map(|tr| tr.person_id).collect(),
            t1: clip.t1,
            t2: clip.t2,
            j: clip.j,
            coarse: fc.coarse,
            refined: fc.refined,
            assignments: fc.assignments,
        });
    }
    let dump =
        ForecastDump { model: model.kind, temperature: a.temperature, clips };

    let out = under(wd, &a.out);
    if let Some(parent) = out.parent() {
        ensure_dir(parent)?;
    }
    write_json(&out, &dump)?;

    let mut outputs =
        vec![a.out.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()];
    if let Some(dir) = &a.posemaps {
        let dir = under(wd, dir);
        write_forecast_posemaps(&dir, &dump, a.resolution, a.radius)?;
        outputs.push(
            a.posemaps
                .as_ref()
                .and_then(|p| p.file_name())
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default(),
        );
    }
    let config = ForecastManifestConfig {
        checkpoint: a.checkpoint.display().to_string(),
        model: model.kind,
        temperature: a.temperature,
        resolution: a.resolution,
        radius: a.radius,
        posemaps: a.posemaps.as_deref(),
    };
    write_manifest(&sibling_manifest(&out), "forecast", &config, vec![], outputs)?;
    println!("forecast {} clips", dump.clips.len());
    Ok(())
}

fn write_forecast_posemaps(
    dir: &Path,
    dump: &ForecastDump,
    resolution: usize,
    radius: usize,
) -> Result<(), CliError> {
    for clip in &dump.clips {
        for (pi, pid) in clip.person_ids.iter().enumerate() {
            let pdir = dir.join(&clip.clip_id).join(format!("person_{pid:04}"));
            ensure_dir(&pdir)?;
            for (step, flat) in clip.refined[pi].iter().enumerate() {
                let map = rasterize_posemap(&Pose::from_flat(flat), resolution, resolution, radius);
                save_posemap_png(&map, &pdir.join(format!("frame_{step:04}.png")))
                    .map_err(|e| CliError::Runtime(e.to_string()))?;
            }
        }
    }
    Ok(())
}

// ---- render ----

#[derive(Serialize)]
struct RenderManifestConfig {
    forecast: String,
    references: String,
    checkpoint: String,
    radius: usize,
    coarse: bool,
}

fn load_forecast_dump(path: &Path) -> Result<ForecastDump, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Validation(format!("{}: not a forecast file: {e}", path.display())))
}

/// Reference lookup: a lone PNG serves every person; a directory must hold
/// person_<id>.png for each rendered person.
fn reference_for(references: &Path, pid: i64) -> Result<PathBuf, CliError> {
    if references.is_file() {
        return Ok(references.to_path_buf());
    }
    let candidate = references.join(format!("person_{pid:04}.png"));
    if candidate.is_file() {
        Ok(candidate)
    } else {
        Err(CliError::Validation(format!(
            "no reference image {} for person {pid}",
            candidate.display()
        )))
    }
}

fn cmd_render(wd: &Path, a: &RenderArgs) -> Result<(), CliError> {
    let forecast_path = under(wd, &a.forecast);
    require_input(&forecast_path, "forecast file")?;
    let dump = load_forecast_dump(&forecast_path)?;
    let ckpt_path = under(wd, &a.checkpoint);
    require_input(&ckpt_path, "checkpoint")?;
    let loaded = load_render_model(&ckpt_path)?;
    let model = loaded.model;
    let side = model.arch.resolution;
    let refs_path = under(wd, &a.references);
    require_input(&refs_path, "reference path")?;

    let out_dir = under(wd, &a.out_dir);
    let mut frames = 0usize;
    for clip in &dump.clips {
        let poses = if a.coarse { &clip.coarse } else { &clip.refined };
        for (pi, pid) in clip.person_ids.iter().enumerate() {
            let reference = load_rgb_png(&reference_for(&refs_path, *pid)?)?;
            let bank = model.compute_filters(&reference)?;
            let pdir = out_dir.join(&clip.clip_id).join(format!("person_{pid:04}"));
            ensure_dir(&pdir)?;
            for (step, flat) in poses[pi].iter().enumerate() {
                let map = rasterize_posemap(&Pose::from_flat(flat), side, side, a.radius);
                let image = model.render(&map, &bank)?;
                save_rgb_png(&image, &pdir.join(format!("frame_{step:04}.png")))?;
                frames += 1;
            }
        }
    }

    let config = RenderManifestConfig {
        forecast: a.forecast.display().to_string(),
        references: a.references.display().to_string(),
        checkpoint: a.checkpoint.display().to_string(),
        radius: a.radius,
        coarse: a.coarse,
    };
    let clip_dirs = dump.clips.iter().map(|c| c.clip_id.clone()).collect();
    write_manifest(&out_dir.join("manifest.json"), "render", &config, vec![], clip_dirs)?;
    println!("rendered {frames} frames");
    Ok(())
}

// ---- eval ----

/// Per-step tables for one clip of a pose evaluation.
#[derive(Serialize, Deserialize)]
pub struct ClipPoseEval {
    pub clip_id: String,
    pub coarse: Vec<StepEval>,
    pub refined: Vec<StepEval>,
}

/// Pooled per-step tables over all persons of all clips.
#[derive(Serialize, Deserialize)]
pub struct AggregatePoseEval {
    pub coarse: Vec<StepEval>,
    pub refined: Vec<StepEval>,
}

/// Evaluation report; the variant matches the requested mode.
#[derive(Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum EvalReport {
    Pose {
        code_version: String,
        params: JointScoreParams,
        clips: Vec<ClipPoseEval>,
        /// Present when every clip shares one horizon; pooled over all
        /// persons so totals match direct metric calls on the union.
        aggregate: Option<AggregatePoseEval>,
    },
    Frames {
        code_version: String,
        frame_count: usize,
        mse: f64,
        /// Absent (null) when the frames match exactly.
        psnr: Option<f64>,
        frames: Vec<FrameEval>,
    },
    Groups {
        code_version: String,
        clips: Vec<ClipGroupEval>,
        mean_rand_index: f64,
    },
}

#[derive(Serialize, Deserialize)]
pub struct FrameEval {
    pub path: String,
    pub mse: f64,
    pub psnr: Option<f64>,
}

#[derive(Serialize, Deserialize)]
pub struct ClipGroupEval {
    pub clip_id: String,
    pub rand_index: f64,
}

#[derive(Serialize)]
struct EvalManifestConfig {
    pred: String,
    reference: String,
    mode: String,
    params: Option<JointScoreParams>,
}

fn cmd_eval(wd: &Path, a: &EvalArgs) -> Result<(), CliError> {
    let pred = under(wd, &a.pred);
    let reference = under(wd, &a.reference);
    require_input(&pred, "prediction path")?;
    require_input(&reference, "reference path")?;

    let params =
        JointScoreParams { mu: a.mu, sigma_sq: a.sigma_sq, resolution: a.eval_resolution };
    let (report, csv) = match a.mode.as_str() {
        "pose" => eval_pose(&pred, &reference, &params)?,
        "frames" => eval_frames(&pred, &reference)?,
        "groups" => eval_groups(&pred, &reference)?,
        other => {
            return Err(CliError::Validation(format!(
                "unknown mode {other:?} (expected pose, frames, or groups)"
            )))
        }
    };

    let out = under(wd, &a.out);
    if let Some(parent) = out.parent() {
        ensure_dir(parent)?;
    }
    write_json(&out, &report)?;
    let mut outputs =
        vec![a.out.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()];
    if let Some(csv_path) = &a.csv {
        let csv_path = under(wd, csv_path);
        write_text(&csv_path, &csv)?;
        outputs.push(
            csv_path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
        );
    }
    let config = EvalManifestConfig {
        pred: a.pred.display().to_string(),
        reference: a.reference.display().to_string(),
        mode: a.mode.clone(),
        params: (a.mode == "pose").then_some(params),
    };
    write_manifest(&sibling_manifest(&out), "eval", &config, vec![], outputs)?;
    println!("wrote {} report", a.mode);
    Ok(())
}

/// Truth side of a pose evaluation: either another forecast (compared table
/// by table) or ground-truth clips (both tables scored against the future
/// segments).
enum PoseTruth {
    Forecast(ForecastDump),
    Clips(Vec<SceneClip>),
}

fn load_pose_truth(path: &Path) -> Result<PoseTruth, CliError> {
    if let Ok(dump) = load_forecast_dump(path) {
        return Ok(PoseTruth::Forecast(dump));
    }
    let outcome = load_clips(path)?;
    if outcome.clips.is_empty() {
        return Err(CliError::Validation(format!("{} holds no usable clips", path.display())));
    }
    Ok(PoseTruth::Clips(outcome.clips))
}

fn eval_pose(
    pred: &Path,
    reference: &Path,
    params: &JointScoreParams,
) -> Result<(EvalReport, String), CliError> {
    let dump = load_forecast_dump(pred)?;
    let truth = load_pose_truth(reference)?;

    // Per clip: reference tables for the coarse and refined predictions.
    let mut clips = Vec::with_capacity(dump.clips.len());
    let mut pool: [Vec<Vec<Vec<f64>>>; 4] = Default::default(); // pred/ref x coarse/refined
    for clip in &dump.clips {
        let (ref_coarse, ref_refined): (Vec<Vec<Vec<f64>>>, Vec<Vec<Vec<f64>>>) = match &truth {
            PoseTruth::Forecast(other) => {
                let matched = other
                    .clips
                    .iter()
                    .find(|c| c.clip_id == clip.clip_id)
                    .ok_or_else(|| {
                        CliError::Validation(format!(
                            "reference forecast lacks clip {:?}",
                            clip.clip_id
                        ))
                    })?;
                (matched.coarse.clone(), matched.refined.clone())
            }
            PoseTruth::Clips(cs) => {
                let matched =
                    cs.iter().find(|c| c.clip_id == clip.clip_id).ok_or_else(|| {
                        CliError::Validation(format!(
                            "reference clips lack clip {:?}",
                            clip.clip_id
                        ))
                    })?;
                let gt = future_ground_truth(matched);
                (gt.clone(), gt)
            }
        };
        let coarse = sequence_pose_eval(&clip.coarse, &ref_coarse, params)?;
        let refined = sequence_pose_eval(&clip.refined, &ref_refined, params)?;
        clips.push(ClipPoseEval { clip_id: clip.clip_id.clone(), coarse, refined });
        pool[0].extend(clip.coarse.iter().cloned());
        pool[1].extend(ref_coarse);
        pool[2].extend(clip.refined.iter().cloned());
        pool[3].extend(ref_refined);
    }
    if clips.is_empty() {
        return Err(CliError::Validation("forecast holds no clips".into()));
    }

    let uniform_t2 = dump.clips.windows(2).all(|w| w[0].t2 == w[1].t2);
    let aggregate = if uniform_t2 {
        Some(AggregatePoseEval {
            coarse: sequence_pose_eval(&pool[0], &pool[1], params)?,
            refined: sequence_pose_eval(&pool[2], &pool[3], params)?,
        })
    } else {
        None
    };

    let mut csv = String::from("table,step,mse,joint_score\n");
    if let Some(agg) = &aggregate {
        for (name, rows) in [("coarse", &agg.coarse), ("refined", &agg.refined)] {
            for r in rows {
                let _ = writeln!(csv, "{name},{},{},{}", r.step, r.mse, r.joint_score);
            }
        }
    }
    let report = EvalReport::Pose {
        code_version: CODE_VERSION.to_string(),
        params: *params,
        clips,
        aggregate,
    };
    Ok((report, csv))
}

/// All PNG files below `root`, as sorted root-relative slash paths.
fn png_tree(root: &Path) -> Result<Vec<String>, CliError> {
    fn walk(dir: &Path, prefix: &str, into: &mut Vec<String>) -> std::io::Result<()> {
        let mut entries: Vec<_> =
            fs::read_dir(dir)?.collect::<std::io::Result<Vec<_>>>()?;
        entries.sort_by_key(|e| e.file_name());
        for entry in entries {
            let name = entry.file_name().to_string_lossy().into_owned();
            let rel = if prefix.is_empty() { name.clone() } else { format!("{prefix}/{name}") };
            let path = entry.path();
            if path.is_dir() {
                walk(&path, &rel, into)?;
            } else if name.ends_with(".png") {
                into.push(rel);
            }
        }
        Ok(())
    }
    if !root.is_dir() {
        return Err(CliError::Validation(format!("{} is not a directory", root.display())));
    }
    let mut out = Vec::new();
    walk(root, "", &mut out)
        .map_err(|e| CliError::Validation(format!("{}: {e}", root.display())))?;
    if out.is_empty() {
        return Err(CliError::Validation(format!("{} holds no PNG frames", root.display())));
    }
    Ok(out)
}

fn eval_frames(pred: &Path, reference: &Path) -> Result<(EvalReport, String), CliError> {
    let pred_tree = png_tree(pred)?;
    let ref_tree = png_tree(reference)?;
    if pred_tree != ref_tree {
        let only_pred = pred_tree.iter().find(|p| !ref_tree.contains(p));
        let only_ref = ref_tree.iter().find(|p| !pred_tree.contains(p));
        let detail = only_pred
            .map(|p| format!("{p} only under predictions"))
            .or_else(|| only_ref.map(|p| format!("{p} only under references")))
            .unwrap_or_else(|| "orderings differ".into());
        return Err(CliError::Validation(format!("frame trees differ: {detail}")));
    }

    let mut pred_imgs = Vec::with_capacity(pred_tree.len());
    let mut ref_imgs = Vec::with_capacity(pred_tree.len());
    for rel in &pred_tree {
        pred_imgs.push(load_rgb_image(&pred.join(rel))?);
        ref_imgs.push(load_rgb_image(&reference.join(rel))?);
    }
    let mut frames = Vec::with_capacity(pred_tree.len());
    for ((rel, a), b) in pred_tree.iter().zip(&pred_imgs).zip(&ref_imgs) {
        let (mse, psnr) =
            image_mse_psnr(std::slice::from_ref(a), std::slice::from_ref(b))?;
        frames.push(FrameEval { path: rel.clone(), mse, psnr });
    }
    let (mse, psnr) = image_mse_psnr(&pred_imgs, &ref_imgs)?;

    let mut csv = String::from("path,mse,psnr\n");
    for f in &frames {
        let _ = writeln!(
            csv,
            "{},{},{}",
            f.path,
            f.mse,
            f.psnr.map(|v| v.to_string()).unwrap_or_default()
        );
    }
    let report = EvalReport::Frames {
        code_version: CODE_VERSION.to_string(),
        frame_count: frames.len(),
        mse,
        psnr,
        frames,
    };
    Ok((report, csv))
}

fn load_rgb_image(path: &Path) -> Result<image::RgbImage, CliError> {
    let img = image::open(path)
        .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
    Ok(img.to_rgb8())
}

fn eval_groups(pred: &Path, reference: &Path) -> Result<(EvalReport, String), CliError> {
    let dump = load_forecast_dump(pred)?;
    let outcome = load_clips(reference)?;
    let mut clips = Vec::with_capacity(dump.clips.len());
    let mut sum = 0.0;
    for clip in &dump.clips {
        let matched = outcome
            .clips
            .iter()
            .find(|c| c.clip_id == clip.clip_id)
            .ok_or_else(|| {
                CliError::Validation(format!("reference clips lack clip {:?}", clip.clip_id))
            })?;
        let truth = matched.true_groups.as_ref().ok_or_else(|| {
            CliError::Validation(format!("clip {:?} has no group metadata", clip.clip_id))
        })?;
        let last = clip.assignments.last().ok_or_else(|| {
            CliError::Validation(format!(
                "clip {:?} has no assignment history (was the forecast run with the grouped model?)",
                clip.clip_id
            ))
        })?;
        let ri = rand_index(&last.hard, truth)?;
        clips.push(ClipGroupEval { clip_id: clip.clip_id.clone(), rand_index: ri });
        sum += ri;
    }
    if clips.is_empty() {
        return Err(CliError::Validation("forecast holds no clips".into()));
    }
    let mean = sum / clips.len() as f64;

    let mut csv = String::from("clip_id,rand_index\n");
    for c in &clips {
        let _ = writeln!(csv, "{},{}", c.clip_id, c.rand_index);
    }
    let report = EvalReport::Groups {
        code_version: CODE_VERSION.to_string(),
        clips,
        mean_rand_index: mean,
    };
    Ok((report, csv))
}
