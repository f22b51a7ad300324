//! End-to-end tests of the command-line surface: every command is driven
//! through the real binary, checking output layout, exit codes, resume
//! behavior, and byte-level determinism.

use scenecast::checkpoint::load_pose_model;
use scenecast::cli::{ClipForecast, EvalReport, ForecastDump, EVAL_REPORT_SCHEMA};
use scenecast::metrics::{future_ground_truth, sequence_pose_eval, JointScoreParams};
use scenecast::pose_data::{filter_clips, load_clips};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_scenecast")
}

struct Run {
    code: i32,
    stdout: String,
    stderr: String,
}

fn run_in(dir: &Path, args: &[&str]) -> Run {
    let out = Command::new(bin())
        .arg("--workdir")
        .arg(dir)
        .args(args)
        .output()
        .expect("binary runs");
    Run {
        code: out.status.code().expect("no signal"),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}

fn ok(dir: &Path, args: &[&str]) -> Run {
    let run = run_in(dir, args);
    assert_eq!(run.code, 0, "{args:?} failed:\n{}\n{}", run.stdout, run.stderr);
    run
}

fn write_file(path: &Path, text: &str) {
    fs::write(path, text).unwrap();
}

const POSE_CFG: &str = r#"{
  "kind": "mg",
  "model": {"j": 14, "h_p": 10, "g_size": 8, "h_r": 6},
  "train": {"lr": 0.001, "epochs": 2, "batch": 4, "seed": 7, "stage": 1}
}"#;

const RENDER_CFG: &str = r#"{
  "arch": {"ed_layers": 5, "fcn_layers": 5, "n_filters": 10, "kernel": 5,
           "resolution": 32, "c_base": 2},
  "train": {"iters": 2, "seed": 5, "adv_weight": 0.1, "calibration_triples": 2}
}"#;

/// Synthesize clips and train a tiny stage-1 forecaster; returns the workdir.
fn pose_fixture(dir: &Path) {
    write_file(&dir.join("pose_cfg.json"), POSE_CFG);
    ok(dir, &["synth", "--out", "clips.jsonl", "--count", "4", "--seed", "3", "--n", "3"]);
    ok(dir, &["train-pose", "--clips", "clips.jsonl", "--out", "p1", "--config", "pose_cfg.json"]);
}

/// All regular files below `root` as sorted (relative path, bytes) pairs.
fn tree_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
    fn walk(dir: &Path, prefix: &str, into: &mut Vec<(String, Vec<u8>)>) {
        let mut entries: Vec<_> = fs::read_dir(dir).unwrap().map(|e| e.unwrap()).collect();
        entries.sort_by_key(|e| e.file_name());
        for entry in entries {
            let name = entry.file_name().to_string_lossy().into_owned();
            let rel = if prefix.is_empty() { name } else { format!("{prefix}/{}", name) };
            let path = entry.path();
            if path.is_dir() {
                walk(&path, &rel, into);
            } else {
                into.push((rel, fs::read(&path).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(root, "", &mut out);
    out
}

fn read_dump(path: &Path) -> ForecastDump {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

// ---- synth ----

#[test]
fn synth_zero_count_writes_an_empty_file() {
    let tmp = tempfile::tempdir().unwrap();
    ok(tmp.path(), &["synth", "--out", "clips.jsonl", "--count", "0"]);
    assert_eq!(fs::read(tmp.path().join("clips.jsonl")).unwrap(), b"");
    assert!(tmp.path().join("clips.jsonl.manifest.json").is_file());
}

#[test]
fn synth_reruns_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    ok(tmp.path(), &["synth", "--out", "a.jsonl", "--count", "5", "--seed", "11"]);
    ok(tmp.path(), &["synth", "--out", "b.jsonl", "--count", "5", "--seed", "11"]);
    let a = fs::read(tmp.path().join("a.jsonl")).unwrap();
    let b = fs::read(tmp.path().join("b.jsonl")).unwrap();
    assert!(!a.is_empty());
    assert_eq!(a, b);
    // Manifests differ only in the output name, so compare their hashes via
    // a third run into the first name.
    ok(tmp.path(), &["synth", "--out", "c.jsonl", "--count", "5", "--seed", "12"]);
    assert_ne!(a, fs::read(tmp.path().join("c.jsonl")).unwrap());
}

#[test]
fn synthesized_clips_survive_the_ingestion_thresholds() {
    let tmp = tempfile::tempdir().unwrap();
    ok(
        tmp.path(),
        &["synth", "--out", "clips.jsonl", "--count", "3", "--n", "12", "--groups", "3"],
    );
    let outcome = load_clips(&tmp.path().join("clips.jsonl")).unwrap();
    assert_eq!(outcome.clips.len(), 3);
    assert_eq!(outcome.skipped, 0);
    let kept = filter_clips(outcome.clips, 10, 10);
    assert_eq!(kept.len(), 3, "default figures must clear the 10-joint/10-target filter");
}

#[test]
fn malformed_clip_file_is_a_validation_error() {
    let tmp = tempfile::tempdir().unwrap();
    write_file(&tmp.path().join("bad.jsonl"), "this is not json\n");
    write_file(&tmp.path().join("pose_cfg.json"), POSE_CFG);
    let run = run_in(
        tmp.path(),
        &["train-pose", "--clips", "bad.jsonl", "--out", "p", "--config", "pose_cfg.json"],
    );
    assert_eq!(run.code, 2, "{}", run.stderr);
    assert!(run.stderr.contains("line 1"), "{}", run.stderr);
}

// ---- train-pose ----

#[test]
fn pose_loss_csv_has_one_row_per_iteration() {
    let tmp = tempfile::tempdir().unwrap();
    pose_fixture(tmp.path());
    let csv = fs::read_to_string(tmp.path().join("p1/loss.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "iteration,stage,loss");
    // 4 clips, batch 4 -> 1 batch per epoch, 2 epochs.
    assert_eq!(rows.len(), 1 + 2);
    assert!(rows[1].starts_with("0,1,"));
    assert!(rows[2].starts_with("1,1,"));
}

#[test]
fn stage_two_without_initialization_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    pose_fixture(tmp.path());
    let run = run_in(
        tmp.path(),
        &[
            "train-pose",
            "--clips",
            "clips.jsonl",
            "--out",
            "p2",
            "--config",
            "pose_cfg.json",
            "--stage",
            "2",
        ],
    );
    assert_eq!(run.code, 2);
    assert!(run.stderr.contains("--init-from"), "{}", run.stderr);
    // With the stage-1 checkpoint it goes through, and the checkpoint
    // records stage 2.
    ok(
        tmp.path(),
        &[
            "train-pose",
            "--clips",
            "clips.jsonl",
            "--out",
            "p2",
            "--config",
            "pose_cfg.json",
            "--stage",
            "2",
            "--init-from",
            "p1/pose.ckpt",
        ],
    );
    let loaded = load_pose_model(&tmp.path().join("p2/pose.ckpt")).unwrap();
    assert_eq!(loaded.stage, 2);
}

#[test]
fn pose_training_reruns_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    pose_fixture(tmp.path());
    ok(
        tmp.path(),
        &["train-pose", "--clips", "clips.jsonl", "--out", "p1b", "--config", "pose_cfg.json"],
    );
    assert_eq!(
        fs::read(tmp.path().join("p1/pose.ckpt")).unwrap(),
        fs::read(tmp.path().join("p1b/pose.ckpt")).unwrap()
    );
    assert_eq!(
        fs::read(tmp.path().join("p1/loss.csv")).unwrap(),
        fs::read(tmp.path().join("p1b/loss.csv")).unwrap()
    );
    assert_eq!(
        fs::read(tmp.path().join("p1/manifest.json")).unwrap(),
        fs::read(tmp.path().join("p1b/manifest.json")).unwrap()
    );
}

#[test]
fn resumed_pose_run_continues_the_unbroken_loss_curve() {
    let tmp = tempfile::tempdir().unwrap();
    pose_fixture(tmp.path());
    write_file(
        &tmp.path().join("pose_cfg4.json"),
        &POSE_CFG.replace("\"epochs\": 2", "\"epochs\": 4"),
    );
    ok(
        tmp.path(),
        &["train-pose", "--clips", "clips.jsonl", "--out", "p4", "--config", "pose_cfg4.json"],
    );
    ok(
        tmp.path(),
        &[
            "train-pose",
            "--clips",
            "clips.jsonl",
            "--out",
            "p2plus2",
            "--config",
            "pose_cfg.json",
            "--resume",
            "p1",
        ],
    );
    // Final checkpoints agree bit for bit; the resumed loss rows equal the
    // tail of the unbroken curve.
    assert_eq!(
        fs::read(tmp.path().join("p4/pose.ckpt")).unwrap(),
        fs::read(tmp.path().join("p2plus2/pose.ckpt")).unwrap()
    );
    let unbroken = fs::read_to_string(tmp.path().join("p4/loss.csv")).unwrap();
    let resumed = fs::read_to_string(tmp.path().join("p2plus2/loss.csv")).unwrap();
    let tail: Vec<&str> = unbroken.lines().skip(3).collect();
    let cont: Vec<&str> = resumed.lines().skip(1).collect();
    assert_eq!(tail, cont);
}

// ---- train-render ----

#[test]
fn resumed_render_run_matches_the_unbroken_run() {
    let tmp = tempfile::tempdir().unwrap();
    write_file(&tmp.path().join("render_cfg.json"), RENDER_CFG);
    write_file(
        &tmp.path().join("render_cfg4.json"),
        &RENDER_CFG.replace("\"iters\": 2", "\"iters\": 4"),
    );
    ok(
        tmp.path(),
        &["synth-triples", "--out-dir", "trip", "--count", "3", "--seed", "9", "--resolution", "32"],
    );
    for (out, cfg) in [("r2", "render_cfg.json"), ("r4", "render_cfg4.json")] {
        ok(
            tmp.path(),
            &["train-render", "--triples", "trip/index.jsonl", "--out", out, "--config", cfg],
        );
    }
    ok(
        tmp.path(),
        &[
            "train-render",
            "--triples",
            "trip/index.jsonl",
            "--out",
            "r2plus2",
            "--config",
            "render_cfg.json",
            "--resume",
            "r2",
        ],
    );
    assert_eq!(
        fs::read(tmp.path().join("r4/render.ckpt")).unwrap(),
        fs::read(tmp.path().join("r2plus2/render.ckpt")).unwrap()
    );
    assert_eq!(
        fs::read(tmp.path().join("r4/disc.ckpt")).unwrap(),
        fs::read(tmp.path().join("r2plus2/disc.ckpt")).unwrap()
    );
    let unbroken = fs::read_to_string(tmp.path().join("r4/loss.csv")).unwrap();
    let resumed = fs::read_to_string(tmp.path().join("r2plus2/loss.csv")).unwrap();
    let tail: Vec<&str> = unbroken.lines().skip(3).collect();
    let cont: Vec<&str> = resumed.lines().skip(1).collect();
    assert_eq!(tail, cont);
    // The loss CSV has one row per iteration.
    assert_eq!(unbroken.lines().count(), 1 + 4);
}

// ---- forecast ----

#[test]
fn forecast_covers_every_clip_and_round_trips_assignments() {
    let tmp = tempfile::tempdir().unwrap();
    pose_fixture(tmp.path());
    ok(
        tmp.path(),
        &["forecast", "--clips", "clips.jsonl", "--checkpoint", "p1/pose.ckpt", "--out", "fc.json"],
    );
    let dump = read_dump(&tmp.path().join("fc.json"));
    let clips = load_clips(&tmp.path().join("clips.jsonl")).unwrap().clips;
    assert_eq!(dump.clips.len(), clips.len());

    // Dumped assignments equal an in-memory forecast with the same
    // checkpoint, bit for bit (the JSON writer round-trips floats).
    let model = load_pose_model(&tmp.path().join("p1/pose.ckpt")).unwrap().model;
    for (disk, clip) in dump.clips.iter().zip(&clips) {
        assert_eq!(disk.clip_id, clip.clip_id);
        assert_eq!(disk.t2, clip.t2);
        let mem = model.forecast(clip, clip.t2, dump.temperature).unwrap();
        assert_eq!(disk.refined, mem.refined);
        assert_eq!(disk.assignments.len(), mem.assignments.len());
        for (da, ma) in disk.assignments.iter().zip(&mem.assignments) {
            assert_eq!(da.hard, ma.hard);
            assert_eq!(da.soft, ma.soft);
        }
        // Each person's refined track spans the horizon.
        assert!(disk.refined.iter().all(|p| p.len() == clip.t2));
    }
}

#[test]
fn forecast_model_flag_must_match_the_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    pose_fixture(tmp.path());
    let rejected = run_in(
        tmp.path(),
        &[
            "forecast",
            "--clips",
            "clips.jsonl",
            "--checkpoint",
            "p1/pose.ckpt",
            "--out",
            "fc.json",
            "--model",
            "vanilla",
        ],
    );
    assert_eq!(rejected.code, 2);
    assert!(rejected.stderr.contains("mg"), "{}", rejected.stderr);
    ok(
        tmp.path(),
        &[
            "forecast",
            "--clips",
            "clips.jsonl",
            "--checkpoint",
            "p1/pose.ckpt",
            "--out",
            "fc.json",
            "--model",
            "mg",
        ],
    );
}

#[test]
fn forecast_is_identical_across_worker_counts_and_reruns() {
    let tmp = tempfile::tempdir().unwrap();
    pose_fixture(tmp.path());
    for (out, workers) in [("a.json", "1"), ("b.json", "3"), ("c.json", "1")] {
        ok(
            tmp.path(),
            &[
                "forecast",
                "--clips",
                "clips.jsonl",
                "--checkpoint",
                "p1/pose.ckpt",
                "--out",
                out,
                "--workers",
                workers,
            ],
        );
    }
    let a = fs::read(tmp.path().join("a.json")).unwrap();
    assert_eq!(a, fs::read(tmp.path().join("b.json")).unwrap());
    assert_eq!(a, fs::read(tmp.path().join("c.json")).unwrap());
}

#[test]
fn missing_forecast_checkpoint_is_a_validation_error() {
    let tmp = tempfile::tempdir().unwrap();
    pose_fixture(tmp.path());
    let run = run_in(
        tmp.path(),
        &["forecast", "--clips", "clips.jsonl", "--checkpoint", "nope.ckpt", "--out", "fc.json"],
    );
    assert_eq!(run.code, 2);
    assert!(run.stderr.contains("does not exist"), "{}", run.stderr);
}

// ---- render ----

/// Fixture covering the render path: forecaster + renderer checkpoints, a
/// forecast, and a reference image. Returns the frames directory.
fn render_fixture(dir: &Path) -> PathBuf {
    pose_fixture(dir);
    write_file(&dir.join("render_cfg.json"), RENDER_CFG);
    ok(
        dir,
        &["synth-triples", "--out-dir", "trip", "--count", "3", "--seed", "9", "--resolution", "32"],
    );
    ok(
        dir,
        &[
            "train-render",
            "--triples",
            "trip/index.jsonl",
            "--out",
            "r2",
            "--config",
            "render_cfg.json",
        ],
    );
    ok(
        dir,
        &["forecast", "--clips", "clips.jsonl", "--checkpoint", "p1/pose.ckpt", "--out", "fc.json"],
    );
    fs::copy(dir.join("trip/reference_0000.png"), dir.join("ref.png")).unwrap();
    ok(
        dir,
        &[
            "render",
            "--forecast",
            "fc.json",
            "--references",
            "ref.png",
            "--checkpoint",
            "r2/render.ckpt",
            "--out-dir",
            "frames",
        ],
    );
    dir.join("frames")
}

#[test]
fn render_writes_one_directory_per_person_with_t2_frames() {
    let tmp = tempfile::tempdir().unwrap();
    let frames = render_fixture(tmp.path());
    let clips = load_clips(&tmp.path().join("clips.jsonl")).unwrap().clips;
    for clip in &clips {
        let clip_dir = frames.join(&clip.clip_id);
        let mut person_dirs: Vec<String> = fs::read_dir(&clip_dir)
            .unwrap()
            .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
            .collect();
        person_dirs.sort();
        let expected: Vec<String> =
            clip.tracks.iter().map(|t| format!("person_{:04}", t.person_id)).collect();
        assert_eq!(person_dirs, expected);
        for pdir in &person_dirs {
            let count = fs::read_dir(clip_dir.join(pdir)).unwrap().count();
            assert_eq!(count, clip.t2, "frame count must equal the horizon");
        }
    }
}

#[test]
fn render_is_idempotent_byte_for_byte() {
    let tmp = tempfile::tempdir().unwrap();
    let frames = render_fixture(tmp.path());
    ok(
        tmp.path(),
        &[
            "render",
            "--forecast",
            "fc.json",
            "--references",
            "ref.png",
            "--checkpoint",
            "r2/render.ckpt",
            "--out-dir",
            "frames2",
        ],
    );
    let first = tree_bytes(&frames);
    let second = tree_bytes(&tmp.path().join("frames2"));
    assert!(!first.is_empty());
    assert_eq!(first, second);
}

// ---- eval ----

fn schema_check(report_path: &Path) {
    let schema: serde_json::Value = serde_json::from_str(EVAL_REPORT_SCHEMA).unwrap();
    let validator = jsonschema::validator_for(&schema).unwrap();
    let instance: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(report_path).unwrap()).unwrap();
    let errors: Vec<String> = validator.iter_errors(&instance).map(|e| e.to_string()).collect();
    assert!(errors.is_empty(), "{report_path:?} violates the bundled schema: {errors:?}");
}

#[test]
fn self_evaluation_is_perfect_in_every_mode() {
    let tmp = tempfile::tempdir().unwrap();
    let frames = render_fixture(tmp.path());

    // Frames: a directory against itself.
    ok(
        tmp.path(),
        &["eval", "--pred", "frames", "--ref", "frames", "--mode", "frames", "--out", "fr.json"],
    );
    let report: EvalReport =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("fr.json")).unwrap()).unwrap();
    match report {
        EvalReport::Frames { frame_count, mse, psnr, frames: rows, .. } => {
            assert!(frame_count > 0);
            assert_eq!(mse, 0.0);
            assert_eq!(psnr, None);
            assert!(rows.iter().all(|r| r.mse == 0.0 && r.psnr.is_none()));
        }
        _ => panic!("expected a frames report"),
    }
    schema_check(&tmp.path().join("fr.json"));
    let _ = frames;

    // Pose: a forecast against itself.
    ok(
        tmp.path(),
        &["eval", "--pred", "fc.json", "--ref", "fc.json", "--mode", "pose", "--out", "self.json"],
    );
    let report: EvalReport =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("self.json")).unwrap()).unwrap();
    match report {
        EvalReport::Pose { clips, aggregate, .. } => {
            let agg = aggregate.expect("uniform horizon");
            for row in agg.coarse.iter().chain(&agg.refined) {
                assert_eq!(row.mse, 0.0);
                assert_eq!(row.joint_score, 1.0);
            }
            assert!(!clips.is_empty());
        }
        _ => panic!("expected a pose report"),
    }
    schema_check(&tmp.path().join("self.json"));
}

#[test]
fn pose_report_matches_direct_metric_calls() {
    let tmp = tempfile::tempdir().unwrap();
    pose_fixture(tmp.path());
    ok(
        tmp.path(),
        &["forecast", "--clips", "clips.jsonl", "--checkpoint", "p1/pose.ckpt", "--out", "fc.json"],
    );
    ok(
        tmp.path(),
        &[
            "eval", "--pred", "fc.json", "--ref", "clips.jsonl", "--mode", "pose", "--out",
            "report.json", "--csv", "report.csv",
        ],
    );
    schema_check(&tmp.path().join("report.json"));
    let report: EvalReport =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("report.json")).unwrap())
            .unwrap();
    let (clips_eval, aggregate) = match report {
        EvalReport::Pose { clips, aggregate, .. } => (clips, aggregate.expect("uniform horizon")),
        _ => panic!("expected a pose report"),
    };

    // Recompute the pooled table straight from the metrics module.
    let dump = read_dump(&tmp.path().join("fc.json"));
    let clips = load_clips(&tmp.path().join("clips.jsonl")).unwrap().clips;
    let params = JointScoreParams::default();
    let mut pred: Vec<Vec<Vec<f64>>> = Vec::new();
    let mut truth: Vec<Vec<Vec<f64>>> = Vec::new();
    for (fc, clip) in dump.clips.iter().zip(&clips) {
        pred.extend(fc.refined.iter().cloned());
        truth.extend(future_ground_truth(clip));
    }
    let direct = sequence_pose_eval(&pred, &truth, &params).unwrap();
    assert_eq!(aggregate.refined, direct);
    assert_eq!(clips_eval.len(), clips.len());

    // CSV export mirrors the aggregate rows.
    let csv = fs::read_to_string(tmp.path().join("report.csv")).unwrap();
    assert!(csv.starts_with("table,step,mse,joint_score\n"));
    assert_eq!(csv.lines().count(), 1 + 2 * direct.len());
}

#[test]
fn groups_report_scores_co_membership() {
    let tmp = tempfile::tempdir().unwrap();
    pose_fixture(tmp.path());
    ok(
        tmp.path(),
        &["forecast", "--clips", "clips.jsonl", "--checkpoint", "p1/pose.ckpt", "--out", "fc.json"],
    );
    ok(
        tmp.path(),
        &[
            "eval", "--pred", "fc.json", "--ref", "clips.jsonl", "--mode", "groups", "--out",
            "groups.json",
        ],
    );
    schema_check(&tmp.path().join("groups.json"));
    let report: EvalReport =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("groups.json")).unwrap())
            .unwrap();
    match report {
        EvalReport::Groups { clips, mean_rand_index, .. } => {
            assert_eq!(clips.len(), 4);
            assert!((0.0..=1.0).contains(&mean_rand_index));
            let mean: f64 =
                clips.iter().map(|c| c.rand_index).sum::<f64>() / clips.len() as f64;
            assert!((mean - mean_rand_index).abs() < 1e-12);
        }
        _ => panic!("expected a groups report"),
    }
}

#[test]
fn unknown_eval_mode_is_a_validation_error() {
    let tmp = tempfile::tempdir().unwrap();
    pose_fixture(tmp.path());
    write_file(&tmp.path().join("x.json"), "{}");
    let run = run_in(
        tmp.path(),
        &["eval", "--pred", "x.json", "--ref", "x.json", "--mode", "bogus", "--out", "r.json"],
    );
    assert_eq!(run.code, 2);
    assert!(run.stderr.contains("bogus"), "{}", run.stderr);
}

// ---- manifests ----

#[test]
fn every_command_leaves_a_manifest_beside_its_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let _ = render_fixture(tmp.path());
    ok(
        tmp.path(),
        &["eval", "--pred", "fc.json", "--ref", "clips.jsonl", "--mode", "pose", "--out", "rep.json"],
    );
    for manifest in [
        "clips.jsonl.manifest.json",
        "trip/manifest.json",
        "p1/manifest.json",
        "r2/manifest.json",
        "fc.json.manifest.json",
        "frames/manifest.json",
        "rep.json.manifest.json",
    ] {
        let path = tmp.path().join(manifest);
        let value: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        for key in ["command", "code_version", "config_sha256", "seeds", "outputs"] {
            assert!(value.get(key).is_some(), "{manifest} lacks {key}");
        }
        assert_eq!(value["config_sha256"].as_str().unwrap().len(), 64);
    }

    let clip_forecast: ForecastDump = read_dump(&tmp.path().join("fc.json"));
    let per_clip: &ClipForecast = &clip_forecast.clips[0];
    assert_eq!(per_clip.person_ids.len(), per_clip.refined.len());
}
