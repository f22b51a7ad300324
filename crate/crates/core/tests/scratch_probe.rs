use std::time::Instant;

use scenecast::forecaster::{ModelConfig, ModelKind, PoseModel};
use scenecast::metrics::{sequence_pose_eval, JointScoreParams, StepEval};
use scenecast::pose_data::{synth_scene, SceneClip, SynthConfig};
use scenecast::pose_training::{train, TrainConfig};

fn pooled_tables(model: &PoseModel, clips: &[SceneClip], temperature: f64) -> (Vec<StepEval>, Vec<StepEval>) {
    let params = JointScoreParams::default();
    let mut refined_rows: Vec<StepEval> = Vec::new();
    let mut coarse_rows: Vec<StepEval> = Vec::new();
    let mut n_rows = 0usize;
    for clip in clips {
        let fc = model.forecast(clip, clip.t2, temperature).unwrap();
        let gt: Vec<Vec<Vec<f64>>> = clip
            .tracks
            .iter()
            .map(|tr| (0..clip.t2).map(|s| tr.poses[clip.t1 + s].flat()).collect())
            .collect();
        let refined = sequence_pose_eval(&fc.refined, &gt, &params).unwrap();
        let coarse = sequence_pose_eval(&fc.coarse, &gt, &params).unwrap();
        if refined_rows.is_empty() {
            refined_rows = refined;
            coarse_rows = coarse;
        } else {
            for (acc, row) in refined_rows.iter_mut().zip(refined) {
                acc.mse += row.mse;
                acc.joint_score += row.joint_score;
            }
            for (acc, row) in coarse_rows.iter_mut().zip(coarse) {
                acc.mse += row.mse;
                acc.joint_score += row.joint_score;
            }
        }
        n_rows += 1;
    }
    for row in refined_rows.iter_mut().chain(coarse_rows.iter_mut()) {
        row.mse /= n_rows as f64;
        row.joint_score /= n_rows as f64;
    }
    (refined_rows, coarse_rows)
}

#[test]
fn probe_budgets() {
    let data_cfg = SynthConfig { n: 6, groups: 2, ..SynthConfig::default() };
    let clips: Vec<SceneClip> =
        (0..200).map(|k| synth_scene(&data_cfg, 10_000 + k).unwrap()).collect();
    let model_cfg = ModelConfig { j: 14, h_p: 32, g_size: 24, h_r: 16 };

    for seed in [1u64, 2, 3] {
        let tau = 1.0;
        let base = TrainConfig { lr: 2e-3, batch: 8, temperature: tau, ..TrainConfig::default() };

        let t0 = Instant::now();
        let mut grouped = PoseModel::new(model_cfg, ModelKind::Mg, seed);
        train(&mut grouped, &clips, &TrainConfig { stage: 1, epochs: 10, seed, ..base.clone() }).unwrap();
        train(&mut grouped, &clips, &TrainConfig { stage: 2, epochs: 8, seed: seed + 100, ..base.clone() }).unwrap();
        let mg_secs = t0.elapsed().as_secs_f64();

        let t0 = Instant::now();
        let mut vanilla = PoseModel::new(model_cfg, ModelKind::Vanilla, seed);
        train(&mut vanilla, &clips, &TrainConfig { stage: 1, epochs: 18, seed, ..base.clone() }).unwrap();
        let v_secs = t0.elapsed().as_secs_f64();

        let (g_refined, g_coarse) = pooled_tables(&grouped, &clips, tau);
        let (v_rows, _) = pooled_tables(&vanilla, &clips, tau);

        println!("seed {seed}: mg {mg_secs:.0}s vanilla {v_secs:.0}s");
        for s in 0..g_refined.len() {
            println!(
                "  step {s}: mg_ref score {:.5} mse {:.4e} | mg_coarse score {:.5} mse {:.4e} | van score {:.5} mse {:.4e}",
                g_refined[s].joint_score, g_refined[s].mse,
                g_coarse[s].joint_score, g_coarse[s].mse,
                v_rows[s].joint_score, v_rows[s].mse,
            );
        }
    }
}
