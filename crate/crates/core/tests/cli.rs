//! CLI behaviour: exit codes, run-directory guards, and byte-identical
//! outputs for repeated seeded runs.

use std::path::Path;
use std::process::Command;

fn pegin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_pegin"))
}

fn smoke_config_toml(dir: &Path) -> std::path::PathBuf {
    // Tiny budget: enough to exercise the full train/checkpoint path.
    let text = r#"
schema_version = 1
seed = 7
threads = 2

[task]
name = "peg8mm"
yaw_action_scale = 0.1

[task.geometry]
peg_radius = 0.004
socket_inner_radius = 0.00425
socket_depth = 0.025
contact_stiffness = 5000.0
contact_damping = 50.0

[task.geometry.socket_top_pose]
x = 0.0
y = 0.0
z = 0.0
yaw = 0.0

[task.reward]
coarse_a = 50.0
coarse_b = 2.0
fine_a = 100.0
fine_b = 0.0
contact_penalty_beta = 0.2
success_dist = 0.024
place_dist = 0.0025
lateral_tolerance = 0.002
place_bonus = 1.0
success_bonus = 1.0
episode_length = 30
keypoint_offsets = [0.0, 0.01, 0.02, 0.03]

[task.dynamics.kp]
lo = 400.0
hi = 800.0

[task.dynamics.action_scale]
lo = 0.016
hi = 0.025

[task.dynamics.dead_zone]
lo = 0.0
hi = 5.0

[task.dynamics.part_friction]
lo = 0.5
hi = 1.0

[task.dynamics.force_threshold]
lo = 5.0
hi = 10.0

[task.initial_state.fixed_x]
lo = 0.55
hi = 0.65

[task.initial_state.fixed_y]
lo = -0.05
hi = 0.05

[task.initial_state.fixed_z]
lo = 0.0
hi = 0.1

[task.initial_state.hand_rel_x]
lo = -0.02
hi = 0.02

[task.initial_state.hand_rel_y]
lo = -0.02
hi = 0.02

[task.initial_state.hand_rel_z]
lo = 0.037
hi = 0.057

[task.initial_state.hand_yaw]
lo = -0.7853981633974483
hi = 0.7853981633974483

[task.initial_state.held_rel_x]
lo = -0.003
hi = 0.003

[task.initial_state.held_rel_y]
lo = 0.0
hi = 0.0

[task.initial_state.held_rel_z]
lo = 0.014
hi = 0.02

[task.noise]
fixed_pose_sigma = 0.0025
force_sigma = 1.0
ee_pos_sigma = 0.00025

[task.workspace]
position = 0.05
yaw = 0.7853981633974483

[physics]
mass = 0.5
yaw_inertia = 0.05
ambient_lin_damping = 1.0
ambient_yaw_damping = 0.001
dt = 0.004166666666666667
substeps = 16
max_abs_position = 2.0
max_speed = 10.0
fillet_radius = 0.0005
edge_zone = 0.001
wall_engage_depth = 0.002
wall_taper = 0.002
wall_pen_cap = 0.002
friction_reg_vel = 0.01

[ppo]
num_envs = 4
horizon = 16
epochs = 2
minibatches = 2
clip_eps = 0.2
entropy_coef = 0.001
value_coef = 0.5
gamma = 0.99
gae_lambda = 0.95
learning_rate = 0.0003
lr_decay = true
max_grad_norm = 1.0
total_env_steps = 192
encoder_hidden = [16, 16]
recurrent_hidden = 8
initial_log_std = -1.0
checkpoint_every_steps = 192
eval_every_steps = 100000
eval_episodes = 4
"#;
    let path = dir.join("smoke.toml");
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn missing_config_file_exits_2() {
    let out = tempfile::tempdir().unwrap();
    let status = pegin()
        .args([
            "train",
            "--config",
            "/nonexistent/nope.toml",
            "--out",
            out.path().join("r").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(status.status.code(), Some(2));
    assert!(!String::from_utf8_lossy(&status.stderr).is_empty());
}

#[test]
fn invalid_noise_band_exits_2() {
    let status = pegin()
        .args([
            "eval",
            "--checkpoint",
            "/nonexistent/ck.json",
            "--noise-band",
            "extreme",
            "--out",
            "/tmp/unused-pegin-eval",
        ])
        .output()
        .unwrap();
    assert_eq!(status.status.code(), Some(2));
}

#[test]
fn missing_checkpoint_exits_1() {
    let status = pegin()
        .args([
            "eval",
            "--checkpoint",
            "/nonexistent/ck.json",
            "--out",
            "/tmp/unused-pegin-eval2",
        ])
        .output()
        .unwrap();
    assert_eq!(status.status.code(), Some(1));
}

#[test]
fn refuses_to_overwrite_run_dir_without_force() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_config_toml(dir.path());
    let out = dir.path().join("run");
    let ok = pegin()
        .args(["train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(ok.status.success(), "{}", String::from_utf8_lossy(&ok.stderr));
    let second = pegin()
        .args(["train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(second.status.code(), Some(2));
    let forced = pegin()
        .args([
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--force",
        ])
        .output()
        .unwrap();
    assert!(forced.status.success());
}

#[test]
fn seeded_runs_are_byte_identical_and_replayable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_config_toml(dir.path());
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    for out in [&out_a, &out_b] {
        let st = pegin()
            .args(["train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()])
            .output()
            .unwrap();
        assert!(st.status.success(), "{}", String::from_utf8_lossy(&st.stderr));
    }
    let metrics_a = std::fs::read(out_a.join("metrics.csv")).unwrap();
    let metrics_b = std::fs::read(out_b.join("metrics.csv")).unwrap();
    assert_eq!(metrics_a, metrics_b, "seeded training metrics must be byte-identical");

    // Evaluate the checkpoint twice; episodes.csv must be byte-identical.
    let ck = out_a.join("checkpoint_best.json");
    assert!(ck.exists());
    let eval_a = dir.path().join("eval_a");
    let eval_b = dir.path().join("eval_b");
    let traj = dir.path().join("ep0.json");
    for (out, record) in [(&eval_a, Some(&traj)), (&eval_b, None)] {
        let mut cmd = pegin();
        cmd.args([
            "eval",
            "--checkpoint",
            ck.to_str().unwrap(),
            "--episodes",
            "6",
            "--noise-band",
            "all",
            "--out",
            out.to_str().unwrap(),
            "--seed",
            "5",
        ]);
        if let Some(r) = record {
            cmd.args(["--record", r.to_str().unwrap()]);
        }
        let st = cmd.output().unwrap();
        assert!(st.status.success(), "{}", String::from_utf8_lossy(&st.stderr));
    }
    let ep_a = std::fs::read(eval_a.join("episodes.csv")).unwrap();
    let ep_b = std::fs::read(eval_b.join("episodes.csv")).unwrap();
    assert_eq!(ep_a, ep_b, "seeded evals must be byte-identical");

    // Replay of the just-recorded trajectory exits 0.
    let st = pegin()
        .args(["replay", "--trajectory", traj.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(st.status.success(), "{}", String::from_utf8_lossy(&st.stderr));

    // A corrupt trajectory exits nonzero.
    let garbled = dir.path().join("bad.json");
    std::fs::write(&garbled, "{definitely not json").unwrap();
    let st = pegin()
        .args(["replay", "--trajectory", garbled.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(st.status.code(), Some(1));
}
