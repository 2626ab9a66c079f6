//! Run configuration: task presets, randomization ranges, reward shaping,
//! physics constants, and PPO hyperparameters.
//!
//! The on-disk format is TOML with a `schema_version` field. Unknown keys are
//! rejected so typos in randomization ranges cannot silently invalidate an
//! experiment. All units are SI (meters, Newtons, radians, seconds).

use crate::controller::WorkspaceBounds;
use crate::env::{EnvConfig, PoseErrorMode, RewardConfig};
use crate::math::PoseYaw;
use crate::sampling::{DynamicsRanges, InitialStateRanges, NoiseConfig, Range};
use crate::world::{PhysicsParams, TaskGeometry};
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config file {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("config parse error in {path}: {message}")]
    Parse { path: String, message: String },
    #[error("config validation error at {field}: {message}")]
    Invalid { field: String, message: String },
    #[error("unsupported schema_version {found} (expected {expected})")]
    SchemaVersion { found: u32, expected: u32 },
}

/// Geometry plus task-scale parameters of one task preset.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    /// Preset name this config was derived from.
    pub name: String,
    pub geometry: TaskGeometry,
    pub reward: RewardConfig,
    pub dynamics: DynamicsRanges,
    pub initial_state: InitialStateRanges,
    pub noise: NoiseConfig,
    /// Operational volume around the fixed-part tip.
    pub workspace: WorkspaceBounds,
    /// Per-step yaw clip of the controller target (rad).
    pub yaw_action_scale: f64,
}

/// PPO and network hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PpoConfig {
    pub num_envs: usize,
    pub horizon: usize,
    pub epochs: usize,
    pub minibatches: usize,
    pub clip_eps: f64,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub learning_rate: f64,
    /// Linearly decay the learning rate to zero over the step budget.
    pub lr_decay: bool,
    pub max_grad_norm: f64,
    /// Total environment-step budget for training.
    pub total_env_steps: u64,
    /// Encoder hidden layer widths (actor and critic).
    pub encoder_hidden: Vec<usize>,
    /// Recurrent cell hidden size.
    pub recurrent_hidden: usize,
    /// Initial log standard deviation of the pose action Gaussian.
    pub initial_log_std: f64,
    /// Save a checkpoint every this many environment steps.
    pub checkpoint_every_steps: u64,
    /// Evaluate (for logging / early stop) every this many environment steps.
    pub eval_every_steps: u64,
    /// Episodes per intermediate evaluation.
    pub eval_episodes: usize,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            num_envs: 128,
            horizon: 32,
            epochs: 4,
            minibatches: 4,
            clip_eps: 0.2,
            entropy_coef: 1e-3,
            value_coef: 0.5,
            gamma: 0.99,
            gae_lambda: 0.95,
            learning_rate: 3e-4,
            lr_decay: true,
            max_grad_norm: 1.0,
            total_env_steps: 20_000_000,
            encoder_hidden: vec![64, 64],
            recurrent_hidden: 64,
            initial_log_std: -1.0,
            checkpoint_every_steps: 500_000,
            eval_every_steps: 250_000,
            eval_episodes: 50,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.num_envs == 0 || self.horizon == 0 {
            return Err("num_envs and horizon must be positive".into());
        }
        if self.minibatches == 0 || self.num_envs % self.minibatches != 0 {
            return Err("minibatches must divide num_envs".into());
        }
        if !(0.0..1.0).contains(&self.clip_eps) {
            return Err("clip_eps must be in (0, 1)".into());
        }
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.gae_lambda) {
            return Err("gamma and gae_lambda must be in [0, 1]".into());
        }
        if self.learning_rate <= 0.0 {
            return Err("learning_rate must be positive".into());
        }
        if self.encoder_hidden.is_empty() || self.recurrent_hidden == 0 {
            return Err("network sizes must be positive".into());
        }
        Ok(())
    }
}

/// Top-level run configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: u64,
    /// Worker threads; 0 means machine parallelism.
    pub threads: usize,
    pub task: TaskConfig,
    pub physics: PhysicsParams,
    pub ppo: PpoConfig,
}

impl RunConfig {
    /// Builds a named preset. Known presets: `peg8mm` (default task),
    /// `gear_medium`, `nut_m16`. Gear and nut presets carry their reward and
    /// randomization parameters; the simulated contact geometry is always the
    /// peg/socket pair.
    pub fn preset(name: &str) -> RunConfig {
        let task = match name {
            "peg8mm" => peg8mm_task(),
            "gear_medium" => gear_medium_task(),
            "nut_m16" => nut_m16_task(),
            other => panic!("unknown task preset: {other}"),
        };
        RunConfig {
            schema_version: SCHEMA_VERSION,
            seed: 1,
            threads: 0,
            task,
            physics: PhysicsParams::default(),
            ppo: PpoConfig::default(),
        }
    }

    pub fn load(path: &Path) -> Result<RunConfig, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let cfg: RunConfig = toml::from_str(&text).map_err(|e| ConfigError::Parse {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<(), ConfigError> {
        let text = toml::to_string_pretty(self).expect("config serializes");
        std::fs::write(path, text).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(ConfigError::SchemaVersion {
                found: self.schema_version,
                expected: SCHEMA_VERSION,
            });
        }
        let field = |f: &str, e: String| ConfigError::Invalid {
            field: f.to_string(),
            message: e,
        };
        self.task
            .geometry
            .validate()
            .map_err(|e| field("task.geometry", e))?;
        self.task
            .reward
            .validate()
            .map_err(|e| field("task.reward", e))?;
        self.task
            .dynamics
            .validate()
            .map_err(|e| field("task.dynamics", e))?;
        self.task
            .initial_state
            .validate()
            .map_err(|e| field("task.initial_state", e))?;
        self.task
            .noise
            .validate()
            .map_err(|e| field("task.noise", e))?;
        if self.task.yaw_action_scale <= 0.0 {
            return Err(field(
                "task.yaw_action_scale",
                "must be positive".to_string(),
            ));
        }
        self.physics.validate().map_err(|e| field("physics", e))?;
        self.ppo.validate().map_err(|e| field("ppo", e))?;
        Ok(())
    }

    /// Assembles the environment configuration for a given pose-error mode.
    pub fn env_config(&self, pose_error_mode: PoseErrorMode) -> EnvConfig {
        EnvConfig {
            geometry: self.task.geometry.clone(),
            physics: self.physics.clone(),
            reward: self.task.reward.clone(),
            dynamics_ranges: self.task.dynamics.clone(),
            initial_state: self.task.initial_state.clone(),
            noise: self.task.noise,
            workspace: self.task.workspace,
            yaw_action_scale: self.task.yaw_action_scale,
            pose_error_mode,
            kp_override: None,
            force_threshold_override: None,
        }
    }
}

fn peg8mm_task() -> TaskConfig {
    TaskConfig {
        name: "peg8mm".to_string(),
        geometry: TaskGeometry {
            peg_radius: 0.004,           // 8 mm diameter peg
            socket_inner_radius: 0.00425, // 0.5 mm diametrical clearance
            socket_depth: 0.025,
            socket_top_pose: PoseYaw::ZERO, // replaced by the sampled fixed pose
            contact_stiffness: 5000.0,
            contact_damping: 50.0,
        },
        reward: RewardConfig {
            coarse_a: 50.0,
            coarse_b: 2.0,
            fine_a: 100.0,
            fine_b: 0.0,
            contact_penalty_beta: 0.2,
            success_dist: 0.024,
            place_dist: 0.0025,
            lateral_tolerance: 0.002,
            place_bonus: 1.0,
            success_bonus: 1.0,
            episode_length: 150, // 10 s at 15 Hz
            keypoint_offsets: vec![0.0, 0.01, 0.02, 0.03],
        },
        dynamics: DynamicsRanges {
            kp: Range::new(400.0, 800.0),
            action_scale: Range::new(0.016, 0.025),
            dead_zone: Range::new(0.0, 5.0),
            part_friction: Range::new(0.5, 1.0),
            force_threshold: Range::new(5.0, 10.0),
        },
        initial_state: InitialStateRanges {
            fixed_x: Range::new(0.55, 0.65),
            fixed_y: Range::new(-0.05, 0.05),
            fixed_z: Range::new(0.0, 0.1),
            hand_rel_x: Range::new(-0.02, 0.02),
            hand_rel_y: Range::new(-0.02, 0.02),
            hand_rel_z: Range::new(0.037, 0.057),
            hand_yaw: Range::new(-std::f64::consts::FRAC_PI_4, std::f64::consts::FRAC_PI_4),
            held_rel_x: Range::new(-0.003, 0.003),
            held_rel_y: Range::fixed(0.0),
            held_rel_z: Range::new(0.014, 0.020),
        },
        noise: NoiseConfig::default(),
        workspace: WorkspaceBounds::default(),
        yaw_action_scale: 0.1,
    }
}

fn gear_medium_task() -> TaskConfig {
    let mut task = peg8mm_task();
    task.name = "gear_medium".to_string();
    task.reward.coarse_a = 50.0;
    task.reward.coarse_b = 2.0;
    task.reward.fine_a = 100.0;
    task.reward.fine_b = 0.0;
    task.reward.contact_penalty_beta = 0.05;
    task.reward.success_dist = 0.019;
    task.reward.place_dist = 0.002;
    task.reward.episode_length = 300; // 20 s
    task.dynamics.part_friction = Range::new(0.38, 0.75);
    task.initial_state.hand_rel_z = Range::new(0.025, 0.045);
    task.initial_state.held_rel_z = Range::new(0.012, 0.015);
    task
}

fn nut_m16_task() -> TaskConfig {
    let mut task = peg8mm_task();
    task.name = "nut_m16".to_string();
    task.reward.coarse_a = 100.0;
    task.reward.coarse_b = 2.0;
    task.reward.fine_a = 500.0;
    task.reward.fine_b = 0.0;
    task.reward.contact_penalty_beta = 0.05;
    task.reward.success_dist = 0.0025;
    task.reward.place_dist = 0.0025;
    task.reward.episode_length = 450; // 30 s
    task.dynamics.part_friction = Range::new(0.1, 0.38);
    task.initial_state.hand_rel_z = Range::new(0.005, 0.025);
    task.initial_state.hand_yaw = Range::new(
        -120.0f64.to_radians(),
        -90.0f64.to_radians(),
    );
    task.initial_state.held_rel_z = Range::new(0.010, 0.016);
    task
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for name in ["peg8mm", "gear_medium", "nut_m16"] {
            let cfg = RunConfig::preset(name);
            cfg.validate().unwrap();
            assert_eq!(cfg.task.name, name);
        }
    }

    #[test]
    fn peg_preset_matches_randomization_table() {
        let cfg = RunConfig::preset("peg8mm");
        assert_eq!(cfg.task.dynamics.kp, Range::new(400.0, 800.0));
        assert_eq!(cfg.task.dynamics.action_scale, Range::new(0.016, 0.025));
        assert_eq!(cfg.task.dynamics.dead_zone, Range::new(0.0, 5.0));
        assert_eq!(cfg.task.dynamics.part_friction, Range::new(0.5, 1.0));
        assert_eq!(cfg.task.dynamics.force_threshold, Range::new(5.0, 10.0));
        assert_eq!(cfg.task.reward.episode_length, 150);
        assert_eq!(cfg.task.reward.contact_penalty_beta, 0.2);
        assert_eq!(cfg.task.noise.fixed_pose_sigma, 2.5e-3);
        assert_eq!(cfg.task.noise.force_sigma, 1.0);
        assert_eq!(cfg.task.noise.ee_pos_sigma, 0.25e-3);
    }

    #[test]
    fn toml_roundtrip_preserves_config() {
        let cfg = RunConfig::preset("peg8mm");
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        cfg.save(&path).unwrap();
        let loaded = RunConfig::load(&path).unwrap();
        assert_eq!(loaded.task.name, cfg.task.name);
        assert_eq!(loaded.seed, cfg.seed);
        assert_eq!(loaded.ppo.num_envs, cfg.ppo.num_envs);
        assert_eq!(
            loaded.task.dynamics.force_threshold,
            cfg.task.dynamics.force_threshold
        );
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let cfg = RunConfig::preset("peg8mm");
        let mut text = toml::to_string_pretty(&cfg).unwrap();
        text.push_str("\nnot_a_real_key = 42\n");
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.toml");
        std::fs::write(&path, text).unwrap();
        let err = RunConfig::load(&path).unwrap_err();
        assert!(matches!(err, ConfigError::Parse { .. }));
    }

    #[test]
    fn schema_version_mismatch_is_rejected() {
        let mut cfg = RunConfig::preset("peg8mm");
        cfg.schema_version = 99;
        let err = cfg.validate().unwrap_err();
        assert!(matches!(err, ConfigError::SchemaVersion { found: 99, .. }));
    }
}
