//! Trajectory recording and bit-exact replay verification.
//!
//! A trajectory file pins everything needed to regenerate an episode: the
//! environment configuration, the seed/env-id pair that derives all random
//! streams, the termination threshold, and the checkpoint path. Replaying
//! re-runs the deterministic policy and compares observations, actions, and
//! rewards bit for bit.

use crate::checkpoint::Checkpoint;
use crate::env::{EnvConfig, InsertionEnv};
use crate::eval::EvalPolicy;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const TRAJECTORY_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajStep {
    pub observation: Vec<f64>,
    pub action: [f64; 5],
    pub reward: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajectoryFile {
    pub version: u32,
    pub checkpoint_path: String,
    pub env_config: EnvConfig,
    pub master_seed: u64,
    pub env_id: u64,
    pub p_term: f64,
    pub steps: Vec<TrajStep>,
}

impl TrajectoryFile {
    pub fn save(&self, path: &Path) -> Result<(), String> {
        let json = serde_json::to_string(self).map_err(|e| e.to_string())?;
        std::fs::write(path, json).map_err(|e| format!("write {}: {e}", path.display()))
    }

    pub fn load(path: &Path) -> Result<TrajectoryFile, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("read {}: {e}", path.display()))?;
        let t: TrajectoryFile = serde_json::from_str(&text)
            .map_err(|e| format!("corrupt trajectory file {}: {e}", path.display()))?;
        if t.version != TRAJECTORY_VERSION {
            return Err(format!(
                "trajectory version mismatch: file has {}, expected {}",
                t.version, TRAJECTORY_VERSION
            ));
        }
        Ok(t)
    }
}

/// Runs one deterministic episode while recording every step.
pub fn record_episode(
    policy: &EvalPolicy,
    env_config: &EnvConfig,
    master_seed: u64,
    env_id: u64,
    p_term: f64,
    checkpoint_path: &str,
) -> TrajectoryFile {
    let mut env = InsertionEnv::new(env_config.clone(), master_seed, env_id);
    let mut steps = Vec::new();
    policy.run_episode_recorded(&mut env, env_id as usize, p_term, Some(&mut steps));
    TrajectoryFile {
        version: TRAJECTORY_VERSION,
        checkpoint_path: checkpoint_path.to_string(),
        env_config: env_config.clone(),
        master_seed,
        env_id,
        p_term,
        steps,
    }
}

/// Re-runs the recorded episode and verifies bit-exact agreement.
pub fn verify_replay(file: &TrajectoryFile, checkpoint: &Checkpoint) -> Result<(), String> {
    let (actor, _) = checkpoint.instantiate();
    let policy = EvalPolicy {
        actor: &actor,
        obs_norm: &checkpoint.obs_norm,
    };
    let mut env = InsertionEnv::new(file.env_config.clone(), file.master_seed, file.env_id);
    let mut steps = Vec::new();
    policy.run_episode_recorded(&mut env, file.env_id as usize, file.p_term, Some(&mut steps));

    if steps.len() != file.steps.len() {
        return Err(format!(
            "step count mismatch: recorded {}, replayed {}",
            file.steps.len(),
            steps.len()
        ));
    }
    for (i, (a, b)) in file.steps.iter().zip(steps.iter()).enumerate() {
        if a != b {
            return Err(format!("divergence at step {i}: replay does not match recording"));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::env::PoseErrorMode;
    use crate::nn::RunningNorm;
    use crate::policy::{Actor, Critic, NetworkSpec};
    use crate::sampling::{derive_stream, StreamKind};

    fn tiny_checkpoint() -> Checkpoint {
        let cfg = RunConfig::preset("peg8mm");
        let spec = NetworkSpec::new(vec![8], 4);
        let mut rng = derive_stream(5, 0, 0, StreamKind::Policy);
        let mut actor = Actor::new(&spec, -1.0, &mut rng);
        let mut critic = Critic::new(&spec, &mut rng);
        let mut obs_norm = RunningNorm::new(spec.obs_dim);
        // Seed the normalizer with plausible rows so normalization is active.
        for i in 0..32 {
            let row: Vec<f64> = (0..spec.obs_dim).map(|j| ((i + j) as f64).sin()).collect();
            obs_norm.update_row(&row);
        }
        let priv_norm = RunningNorm::new(spec.priv_dim);
        Checkpoint::from_nets(&mut actor, &mut critic, &obs_norm, &priv_norm, &cfg, 7)
    }

    #[test]
    fn record_then_verify_roundtrips() {
        let ck = tiny_checkpoint();
        let (actor, _) = ck.instantiate();
        let policy = EvalPolicy {
            actor: &actor,
            obs_norm: &ck.obs_norm,
        };
        let env_cfg = ck.config.env_config(PoseErrorMode::Ring {
            r_min: 0.0,
            r_max: 2.5e-3,
        });
        let traj = record_episode(&policy, &env_cfg, 123, 4, 0.9, "unused.json");
        assert!(!traj.steps.is_empty());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("traj.json");
        traj.save(&path).unwrap();
        let loaded = TrajectoryFile::load(&path).unwrap();
        verify_replay(&loaded, &ck).unwrap();
    }

    #[test]
    fn tampered_trajectory_fails_verification() {
        let ck = tiny_checkpoint();
        let (actor, _) = ck.instantiate();
        let policy = EvalPolicy {
            actor: &actor,
            obs_norm: &ck.obs_norm,
        };
        let env_cfg = ck.config.env_config(PoseErrorMode::None);
        let mut traj = record_episode(&policy, &env_cfg, 9, 0, 0.9, "unused.json");
        traj.steps[3].reward += 1e-9;
        let err = verify_replay(&traj, &ck).unwrap_err();
        assert!(err.contains("step 3"));
    }

    #[test]
    fn corrupt_file_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("garbage.json");
        std::fs::write(&path, "{not json").unwrap();
        let err = TrajectoryFile::load(&path).unwrap_err();
        assert!(err.contains("corrupt"));
    }
}
