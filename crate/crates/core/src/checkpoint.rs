//! Versioned checkpoint container: network spec, flat parameter arrays,
//! normalizer statistics, and the config snapshot that produced them.

use crate::config::RunConfig;
use crate::nn::{Parameterized, RunningNorm};
use crate::policy::{Actor, Critic, NetworkSpec};
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub network_spec: NetworkSpec,
    pub actor_params: Vec<f64>,
    pub critic_params: Vec<f64>,
    pub obs_norm: RunningNorm,
    pub priv_norm: RunningNorm,
    pub config: RunConfig,
    pub env_steps: u64,
}

impl Checkpoint {
    pub fn from_nets(
        actor: &mut Actor,
        critic: &mut Critic,
        obs_norm: &RunningNorm,
        priv_norm: &RunningNorm,
        config: &RunConfig,
        env_steps: u64,
    ) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            network_spec: actor.spec.clone(),
            actor_params: actor.flatten_params(),
            critic_params: critic.flatten_params(),
            obs_norm: obs_norm.clone(),
            priv_norm: priv_norm.clone(),
            config: config.clone(),
            env_steps,
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), String> {
        let json = serde_json::to_string(self).map_err(|e| e.to_string())?;
        std::fs::write(path, json).map_err(|e| format!("write {}: {e}", path.display()))
    }

    pub fn load(path: &Path) -> Result<Checkpoint, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("read {}: {e}", path.display()))?;
        let ck: Checkpoint =
            serde_json::from_str(&text).map_err(|e| format!("parse {}: {e}", path.display()))?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(format!(
                "checkpoint version mismatch: file has {}, this build expects {}",
                ck.version, CHECKPOINT_VERSION
            ));
        }
        Ok(ck)
    }

    pub fn load_into(&self, actor: &mut Actor, critic: &mut Critic) {
        assert_eq!(actor.spec, self.network_spec, "actor spec mismatch");
        actor.load_params(&self.actor_params);
        critic.load_params(&self.critic_params);
    }

    /// Rebuilds the actor/critic pair described by this checkpoint.
    pub fn instantiate(&self) -> (Actor, Critic) {
        let mut rng = crate::sampling::derive_stream(0, 0, 0, crate::sampling::StreamKind::Policy);
        let mut actor = Actor::new(&self.network_spec, -1.0, &mut rng);
        let mut critic = Critic::new(&self.network_spec, &mut rng);
        self.load_into(&mut actor, &mut critic);
        (actor, critic)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_parameters_bitwise() {
        let cfg = RunConfig::preset("peg8mm");
        let spec = NetworkSpec::new(vec![8], 4);
        let mut rng = crate::sampling::derive_stream(3, 0, 0, crate::sampling::StreamKind::Policy);
        let mut actor = Actor::new(&spec, -1.0, &mut rng);
        let mut critic = Critic::new(&spec, &mut rng);
        let obs_norm = RunningNorm::new(spec.obs_dim);
        let priv_norm = RunningNorm::new(spec.priv_dim);
        let ck = Checkpoint::from_nets(&mut actor, &mut critic, &obs_norm, &priv_norm, &cfg, 42);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        ck.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded.env_steps, 42);
        assert_eq!(loaded.actor_params.len(), ck.actor_params.len());
        for (a, b) in loaded.actor_params.iter().zip(ck.actor_params.iter()) {
            assert_eq!(a.to_bits(), b.to_bits(), "parameters must round-trip bit-exactly");
        }
        let (mut a2, _) = loaded.instantiate();
        assert_eq!(a2.flatten_params(), ck.actor_params);
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let cfg = RunConfig::preset("peg8mm");
        let spec = NetworkSpec::new(vec![8], 4);
        let mut rng = crate::sampling::derive_stream(4, 0, 0, crate::sampling::StreamKind::Policy);
        let mut actor = Actor::new(&spec, -1.0, &mut rng);
        let mut critic = Critic::new(&spec, &mut rng);
        let obs_norm = RunningNorm::new(spec.obs_dim);
        let priv_norm = RunningNorm::new(spec.priv_dim);
        let mut ck = Checkpoint::from_nets(&mut actor, &mut critic, &obs_norm, &priv_norm, &cfg, 0);
        ck.version = 99;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        std::fs::write(&path, serde_json::to_string(&ck).unwrap()).unwrap();
        let err = Checkpoint::load(&path).unwrap_err();
        assert!(err.contains("version mismatch"));
    }
}
