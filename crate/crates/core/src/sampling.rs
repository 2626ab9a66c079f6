//! Per-episode dynamics randomization, initial-state sampling, pose-error
//! sampling, and per-step observation noise.
//!
//! All randomness flows through counter-derived ChaCha streams: one master
//! seed, split per (environment, episode, consumer), so results are
//! reproducible regardless of thread scheduling.

use crate::math::{Force3, PoseYaw};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Inclusive uniform range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl Range {
    pub fn new(lo: f64, hi: f64) -> Self {
        assert!(lo <= hi, "range lo {lo} must not exceed hi {hi}");
        Self { lo, hi }
    }

    pub fn fixed(v: f64) -> Self {
        Self { lo: v, hi: v }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> f64 {
        if self.lo == self.hi {
            self.lo
        } else {
            rng.gen_range(self.lo..self.hi)
        }
    }

    pub fn mid(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.lo && v <= self.hi
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.lo.is_finite() && self.hi.is_finite()) {
            return Err("range bounds must be finite".into());
        }
        if self.lo > self.hi {
            return Err(format!("range lo {} exceeds hi {}", self.lo, self.hi));
        }
        Ok(())
    }
}

/// Randomization ranges for the per-episode dynamics parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DynamicsRanges {
    /// Proportional controller gain.
    pub kp: Range,
    /// Action scale lambda (m).
    pub action_scale: Range,
    /// Per-axis force dead-zone (N); sampled independently per axis.
    pub dead_zone: Range,
    /// Part-on-part friction coefficient.
    pub part_friction: Range,
    /// Force threshold conditioning value (N).
    pub force_threshold: Range,
}

impl DynamicsRanges {
    pub fn validate(&self) -> Result<(), String> {
        self.kp.validate()?;
        self.action_scale.validate()?;
        self.dead_zone.validate()?;
        if self.dead_zone.lo < 0.0 {
            return Err("dead_zone must be non-negative".into());
        }
        self.part_friction.validate()?;
        self.force_threshold.validate()?;
        if self.kp.lo <= 0.0 {
            return Err("kp must be positive".into());
        }
        Ok(())
    }
}

/// Sampled per-episode dynamics parameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DynamicsParams {
    pub kp: f64,
    pub action_scale: f64,
    pub dead_zone: Force3,
    pub part_friction: f64,
    pub force_threshold: f64,
}

/// Samples each dynamics field independently and uniformly over its range.
pub fn sample_dynamics(rng: &mut impl Rng, ranges: &DynamicsRanges) -> DynamicsParams {
    DynamicsParams {
        kp: ranges.kp.sample(rng),
        action_scale: ranges.action_scale.sample(rng),
        dead_zone: Force3::new(
            ranges.dead_zone.sample(rng),
            ranges.dead_zone.sample(rng),
            ranges.dead_zone.sample(rng),
        ),
        part_friction: ranges.part_friction.sample(rng),
        force_threshold: ranges.force_threshold.sample(rng),
    }
}

/// Observation noise magnitudes.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct NoiseConfig {
    /// Per-episode Gaussian sigma of the fixed-part position estimate (m).
    pub fixed_pose_sigma: f64,
    /// Per-step Gaussian sigma of each force axis (N).
    pub force_sigma: f64,
    /// Per-step Gaussian sigma of each EE position axis (m).
    pub ee_pos_sigma: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            fixed_pose_sigma: 2.5e-3,
            force_sigma: 1.0,
            ee_pos_sigma: 0.25e-3,
        }
    }
}

impl NoiseConfig {
    pub fn zero() -> Self {
        Self {
            fixed_pose_sigma: 0.0,
            force_sigma: 0.0,
            ee_pos_sigma: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.fixed_pose_sigma < 0.0 || self.force_sigma < 0.0 || self.ee_pos_sigma < 0.0 {
            return Err("noise sigmas must be non-negative".into());
        }
        Ok(())
    }
}

/// Initial-state randomization ranges.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InitialStateRanges {
    pub fixed_x: Range,
    pub fixed_y: Range,
    pub fixed_z: Range,
    /// Hand position relative to the fixed-part tip (m).
    pub hand_rel_x: Range,
    pub hand_rel_y: Range,
    pub hand_rel_z: Range,
    /// Hand yaw (rad).
    pub hand_yaw: Range,
    /// Held-part offset in the hand frame (m). The z offset is how far the
    /// peg bottom protrudes below the gripper.
    pub held_rel_x: Range,
    pub held_rel_y: Range,
    pub held_rel_z: Range,
}

impl InitialStateRanges {
    pub fn validate(&self) -> Result<(), String> {
        for (name, r) in [
            ("fixed_x", &self.fixed_x),
            ("fixed_y", &self.fixed_y),
            ("fixed_z", &self.fixed_z),
            ("hand_rel_x", &self.hand_rel_x),
            ("hand_rel_y", &self.hand_rel_y),
            ("hand_rel_z", &self.hand_rel_z),
            ("hand_yaw", &self.hand_yaw),
            ("held_rel_x", &self.held_rel_x),
            ("held_rel_y", &self.held_rel_y),
            ("held_rel_z", &self.held_rel_z),
        ] {
            r.validate().map_err(|e| format!("{name}: {e}"))?;
        }
        Ok(())
    }
}

/// Sampled initial configuration: fixed-part tip pose, EE pose, and the grasp
/// offset of the peg bottom in the EE frame.
#[derive(Debug, Clone, Copy)]
pub struct InitialState {
    pub fixed: PoseYaw,
    pub ee: PoseYaw,
    pub grasp_offset: PoseYaw,
}

/// Uniformly samples the initial configuration: the fixed part in the world,
/// the hand relative to the fixed-part tip, and the held part in the hand.
pub fn sample_initial_state(rng: &mut impl Rng, ranges: &InitialStateRanges) -> InitialState {
    let fixed = PoseYaw::new(
        ranges.fixed_x.sample(rng),
        ranges.fixed_y.sample(rng),
        ranges.fixed_z.sample(rng),
        0.0,
    );
    let ee = PoseYaw::new(
        fixed.x + ranges.hand_rel_x.sample(rng),
        fixed.y + ranges.hand_rel_y.sample(rng),
        fixed.z + ranges.hand_rel_z.sample(rng),
        ranges.hand_yaw.sample(rng),
    );
    let grasp_offset = PoseYaw::new(
        ranges.held_rel_x.sample(rng),
        ranges.held_rel_y.sample(rng),
        -ranges.held_rel_z.sample(rng),
        0.0,
    );
    InitialState {
        fixed,
        ee,
        grasp_offset,
    }
}

/// Samples a 3D offset with norm uniform in `[r_min, r_max]` and isotropic
/// direction (the evaluation-time pose-error ring protocol).
pub fn sample_pose_error(rng: &mut impl Rng, r_min: f64, r_max: f64) -> [f64; 3] {
    assert!(0.0 <= r_min && r_min <= r_max);
    let radius = if r_min == r_max {
        r_min
    } else {
        rng.gen_range(r_min..r_max)
    };
    if radius == 0.0 {
        return [0.0, 0.0, 0.0];
    }
    // Isotropic direction from a normalized Gaussian triple.
    loop {
        let x: f64 = StandardNormal.sample(rng);
        let y: f64 = StandardNormal.sample(rng);
        let z: f64 = StandardNormal.sample(rng);
        let n = (x * x + y * y + z * z).sqrt();
        if n > 1e-12 {
            return [radius * x / n, radius * y / n, radius * z / n];
        }
    }
}

/// Samples the training-time fixed-part estimation error: raw Gaussian per
/// axis with `fixed_pose_sigma`.
pub fn sample_gaussian_pose_error(rng: &mut impl Rng, sigma: f64) -> [f64; 3] {
    let mut draw = || -> f64 {
        let g: f64 = StandardNormal.sample(rng);
        g * sigma
    };
    [draw(), draw(), draw()]
}

/// Consumer tags for stream splitting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamKind {
    Dynamics,
    InitialState,
    PoseError,
    ObsNoise,
    Policy,
    Update,
}

impl StreamKind {
    fn tag(self) -> u64 {
        match self {
            StreamKind::Dynamics => 1,
            StreamKind::InitialState => 2,
            StreamKind::PoseError => 3,
            StreamKind::ObsNoise => 4,
            StreamKind::Policy => 5,
            StreamKind::Update => 6,
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derives an independent ChaCha stream for (master seed, env, episode,
/// consumer). Streams never depend on sampling order elsewhere.
pub fn derive_stream(master_seed: u64, env_id: u64, episode: u64, kind: StreamKind) -> ChaCha8Rng {
    let mut s = splitmix64(master_seed);
    s = splitmix64(s ^ env_id.wrapping_mul(0xa076_1d64_78bd_642f));
    s = splitmix64(s ^ episode.wrapping_mul(0xe703_7ed1_a0b4_28db));
    s = splitmix64(s ^ kind.tag());
    let mut seed = [0u8; 32];
    let mut word = s;
    for chunk in seed.chunks_mut(8) {
        word = splitmix64(word);
        chunk.copy_from_slice(&word.to_le_bytes());
    }
    ChaCha8Rng::from_seed(seed)
}
