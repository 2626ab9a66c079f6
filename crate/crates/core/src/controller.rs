//! Task-space impedance controller: converts relative-pose targets into
//! applied wrenches with critically damped gains.

use crate::math::{angle_diff, Force3, PoseYaw, Twist};
use crate::world::Wrench;
use serde::{Deserialize, Serialize};

/// Critically damped derivative gain for a proportional gain `kp`.
pub fn critically_damped(kp: f64) -> f64 {
    assert!(kp > 0.0, "kp must be positive, got {kp}");
    2.0 * kp.sqrt()
}

/// Impedance gains plus the per-step action scale.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ControllerGains {
    pub kp_lin: f64,
    pub kd_lin: f64,
    pub kp_yaw: f64,
    pub kd_yaw: f64,
    /// Per-axis clip radius of the positional target around the current EE
    /// pose (m).
    pub action_scale: f64,
    /// Per-step clip of the yaw target around the current EE yaw (rad).
    pub yaw_action_scale: f64,
}

impl ControllerGains {
    /// Builds critically damped gains from a linear proportional gain.
    /// Yaw stiffness is kp/100 to keep rotational authority proportional at
    /// part scale, with its own critically damped derivative gain.
    pub fn critically_damped_from(kp_lin: f64, action_scale: f64, yaw_action_scale: f64) -> Self {
        let kp_yaw = kp_lin / 100.0;
        Self {
            kp_lin,
            kd_lin: critically_damped(kp_lin),
            kp_yaw,
            kd_yaw: critically_damped(kp_yaw),
            action_scale,
            yaw_action_scale,
        }
    }
}

/// Bounds of the operational volume around the fixed-part tip estimate.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct WorkspaceBounds {
    /// Positional half-range of action targets around the tip (m).
    pub position: f64,
    /// Yaw half-range of action targets around the tip yaw (rad).
    pub yaw: f64,
}

impl Default for WorkspaceBounds {
    fn default() -> Self {
        Self {
            position: 0.05,
            yaw: std::f64::consts::FRAC_PI_4,
        }
    }
}

/// Maps a policy action in [-1, 1]^4 to an absolute target pose.
///
/// The action is first scaled into the workspace volume around the fixed-part
/// tip estimate, then the resulting candidate is clipped per axis to within
/// `action_scale` of the current EE pose (scale-then-clip).
pub fn compute_target_pose(
    action: &[f64; 4],
    fixed_tip_est: &PoseYaw,
    ee_pose: &PoseYaw,
    gains: &ControllerGains,
    workspace: &WorkspaceBounds,
) -> PoseYaw {
    let cand_x = fixed_tip_est.x + action[0] * workspace.position;
    let cand_y = fixed_tip_est.y + action[1] * workspace.position;
    let cand_z = fixed_tip_est.z + action[2] * workspace.position;
    let cand_yaw = fixed_tip_est.yaw + action[3] * workspace.yaw;

    let clip = |cand: f64, cur: f64, r: f64| cand.clamp(cur - r, cur + r);
    PoseYaw::new(
        clip(cand_x, ee_pose.x, gains.action_scale),
        clip(cand_y, ee_pose.y, gains.action_scale),
        clip(cand_z, ee_pose.z, gains.action_scale),
        // Clip the shortest-path yaw error, then re-anchor on the current yaw.
        ee_pose.yaw
            + angle_diff(cand_yaw, ee_pose.yaw).clamp(-gains.yaw_action_scale, gains.yaw_action_scale),
    )
}

/// Impedance law: `F = kp * (target - pose) - kd * velocity`, with the yaw
/// error taken along the shortest angular path.
pub fn impedance_wrench(
    target: &PoseYaw,
    ee_pose: &PoseYaw,
    ee_twist: &Twist,
    gains: &ControllerGains,
) -> Wrench {
    let force = Force3::new(
        gains.kp_lin * (target.x - ee_pose.x) - gains.kd_lin * ee_twist.vx,
        gains.kp_lin * (target.y - ee_pose.y) - gains.kd_lin * ee_twist.vy,
        gains.kp_lin * (target.z - ee_pose.z) - gains.kd_lin * ee_twist.vz,
    );
    let yaw_torque =
        gains.kp_yaw * angle_diff(target.yaw, ee_pose.yaw) - gains.kd_yaw * ee_twist.wyaw;
    Wrench { force, yaw_torque }
}
