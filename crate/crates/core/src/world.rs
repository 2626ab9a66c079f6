//! Rigid-contact physics for a floating end-effector holding a cylindrical
//! peg above a fixed socket.
//!
//! The end-effector is a gravity-compensated point mass with yaw inertia. The
//! peg is rigidly attached at a per-episode grasp offset; its bottom-face
//! center is the contact reference point. The socket is a vertical bore of
//! radius `socket_inner_radius` and depth `socket_depth` sunk into an
//! otherwise unbounded horizontal top face at `socket_top_pose.z`.
//!
//! Contact is a penalty model with four primitives, each producing
//! `F_n = max(0, stiffness * penetration + damping * penetration_rate)` along
//! its own normal, plus regularized Coulomb friction bounded by
//! `mu * |F_n|`:
//!
//! - **floor**: peg bottom below the bore floor while laterally inside the
//!   bore; normal +z.
//! - **rim**: peg bottom below the top face while part of its footprint is
//!   over solid material; normal +z, scaled by the solid overlap fraction of
//!   the footprint (pressure-times-area: an overhanging peg gets
//!   proportionally less support and visibly dips over the hole mouth).
//! - **hole edge**: when the peg axis sits just outside the hole edge circle
//!   while sunk below the top face, the bottom corner wedges against the edge
//!   and is pushed radially outward; when the axis is within one bottom-edge
//!   fillet radius of fitting, the far-side fillet rides the far edge and
//!   nudges the peg radially inward (the capture funnel a real rounded-edge
//!   peg exhibits). Both are wedge-limited by the sink depth.
//! - **bore wall**: lateral constraint once the peg is genuinely descending
//!   into the bore; engages gradually below `wall_engage_depth` so that a peg
//!   merely resting on the rim feels no spurious lateral pull.

use crate::math::{Force3, PoseYaw, Twist};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Socket/peg geometry and the contact material constants.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskGeometry {
    /// Peg radius (m).
    pub peg_radius: f64,
    /// Bore radius (m); must exceed `peg_radius`.
    pub socket_inner_radius: f64,
    /// Bore depth below the top face (m).
    pub socket_depth: f64,
    /// Pose of the bore axis at the top face ("fixed-part tip").
    pub socket_top_pose: PoseYaw,
    /// Penalty spring stiffness (N/m).
    pub contact_stiffness: f64,
    /// Penalty damping (N·s/m).
    pub contact_damping: f64,
}

impl TaskGeometry {
    pub fn radial_clearance(&self) -> f64 {
        self.socket_inner_radius - self.peg_radius
    }

    pub fn floor_z(&self) -> f64 {
        self.socket_top_pose.z - self.socket_depth
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.peg_radius <= 0.0 {
            return Err("peg_radius must be positive".into());
        }
        if self.socket_inner_radius <= self.peg_radius {
            return Err("socket_inner_radius must exceed peg_radius".into());
        }
        if self.socket_depth <= 0.0 {
            return Err("socket_depth must be positive".into());
        }
        if self.contact_stiffness <= 0.0 {
            return Err("contact_stiffness must be positive".into());
        }
        if self.contact_damping < 0.0 {
            return Err("contact_damping must be non-negative".into());
        }
        Ok(())
    }
}

/// Integrator constants and contact-model shape parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhysicsParams {
    /// End-effector mass (kg); gravity compensated, so no weight term.
    pub mass: f64,
    /// Yaw moment of inertia (kg·m²).
    pub yaw_inertia: f64,
    /// Ambient linear viscous damping (N·s/m).
    pub ambient_lin_damping: f64,
    /// Ambient yaw viscous damping (N·m·s/rad).
    pub ambient_yaw_damping: f64,
    /// Physics timestep (s).
    pub dt: f64,
    /// Physics substeps per policy step.
    pub substeps: u32,
    /// Divergence bound on |position| per axis (m).
    pub max_abs_position: f64,
    /// Divergence bound on linear speed (m/s).
    pub max_speed: f64,
    /// Bottom-edge fillet radius of the peg (m); sets the capture funnel width.
    pub fillet_radius: f64,
    /// Half-width of the outward hole-edge wedge zone (m).
    pub edge_zone: f64,
    /// Depth below the top face at which the bore wall starts engaging (m).
    pub wall_engage_depth: f64,
    /// Depth span over which wall engagement ramps from 0 to 1 (m).
    pub wall_taper: f64,
    /// Cap on wall penetration used for the lateral wall force (m).
    pub wall_pen_cap: f64,
    /// Friction regularization velocity (m/s): tangential force is
    /// `mu * |F_n| * tanh(|v_t| / friction_reg_vel)`, additionally capped so
    /// a single substep cannot reverse the slip direction.
    pub friction_reg_vel: f64,
}

impl Default for PhysicsParams {
    fn default() -> Self {
        Self {
            mass: 0.5,
            // Reflected yaw inertia of the arm at the wrist. Must satisfy
            // kd_yaw * dt / I < 2 for the collapsed inner loop; the
            // bare-tool value of 1e-3 kg·m² is explicitly unstable there.
            yaw_inertia: 0.05,
            ambient_lin_damping: 1.0,
            ambient_yaw_damping: 1e-3,
            dt: 1.0 / 240.0,
            substeps: 16,
            max_abs_position: 2.0,
            max_speed: 10.0,
            fillet_radius: 5e-4,
            edge_zone: 1e-3,
            wall_engage_depth: 2e-3,
            wall_taper: 2e-3,
            wall_pen_cap: 2e-3,
            friction_reg_vel: 1e-2,
        }
    }
}

impl PhysicsParams {
    pub fn validate(&self) -> Result<(), String> {
        if self.mass <= 0.0 || self.yaw_inertia <= 0.0 {
            return Err("mass and yaw_inertia must be positive".into());
        }
        if self.dt <= 0.0 || self.dt > 1.0 / 60.0 {
            return Err("dt must be in (0, 1/60] s".into());
        }
        if self.substeps == 0 {
            return Err("substeps must be at least 1".into());
        }
        if self.friction_reg_vel <= 0.0 {
            return Err("friction_reg_vel must be positive".into());
        }
        Ok(())
    }
}

/// Simulator state: the end-effector plus the rigidly grasped peg.
///
/// The held-part (peg bottom center) pose is derived from the end-effector
/// pose and the fixed grasp offset, so the rigid-attachment invariant holds
/// by construction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimState {
    pub ee_pose: PoseYaw,
    pub ee_twist: Twist,
    /// Grasp offset of the peg bottom center, expressed in the EE frame.
    pub grasp_offset: PoseYaw,
    /// Contact reaction on the held peg computed at the last step.
    pub contact_force: Force3,
    /// Simulated time (s), non-decreasing.
    pub time: f64,
}

impl SimState {
    pub fn new(ee_pose: PoseYaw, grasp_offset: PoseYaw) -> Self {
        Self {
            ee_pose,
            ee_twist: Twist::ZERO,
            grasp_offset,
            contact_force: Force3::ZERO,
            time: 0.0,
        }
    }

    /// World pose of the peg bottom center.
    pub fn held_pose(&self) -> PoseYaw {
        self.ee_pose.compose(&self.grasp_offset)
    }
}

/// Applied wrench in the controlled dimensions.
#[derive(Debug, Clone, Copy, Default)]
pub struct Wrench {
    pub force: Force3,
    pub yaw_torque: f64,
}

#[derive(Debug, Error)]
#[error(
    "simulation diverged at t={time:.4}s: state exceeded bounds \
     (pos=({x:.3}, {y:.3}, {z:.3}) m, speed={speed:.3} m/s, yaw_rate={yaw_rate:.3} rad/s); \
     likely an unstable stiffness/dt pairing"
)]
pub struct DivergenceError {
    pub time: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub speed: f64,
    pub yaw_rate: f64,
}

/// Solid overlap fraction of the peg footprint: 1 when fully over the top
/// face, 0 when fully over the hole. Closed-form two-circle lens area.
pub fn solid_overlap_fraction(lateral_offset: f64, peg_radius: f64, hole_radius: f64) -> f64 {
    let d = lateral_offset.abs();
    let r = peg_radius;
    let rr = hole_radius;
    if d + r <= rr {
        return 0.0; // footprint entirely over the hole
    }
    if d >= r + rr {
        return 1.0; // footprint entirely over solid
    }
    // Lens area of the intersection of the peg circle and the hole circle.
    let d2 = d * d;
    let a1 = ((d2 + r * r - rr * rr) / (2.0 * d * r)).clamp(-1.0, 1.0);
    let a2 = ((d2 + rr * rr - r * r) / (2.0 * d * rr)).clamp(-1.0, 1.0);
    let t = (-d + r + rr) * (d + r - rr) * (d - r + rr) * (d + r + rr);
    let lens = r * r * a1.acos() + rr * rr * a2.acos() - 0.5 * t.max(0.0).sqrt();
    (1.0 - lens / (std::f64::consts::PI * r * r)).clamp(0.0, 1.0)
}

/// Per-primitive contact force breakdown (normals plus friction), all acting
/// on the held peg.
#[derive(Debug, Clone, Copy, Default)]
pub struct ContactBreakdown {
    pub floor_normal: f64,
    pub rim_normal: f64,
    pub wall_normal: f64,
    pub edge_radial: f64, // signed: positive outward, negative inward
    pub friction: Force3,
    pub max_penetration: f64,
    pub total: Force3,
}

fn penalty(stiffness: f64, damping: f64, pen: f64, pen_rate: f64) -> f64 {
    (stiffness * pen + damping * pen_rate).max(0.0)
}

/// Regularized Coulomb friction magnitude for a given slip speed, capped so
/// one substep cannot reverse the slip direction (keeps the stiff tanh slope
/// integrable at the physics rate).
fn friction_magnitude(normal_mag: f64, mu: f64, slip: f64, params: &PhysicsParams) -> f64 {
    if slip < 1e-12 || mu <= 0.0 || normal_mag <= 0.0 {
        return 0.0;
    }
    let coulomb = mu * normal_mag * (slip / params.friction_reg_vel).tanh();
    let no_reversal = 0.9 * params.mass * slip / params.dt;
    coulomb.min(no_reversal)
}

/// Computes the net contact reaction on the held peg.
pub fn contact_forces(state: &SimState, geom: &TaskGeometry, friction_coeff: f64) -> Force3 {
    contact_breakdown(state, geom, &PhysicsParams::default(), friction_coeff).total
}

/// Full contact evaluation. `params` carries the contact-model shape
/// constants (fillet, edge zone, wall engagement).
pub fn contact_breakdown(
    state: &SimState,
    geom: &TaskGeometry,
    params: &PhysicsParams,
    friction_coeff: f64,
) -> ContactBreakdown {
    let mut out = ContactBreakdown::default();
    let held = state.held_pose();
    let v = state.ee_twist; // rigid grasp: held velocity equals EE velocity
    let k = geom.contact_stiffness;
    let c = geom.contact_damping;
    let top_z = geom.socket_top_pose.z;
    let hole_r = geom.socket_inner_radius;
    let peg_r = geom.peg_radius;
    let clearance = geom.radial_clearance();

    let dx = held.x - geom.socket_top_pose.x;
    let dy = held.y - geom.socket_top_pose.y;
    let rho = (dx * dx + dy * dy).sqrt();
    // Outward radial unit vector; degenerate at the axis where no radial
    // contact primitive is active anyway.
    let (ux, uy) = if rho > 1e-12 {
        (dx / rho, dy / rho)
    } else {
        (0.0, 0.0)
    };
    let v_radial = v.vx * ux + v.vy * uy;

    let sink = top_z - held.z; // how far the bottom face is below the top face
    let mut fx = 0.0;
    let mut fy = 0.0;
    let mut fz = 0.0;

    // Floor: bottom face against the bore floor.
    let floor_pen = geom.floor_z() - held.z;
    if floor_pen > 0.0 && rho < hole_r {
        let fn_mag = penalty(k, c, floor_pen, -v.vz);
        out.floor_normal = fn_mag;
        out.max_penetration = out.max_penetration.max(floor_pen);
        fz += fn_mag;
        let (tfx, tfy) = lateral_friction(fn_mag, friction_coeff, v.vx, v.vy, params);
        fx += tfx;
        fy += tfy;
        out.friction.fx += tfx;
        out.friction.fy += tfy;
    }

    // Rim: bottom face against the top face, weighted by the solid fraction
    // of the footprint.
    if sink > 0.0 {
        let w = solid_overlap_fraction(rho, peg_r, hole_r);
        if w > 0.0 {
            let fn_mag = penalty(k, c, sink, -v.vz) * w;
            out.rim_normal = fn_mag;
            out.max_penetration = out.max_penetration.max(sink);
            fz += fn_mag;
            let (tfx, tfy) = lateral_friction(fn_mag, friction_coeff, v.vx, v.vy, params);
            fx += tfx;
            fy += tfy;
            out.friction.fx += tfx;
            out.friction.fy += tfy;
        }

        // Outward hole-edge wedge: the bottom corner catches the edge when
        // the peg axis sits just outside the hole edge circle. Triangular
        // profile over the edge zone, wedge-limited by the sink depth.
        let beyond = rho - hole_r;
        if beyond > 0.0 && beyond < params.edge_zone {
            let pen = beyond.min(sink).min(params.edge_zone - beyond);
            if pen > 0.0 {
                let f_mag = penalty(k, c, pen, v_radial);
                out.edge_radial += f_mag;
                fx += f_mag * ux;
                fy += f_mag * uy;
            }
        }

        // Inward fillet capture: with the axis within one fillet radius of
        // fitting, the far-side bottom fillet rides the far hole edge and
        // funnels the peg in. Zero exactly at the clearance boundary.
        let past_fit = rho - clearance;
        if past_fit > 0.0 && past_fit < params.fillet_radius {
            let pen = past_fit
                .min(params.fillet_radius - past_fit)
                .min(sink)
                .min(params.fillet_radius);
            if pen > 0.0 {
                let f_mag = penalty(k, c, pen, -v_radial);
                out.edge_radial -= f_mag;
                fx -= f_mag * ux;
                fy -= f_mag * uy;
            }
        }

        // Bore wall: lateral constraint for a peg whose axis is over the
        // bore mouth. Engages with depth so a peg merely resting on the rim
        // feels no lateral pull, while a descending peg is constrained.
        let wall_pen = rho - clearance;
        if wall_pen > 0.0 && rho <= hole_r {
            let engage = ((sink - params.wall_engage_depth) / params.wall_taper).clamp(0.0, 1.0);
            if engage > 0.0 {
                let pen = wall_pen.min(params.wall_pen_cap);
                let fn_mag = penalty(k, c, pen, v_radial) * engage;
                if fn_mag > 0.0 {
                    out.wall_normal = fn_mag;
                    out.max_penetration = out.max_penetration.max(pen);
                    fx -= fn_mag * ux;
                    fy -= fn_mag * uy;
                    // Friction against sliding along the wall (vertical and
                    // circumferential slip).
                    let v_circ = -v.vx * uy + v.vy * ux;
                    let slip = (v.vz * v.vz + v_circ * v_circ).sqrt();
                    let ft = friction_magnitude(fn_mag, friction_coeff, slip, params);
                    if ft > 0.0 {
                        let fz_t = -ft * v.vz / slip;
                        let fc_t = -ft * v_circ / slip;
                        fz += fz_t;
                        fx += fc_t * -uy;
                        fy += fc_t * ux;
                        out.friction.fz += fz_t;
                        out.friction.fx += fc_t * -uy;
                        out.friction.fy += fc_t * ux;
                    }
                }
            }
        }
    }

    out.total = Force3::new(fx, fy, fz);
    out
}

fn lateral_friction(
    normal_mag: f64,
    mu: f64,
    vx: f64,
    vy: f64,
    params: &PhysicsParams,
) -> (f64, f64) {
    let slip = (vx * vx + vy * vy).sqrt();
    let ft = friction_magnitude(normal_mag, mu, slip, params);
    if ft == 0.0 {
        return (0.0, 0.0);
    }
    (-ft * vx / slip, -ft * vy / slip)
}

/// Per-axis dead-zone on the commanded force, preserving sign:
/// `out_i = max(0, |in_i| - dz_i) * sign(in_i)`.
pub fn apply_dead_zone(f_target: Force3, dead_zone: Force3) -> Force3 {
    debug_assert!(dead_zone.fx >= 0.0 && dead_zone.fy >= 0.0 && dead_zone.fz >= 0.0);
    let dz1 = |f: f64, dz: f64| (f.abs() - dz).max(0.0) * f.signum();
    Force3::new(
        dz1(f_target.fx, dead_zone.fx),
        dz1(f_target.fy, dead_zone.fy),
        dz1(f_target.fz, dead_zone.fz),
    )
}

/// Semi-implicit Euler step of the end-effector under the applied wrench,
/// contact, and ambient viscous damping.
pub fn step_physics(
    state: &SimState,
    applied: Wrench,
    geom: &TaskGeometry,
    params: &PhysicsParams,
    friction_coeff: f64,
    dt: f64,
) -> Result<SimState, DivergenceError> {
    debug_assert!(dt > 0.0 && dt <= 1.0 / 60.0);
    let contact = contact_breakdown(state, geom, params, friction_coeff);
    let v = state.ee_twist;

    let ax = (applied.force.fx + contact.total.fx - params.ambient_lin_damping * v.vx) / params.mass;
    let ay = (applied.force.fy + contact.total.fy - params.ambient_lin_damping * v.vy) / params.mass;
    let az = (applied.force.fz + contact.total.fz - params.ambient_lin_damping * v.vz) / params.mass;
    let ayaw = (applied.yaw_torque - params.ambient_yaw_damping * v.wyaw) / params.yaw_inertia;

    let new_twist = Twist {
        vx: v.vx + ax * dt,
        vy: v.vy + ay * dt,
        vz: v.vz + az * dt,
        wyaw: v.wyaw + ayaw * dt,
    };
    let new_pose = PoseYaw::new(
        state.ee_pose.x + new_twist.vx * dt,
        state.ee_pose.y + new_twist.vy * dt,
        state.ee_pose.z + new_twist.vz * dt,
        state.ee_pose.yaw + new_twist.wyaw * dt,
    );

    let speed = new_twist.linear_norm();
    if new_pose.x.abs() > params.max_abs_position
        || new_pose.y.abs() > params.max_abs_position
        || new_pose.z.abs() > params.max_abs_position
        || speed > params.max_speed
        || !new_pose.is_finite()
        || !new_twist.is_finite()
    {
        return Err(DivergenceError {
            time: state.time + dt,
            x: new_pose.x,
            y: new_pose.y,
            z: new_pose.z,
            speed,
            yaw_rate: new_twist.wyaw,
        });
    }

    Ok(SimState {
        ee_pose: new_pose,
        ee_twist: new_twist,
        grasp_offset: state.grasp_offset,
        contact_force: contact.total,
        time: state.time + dt,
    })
}
