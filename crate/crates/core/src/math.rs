//! Planar-plus-vertical rigid pose math for the 4-DoF (x, y, z, yaw) task space.

use serde::{Deserialize, Serialize};

/// Wraps an angle to the half-open interval `(-pi, pi]`.
pub fn wrap_angle(theta: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut a = theta % two_pi;
    if a <= -std::f64::consts::PI {
        a += two_pi;
    } else if a > std::f64::consts::PI {
        a -= two_pi;
    }
    a
}

/// Shortest signed angular distance from `from` to `to`, in `(-pi, pi]`.
pub fn angle_diff(to: f64, from: f64) -> f64 {
    wrap_angle(to - from)
}

/// 4-DoF pose: position in meters, yaw about the vertical axis in radians.
///
/// Yaw is always stored wrapped to `(-pi, pi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseYaw {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub yaw: f64,
}

impl PoseYaw {
    pub fn new(x: f64, y: f64, z: f64, yaw: f64) -> Self {
        Self {
            x,
            y,
            z,
            yaw: wrap_angle(yaw),
        }
    }

    pub const ZERO: PoseYaw = PoseYaw {
        x: 0.0,
        y: 0.0,
        z: 0.0,
        yaw: 0.0,
    };

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite() && self.yaw.is_finite()
    }

    /// Rigid composition: `offset` expressed in this pose's frame, returned in
    /// the world frame. Used to place the held part relative to the gripper.
    pub fn compose(&self, offset: &PoseYaw) -> PoseYaw {
        let (s, c) = self.yaw.sin_cos();
        PoseYaw::new(
            self.x + c * offset.x - s * offset.y,
            self.y + s * offset.x + c * offset.y,
            self.z + offset.z,
            self.yaw + offset.yaw,
        )
    }

    /// Expresses this pose relative to `frame` (inverse composition).
    pub fn relative_to(&self, frame: &PoseYaw) -> PoseYaw {
        let dx = self.x - frame.x;
        let dy = self.y - frame.y;
        let (s, c) = frame.yaw.sin_cos();
        PoseYaw::new(
            c * dx + s * dy,
            -s * dx + c * dy,
            self.z - frame.z,
            angle_diff(self.yaw, frame.yaw),
        )
    }

    /// Euclidean distance between positions, ignoring yaw.
    pub fn position_distance(&self, other: &PoseYaw) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        let dz = self.z - other.z;
        (dx * dx + dy * dy + dz * dz).sqrt()
    }

    /// Horizontal (x, y) distance to another pose.
    pub fn lateral_distance(&self, other: &PoseYaw) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        (dx * dx + dy * dy).sqrt()
    }
}

/// Linear velocity in m/s plus yaw rate in rad/s.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Twist {
    pub vx: f64,
    pub vy: f64,
    pub vz: f64,
    pub wyaw: f64,
}

impl Twist {
    pub const ZERO: Twist = Twist {
        vx: 0.0,
        vy: 0.0,
        vz: 0.0,
        wyaw: 0.0,
    };

    pub fn is_finite(&self) -> bool {
        self.vx.is_finite() && self.vy.is_finite() && self.vz.is_finite() && self.wyaw.is_finite()
    }

    pub fn linear_norm(&self) -> f64 {
        (self.vx * self.vx + self.vy * self.vy + self.vz * self.vz).sqrt()
    }
}

/// A force vector in Newtons.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Force3 {
    pub fx: f64,
    pub fy: f64,
    pub fz: f64,
}

impl Force3 {
    pub const ZERO: Force3 = Force3 {
        fx: 0.0,
        fy: 0.0,
        fz: 0.0,
    };

    pub fn new(fx: f64, fy: f64, fz: f64) -> Self {
        Self { fx, fy, fz }
    }

    pub fn norm(&self) -> f64 {
        (self.fx * self.fx + self.fy * self.fy + self.fz * self.fz).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.fx.is_finite() && self.fy.is_finite() && self.fz.is_finite()
    }

    pub fn add(&self, other: &Force3) -> Force3 {
        Force3::new(self.fx + other.fx, self.fy + other.fy, self.fz + other.fz)
    }

    pub fn scale(&self, s: f64) -> Force3 {
        Force3::new(self.fx * s, self.fy * s, self.fz * s)
    }
}

impl std::ops::Add for Force3 {
    type Output = Force3;
    fn add(self, rhs: Force3) -> Force3 {
        Force3::new(self.fx + rhs.fx, self.fy + rhs.fy, self.fz + rhs.fz)
    }
}

impl std::ops::AddAssign for Force3 {
    fn add_assign(&mut self, rhs: Force3) {
        self.fx += rhs.fx;
        self.fy += rhs.fy;
        self.fz += rhs.fz;
    }
}
