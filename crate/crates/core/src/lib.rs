//! Desk-scale contact-rich peg insertion: a penalty-contact simulator, a
//! force-threshold-conditioned recurrent PPO trainer with dynamics
//! randomization and early-termination prediction, and an evaluation harness
//! for success/force/termination trade-off analyses.

pub mod checkpoint;
pub mod config;
pub mod controller;
pub mod env;
pub mod eval;
pub mod math;
pub mod nn;
pub mod policy;
pub mod replay;
pub mod rl;
pub mod sampling;
pub mod world;

pub use config::RunConfig;
pub use env::{Action, InsertionEnv, Observation, PrivilegedState};
pub use math::{Force3, PoseYaw, Twist};
