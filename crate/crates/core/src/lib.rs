//! Planar quadruped locomotion learning laboratory.
//!
//! The crate wires a sagittal-plane rigid-body simulator, procedural terrain
//! with a difficulty curriculum, a small neural-network substrate with exact
//! analytic gradients, an adversarial motion-style branch, a PPO trainer for
//! the privileged teacher policy, and a history-based student distilled from
//! it. Everything is deterministic given a master seed in single-threaded
//! mode.

pub mod adaptation;
pub mod amp;
pub mod bundle;
pub mod config;
pub mod env;
pub mod eval;
pub mod motion;
pub mod nn;
pub mod ppo;
pub mod rng;
pub mod sim;
pub mod terrain;

pub use sim::{PhysicsParams, ProprioObs, RobotMorphology, RobotState};
pub use terrain::{Terrain, TerrainKind};
