//! Guided joint state-action trajectory diffusion for contact-rich planning.
//!
//! The crate trains a small trajectory denoiser on scripted demonstrations of
//! three toy contact environments and samples plans from it under
//! energy-based guidance: alignment before contact; goal, dynamics
//! consistency and per-step object limits after contact. Guidance energies
//! can also be written in a small expression language ([`guidescript`]) and
//! generated by an LLM with execution feedback.

pub mod data;
pub mod denoiser;
pub mod diffcore;
pub mod dynmodel;
pub mod envs;
mod error;
pub mod evalharness;
pub mod guidance;
pub mod guidescript;
pub mod pipeline;
pub mod planner;
pub mod schedule;

pub use diffcore::{Activation, AdamState, Array2, MlpParams};
pub use envs::{EnvId, EnvSpec};
pub use error::{Error, Result};
pub use schedule::{NoiseSchedule, ScheduleKind};
