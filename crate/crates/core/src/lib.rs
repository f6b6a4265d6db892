//! Asset-referenced joint RGB + point-map generation at desk scale.
//!
//! A mesh is rendered into pixel-aligned RGB / point-map condition views;
//! a small flow-matching transformer learns to generate a target scene
//! image together with its point map, with shared positional encodings
//! across domains, per-token timestep and domain conditioning, role-routed
//! LoRA adapters and a text-agnostic attention mask.

pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod model;
pub mod numerics;
pub mod sampling;
pub mod training;

pub use error::{Error, ErrorKind, Result};
pub use numerics::{Tape, Tensor, Var};
