//! Oriented vehicle detection from co-registered RGB imagery and height maps.
//!
//! The crate exposes each numerical kernel on its own (enhancement, cross
//! attention, hard/easy masking, losses, box geometry, AP evaluation) and
//! wires them into a small dual-stream detector trained on synthetic scenes.

pub mod config;
pub mod data;
pub mod detector;
pub mod enhance;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod geom;
pub mod losses;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Graph, NodeId, Tensor};
