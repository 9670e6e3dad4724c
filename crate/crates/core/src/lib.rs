//! Multi-view, multi-person 3D pose reconstruction from 2D joint detections.

pub mod assembly;
pub mod body;
pub mod eval;
pub mod fusion;
pub mod geometry;
pub mod io;
pub mod parts;
pub mod pipeline;
pub mod rig;
pub mod scoremap;
pub mod synth;
pub mod trajectory;
