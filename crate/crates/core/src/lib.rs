//! End-to-end driving stack: multi-modal token fusion with driver-attention
//! conditioning, transformer decoding to waypoints / object heatmap / traffic
//! state, a PID controller bounded by a safety speed program, and a kinematic
//! closed-loop simulator that scores routes.

pub mod bev;
pub mod checkpoint;
pub mod config;
pub mod controller;
pub mod error;
pub mod fusion;
pub mod gradsuite;
pub mod heads;
pub mod losses;
pub mod model;
pub mod nn;
pub mod optim;
pub mod par;
pub mod saliency;
pub mod sim;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
