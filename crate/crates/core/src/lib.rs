//! Full-perspective human body geometry.

pub mod calibrate;
pub mod cli;
pub mod geometry;
pub mod learn;
pub mod losses;
pub mod metrics;
pub mod orient;
pub mod skeleton;
pub mod so3;
pub mod synth;
