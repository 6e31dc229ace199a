//! Simulation and estimation toolkit for small networks of mmWave radars.
//!
//! The pipeline mirrors a field deployment: each node tracks a moving point
//! target in its own frame ([`tracking`]), pairs of nodes self-calibrate by
//! aligning their tracks ([`calibration`]), and the calibrated network fuses a
//! single frame of detections into position and vector velocity ([`fusion`]).
//! [`scene`] synthesizes the detections and [`experiment`] runs the whole
//! chain and writes reports.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod calibration;
pub mod error;
pub mod experiment;
pub mod fusion;
pub mod geometry;
pub mod io;
pub mod scene;
pub mod tracking;

pub use error::{Error, Result};
pub use geometry::{Detection, Pose2D, TargetState};
