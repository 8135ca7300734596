//! Block-sparse tiled attention.
//!
//! A streaming attention engine that scores every causally reachable tile,
//! gates off-frontier tiles by their maximum score against calibrated
//! per-(layer, head, position) thresholds, and skips the value product for
//! rejected tiles. Double-precision oracles, offline calibration, synthetic
//! workloads and an analytic cost model sit alongside it.

pub mod attention;
pub mod calibration;
pub mod cli;
pub mod cost;
pub mod engine;
pub mod error;
pub mod gating;
pub mod matrix;
pub mod report;
pub mod workloads;

pub use attention::{dense_attention, masked_dense_attention, AttentionOutput, BlockMask, HeadInput};
pub use calibration::{calibrate, CalibrationDump};
pub use engine::{flash_forward, GateTrace, TileConfig};
pub use error::{Error, Result};
pub use gating::{GateContext, GatePolicy, ThresholdTensor};
pub use matrix::Matrix;
