//! Passive integrated sensing and communication (ISAC) for a cell-free radio
//! access network.
//!
//! Downlink radio units (RRUs) transmit the same data waveform, each carrying
//! its own hardware fingerprint. Uplink RRUs receive the direct (LOS) signals
//! and the echoes off passive reflectors, cancel what is already known,
//! identify the source of each echo by its RF fingerprint, and solve for the
//! reflector position from delay and angle of arrival.
//!
//! The pipeline, one module per stage:
//!
//! - [`scenario`]: world geometry and uplink/downlink role schedules
//! - [`channel`]: geometric multipath channel and steering vectors
//! - [`fingerprint`]: per-RRU hardware impairment model
//! - [`signal_chain`]: transmit frames, received-signal assembly, cancellation, idle detection
//! - [`sensing`]: oracle path separation and parameter error injection
//! - [`classifier`]: fingerprint datasets, nearest-centroid / MLP classifiers, synthetic accuracy model
//! - [`localization`]: LOS validation, ray/ellipsoid reflector solving, fusion, scoring
//! - [`harness`]: Monte Carlo trials, sweeps, CDFs and file exports

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod channel;
pub mod classifier;
pub mod error;
pub mod fingerprint;
pub mod geometry;
pub mod harness;
pub mod localization;
pub mod matrix;
pub mod rng;
pub mod scenario;
pub mod sensing;
pub mod signal_chain;

pub use error::{Error, Result};
pub use geometry::Position3D;

/// Propagation speed used throughout (m/s).
pub const SPEED_OF_LIGHT: f64 = 3.0e8;

/// Identifier of a radio unit within a scenario.
pub type RruId = u32;
