//! Animal re-identification by fusing a calibrated foreground likelihood
//! with explicit background priors over identities.
//!
//! The pipeline works on feature vectors rather than pixels:
//!
//! * [`data`] holds observations, the geospatial grid, temporal splitting and
//!   per-identity training statistics.
//! * [`calibration`] provides tempered softmax, the per-instance temperature
//!   (PITS) loss with its analytic gradient, post-hoc temperature fitting and
//!   expected calibration error.
//! * [`classifier`] trains a linear identity model with a temperature head and
//!   a background location classifier.
//! * [`priors`] implements the home-location, migrating-location and
//!   time-decay identity priors together with their sequential state.
//! * [`fusion`] multiplies likelihood and prior and runs the timestamp-ordered
//!   inference loop.
//! * [`evaluation`] computes accuracy, new-location accuracy and ECE and runs
//!   whole experiment tables.
//! * [`simulator`] generates seeded synthetic monitoring datasets.

pub mod calibration;
pub mod classifier;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod fusion;
pub mod priors;
pub mod rng;
pub mod simulator;

pub use error::{Error, Result};
