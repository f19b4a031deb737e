//! Context-coupled Koopman autoencoders for tracking a scalar path-loss
//! series through reporting gaps.
//!
//! The pipeline: a synthetic channel generator produces a path-loss trace
//! plus a 19-feature context stream ([`scenario`]); traces are smoothed and
//! standardized ([`preprocess`]); a pair of autoencoders coupled by a linear
//! latent transition is trained on each observation window ([`piae`],
//! [`vkae`], [`optim`]); during a reporting gap the latent state is rolled
//! forward driven only by context ([`piae::rollout_silence`]) or tracked with
//! a Kalman smoother ([`kalman`]); [`harness`] runs the full
//! with-context/no-context comparison grid.

pub mod checkpoint;
pub mod diffnet;
pub mod error;
pub mod harness;
pub mod kalman;
pub mod optim;
pub mod piae;
pub mod preprocess;
pub mod scenario;
pub mod vkae;

pub use error::{Error, Result};
