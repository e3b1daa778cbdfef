//! Closed-loop simulator and receding-horizon trajectory optimizer for an
//! omnidirectional multirotor acting as a communication relay between a
//! maneuvering aerial node and a ground base station.
//!
//! The crate is organized around five modules:
//!
//! - [`vehicle`]: rigid-body multirotor dynamics and control allocation for a
//!   tilted-rotor hexarotor (fully actuated) and a planar quadrotor
//!   (under-actuated), with an augmented state carrying per-rotor thrusts so
//!   that thrust rates become the control inputs.
//! - [`comms`]: directional-antenna link budget — misalignment geometry,
//!   pattern gain, free-space path loss, SNR, and the decode-and-forward
//!   relay rate — plus the alignment-margin constraint and the output map.
//! - [`nmpc`]: the finite-horizon optimal control problem and its
//!   receding-horizon solution (single-shooting Gauss-Newton SQP with
//!   augmented-Lagrangian inequality handling).
//! - [`sim`]: scenario engine — scripted peer mission, wind disturbance,
//!   closed-loop runs, metric extraction.
//! - [`cli`]: scenario parsing, run orchestration, CSV/JSON emission.

pub mod cli;
pub mod comms;
pub mod nmpc;
pub mod sim;
pub mod vehicle;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid state: {0}")]
    InvalidState(String),
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),
    #[error("infeasible: {0}")]
    Infeasible(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("scenario parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
