//! Desk-scale differentiable drone-racing training kit.
//!
//! The crate trains a racing policy by backpropagating through a point-mass
//! quadrotor model over a full rollout horizon. Two ideas sit on top of the
//! plain BPTT loop:
//!
//! * every gate carries a magnetostatic loop field (finite-segment
//!   Biot-Savart), and the resulting attractive vector field is injected
//!   straight into the position-gradient channel during the backward pass, so
//!   the policy is pulled through gate apertures even where the task loss is
//!   flat or adversarial;
//! * a small recurrent residual model ("delta action" model) is fitted to a
//!   mismatched target plant and frozen into the simulator, so the policy can
//!   be fine-tuned against realistic dynamics before deployment.
//!
//! Layout follows the data flow: [`tape`] holds the reverse-mode scaffolding
//! everything else records onto, [`dynamics`]/[`field`]/[`losses`]/[`world`]
//! are the physics and supervision, [`policy`] the networks, [`trainer`] the
//! optimization loop, [`delta`] the residual-model pipeline, and [`config`] /
//! [`cli`] the artifact plumbing. All arithmetic is `f64`.

pub mod cli;
pub mod config;
pub mod delta;
pub mod dynamics;
pub mod fdcheck;
pub mod field;
pub mod losses;
pub mod policy;
pub mod tape;
pub mod trainer;
pub mod world;

use thiserror::Error;

/// Crate-wide error type. Variants map onto process exit codes so the CLI can
/// report configuration, numeric, and io failures distinctly.
#[derive(Debug, Error)]
pub enum Error {
    /// Bad or inconsistent configuration input (also covers infeasible track
    /// geometry and checkpoint/manifest mismatches).
    #[error("config error: {0}")]
    Config(String),
    /// Non-finite values or a diverging optimization detected at run time.
    #[error("numeric error: {0}")]
    Numeric(String),
    /// Filesystem-level failure.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for this error class: 2 config, 3 numeric, 4 io.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Numeric(_) => 3,
            Error::Io(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

/// 3-vector used throughout (world and body frames, fields, gradients).
pub type Vec3 = nalgebra::Vector3<f64>;
/// 3x3 rotation/basis matrix (columns are body axes in world frame).
pub type Mat3 = nalgebra::Matrix3<f64>;

/// Named, indexed seed substream derived from a root seed. Every consumer of
/// randomness (track sampling, parameter init, rollout jitter, evaluation)
/// draws from its own substream so adding a consumer never shifts another's
/// sequence.
pub fn substream(root: u64, name: &str, index: u64) -> u64 {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update(name.as_bytes());
    h.update(index.to_le_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}
