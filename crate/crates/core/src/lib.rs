//! Reverse action transformation (RAT) for zero-shot sim-to-real transfer.
//!
//! A latent-conditioned universal policy network (UPN) is trained in a
//! parameterizable simulator. A correction policy then learns per-step
//! action offsets that make a gapped "real" world follow the simulator's
//! trajectories, and is reused unchanged on adjacent parameter settings.

pub mod env;
pub mod error;
pub mod eval;
pub mod harness;
pub mod nn;
pub mod ppo;
pub mod rat;
pub mod seed;
pub mod suprat;
pub mod upn;

pub use error::{Error, Result};
