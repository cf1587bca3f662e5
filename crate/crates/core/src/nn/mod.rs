//! Dense networks with hand-written reverse-mode gradients, Adam, and a
//! diagonal-Gaussian policy head. Every learned model in the crate is built
//! from these pieces.

pub mod adam;
pub mod gaussian;
pub mod mlp;

pub use adam::{AdamConfig, AdamState, ParamSet};
pub use gaussian::{GaussianHead, GaussianPolicy, LOG_STD_MAX, LOG_STD_MIN};
pub use mlp::{Activation, Dense, ForwardCache, MlpInit, MlpParams};

use serde::{Deserialize, Serialize};

/// Network shape and initialization shared by policies, critics and the
/// inverse-dynamics regressor.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub hidden_width: usize,
    pub depth: usize,
    pub hidden_gain: f64,
    pub output_gain: f64,
    pub log_std_init: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            hidden_width: 64,
            depth: 2,
            hidden_gain: 1.0,
            output_gain: 0.01,
            log_std_init: -0.5,
        }
    }
}

impl NetworkConfig {
    pub fn policy_init(&self) -> MlpInit {
        MlpInit {
            hidden_gain: self.hidden_gain,
            output_gain: self.output_gain,
        }
    }

    pub fn critic_init(&self) -> MlpInit {
        MlpInit {
            hidden_gain: self.hidden_gain,
            output_gain: 1.0,
        }
    }
}
