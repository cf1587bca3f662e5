//! Proximal policy optimization with generalized advantage estimation.

pub mod gae;
pub mod rollout;
pub mod trajectory;
pub mod update;

pub use gae::gae_advantages;
pub use rollout::{collect_rollouts, Mdp, MdpStep};
pub use trajectory::Trajectory;
pub use update::{mean_return, surrogate_gradient, PpoDiagnostics, PpoHyperparams, PpoTrainer, Samples};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::nn::{GaussianPolicy, MlpParams, NetworkConfig};
use crate::seed::Rng;

/// Gaussian actor plus a state-value critic of the same hidden shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActorCritic {
    pub actor: GaussianPolicy,
    pub critic: MlpParams,
}

impl ActorCritic {
    pub fn init(obs_dim: usize, action_dim: usize, net: &NetworkConfig, rng: &mut Rng) -> Result<Self> {
        let actor = GaussianPolicy::init(
            obs_dim,
            action_dim,
            net.hidden_width,
            net.depth,
            net.policy_init(),
            net.log_std_init,
            rng,
        )?;
        let critic = MlpParams::init(obs_dim, net.hidden_width, net.depth, 1, net.critic_init(), rng)?;
        Ok(ActorCritic { actor, critic })
    }

    pub fn value(&self, obs: &[f64]) -> Result<f64> {
        Ok(self.critic.forward(obs)?[0])
    }

    /// Gradient of the mean squared value error over `idx`, and that error.
    pub fn value_gradient(&self, samples: &Samples, idx: &[usize]) -> Result<(MlpParams, f64)> {
        let mut grads = self.critic.zeros_like();
        let n = idx.len() as f64;
        let mut loss = 0.0;
        for &i in idx {
            let cache = self.critic.forward_cached(&samples.obs[i])?;
            let err = cache.output()[0] - samples.returns[i];
            loss += err * err / n;
            self.critic.backward_into(&cache, &[2.0 * err / n], &mut grads)?;
        }
        Ok((grads, loss))
    }

    pub fn validate(&self) -> Result<()> {
        self.actor.validate()?;
        self.critic.validate()
    }
}
