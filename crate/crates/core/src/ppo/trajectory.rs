use crate::error::{check_finite, Error, Result};

/// One rollout segment. `dones[t]` marks a true terminal after step `t`; a
/// segment cut short by the horizon or the step budget instead carries the
/// critic's estimate of its final next-state in `bootstrap_value`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trajectory {
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    pub log_probs: Vec<f64>,
    pub values: Vec<f64>,
    pub dones: Vec<bool>,
    pub bootstrap_value: f64,
    /// False when the step budget ran out mid-episode.
    pub complete: bool,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn total_reward(&self) -> f64 {
        self.rewards.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.rewards.len();
        let lens = [
            self.states.len(),
            self.actions.len(),
            self.log_probs.len(),
            self.values.len(),
            self.dones.len(),
        ];
        if lens.iter().any(|&l| l != n) {
            return Err(Error::DimensionMismatch {
                what: "trajectory fields",
                expected: n,
                actual: *lens.iter().find(|&&l| l != n).unwrap(),
            });
        }
        check_finite("rewards", &self.rewards)?;
        check_finite("value estimates", &self.values)?;
        check_finite("bootstrap value", &[self.bootstrap_value])
    }
}
