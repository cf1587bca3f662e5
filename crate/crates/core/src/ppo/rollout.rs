use crate::error::{Error, Result};
use crate::ppo::trajectory::Trajectory;
use crate::ppo::ActorCritic;
use crate::seed::Rng;

/// Result of one MDP transition as seen by the learner.
#[derive(Clone, Debug, PartialEq)]
pub struct MdpStep {
    pub obs: Vec<f64>,
    pub reward: f64,
    /// True terminal: no bootstrapping past this step.
    pub terminated: bool,
    /// Time limit reached: bootstrap from the critic.
    pub truncated: bool,
}

/// Episodic decision process driven by [`collect_rollouts`].
pub trait Mdp {
    fn obs_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    /// Starts a new episode and returns its first observation.
    fn reset(&mut self, rng: &mut Rng) -> Result<Vec<f64>>;
    fn step(&mut self, action: &[f64]) -> Result<MdpStep>;
}

/// Samples exactly `steps` transitions from the stochastic policy, starting
/// a fresh episode each time one ends. The final segment is cut at the step
/// budget and bootstrapped from the critic like a horizon truncation.
pub fn collect_rollouts<M: Mdp + ?Sized>(
    mdp: &mut M,
    model: &ActorCritic,
    steps: usize,
    rng: &mut Rng,
) -> Result<Vec<Trajectory>> {
    if steps == 0 {
        return Err(Error::config("steps", "must be > 0"));
    }
    let mut out = Vec::new();
    let mut remaining = steps;
    while remaining > 0 {
        let mut traj = Trajectory::default();
        let mut obs = mdp.reset(rng)?;
        loop {
            let head = model.actor.head(&obs)?;
            let action = head.sample(rng);
            let log_prob = head.log_prob(&action)?;
            let value = model.value(&obs)?;
            let step = mdp.step(&action)?;
            traj.states.push(std::mem::replace(&mut obs, step.obs));
            traj.actions.push(action);
            traj.rewards.push(step.reward);
            traj.log_probs.push(log_prob);
            traj.values.push(value);
            traj.dones.push(step.terminated);
            remaining -= 1;

            if step.terminated {
                traj.bootstrap_value = 0.0;
                traj.complete = true;
                break;
            }
            if step.truncated || remaining == 0 {
                traj.bootstrap_value = model.value(&obs)?;
                traj.complete = step.truncated;
                break;
            }
        }
        out.push(traj);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::NetworkConfig;
    use crate::seed::rng_from;

    /// Counter episode of fixed length with no true terminals.
    struct Counter {
        len: usize,
        t: usize,
    }

    impl Mdp for Counter {
        fn obs_dim(&self) -> usize {
            1
        }
        fn action_dim(&self) -> usize {
            1
        }
        fn reset(&mut self, _rng: &mut Rng) -> Result<Vec<f64>> {
            self.t = 0;
            Ok(vec![0.0])
        }
        fn step(&mut self, _action: &[f64]) -> Result<MdpStep> {
            self.t += 1;
            Ok(MdpStep {
                obs: vec![self.t as f64],
                reward: 1.0,
                terminated: false,
                truncated: self.t == self.len,
            })
        }
    }

    fn model() -> ActorCritic {
        ActorCritic::init(1, 1, &NetworkConfig::default(), &mut rng_from(0)).unwrap()
    }

    #[test]
    fn collects_exactly_the_requested_steps() {
        let mut mdp = Counter { len: 7, t: 0 };
        let batch = collect_rollouts(&mut mdp, &model(), 30, &mut rng_from(1)).unwrap();
        let lens: Vec<usize> = batch.iter().map(Trajectory::len).collect();
        assert_eq!(lens, vec![7, 7, 7, 7, 2]);
        assert!(batch[..4].iter().all(|t| t.complete));
        assert!(!batch[4].complete);
        for t in &batch {
            t.validate().unwrap();
            assert!(t.dones.iter().all(|d| !d));
        }
    }

    #[test]
    fn bootstrap_is_critic_value_of_final_observation() {
        let m = model();
        let mut mdp = Counter { len: 5, t: 0 };
        let batch = collect_rollouts(&mut mdp, &m, 5, &mut rng_from(2)).unwrap();
        assert_eq!(batch[0].bootstrap_value, m.value(&[5.0]).unwrap());
        assert_eq!(batch[0].states[4], vec![4.0]);
    }

    #[test]
    fn same_seed_same_rollout() {
        let m = model();
        let a = collect_rollouts(&mut Counter { len: 9, t: 0 }, &m, 20, &mut rng_from(3)).unwrap();
        let b = collect_rollouts(&mut Counter { len: 9, t: 0 }, &m, 20, &mut rng_from(3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_steps_rejected() {
        assert!(collect_rollouts(&mut Counter { len: 3, t: 0 }, &model(), 0, &mut rng_from(4)).is_err());
    }
}
