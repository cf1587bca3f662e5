use crate::error::{Error, Result};
use crate::ppo::trajectory::Trajectory;

/// Generalized advantage estimation over one segment.
///
/// `delta_t = r_t + gamma * V(s_{t+1}) * (1 - done_t) - V(s_t)` and
/// `A_t = delta_t + gamma * lam * (1 - done_t) * A_{t+1}`, with `V(s_T)` taken
/// from the segment's bootstrap value. Returns `(advantages, returns)` where
/// `returns = advantages + values`.
pub fn gae_advantages(traj: &Trajectory, gamma: f64, lam: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if traj.is_empty() {
        return Err(Error::Empty("trajectory"));
    }
    traj.validate()?;
    let n = traj.len();
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    for t in (0..n).rev() {
        let next_value = if t + 1 < n {
            traj.values[t + 1]
        } else {
            traj.bootstrap_value
        };
        let live = if traj.dones[t] { 0.0 } else { 1.0 };
        let delta = traj.rewards[t] + gamma * next_value * live - traj.values[t];
        next_adv = delta + gamma * lam * live * next_adv;
        adv[t] = next_adv;
    }
    let returns = adv.iter().zip(&traj.values).map(|(a, v)| a + v).collect();
    Ok((adv, returns))
}

/// Shifts and scales to zero mean and unit standard deviation.
pub fn normalize(values: &mut [f64]) {
    if values.is_empty() {
        return;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    for v in values.iter_mut() {
        *v = (*v - mean) / (std + 1e-12);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_from;
    use rand::Rng as _;

    fn traj(rewards: Vec<f64>, values: Vec<f64>, dones: Vec<bool>, bootstrap: f64) -> Trajectory {
        let n = rewards.len();
        Trajectory {
            states: vec![vec![]; n],
            actions: vec![vec![]; n],
            log_probs: vec![0.0; n],
            rewards,
            values,
            dones,
            bootstrap_value: bootstrap,
            complete: true,
        }
    }

    /// O(T^2) double loop straight from the definition.
    fn brute_force(t: &Trajectory, gamma: f64, lam: f64) -> Vec<f64> {
        let n = t.len();
        let next_v = |k: usize| if k + 1 < n { t.values[k + 1] } else { t.bootstrap_value };
        let delta: Vec<f64> = (0..n)
            .map(|k| {
                let live = if t.dones[k] { 0.0 } else { 1.0 };
                t.rewards[k] + gamma * live * next_v(k) - t.values[k]
            })
            .collect();
        (0..n)
            .map(|s| {
                let mut total = 0.0;
                let mut weight = 1.0;
                for k in s..n {
                    total += weight * delta[k];
                    if t.dones[k] {
                        break;
                    }
                    weight *= gamma * lam;
                }
                total
            })
            .collect()
    }

    #[test]
    fn undiscounted_suffix_sums() {
        let t = traj(vec![1.0; 3], vec![0.0; 3], vec![false, false, true], 0.0);
        let (adv, ret) = gae_advantages(&t, 1.0, 1.0).unwrap();
        assert_eq!(adv, vec![3.0, 2.0, 1.0]);
        assert_eq!(ret, vec![3.0, 2.0, 1.0]);
    }

    #[test]
    fn single_step_td_error() {
        let t = traj(vec![0.7], vec![0.2], vec![false], 1.5);
        let (adv, _) = gae_advantages(&t, 0.9, 0.95).unwrap();
        assert_eq!(adv[0], 0.7 + 0.9 * 1.5 - 0.2);
    }

    #[test]
    fn empty_trajectory_is_an_error() {
        assert!(gae_advantages(&Trajectory::default(), 0.99, 0.95).is_err());
    }

    #[test]
    fn matches_brute_force_on_random_rollouts() {
        let mut rng = rng_from(21);
        for case in 0..20 {
            let n = 50;
            let mut dones = vec![false; n];
            if case % 2 == 0 {
                dones[n - 1] = true;
            }
            if case % 3 == 0 {
                dones[17] = true;
            }
            let t = traj(
                (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
                (0..n).map(|_| rng.random_range(-2.0..2.0)).collect(),
                dones,
                rng.random_range(-2.0..2.0),
            );
            let gamma = rng.random_range(0.8..1.0);
            let lam = rng.random_range(0.0..1.0);
            let (adv, _) = gae_advantages(&t, gamma, lam).unwrap();
            for (a, b) in adv.iter().zip(brute_force(&t, gamma, lam)) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn lambda_one_is_monte_carlo_minus_baseline() {
        let mut rng = rng_from(4);
        let n = 30;
        let mut dones = vec![false; n];
        dones[n - 1] = true;
        let t = traj(
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
            dones,
            0.0,
        );
        let gamma = 0.97;
        let (adv, _) = gae_advantages(&t, gamma, 1.0).unwrap();
        for s in 0..n {
            let mc: f64 = (s..n).map(|k| gamma.powi((k - s) as i32) * t.rewards[k]).sum();
            assert!((adv[s] - (mc - t.values[s])).abs() < 1e-10);
        }
    }

    #[test]
    fn normalized_batch_statistics() {
        let mut rng = rng_from(6);
        let mut v: Vec<f64> = (0..500).map(|_| rng.random_range(-3.0..10.0)).collect();
        normalize(&mut v);
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 1e-8);
        assert!((std - 1.0).abs() < 1e-6);
    }
}
