//! Parameterizable environments. The simulator and the "real world" are two
//! instances of the same dynamics; the real one adds a [`RealityGap`] to the
//! latent vector before it is mapped to physical constants.

pub mod latent;
pub mod pendulum;
pub mod pointmass;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use latent::{
    apply_gap, LatentMap, LatentParams, RealityGap, WorldConfig, DEFAULT_THETA_G, FRICTION,
    LATENT_DIM, LATENT_FLOOR, MASS, RESTITUTION,
};
pub use pendulum::{PendulumPhysics, PendulumSpec};
pub use pointmass::{PointMassPhysics, PointMassSpec};

use crate::error::{check_finite, check_len, Error, Result};
use crate::seed::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvId {
    PointMass,
    Pendulum,
}

impl EnvId {
    pub fn name(self) -> &'static str {
        match self {
            EnvId::PointMass => "point_mass",
            EnvId::Pendulum => "pendulum",
        }
    }
}

impl fmt::Display for EnvId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EnvId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "point_mass" | "pointmass" => Ok(EnvId::PointMass),
            "pendulum" => Ok(EnvId::Pendulum),
            other => Err(Error::config("env", format!("unknown environment `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Dynamics {
    PointMass(PointMassSpec),
    Pendulum(PendulumSpec),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub id: EnvId,
    pub horizon: usize,
    /// Integration step (s).
    pub dt: f64,
    /// Actions live in `[-action_bound, action_bound]` on every axis.
    pub action_bound: f64,
    pub dynamics: Dynamics,
}

impl EnvSpec {
    pub fn new(id: EnvId, horizon: usize) -> Self {
        let dynamics = match id {
            EnvId::PointMass => Dynamics::PointMass(PointMassSpec::default()),
            EnvId::Pendulum => Dynamics::Pendulum(PendulumSpec::default()),
        };
        EnvSpec {
            id,
            horizon,
            dt: 0.05,
            action_bound: 1.0,
            dynamics,
        }
    }

    pub fn point_mass() -> Self {
        Self::new(EnvId::PointMass, 200)
    }

    pub fn pendulum() -> Self {
        Self::new(EnvId::Pendulum, 200)
    }

    /// Length of the flattened state fed to networks.
    pub fn state_dim(&self) -> usize {
        match self.dynamics {
            Dynamics::PointMass(_) => 4,
            Dynamics::Pendulum(_) => 3,
        }
    }

    pub fn action_dim(&self) -> usize {
        match self.dynamics {
            Dynamics::PointMass(_) => 2,
            Dynamics::Pendulum(_) => 1,
        }
    }

    pub fn clamp_action(&self, action: &[f64]) -> Vec<f64> {
        let b = self.action_bound;
        action.iter().map(|a| a.clamp(-b, b)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::config("env.dt", "must be finite and > 0"));
        }
        if !(self.action_bound > 0.0 && self.action_bound.is_finite()) {
            return Err(Error::config("env.action_bound", "must be finite and > 0"));
        }
        if self.horizon == 0 {
            return Err(Error::config("env.horizon", "must be >= 1"));
        }
        Ok(())
    }

    pub fn initial_state(&self, rng: &mut Rng) -> EnvState {
        match &self.dynamics {
            Dynamics::PointMass(pm) => {
                let (pos, vel) = pointmass::sample_initial(pm, rng);
                EnvState::PointMass { pos, vel, step: 0 }
            }
            Dynamics::Pendulum(pd) => {
                let (angle, ang_vel) = pendulum::sample_initial(pd, rng);
                EnvState::Pendulum {
                    angle,
                    ang_vel,
                    step: 0,
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum EnvState {
    PointMass {
        pos: [f64; 2],
        vel: [f64; 2],
        step: usize,
    },
    Pendulum {
        angle: f64,
        ang_vel: f64,
        step: usize,
    },
}

impl EnvState {
    pub fn step_count(&self) -> usize {
        match *self {
            EnvState::PointMass { step, .. } | EnvState::Pendulum { step, .. } => step,
        }
    }

    /// Network-facing representation: `[x, y, vx, vy]` for the puck and
    /// `[cos angle, sin angle, angular velocity]` for the pendulum.
    pub fn features(&self) -> Vec<f64> {
        match *self {
            EnvState::PointMass { pos, vel, .. } => vec![pos[0], pos[1], vel[0], vel[1]],
            EnvState::Pendulum { angle, ang_vel, .. } => {
                vec![angle.cos(), angle.sin(), ang_vel]
            }
        }
    }

    fn raw(&self) -> Vec<f64> {
        match *self {
            EnvState::PointMass { pos, vel, .. } => vec![pos[0], pos[1], vel[0], vel[1]],
            EnvState::Pendulum { angle, ang_vel, .. } => vec![angle, ang_vel],
        }
    }

    pub fn with_step(mut self, n: usize) -> Self {
        match &mut self {
            EnvState::PointMass { step, .. } | EnvState::Pendulum { step, .. } => *step = n,
        }
        self
    }

    fn matches(&self, id: EnvId) -> bool {
        matches!(
            (self, id),
            (EnvState::PointMass { .. }, EnvId::PointMass) | (EnvState::Pendulum { .. }, EnvId::Pendulum)
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub next: EnvState,
    pub reward: f64,
    pub done: bool,
}

fn validate_state(spec: &EnvSpec, state: &EnvState) -> Result<()> {
    if !state.matches(spec.id) {
        return Err(Error::config(
            "state",
            format!("state variant does not belong to environment {}", spec.id),
        ));
    }
    check_finite("environment state", &state.raw())?;
    if state.step_count() > spec.horizon {
        return Err(Error::config(
            "state.step",
            format!("step counter {} exceeds horizon {}", state.step_count(), spec.horizon),
        ));
    }
    Ok(())
}

/// Advances `state` by one `dt` under `config`. Actions outside the bounds
/// are clamped; the episode is done once the step counter reaches the
/// horizon.
pub fn step(spec: &EnvSpec, config: &WorldConfig, state: &EnvState, action: &[f64]) -> Result<StepResult> {
    validate_state(spec, state)?;
    check_len("action", spec.action_dim(), action.len())?;
    check_finite("action", action)?;
    let action = spec.clamp_action(action);
    let latents = config.effective();
    let next_step = state.step_count() + 1;

    let (next, reward) = match (&spec.dynamics, *state) {
        (Dynamics::PointMass(pm), EnvState::PointMass { pos, vel, .. }) => {
            let physics = PointMassPhysics::from_latents(pm, &latents);
            let (p, v) = pointmass::integrate(pm, &physics, spec.dt, pos, vel, &action);
            (
                EnvState::PointMass {
                    pos: p,
                    vel: v,
                    step: next_step,
                },
                pointmass::task_reward(pm, p),
            )
        }
        (Dynamics::Pendulum(pd), EnvState::Pendulum { angle, ang_vel, .. }) => {
            let physics = PendulumPhysics::from_latents(pd, &latents);
            let (a, w) = pendulum::integrate(pd, &physics, spec.dt, angle, ang_vel, &action);
            (
                EnvState::Pendulum {
                    angle: a,
                    ang_vel: w,
                    step: next_step,
                },
                pendulum::task_reward(pd, a, &action),
            )
        }
        _ => unreachable!("state variant validated above"),
    };
    check_finite("next state", &next.raw())?;
    Ok(StepResult {
        next,
        reward,
        done: next_step >= spec.horizon,
    })
}

/// A stateful environment instance: one owner, one trajectory at a time.
#[derive(Clone, Debug)]
pub struct Env {
    spec: EnvSpec,
    config: WorldConfig,
    state: EnvState,
}

impl Env {
    pub fn new(spec: EnvSpec, config: WorldConfig, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let state = spec.initial_state(rng);
        Ok(Env {
            spec,
            config,
            state,
        })
    }

    pub fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    pub fn config(&self) -> &WorldConfig {
        &self.config
    }

    pub fn set_config(&mut self, config: WorldConfig) {
        self.config = config;
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }

    pub fn features(&self) -> Vec<f64> {
        self.state.features()
    }

    pub fn reset(&mut self, rng: &mut Rng) -> &EnvState {
        self.state = self.spec.initial_state(rng);
        &self.state
    }

    pub fn set_state(&mut self, state: EnvState) -> Result<()> {
        validate_state(&self.spec, &state)?;
        self.state = state;
        Ok(())
    }

    pub fn step(&mut self, action: &[f64]) -> Result<StepResult> {
        let out = step(&self.spec, &self.config, &self.state, action)?;
        self.state = out.next;
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_from;

    fn unit_mass_spec() -> EnvSpec {
        let mut spec = EnvSpec::point_mass();
        if let Dynamics::PointMass(pm) = &mut spec.dynamics {
            pm.force_scale = 1.0;
            pm.maps[FRICTION] = LatentMap::new(0.0, 1.0);
            pm.maps[MASS] = LatentMap::new(0.0, 1.0);
            pm.maps[2] = LatentMap::new(0.0, 0.0);
            pm.maps[3] = LatentMap::new(0.0, 0.0);
        }
        spec
    }

    fn at_rest(pos: [f64; 2]) -> EnvState {
        EnvState::PointMass {
            pos,
            vel: [0.0, 0.0],
            step: 0,
        }
    }

    #[test]
    fn puck_at_rest_stays_put() {
        let spec = EnvSpec::point_mass();
        let cfg = WorldConfig::sim(LatentParams::default());
        let out = step(&spec, &cfg, &at_rest([0.3, -0.4]), &[0.0, 0.0]).unwrap();
        assert_eq!(out.next, at_rest([0.3, -0.4]).with_step(1));
    }

    #[test]
    fn unit_force_on_unit_mass() {
        let spec = unit_mass_spec();
        let cfg = WorldConfig::sim(LatentParams([0.0, 1.0, 0.0, 0.0, 0.5]));
        let out = step(&spec, &cfg, &at_rest([0.1, 0.2]), &[1.0, 0.0]).unwrap();
        let EnvState::PointMass { pos, vel, .. } = out.next else { panic!() };
        assert!((vel[0] - 0.05).abs() < 1e-15 && vel[1] == 0.0);
        assert!((pos[0] - 0.1025).abs() < 1e-15 && pos[1] == 0.2);

        // mass 1 + gap 4 = 5
        let heavy = WorldConfig::real(cfg.theta, RealityGap([0.0, 4.0, 0.0, 0.0, 0.0]));
        let out = step(&spec, &heavy, &at_rest([0.1, 0.2]), &[1.0, 0.0]).unwrap();
        let EnvState::PointMass { vel, .. } = out.next else { panic!() };
        assert!((vel[0] - 0.01).abs() < 1e-15);
    }

    #[test]
    fn set_state_round_trips_and_syncs_worlds() {
        let spec = EnvSpec::point_mass();
        let theta = LatentParams::default();
        let mut rng = rng_from(2);
        let mut sim = Env::new(spec, WorldConfig::sim(theta), &mut rng).unwrap();
        let mut real = Env::new(spec, WorldConfig::sim(theta), &mut rng).unwrap();
        sim.set_state(*real.state()).unwrap();
        assert_eq!(sim.state(), real.state());
        let a = sim.step(&[0.3, -0.7]).unwrap();
        let b = real.step(&[0.3, -0.7]).unwrap();
        assert_eq!(a, b);

        let wrong = EnvState::Pendulum {
            angle: 0.0,
            ang_vel: 0.0,
            step: 0,
        };
        assert!(sim.set_state(wrong).is_err());
        assert!(sim.set_state(at_rest([f64::NAN, 0.0])).is_err());
        assert!(sim.set_state(at_rest([0.0, 0.0]).with_step(spec.horizon + 1)).is_err());
    }

    #[test]
    fn gapped_world_diverges_from_synced_sim() {
        let spec = EnvSpec::point_mass();
        let theta = LatentParams::default();
        let gap = RealityGap::relative(&theta, 4.0, &[FRICTION, MASS]);
        let start = EnvState::PointMass {
            pos: [0.5, -0.5],
            vel: [0.2, 0.1],
            step: 0,
        };
        let a = [0.6, -0.3];
        let sim = step(&spec, &WorldConfig::sim(theta), &start, &a).unwrap().next;
        let real = step(&spec, &WorldConfig::real(theta, gap), &start, &a).unwrap().next;
        let d: f64 = sim
            .features()
            .iter()
            .zip(real.features())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        // pinned from the closed-form update with the default maps
        assert!(d > 0.0);
        let (fx, fy) = (4.0 * 0.6, 4.0 * -0.3);
        let m_sim = [0.25 + 0.71518937 + 0.5 * 0.60276338, 0.25 + 0.71518937 + 0.5 * 0.54488318];
        let m_real = [m_sim[0] + 4.0 * 0.71518937, m_sim[1] + 4.0 * 0.71518937];
        let c_sim = 0.3 * 0.5488135;
        let c_real = 0.3 * 5.0 * 0.5488135;
        let dvx = (fx / m_sim[0] - c_sim * 0.2 - fx / m_real[0] + c_real * 0.2) * 0.05;
        let dvy = (fy / m_sim[1] - c_sim * 0.1 - fy / m_real[1] + c_real * 0.1) * 0.05;
        let expect = (dvx * dvx + dvy * dvy) * (1.0 + 0.05 * 0.05);
        assert!((d - expect).abs() < 1e-15, "{d} vs {expect}");
    }

    #[test]
    fn frictionless_coasting_conserves_energy() {
        let spec = EnvSpec::point_mass();
        let cfg = WorldConfig::sim(LatentParams([0.0, 0.5, 0.5, 0.5, 0.5]));
        let mut state = EnvState::PointMass {
            pos: [-1.0, 0.0],
            vel: [0.3, 0.2],
            step: 0,
        };
        let ke = |s: &EnvState| match s {
            EnvState::PointMass { vel, .. } => 0.5 * (vel[0] * vel[0] + vel[1] * vel[1]),
            _ => unreachable!(),
        };
        let e0 = ke(&state);
        for _ in 0..50 {
            state = step(&spec, &cfg, &state, &[0.0, 0.0]).unwrap().next;
            assert!((ke(&state) - e0).abs() < 1e-9);
        }
    }

    #[test]
    fn restitution_changes_bounce() {
        let spec = EnvSpec::point_mass();
        let launch = EnvState::PointMass {
            pos: [1.95, 0.0],
            vel: [2.0, 0.0],
            step: 0,
        };
        let speed_after = |e: f64| {
            let cfg = WorldConfig::sim(LatentParams([0.0, 0.5, 0.5, 0.5, e]));
            match step(&spec, &cfg, &launch, &[0.0, 0.0]).unwrap().next {
                EnvState::PointMass { vel, pos, .. } => {
                    assert!(pos[0] <= 2.0);
                    vel[0]
                }
                _ => unreachable!(),
            }
        };
        assert!((speed_after(0.9) + 1.8).abs() < 1e-12);
        assert!((speed_after(0.2) + 0.4).abs() < 1e-12);
    }

    #[test]
    fn more_friction_gap_coasts_shorter() {
        let spec = EnvSpec::point_mass();
        let theta = LatentParams([0.2, 0.5, 0.5, 0.5, 0.5]);
        let coast = |gap: f64| {
            let cfg = WorldConfig::real(theta, RealityGap([gap, 0.0, 0.0, 0.0, 0.0]));
            let mut s = EnvState::PointMass {
                pos: [-1.5, 0.0],
                vel: [1.0, 0.0],
                step: 0,
            };
            for _ in 0..40 {
                s = step(&spec, &cfg, &s, &[0.0, 0.0]).unwrap().next;
            }
            match s {
                EnvState::PointMass { pos, .. } => pos[0] + 1.5,
                _ => unreachable!(),
            }
        };
        let d: Vec<f64> = [0.0, 0.5, 1.0, 2.0].iter().map(|&g| coast(g)).collect();
        assert!(d.windows(2).all(|w| w[1] < w[0]), "{d:?}");
    }

    #[test]
    fn episodes_end_exactly_at_horizon() {
        for spec in [EnvSpec::point_mass(), EnvSpec::pendulum()] {
            let mut rng = rng_from(8);
            let mut env = Env::new(spec, WorldConfig::sim(LatentParams::default()), &mut rng).unwrap();
            let zero = vec![0.0; spec.action_dim()];
            let mut steps = 0;
            loop {
                steps += 1;
                if env.step(&zero).unwrap().done {
                    break;
                }
            }
            assert_eq!(steps, spec.horizon);
        }
    }

    #[test]
    fn pendulum_features_and_wrap() {
        let spec = EnvSpec::pendulum();
        let cfg = WorldConfig::sim(LatentParams::default());
        let s = EnvState::Pendulum {
            angle: 3.1,
            ang_vel: 8.0,
            step: 0,
        };
        let out = step(&spec, &cfg, &s, &[1.0]).unwrap();
        let EnvState::Pendulum { angle, ang_vel, .. } = out.next else { panic!() };
        assert!(angle > -std::f64::consts::PI && angle <= std::f64::consts::PI);
        assert!(ang_vel <= 8.0);
        assert_eq!(out.next.features().len(), spec.state_dim());
        // hanging straight down at rest is an equilibrium
        let down = EnvState::Pendulum {
            angle: std::f64::consts::PI,
            ang_vel: 0.0,
            step: 0,
        };
        let out = step(&spec, &cfg, &down, &[0.0]).unwrap();
        let EnvState::Pendulum { ang_vel, .. } = out.next else { panic!() };
        assert!(ang_vel.abs() < 1e-12);
        assert!((out.reward + 1.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_actions() {
        let spec = EnvSpec::point_mass();
        let cfg = WorldConfig::sim(LatentParams::default());
        assert!(step(&spec, &cfg, &at_rest([0.0, 0.0]), &[f64::NAN, 0.0]).is_err());
        assert!(step(&spec, &cfg, &at_rest([0.0, 0.0]), &[0.0]).is_err());
        // out-of-bound actions are clamped, not rejected
        let a = step(&spec, &cfg, &at_rest([0.0, 0.0]), &[7.0, 0.0]).unwrap();
        let b = step(&spec, &cfg, &at_rest([0.0, 0.0]), &[1.0, 0.0]).unwrap();
        assert_eq!(a, b);
    }
}
