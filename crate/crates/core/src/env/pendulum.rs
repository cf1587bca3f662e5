//! Torque-limited pendulum swing-up. Angle 0 is upright; gravity pulls the
//! bob away from it.

use std::f64::consts::PI;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::env::latent::{LatentMap, LatentParams, AUX_A, AUX_B, FRICTION, LATENT_DIM, MASS};
use crate::seed::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PendulumSpec {
    /// N m per unit action.
    pub torque_scale: f64,
    pub length: f64,
    pub gravity: f64,
    /// rad/s
    pub max_speed: f64,
    /// Weight of the squared-action penalty in the task reward.
    pub action_cost: f64,
    /// Initial angular velocities are drawn from `+-init_speed` (rad/s).
    pub init_speed: f64,
    /// joint damping (N m s), bob mass (kg), rod mass (kg), rotor inertia
    /// (kg m^2). The restitution latent has no contact to act on here.
    pub maps: [LatentMap; LATENT_DIM],
}

impl Default for PendulumSpec {
    fn default() -> Self {
        PendulumSpec {
            torque_scale: 15.0,
            length: 1.0,
            gravity: 9.81,
            max_speed: 8.0,
            action_cost: 0.05,
            init_speed: 1.0,
            maps: [
                LatentMap::new(0.0, 0.5),
                LatentMap::new(0.25, 1.0),
                LatentMap::new(0.0, 0.5),
                LatentMap::new(0.0, 0.1),
                LatentMap::new(0.0, 0.0),
            ],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PendulumPhysics {
    pub damping: f64,
    pub inertia: f64,
    /// Peak gravitational torque, reached at angle +-pi/2.
    pub gravity_torque: f64,
}

impl PendulumPhysics {
    pub fn from_latents(spec: &PendulumSpec, latents: &LatentParams) -> Self {
        let v = latents.0;
        let l = spec.length;
        let bob = spec.maps[MASS].apply(v[MASS]).max(0.0);
        let rod = spec.maps[AUX_A].apply(v[AUX_A]).max(0.0);
        let rotor = spec.maps[AUX_B].apply(v[AUX_B]).max(0.0);
        PendulumPhysics {
            damping: spec.maps[FRICTION].apply(v[FRICTION]).max(0.0),
            inertia: (bob * l * l + rod * l * l / 3.0 + rotor).max(1e-6),
            gravity_torque: (bob + 0.5 * rod) * spec.gravity * l,
        }
    }
}

pub fn wrap_angle(x: f64) -> f64 {
    let y = (x + PI).rem_euclid(2.0 * PI) - PI;
    if y <= -PI {
        y + 2.0 * PI
    } else {
        y
    }
}

pub fn integrate(
    spec: &PendulumSpec,
    physics: &PendulumPhysics,
    dt: f64,
    angle: f64,
    ang_vel: f64,
    action: &[f64],
) -> (f64, f64) {
    let torque = spec.torque_scale * action[0];
    let acc = (torque + physics.gravity_torque * angle.sin() - physics.damping * ang_vel)
        / physics.inertia;
    let w = (ang_vel + acc * dt).clamp(-spec.max_speed, spec.max_speed);
    (wrap_angle(angle + w * dt), w)
}

pub fn task_reward(spec: &PendulumSpec, angle: f64, action: &[f64]) -> f64 {
    angle.cos() - spec.action_cost * action.iter().map(|a| a * a).sum::<f64>()
}

pub fn sample_initial(spec: &PendulumSpec, rng: &mut Rng) -> (f64, f64) {
    (
        rng.random_range(-PI..PI),
        rng.random_range(-spec.init_speed..=spec.init_speed),
    )
}
