//! Planar puck pushed by a bounded force towards a goal, inside a walled
//! square arena.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::env::latent::{LatentMap, LatentParams, AUX_A, AUX_B, FRICTION, LATENT_DIM, MASS, RESTITUTION};
use crate::seed::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointMassSpec {
    /// Newtons per unit action.
    pub force_scale: f64,
    /// Walls sit at `+-arena_half_width` on both axes (m).
    pub arena_half_width: f64,
    pub goal: [f64; 2],
    /// Initial positions are drawn from `+-init_position` (m).
    pub init_position: f64,
    /// Initial velocities are drawn from `+-init_speed` (m/s).
    pub init_speed: f64,
    /// friction (1/s), primary mass (kg), x/y auxiliary masses (kg), restitution.
    pub maps: [LatentMap; LATENT_DIM],
}

impl Default for PointMassSpec {
    fn default() -> Self {
        PointMassSpec {
            force_scale: 4.0,
            arena_half_width: 2.0,
            goal: [0.0, 0.0],
            init_position: 1.5,
            init_speed: 0.5,
            maps: [
                LatentMap::new(0.0, 0.3),
                LatentMap::new(0.25, 1.0),
                LatentMap::new(0.0, 0.5),
                LatentMap::new(0.0, 0.5),
                LatentMap::new(0.0, 1.0),
            ],
        }
    }
}

/// Physical constants after mapping the effective latents.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PointMassPhysics {
    pub friction: f64,
    pub mass: [f64; 2],
    pub restitution: f64,
}

impl PointMassPhysics {
    pub fn from_latents(spec: &PointMassSpec, latents: &LatentParams) -> Self {
        let v = latents.0;
        let primary = spec.maps[MASS].apply(v[MASS]);
        PointMassPhysics {
            friction: spec.maps[FRICTION].apply(v[FRICTION]).max(0.0),
            mass: [
                primary + spec.maps[AUX_A].apply(v[AUX_A]),
                primary + spec.maps[AUX_B].apply(v[AUX_B]),
            ],
            restitution: spec.maps[RESTITUTION].apply(v[RESTITUTION]).clamp(0.0, 1.0),
        }
    }
}

/// Semi-implicit Euler: velocity first, then position with the new velocity,
/// then an inelastic reflection off any wall that was crossed.
pub fn integrate(
    spec: &PointMassSpec,
    physics: &PointMassPhysics,
    dt: f64,
    pos: [f64; 2],
    vel: [f64; 2],
    action: &[f64],
) -> ([f64; 2], [f64; 2]) {
    let wall = spec.arena_half_width;
    let mut p = pos;
    let mut v = vel;
    for k in 0..2 {
        let force = spec.force_scale * action[k];
        v[k] += (force / physics.mass[k] - physics.friction * vel[k]) * dt;
        p[k] += v[k] * dt;
        if p[k].abs() > wall {
            let side = p[k].signum();
            let depth = p[k].abs() - wall;
            p[k] = side * (wall - physics.restitution * depth).max(0.0);
            v[k] = -physics.restitution * v[k];
        }
    }
    (p, v)
}

pub fn task_reward(spec: &PointMassSpec, pos: [f64; 2]) -> f64 {
    let dx = pos[0] - spec.goal[0];
    let dy = pos[1] - spec.goal[1];
    -(dx * dx + dy * dy).sqrt()
}

pub fn sample_initial(spec: &PointMassSpec, rng: &mut Rng) -> ([f64; 2], [f64; 2]) {
    let p = spec.init_position;
    let s = spec.init_speed;
    (
        [rng.random_range(-p..=p), rng.random_range(-p..=p)],
        [rng.random_range(-s..=s), rng.random_range(-s..=s)],
    )
}
