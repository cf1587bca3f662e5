use serde::{Deserialize, Serialize};

use crate::error::{check_finite, Result};

pub const LATENT_DIM: usize = 5;

/// Normalized latent units never drop below this after a gap is applied.
pub const LATENT_FLOOR: f64 = 0.0;

pub const FRICTION: usize = 0;
pub const MASS: usize = 1;
pub const AUX_A: usize = 2;
pub const AUX_B: usize = 3;
pub const RESTITUTION: usize = 4;

/// Ground-truth latent vector: friction, primary mass, two auxiliary
/// masses, restitution.
pub const DEFAULT_THETA_G: [f64; LATENT_DIM] =
    [0.5488135, 0.71518937, 0.60276338, 0.54488318, 0.4236548];

/// Modellable environment parameters in normalized units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LatentParams(pub [f64; LATENT_DIM]);

impl LatentParams {
    pub fn new(values: [f64; LATENT_DIM]) -> Result<Self> {
        check_finite("latent parameters", &values)?;
        Ok(LatentParams(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

impl Default for LatentParams {
    fn default() -> Self {
        LatentParams(DEFAULT_THETA_G)
    }
}

/// Additive offsets on the normalized latents that the simulator does not
/// model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RealityGap(pub [f64; LATENT_DIM]);

impl RealityGap {
    pub fn zero() -> Self {
        RealityGap([0.0; LATENT_DIM])
    }

    /// `factor * theta` on the listed dimensions; `factor = 4` is the +400%
    /// construction.
    pub fn relative(theta: &LatentParams, factor: f64, dims: &[usize]) -> Self {
        let mut g = [0.0; LATENT_DIM];
        for &d in dims {
            g[d] = factor * theta.0[d];
        }
        RealityGap(g)
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&g| g == 0.0)
    }
}

/// `theta + gap`, elementwise, floored at [`LATENT_FLOOR`].
pub fn apply_gap(theta: &LatentParams, gap: &RealityGap) -> LatentParams {
    let mut v = theta.0;
    for (x, g) in v.iter_mut().zip(gap.0) {
        *x = (*x + g).max(LATENT_FLOOR);
    }
    LatentParams(v)
}

/// Full parameterization of a world: the simulator uses a zero gap.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub theta: LatentParams,
    pub gap: RealityGap,
}

impl WorldConfig {
    pub fn sim(theta: LatentParams) -> Self {
        WorldConfig {
            theta,
            gap: RealityGap::zero(),
        }
    }

    pub fn real(theta: LatentParams, gap: RealityGap) -> Self {
        WorldConfig { theta, gap }
    }

    pub fn effective(&self) -> LatentParams {
        apply_gap(&self.theta, &self.gap)
    }
}

/// `physical = offset + scale * normalized`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentMap {
    pub offset: f64,
    pub scale: f64,
}

impl LatentMap {
    pub const fn new(offset: f64, scale: f64) -> Self {
        LatentMap { offset, scale }
    }

    pub fn apply(&self, normalized: f64) -> f64 {
        self.offset + self.scale * normalized
    }
}
