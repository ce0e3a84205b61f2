//! CEP-parameterized Gaussian positioning error for reported user positions.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec3;

/// Median of |N(0, 1)|; converts a CEP radius into a per-axis sigma.
pub const CEP_TO_SIGMA: f64 = 0.6745;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CepModel {
    cep: f64,
    sigma: f64,
}

impl CepModel {
    pub fn new(cep: f64) -> Result<Self> {
        if !(cep.is_finite() && cep >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "CEP must be finite and nonnegative, got {cep}"
            )));
        }
        Ok(CepModel {
            cep,
            sigma: cep / CEP_TO_SIGMA,
        })
    }

    pub fn none() -> Self {
        CepModel {
            cep: 0.0,
            sigma: 0.0,
        }
    }

    pub fn cep(&self) -> f64 {
        self.cep
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn is_zero(&self) -> bool {
        self.cep == 0.0
    }
}

/// Adds i.i.d. `N(0, sigma^2)` noise to each axis. No clamping is applied.
pub fn perturb<R: Rng + ?Sized>(pos: Vec3, model: &CepModel, rng: &mut R) -> Vec3 {
    if model.is_zero() {
        return pos;
    }
    let s = model.sigma;
    let mut draw = || -> f64 {
        let n: f64 = StandardNormal.sample(rng);
        n * s
    };
    let (nx, ny, nz) = (draw(), draw(), draw());
    Vec3::new(pos.x + nx, pos.y + ny, pos.z + nz)
}
