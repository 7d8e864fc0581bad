//! Bounded continuous task: uniform prior on `[-1, 1]^D`, additive Gaussian
//! observation noise. The posterior is a Gaussian truncated to the box, which
//! rejection sampling draws exactly.

use ndarray::Array2;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use libm::{erf, erfc};

use crate::error::{check_len, Error, Result};
use crate::geometry::Support;
use crate::rng::{standard_normal, Rng};

/// Reference sampling refuses observations whose box mass is below this.
pub const MIN_ACCEPTANCE: f64 = 1e-4;

fn default_sigma() -> f64 {
    0.25
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxTaskConfig {
    pub dim: usize,
    #[serde(default = "default_sigma")]
    pub sigma_obs: f64,
}

impl BoxTaskConfig {
    pub fn new(dim: usize, sigma_obs: f64) -> Result<Self> {
        let cfg = BoxTaskConfig { dim, sigma_obs };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Config("box task needs dim >= 1".into()));
        }
        if !(self.sigma_obs > 0.0 && self.sigma_obs.is_finite()) {
            return Err(Error::Config(format!("sigma_obs must be positive, got {}", self.sigma_obs)));
        }
        Ok(())
    }

    pub fn support(&self) -> Support {
        Support::boxed(vec![-1.0; self.dim], vec![1.0; self.dim]).expect("unit box is valid")
    }

    pub fn sample_prior(&self, rng: &mut Rng) -> Vec<f64> {
        (0..self.dim).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    pub fn simulate(&self, theta: &[f64], rng: &mut Rng) -> Vec<f64> {
        theta.iter().map(|t| t + self.sigma_obs * standard_normal(rng)).collect()
    }

    /// Per-coordinate probability that `N(x_d, sigma^2)` lands in `[-1, 1]`.
    pub fn coordinate_acceptance(&self, x: &[f64]) -> Vec<f64> {
        let r = self.sigma_obs * std::f64::consts::SQRT_2;
        x.iter()
            .map(|&xd| {
                let (a, b) = ((-1.0 - xd) / r, (1.0 - xd) / r);
                // Difference of the tail away from the mode stays well conditioned.
                if a > 0.0 {
                    0.5 * (erfc(a) - erfc(b))
                } else if b < 0.0 {
                    0.5 * (erfc(-b) - erfc(-a))
                } else {
                    0.5 * (erf(b) - erf(a))
                }
            })
            .collect()
    }

    /// Probability that `N(x, sigma^2 I)` lands in the box.
    pub fn acceptance(&self, x: &[f64]) -> f64 {
        self.coordinate_acceptance(x).iter().product()
    }

    /// `n` exact posterior draws for observation `x`.
    ///
    /// Prior and likelihood both factor over coordinates, so each coordinate
    /// is drawn by its own rejection loop from `N(x_d, sigma^2)`.
    pub fn reference(&self, x: &[f64], n: usize, rng: &mut Rng) -> Result<Array2<f64>> {
        check_len("box observation", self.dim, x.len())?;
        let acc = self.coordinate_acceptance(x);
        if let Some((d, a)) = acc.iter().enumerate().find(|(_, a)| a.is_nan() || **a < MIN_ACCEPTANCE) {
            return Err(Error::Domain(format!(
                "rejection acceptance {a:.3e} below {MIN_ACCEPTANCE:.0e} in coordinate {d} for x = {x:?} (sigma_obs = {})",
                self.sigma_obs
            )));
        }
        let mut out = Array2::zeros((n, self.dim));
        for mut row in out.outer_iter_mut() {
            for (v, xd) in row.iter_mut().zip(x) {
                *v = loop {
                    let p = xd + self.sigma_obs * standard_normal(rng);
                    if (-1.0..=1.0).contains(&p) {
                        break p;
                    }
                };
            }
        }
        Ok(out)
    }
}
