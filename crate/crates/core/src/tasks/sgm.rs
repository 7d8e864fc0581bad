//! Switching Gaussian mixture: a sticky Markov chain over `K` regimes drives
//! linear-Gaussian dynamics in `R^dx`.
//!
//! ```text
//! z_0 ~ Cat(1/K),  z_t | z_{t-1} ~ Pi[z_{t-1}, :]
//! x_0 ~ N(0, diag(s0^2))
//! x_{t+1} = A_{z_t} x_t + b_{z_t} + sigma_{z_t} eps_t
//! ```
//!
//! The inference target is the one-hot encoded regime path `z_{0:T-1}`;
//! the observation is the flattened trajectory `x_{0:T}`.

use nalgebra::DMatrix;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::rng::{standard_normal, stream, Rng};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SgmConfig {
    /// Number of regimes.
    pub k: usize,
    /// Number of transitions (length of the regime path).
    pub t: usize,
    /// State dimension.
    pub dx: usize,
    /// Seed for the frozen dynamics (rotations and drifts).
    pub seed: u64,
}

impl Default for SgmConfig {
    fn default() -> Self {
        SgmConfig {
            k: 10,
            t: 10,
            dx: 5,
            seed: 0,
        }
    }
}

impl SgmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::Config(format!("SGM needs K >= 2 regimes, got {}", self.k)));
        }
        if self.t < 1 || self.dx < 1 {
            return Err(Error::Config("SGM needs T >= 1 and d_x >= 1".into()));
        }
        Ok(())
    }

    pub fn theta_dim(&self) -> usize {
        self.t * self.k
    }

    pub fn x_dim(&self) -> usize {
        (self.t + 1) * self.dx
    }
}

/// Frozen generative parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct SgmParams {
    pub config: SgmConfig,
    /// Row-stochastic `K x K` transition matrix, row-major.
    pub transition: Vec<f64>,
    pub initial: Vec<f64>,
    /// `K` dynamics matrices, each `dx x dx` row-major.
    pub dynamics: Vec<Vec<f64>>,
    pub drift: Vec<Vec<f64>>,
    pub noise: Vec<f64>,
    pub init_scale: Vec<f64>,
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

/// Haar-random rotation: orthonormalize a Gaussian matrix via QR, fix the
/// column signs with `sign(diag R)`, then flip one column if needed so the
/// determinant is +1.
fn random_rotation(dx: usize, rng: &mut Rng) -> DMatrix<f64> {
    let g = DMatrix::from_fn(dx, dx, |_, _| standard_normal(rng));
    let qr = g.qr();
    let (mut q, r) = (qr.q(), qr.r());
    for j in 0..dx {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    if q.determinant() < 0.0 {
        q.column_mut(0).neg_mut();
    }
    q
}

impl SgmParams {
    pub fn build(config: SgmConfig) -> Result<Self> {
        config.validate()?;
        let SgmConfig { k, dx, .. } = config;
        let mut rng = stream(config.seed, "sgm-params");
        let mut transition = vec![0.3 / k as f64; k * k];
        for i in 0..k {
            transition[i * k + i] += 0.7;
        }
        let mut dynamics = Vec::with_capacity(k);
        let mut drift = Vec::with_capacity(k);
        for _ in 0..k {
            let r = random_rotation(dx, &mut rng);
            let mut a = Vec::with_capacity(dx * dx);
            for i in 0..dx {
                for j in 0..dx {
                    a.push(0.8 * r[(i, j)]);
                }
            }
            dynamics.push(a);
            drift.push((0..dx).map(|_| 2.0 * standard_normal(&mut rng)).collect());
        }
        Ok(SgmParams {
            config,
            transition,
            initial: vec![1.0 / k as f64; k],
            dynamics,
            drift,
            noise: linspace(0.25, 0.6, k),
            init_scale: linspace(0.3, 2.0, dx),
        })
    }

    pub fn k(&self) -> usize {
        self.config.k
    }

    pub fn dx(&self) -> usize {
        self.config.dx
    }

    pub fn trans(&self, from: usize, to: usize) -> f64 {
        self.transition[from * self.config.k + to]
    }

    /// Test hook: the same dynamics with every noise scale set to zero.
    pub fn without_noise(&self) -> Self {
        let mut p = self.clone();
        p.noise.fill(0.0);
        p.init_scale.fill(0.0);
        p
    }

    /// `A_k x + b_k`.
    pub fn mean_next(&self, k: usize, x: &[f64]) -> Vec<f64> {
        let dx = self.dx();
        let a = &self.dynamics[k];
        (0..dx)
            .map(|i| (0..dx).map(|j| a[i * dx + j] * x[j]).sum::<f64>() + self.drift[k][i])
            .collect()
    }
}

/// A regime path with zero-based regime labels.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct RegimePath {
    pub z: Vec<usize>,
}

impl RegimePath {
    /// Concatenated one-hot blocks of size `k`.
    pub fn one_hot(&self, k: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.z.len() * k];
        for (t, &z) in self.z.iter().enumerate() {
            out[t * k + z] = 1.0;
        }
        out
    }

    pub fn from_one_hot(theta: &[f64], k: usize) -> Result<Self> {
        if k == 0 || !theta.len().is_multiple_of(k) {
            return Err(Error::shape("one-hot path", k.max(1), theta.len()));
        }
        let z = theta
            .chunks(k)
            .enumerate()
            .map(|(t, block)| {
                let ones: Vec<usize> = block.iter().enumerate().filter(|(_, &v)| v == 1.0).map(|(i, _)| i).collect();
                if ones.len() == 1 && block.iter().all(|&v| v == 0.0 || v == 1.0) {
                    Ok(ones[0])
                } else {
                    Err(Error::Domain(format!("block {t} is not one-hot")))
                }
            })
            .collect::<Result<_>>()?;
        Ok(RegimePath { z })
    }

    /// Mixed-radix code `sum z_t K^t`, used to index enumerated paths.
    pub fn code(&self, k: usize) -> usize {
        self.z.iter().rev().fold(0, |acc, &z| acc * k + z)
    }

    pub fn from_code(mut code: usize, k: usize, len: usize) -> Self {
        let mut z = Vec::with_capacity(len);
        for _ in 0..len {
            z.push(code % k);
            code /= k;
        }
        RegimePath { z }
    }
}

/// Continuous trajectory `x_{0:T}`, flattened row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub states: Vec<f64>,
    pub dx: usize,
}

impl Trajectory {
    pub fn new(states: Vec<f64>, dx: usize) -> Result<Self> {
        if dx == 0 || !states.len().is_multiple_of(dx) || states.len() < 2 * dx {
            return Err(Error::shape("trajectory", 2 * dx.max(1), states.len()));
        }
        Ok(Trajectory { states, dx })
    }

    /// Number of transitions.
    pub fn transitions(&self) -> usize {
        self.states.len() / self.dx - 1
    }

    pub fn state(&self, t: usize) -> &[f64] {
        &self.states[t * self.dx..(t + 1) * self.dx]
    }

    /// The first `transitions + 1` states.
    pub fn prefix(&self, transitions: usize) -> Trajectory {
        Trajectory {
            states: self.states[..(transitions + 1) * self.dx].to_vec(),
            dx: self.dx,
        }
    }
}

pub fn sample_prior(params: &SgmParams, rng: &mut Rng) -> RegimePath {
    let k = params.k();
    let mut z = Vec::with_capacity(params.config.t);
    z.push(rng.gen_range(0..k));
    for _ in 1..params.config.t {
        let prev = *z.last().expect("non-empty");
        z.push(categorical(&params.transition[prev * k..(prev + 1) * k], rng));
    }
    RegimePath { z }
}

pub fn simulate(params: &SgmParams, path: &RegimePath, rng: &mut Rng) -> Result<Trajectory> {
    let dx = params.dx();
    if let Some(&bad) = path.z.iter().find(|&&z| z >= params.k()) {
        return Err(Error::Domain(format!("regime {bad} out of range")));
    }
    let mut states = Vec::with_capacity((path.z.len() + 1) * dx);
    for s in &params.init_scale {
        states.push(s * standard_normal(rng));
    }
    for (t, &z) in path.z.iter().enumerate() {
        let next = params.mean_next(z, &states[t * dx..(t + 1) * dx]);
        let sigma = params.noise[z];
        for m in next {
            states.push(m + sigma * standard_normal(rng));
        }
    }
    Trajectory::new(states, dx)
}

/// `ell[t][k] = log N(x_{t+1}; A_k x_t + b_k, sigma_k^2 I)`.
pub fn loglik_terms(params: &SgmParams, traj: &Trajectory) -> Result<Vec<Vec<f64>>> {
    check_len("trajectory state dimension", params.dx(), traj.dx)?;
    let dx = params.dx() as f64;
    Ok((0..traj.transitions())
        .map(|t| {
            let (cur, next) = (traj.state(t), traj.state(t + 1));
            (0..params.k())
                .map(|k| {
                    let mean = params.mean_next(k, cur);
                    let sq: f64 = next.iter().zip(&mean).map(|(a, b)| (a - b) * (a - b)).sum();
                    let var = params.noise[k] * params.noise[k];
                    -0.5 * (sq / var + dx * (LN_2PI + var.ln()))
                })
                .collect()
        })
        .collect())
}

/// `log N(x_0; 0, diag(s0^2))`.
pub fn initial_loglik(params: &SgmParams, traj: &Trajectory) -> f64 {
    traj.state(0)
        .iter()
        .zip(&params.init_scale)
        .map(|(x, s)| -0.5 * (x * x / (s * s) + LN_2PI + (s * s).ln()))
        .sum()
}

/// Joint `log p(z, x)` assembled from its factors.
pub fn log_joint(params: &SgmParams, path: &RegimePath, traj: &Trajectory) -> Result<f64> {
    check_len("regime path", traj.transitions(), path.z.len())?;
    let ell = loglik_terms(params, traj)?;
    let mut lp = params.initial[path.z[0]].ln() + initial_loglik(params, traj);
    for t in 1..path.z.len() {
        lp += params.trans(path.z[t - 1], path.z[t]).ln();
    }
    for (t, &z) in path.z.iter().enumerate() {
        lp += ell[t][z];
    }
    Ok(lp)
}

pub(crate) fn categorical(probs: &[f64], rng: &mut Rng) -> usize {
    let total: f64 = probs.iter().sum();
    let u = rng.gen::<f64>() * total;
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}
