//! Exact posterior over regime paths: forward filtering, backward sampling,
//! and a brute-force enumeration oracle for small instances.

use super::sgm::{categorical, initial_loglik, loglik_terms, RegimePath, SgmParams, Trajectory};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Largest number of paths [`enumerate_posterior`] will visit.
pub const MAX_ENUMERATED_PATHS: usize = 1_000_000;

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Normalized forward messages `log alpha_t(k)`: each row is the filtering
/// distribution of `z_t` given `x_{0:t+1}` and has log-sum-exp zero.
pub fn ffbs_forward(params: &SgmParams, ell: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let k = params.k();
    if ell.is_empty() {
        return Err(Error::Domain("forward pass needs at least one transition".into()));
    }
    if ell.iter().any(|row| row.len() != k || row.iter().any(|v| !v.is_finite())) {
        return Err(Error::Domain("log-likelihood terms must be finite T x K".into()));
    }
    let log_trans: Vec<f64> = params.transition.iter().map(|p| p.ln()).collect();
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(ell.len());
    let mut row: Vec<f64> = (0..k).map(|j| params.initial[j].ln() + ell[0][j]).collect();
    normalize(&mut row);
    out.push(row);
    let mut scratch = vec![0.0; k];
    for lt in &ell[1..] {
        let prev = out.last().expect("non-empty");
        let mut row = vec![0.0; k];
        for (j, r) in row.iter_mut().enumerate() {
            for (i, s) in scratch.iter_mut().enumerate() {
                *s = prev[i] + log_trans[i * k + j];
            }
            *r = lt[j] + log_sum_exp(&scratch);
        }
        normalize(&mut row);
        out.push(row);
    }
    Ok(out)
}

fn normalize(row: &mut [f64]) {
    let z = log_sum_exp(row);
    for v in row.iter_mut() {
        *v -= z;
    }
}

/// Forward messages for one trajectory, reusable for many backward draws.
#[derive(Clone, Debug)]
pub struct FfbsSampler {
    k: usize,
    transition: Vec<f64>,
    alpha: Vec<Vec<f64>>,
}

impl FfbsSampler {
    pub fn new(params: &SgmParams, traj: &Trajectory) -> Result<Self> {
        let ell = loglik_terms(params, traj)?;
        let log_alpha = ffbs_forward(params, &ell)?;
        Ok(FfbsSampler {
            k: params.k(),
            transition: params.transition.clone(),
            alpha: log_alpha.iter().map(|r| r.iter().map(|v| v.exp()).collect()).collect(),
        })
    }

    /// `z_{T-1} ~ alpha_{T-1}`, then `z_t | z_{t+1} = j ~ alpha_t(.) Pi[., j]`.
    pub fn sample(&self, rng: &mut Rng) -> RegimePath {
        let t_len = self.alpha.len();
        let mut z = vec![0; t_len];
        z[t_len - 1] = categorical(&self.alpha[t_len - 1], rng);
        let mut w = vec![0.0; self.k];
        for t in (0..t_len - 1).rev() {
            let next = z[t + 1];
            for (i, wi) in w.iter_mut().enumerate() {
                *wi = self.alpha[t][i] * self.transition[i * self.k + next];
            }
            z[t] = categorical(&w, rng);
        }
        RegimePath { z }
    }
}

/// One exact posterior draw of the regime path.
pub fn ffbs_sample(params: &SgmParams, traj: &Trajectory, rng: &mut Rng) -> Result<RegimePath> {
    Ok(FfbsSampler::new(params, traj)?.sample(rng))
}

/// Exact posterior over all `K^T` paths, indexed by [`RegimePath::code`].
#[derive(Clone, Debug)]
pub struct EnumeratedPosterior {
    pub k: usize,
    pub len: usize,
    pub probs: Vec<f64>,
}

impl EnumeratedPosterior {
    /// `p(z_t = j | x)` for every `t` and `j`.
    pub fn marginals(&self) -> Vec<Vec<f64>> {
        let mut m = vec![vec![0.0; self.k]; self.len];
        for (code, p) in self.probs.iter().enumerate() {
            let path = RegimePath::from_code(code, self.k, self.len);
            for (t, &z) in path.z.iter().enumerate() {
                m[t][z] += p;
            }
        }
        m
    }
}

/// Normalize `log p(z, x)` over every path by direct summation in log space.
pub fn enumerate_posterior(params: &SgmParams, traj: &Trajectory) -> Result<EnumeratedPosterior> {
    let (k, len) = (params.k(), traj.transitions());
    let n = (0..len).try_fold(1usize, |acc, _| acc.checked_mul(k).filter(|&v| v <= MAX_ENUMERATED_PATHS));
    let Some(n) = n else {
        return Err(Error::Domain(format!(
            "{k}^{len} paths exceed the enumeration cap of {MAX_ENUMERATED_PATHS}"
        )));
    };
    let ell = loglik_terms(params, traj)?;
    let base = initial_loglik(params, traj);
    let log_joint: Vec<f64> = (0..n)
        .map(|code| {
            let path = RegimePath::from_code(code, k, len);
            let mut lp = base + params.initial[path.z[0]].ln() + ell[0][path.z[0]];
            for t in 1..len {
                lp += params.trans(path.z[t - 1], path.z[t]).ln() + ell[t][path.z[t]];
            }
            lp
        })
        .collect();
    let z = log_sum_exp(&log_joint);
    Ok(EnumeratedPosterior {
        k,
        len,
        probs: log_joint.iter().map(|lp| (lp - z).exp()).collect(),
    })
}
