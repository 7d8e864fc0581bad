//! Benchmark tasks with exact posterior oracles.

mod boxtask;
mod ffbs;
mod sgm;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

pub use boxtask::{BoxTaskConfig, MIN_ACCEPTANCE};
pub use ffbs::{
    enumerate_posterior, ffbs_forward, ffbs_sample, log_sum_exp, EnumeratedPosterior, FfbsSampler,
    MAX_ENUMERATED_PATHS,
};
pub use sgm::{
    initial_loglik, log_joint, loglik_terms, sample_prior as sgm_sample_prior, simulate as sgm_simulate, RegimePath,
    SgmConfig, SgmParams, Trajectory,
};

use crate::error::{check_len, Result};
use crate::geometry::Support;
use crate::rng::{rng_from_seed, split_index, stream};

/// Serializable task description.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskConfig {
    Sgm(SgmConfig),
    Box(BoxTaskConfig),
}

impl TaskConfig {
    pub fn name(&self) -> &'static str {
        match self {
            TaskConfig::Sgm(_) => "sgm",
            TaskConfig::Box(_) => "box",
        }
    }
}

/// A built task: prior, simulator, and reference posterior sampler.
#[derive(Clone, Debug)]
pub enum Task {
    Sgm(SgmParams),
    Box(BoxTaskConfig),
}

impl Task {
    pub fn new(cfg: &TaskConfig) -> Result<Self> {
        Ok(match cfg {
            TaskConfig::Sgm(c) => Task::Sgm(SgmParams::build(*c)?),
            TaskConfig::Box(c) => {
                c.validate()?;
                Task::Box(*c)
            }
        })
    }

    pub fn config(&self) -> TaskConfig {
        match self {
            Task::Sgm(p) => TaskConfig::Sgm(p.config),
            Task::Box(c) => TaskConfig::Box(*c),
        }
    }

    pub fn name(&self) -> &'static str {
        self.config().name()
    }

    pub fn theta_dim(&self) -> usize {
        match self {
            Task::Sgm(p) => p.config.theta_dim(),
            Task::Box(c) => c.dim,
        }
    }

    pub fn x_dim(&self) -> usize {
        match self {
            Task::Sgm(p) => p.config.x_dim(),
            Task::Box(c) => c.dim,
        }
    }

    pub fn support(&self) -> Support {
        match self {
            Task::Sgm(p) => Support::simplex_product(p.config.t, p.k()).expect("validated config"),
            Task::Box(c) => c.support(),
        }
    }

    /// `n` prior/simulator pairs; pair `i` uses its own stream of `seed`.
    pub fn simulate(&self, n: usize, seed: u64) -> Result<(Array2<f64>, Array2<f64>)> {
        let mut theta = Array2::zeros((n, self.theta_dim()));
        let mut x = Array2::zeros((n, self.x_dim()));
        for i in 0..n {
            let mut rng = rng_from_seed(split_index(seed, "simulate", i as u64));
            let (th, xs) = match self {
                Task::Sgm(p) => {
                    let path = sgm::sample_prior(p, &mut rng);
                    let traj = sgm::simulate(p, &path, &mut rng)?;
                    (path.one_hot(p.k()), traj.states)
                }
                Task::Box(c) => {
                    let th = c.sample_prior(&mut rng);
                    let xs = c.simulate(&th, &mut rng);
                    (th, xs)
                }
            };
            theta.row_mut(i).assign(&ndarray::ArrayView1::from(&th));
            x.row_mut(i).assign(&ndarray::ArrayView1::from(&xs));
        }
        Ok((theta, x))
    }

    /// `n` exact posterior draws given observation `x`.
    pub fn reference(&self, x: &[f64], n: usize, seed: u64) -> Result<Array2<f64>> {
        check_len("observation", self.x_dim(), x.len())?;
        let mut rng = stream(seed, "reference");
        match self {
            Task::Sgm(p) => {
                let traj = Trajectory::new(x.to_vec(), p.dx())?;
                let sampler = FfbsSampler::new(p, &traj)?;
                let mut out = Array2::zeros((n, self.theta_dim()));
                for mut row in out.outer_iter_mut() {
                    let path = sampler.sample(&mut rng);
                    row.assign(&ndarray::ArrayView1::from(&path.one_hot(p.k())));
                }
                Ok(out)
            }
            Task::Box(c) => c.reference(x, n, &mut rng),
        }
    }
}
