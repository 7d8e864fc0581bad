use ndarray::{s, Array2, ArrayView2};

use super::model::{FlowModel, Method};
use crate::error::{check_len, Error, Result};
use crate::rng::{fill_standard_normal, rng_from_seed, split_index};

/// Default number of Euler steps.
pub const DEFAULT_STEPS: usize = 100;

/// Chains integrated together through one network call.
const CHAIN_BATCH: usize = 1024;

/// What the sampler saw at one Euler step, passed to inspection callbacks.
pub struct SampleStep<'a> {
    pub step: usize,
    pub t: f64,
    /// Current states of the chains in this batch.
    pub state: ArrayView2<'a, f64>,
    /// Data-endpoint means for two-sided models.
    pub mu1: Option<ArrayView2<'a, f64>>,
}

/// Draw `n` posterior samples for observation `x` by integrating the learned
/// flow with `n_steps` explicit Euler steps on the grid `t_k = k / n_steps`.
///
/// Chain `i` starts from its own standard-normal draw seeded by
/// `(seed, i)`, so results do not depend on batching. Simplex blocks are
/// projected to one-hot vertices after the final step.
pub fn euler_sample(model: &FlowModel, x: &[f64], n: usize, n_steps: usize, seed: u64) -> Result<Array2<f64>> {
    euler_sample_inspect(model, x, n, n_steps, seed, |_| {})
}

pub fn euler_sample_inspect<F>(
    model: &FlowModel,
    x: &[f64],
    n: usize,
    n_steps: usize,
    seed: u64,
    mut inspect: F,
) -> Result<Array2<f64>>
where
    F: FnMut(&SampleStep<'_>),
{
    check_len("observation", model.x_dim(), x.len())?;
    if n_steps == 0 {
        return Err(Error::Config("n_steps must be >= 1".into()));
    }
    let d = model.theta_dim();
    let x_row = ArrayView2::from_shape((1, x.len()), x).expect("row vector");
    let h = 1.0 / n_steps as f64;
    let mut out = Array2::zeros((n, d));

    for start in (0..n).step_by(CHAIN_BATCH) {
        let end = (start + CHAIN_BATCH).min(n);
        let mut state = Array2::zeros((end - start, d));
        for (i, mut row) in state.outer_iter_mut().enumerate() {
            let mut rng = rng_from_seed(split_index(seed, "chain", (start + i) as u64));
            fill_standard_normal(&mut rng, row.as_slice_mut().expect("standard layout"));
        }
        for k in 0..n_steps {
            let t = k as f64 * h;
            let ts = vec![t; state.nrows()];
            let v = match model.method() {
                Method::Fmpe => {
                    let v = model.velocity_batch(state.view(), &ts, x_row)?;
                    inspect(&SampleStep {
                        step: k,
                        t,
                        state: state.view(),
                        mu1: None,
                    });
                    v
                }
                Method::Pawsterior => {
                    let (mu0, mu1) = model.endpoint_means_batch(state.view(), &ts, x_row)?;
                    inspect(&SampleStep {
                        step: k,
                        t,
                        state: state.view(),
                        mu1: Some(mu1.view()),
                    });
                    model.combine(mu0, &mu1, &ts)
                }
            };
            state.scaled_add(h, &v);
            if state.iter().any(|v| !v.is_finite()) {
                return Err(Error::numeric("euler integration (step)", k));
            }
        }
        for mut row in state.outer_iter_mut() {
            model.support().project_one_hot(row.as_slice_mut().expect("standard layout"));
        }
        out.slice_mut(s![start..end, ..]).assign(&state);
    }
    Ok(out)
}
