//! Training objectives.
//!
//! Both losses build `theta_t = t theta_1 + (1 - t) theta_0` internally from
//! the endpoint pair and return the batch-mean loss with its parameter
//! gradient.

use ndarray::{s, Array2, ArrayView1, ArrayViewMut1, Axis};

use super::model::{FlowModel, Method};
use crate::error::{check_len, Error, Result};
use crate::geometry::{log_softmax, Head1, Support};

/// A minibatch of endpoint pairs with their observations and times.
#[derive(Clone, Debug)]
pub struct TrainingBatch {
    pub theta0: Array2<f64>,
    pub theta1: Array2<f64>,
    pub x: Array2<f64>,
    pub t: Vec<f64>,
}

impl TrainingBatch {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn theta_t(&self) -> Array2<f64> {
        let mut out = self.theta0.clone();
        for ((mut row, th1), &t) in out.axis_iter_mut(Axis(0)).zip(self.theta1.axis_iter(Axis(0))).zip(&self.t) {
            row.zip_mut_with(&th1, |a, b| *a = t * b + (1.0 - t) * *a);
        }
        out
    }

    fn validate(&self, d: usize, x_dim: usize) -> Result<()> {
        let b = self.t.len();
        if b == 0 {
            return Err(Error::Config("empty training batch".into()));
        }
        check_len("theta0 rows", b, self.theta0.nrows())?;
        check_len("theta1 rows", b, self.theta1.nrows())?;
        check_len("x rows", b, self.x.nrows())?;
        check_len("theta0 columns", d, self.theta0.ncols())?;
        check_len("theta1 columns", d, self.theta1.ncols())?;
        check_len("x columns", x_dim, self.x.ncols())?;
        if let Some(i) = self.t.iter().position(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::Domain(format!("batch time at index {i} outside [0, 1]")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct LossEval {
    pub loss: f64,
    pub grads: Vec<f64>,
}

/// Per-sample loss and gradient of that loss with respect to the raw
/// network outputs.
fn per_sample(model: &FlowModel, batch: &TrainingBatch, out: &Array2<f64>) -> (Vec<f64>, Array2<f64>) {
    let d = model.theta_dim();
    let mut out_grad = Array2::zeros(out.raw_dim());
    let mut losses = Vec::with_capacity(batch.len());
    for i in 0..batch.len() {
        let raw = out.row(i);
        let th0 = batch.theta0.row(i);
        let th1 = batch.theta1.row(i);
        let mut g = out_grad.row_mut(i);
        let loss = match model.method() {
            Method::Fmpe => {
                let mut acc = 0.0;
                for j in 0..d {
                    let r = raw[j] - (th1[j] - th0[j]);
                    acc += r * r;
                    g[j] = 2.0 * r;
                }
                acc
            }
            Method::Pawsterior => {
                let mut acc = 0.0;
                for j in 0..d {
                    let r = raw[j] - th0[j];
                    acc += 0.5 * r * r;
                    g[j] = r;
                }
                let (raw1, g1) = (raw.slice(s![d..]), g.slice_mut(s![d..]));
                acc + data_endpoint_term(model.support(), raw1, th1, g1)
            }
        };
        losses.push(loss);
    }
    (losses, out_grad)
}

/// Negative log-likelihood of `theta1` under the data-endpoint head, dropping
/// constants: unit-variance Gaussian for continuous heads, cross-entropy per
/// block for categorical heads.
fn data_endpoint_term(
    support: &Support,
    raw: ArrayView1<'_, f64>,
    theta1: ArrayView1<'_, f64>,
    mut grad: ArrayViewMut1<'_, f64>,
) -> f64 {
    match (support.head1(), support) {
        (Head1::Unconstrained, _) => {
            let mut acc = 0.0;
            for j in 0..raw.len() {
                let r = raw[j] - theta1[j];
                acc += 0.5 * r * r;
                grad[j] = r;
            }
            acc
        }
        (Head1::TanhBox, Support::Box { low, high }) => {
            let mut mu = raw.to_vec();
            support.apply_head1_in_place(&mut mu);
            let mut acc = 0.0;
            for j in 0..raw.len() {
                let r = mu[j] - theta1[j];
                acc += 0.5 * r * r;
                grad[j] = r * Support::box_slope(low[j], high[j], raw[j]);
            }
            acc
        }
        (Head1::CategoricalLogits, Support::SimplexProduct { size, .. }) => {
            let raw = raw.to_vec();
            let mut acc = 0.0;
            for (b, block) in raw.chunks(*size).enumerate() {
                let logp = log_softmax(block);
                let target = theta1.slice(s![b * size..(b + 1) * size]);
                let mass: f64 = target.sum();
                for k in 0..*size {
                    acc -= target[k] * logp[k];
                    grad[b * size + k] = mass * logp[k].exp() - target[k];
                }
            }
            acc
        }
        _ => unreachable!("head kind follows the support"),
    }
}

fn evaluate(model: &FlowModel, batch: &TrainingBatch, with_grads: bool) -> Result<LossEval> {
    batch.validate(model.theta_dim(), model.x_dim())?;
    let inputs = model.inputs(batch.theta_t().view(), &batch.t, batch.x.view())?;
    let net = model.network();
    let (out, tape) = if with_grads {
        let (out, tape) = net.forward_batch(&model.params, inputs.view())?;
        (out, Some(tape))
    } else {
        (net.predict_batch(&model.params, inputs.view())?, None)
    };
    let (losses, mut out_grad) = per_sample(model, batch, &out);
    if let Some(i) = losses.iter().position(|l| !l.is_finite()) {
        return Err(Error::numeric("loss (batch index)", i));
    }
    let n = batch.len() as f64;
    let loss = losses.iter().sum::<f64>() / n;
    let grads = match tape {
        Some(tape) => {
            out_grad.mapv_inplace(|g| g / n);
            net.backward_batch(&model.params, &tape, out_grad.view())?
        }
        None => Vec::new(),
    };
    Ok(LossEval { loss, grads })
}

/// Two-sided endpoint objective: mean over the batch of
/// `0.5 |mu0 - theta0|^2 + nll_1(head1, theta1)`.
pub fn pawsterior_loss(model: &FlowModel, batch: &TrainingBatch) -> Result<LossEval> {
    if model.method() != Method::Pawsterior {
        return Err(Error::Config("pawsterior_loss needs a pawsterior model".into()));
    }
    evaluate(model, batch, true)
}

/// Velocity regression: mean over the batch of `|v(theta_t) - (theta1 - theta0)|^2`.
pub fn fmpe_loss(model: &FlowModel, batch: &TrainingBatch) -> Result<LossEval> {
    if model.method() != Method::Fmpe {
        return Err(Error::Config("fmpe_loss needs an fmpe model".into()));
    }
    evaluate(model, batch, true)
}

/// Loss and gradient for whichever objective the model was built for.
pub fn loss_and_grad(model: &FlowModel, batch: &TrainingBatch) -> Result<LossEval> {
    evaluate(model, batch, true)
}

/// Loss only, without a backward pass.
pub fn loss_value(model: &FlowModel, batch: &TrainingBatch) -> Result<f64> {
    Ok(evaluate(model, batch, false)?.loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Support;
    use crate::nncore::{Activation, NetParams};
    use crate::rng::stream;

    fn batch(theta0: Vec<f64>, theta1: Vec<f64>, d: usize, x_dim: usize, t: f64) -> TrainingBatch {
        let b = theta0.len() / d;
        TrainingBatch {
            theta0: Array2::from_shape_vec((b, d), theta0).unwrap(),
            theta1: Array2::from_shape_vec((b, d), theta1).unwrap(),
            x: Array2::zeros((b, x_dim)),
            t: vec![t; b],
        }
    }

    #[test]
    fn zero_noise_mean_against_unit_target() {
        // Untrained model: mu0 = 0, continuous head matches theta1 = 0.
        let support = Support::unbounded(2).unwrap();
        let m = FlowModel::new(Method::Pawsterior, support, 1, 8, 1, Activation::Gelu, 0).unwrap();
        let b = batch(vec![1.0, 1.0], vec![0.0, 0.0], 2, 1, 0.3);
        let eval = pawsterior_loss(&m, &b).unwrap();
        assert!((eval.loss - 1.0).abs() < 1e-15);
    }

    #[test]
    fn uniform_logits_give_log_k() {
        let support = Support::simplex_product(1, 10).unwrap();
        let m = FlowModel::new(Method::Pawsterior, support, 1, 8, 1, Activation::Gelu, 0).unwrap();
        let mut target = vec![0.0; 10];
        target[3] = 1.0;
        // theta0 = 0 so the Gaussian term vanishes at mu0 = 0.
        let b = batch(vec![0.0; 10], target, 10, 1, 0.5);
        let eval = pawsterior_loss(&m, &b).unwrap();
        assert!((eval.loss - 10f64.ln()).abs() < 1e-12);
        assert!((eval.loss - std::f64::consts::LN_10).abs() < 1e-6);
    }

    #[test]
    fn confident_correct_logits_drive_loss_to_zero() {
        let support = Support::simplex_product(1, 3).unwrap();
        let raw = ndarray::arr1(&[60.0, 0.0, 0.0]);
        let target = ndarray::arr1(&[1.0, 0.0, 0.0]);
        let mut g = ndarray::Array1::zeros(3);
        let ce = data_endpoint_term(&support, raw.view(), target.view(), g.view_mut());
        assert!(ce < 1e-20);
    }

    #[test]
    fn fmpe_loss_closed_forms() {
        let support = Support::unbounded(3).unwrap();
        let m = FlowModel::new(Method::Fmpe, support, 1, 8, 1, Activation::Gelu, 0).unwrap();
        // v = 0 and theta1 - theta0 = e_1 for every sample.
        let b = batch(vec![0.0, 0.0, 0.0, 1.0, 2.0, 3.0], vec![1.0, 0.0, 0.0, 2.0, 2.0, 3.0], 3, 1, 0.7);
        assert!((fmpe_loss(&m, &b).unwrap().loss - 1.0).abs() < 1e-15);
        // theta0 = theta1 and v = 0 give zero loss.
        let b = batch(vec![0.5; 3], vec![0.5; 3], 3, 1, 0.2);
        assert_eq!(fmpe_loss(&m, &b).unwrap().loss, 0.0);
    }

    #[test]
    fn method_mismatch_rejected() {
        let support = Support::unbounded(1).unwrap();
        let m = FlowModel::new(Method::Fmpe, support, 1, 4, 1, Activation::Gelu, 0).unwrap();
        let b = batch(vec![0.0], vec![0.0], 1, 1, 0.5);
        assert!(pawsterior_loss(&m, &b).is_err());
    }

    #[test]
    fn non_finite_loss_reports_batch_index() {
        let support = Support::unbounded(1).unwrap();
        let m = FlowModel::new(Method::Fmpe, support, 1, 4, 1, Activation::Gelu, 0).unwrap();
        let b = batch(vec![0.0, 0.0, f64::INFINITY], vec![0.0, 0.0, 0.0], 1, 1, 0.0);
        let err = fmpe_loss(&m, &b).unwrap_err();
        assert!(matches!(err, Error::Numeric { index: 2, .. }), "{err}");
    }

    #[test]
    fn value_and_gradient_paths_agree() {
        let support = Support::boxed(vec![-1.0], vec![1.0]).unwrap();
        let mut m = FlowModel::new(Method::Pawsterior, support, 2, 8, 2, Activation::Gelu, 3).unwrap();
        m.params = NetParams::init(m.spec(), &mut stream(1, "x"), false);
        let mut b = batch(vec![0.3, -1.0], vec![0.5, -0.2], 1, 2, 0.4);
        b.x = Array2::from_shape_vec((2, 2), vec![0.1, 0.2, -0.3, 0.4]).unwrap();
        b.t = vec![0.1, 0.9];
        let a = pawsterior_loss(&m, &b).unwrap().loss;
        let v = loss_value(&m, &b).unwrap();
        assert_eq!(a, v);
    }
}
