use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::loss::{loss_and_grad, loss_value, TrainingBatch};
use super::model::{FlowModel, Standardizer};
use crate::error::{check_len, Error, Result};
use crate::nncore::{clip_grad_norm, OptimizerState, PlateauScheduler};
use crate::rng::{fill_standard_normal, stream, Rng};

/// Power-law prior on interpolation time with density proportional to
/// `t^alpha` on `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimePrior {
    alpha: f64,
}

impl Default for TimePrior {
    fn default() -> Self {
        TimePrior { alpha: 0.0 }
    }
}

impl TimePrior {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(alpha.is_finite() && alpha > -1.0) {
            return Err(Error::Config(format!("time prior exponent must exceed -1, got {alpha}")));
        }
        Ok(TimePrior { alpha })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Inverse-CDF transform `t = u^(1 / (1 + alpha))`.
    pub fn sample(&self, u: f64) -> f64 {
        u.powf(1.0 / (1.0 + self.alpha))
    }

    pub fn cdf(&self, t: f64) -> f64 {
        t.clamp(0.0, 1.0).powf(1.0 + self.alpha)
    }
}

/// Map a uniform draw `u` to a time under `prior`.
pub fn sample_time(prior: &TimePrior, u: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&u) {
        return Err(Error::Domain(format!("uniform draw {u} outside [0, 1]")));
    }
    Ok(prior.sample(u))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    /// Stop after this many optimizer steps, even mid-epoch.
    pub max_steps: Option<usize>,
    pub val_fraction: f64,
    pub time_prior: TimePrior,
    pub grad_clip: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 1024,
            lr: 1e-3,
            epochs: 100,
            max_steps: None,
            val_fraction: 0.05,
            time_prior: TimePrior::default(),
            grad_clip: 1.0,
            plateau_factor: 0.5,
            plateau_patience: 50,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::Config(format!("val_fraction must lie in (0, 1), got {}", self.val_fraction)));
        }
        if !(self.lr > 0.0 && self.grad_clip > 0.0) {
            return Err(Error::Config("lr and grad_clip must be positive".into()));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return Err(Error::Config("plateau_factor must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Simulated `(theta, x)` pairs, one per row.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub theta: Array2<f64>,
    pub x: Array2<f64>,
}

impl Dataset {
    pub fn new(theta: Array2<f64>, x: Array2<f64>) -> Result<Self> {
        check_len("dataset rows", theta.nrows(), x.nrows())?;
        Ok(Dataset { theta, x })
    }

    pub fn len(&self) -> usize {
        self.theta.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.nrows() == 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct TrainReport {
    pub curve: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_val_loss: Option<f64>,
    pub steps: usize,
}

impl TrainReport {
    /// `epoch,train_loss,val_loss,lr` rows with a header line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,lr\n");
        for r in &self.curve {
            out.push_str(&format!("{},{:.10e},{:.10e},{:.6e}\n", r.epoch, r.train_loss, r.val_loss, r.lr));
        }
        out
    }
}

/// Fit `model` on `data` with minibatch Adam, gradient clipping and plateau
/// scheduling on a held-out split. Each step draws fresh noise endpoints and
/// times. The parameters with the lowest validation loss are kept.
pub fn train(model: &mut FlowModel, data: &Dataset, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config("cannot train on an empty dataset".into()));
    }
    check_len("dataset theta columns", model.theta_dim(), data.theta.ncols())?;
    check_len("dataset x columns", model.x_dim(), data.x.ncols())?;

    let n = data.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(cfg.seed, "split"));
    let n_val = if n < 2 {
        0
    } else {
        ((cfg.val_fraction * n as f64).round() as usize).clamp(1, n - 1)
    };
    let (val_idx, train_idx) = order.split_at(n_val);
    let val_idx = if val_idx.is_empty() { train_idx } else { val_idx };

    let train_x = data.x.select(Axis(0), train_idx);
    model.set_standardizer(Standardizer::fit(train_x.view()))?;

    let mut report = TrainReport::default();
    if cfg.epochs == 0 || cfg.max_steps == Some(0) {
        return Ok(report);
    }

    let val_batches = fixed_batches(model, data, val_idx, cfg)?;
    let mut opt = OptimizerState::new(model.params.len(), cfg.lr)?;
    let mut sched = PlateauScheduler::new(cfg.plateau_factor, cfg.plateau_patience);
    let mut rng = stream(cfg.seed, "train");
    let mut shuffled = train_idx.to_vec();
    let mut best = model.params.clone();

    'epochs: for epoch in 0..cfg.epochs {
        shuffled.shuffle(&mut rng);
        let (mut sum, mut count) = (0.0, 0usize);
        let mut stop = false;
        for chunk in shuffled.chunks(cfg.batch_size) {
            let batch = draw_batch(model, data, chunk, cfg, &mut rng);
            let mut eval = loss_and_grad(model, &batch)?;
            clip_grad_norm(&mut eval.grads, cfg.grad_clip);
            opt.adam_step(model.params.as_mut_slice(), &eval.grads)?;
            sum += eval.loss * chunk.len() as f64;
            count += chunk.len();
            report.steps += 1;
            if cfg.max_steps.is_some_and(|m| report.steps >= m) {
                stop = true;
                break;
            }
        }
        let val_loss = mean_loss(model, &val_batches)?;
        let lr_used = opt.lr;
        opt.lr = sched.step(val_loss, opt.lr);
        report.curve.push(EpochRecord {
            epoch,
            train_loss: sum / count as f64,
            val_loss,
            lr: lr_used,
        });
        if report.best_val_loss.is_none_or(|b| val_loss < b) {
            report.best_val_loss = Some(val_loss);
            report.best_epoch = Some(epoch);
            best = model.params.clone();
        }
        if stop {
            break 'epochs;
        }
    }
    model.params = best;
    Ok(report)
}

fn draw_batch(model: &FlowModel, data: &Dataset, rows: &[usize], cfg: &TrainConfig, rng: &mut Rng) -> TrainingBatch {
    let d = model.theta_dim();
    let mut theta0 = Array2::zeros((rows.len(), d));
    fill_standard_normal(rng, theta0.as_slice_mut().expect("standard layout"));
    let t = (0..rows.len()).map(|_| cfg.time_prior.sample(rng.gen::<f64>())).collect();
    TrainingBatch {
        theta0,
        theta1: data.theta.select(Axis(0), rows),
        x: data.x.select(Axis(0), rows),
        t,
    }
}

/// Validation batches with noise and times frozen for the whole run so
/// epoch-to-epoch losses are comparable.
fn fixed_batches(model: &FlowModel, data: &Dataset, rows: &[usize], cfg: &TrainConfig) -> Result<Vec<TrainingBatch>> {
    let mut rng = stream(cfg.seed, "validation");
    Ok(rows
        .chunks(cfg.batch_size.max(256))
        .map(|chunk| draw_batch(model, data, chunk, cfg, &mut rng))
        .collect())
}

fn mean_loss(model: &FlowModel, batches: &[TrainingBatch]) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for b in batches {
        total += loss_value(model, b)? * b.len() as f64;
        n += b.len();
    }
    Ok(total / n as f64)
}
