//! Classifier two-sample test and run-level evaluation against exact
//! reference samplers.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flowmatch::{euler_sample, FlowModel, DEFAULT_STEPS};
use crate::geometry::Support;
use crate::nncore::{Dense, OptimizerState};
use crate::rng::{rng_from_seed, split_index, split_seed, stream};
use crate::tasks::Task;

/// Smallest sample count per side [`c2st`] accepts.
pub const MIN_C2ST_SAMPLES: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct C2stConfig {
    /// Width of both hidden ReLU layers.
    pub hidden: usize,
    pub folds: usize,
    pub max_epochs: usize,
    /// Epochs without a validation-accuracy gain before stopping.
    pub patience: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Fraction of each training fold held out for early stopping.
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for C2stConfig {
    fn default() -> Self {
        C2stConfig {
            hidden: 128,
            folds: 5,
            max_epochs: 100,
            patience: 5,
            batch_size: 256,
            lr: 1e-3,
            val_fraction: 0.1,
            seed: 0,
        }
    }
}

impl C2stConfig {
    pub fn validate(&self) -> Result<()> {
        if self.folds < 2 {
            return Err(Error::Config(format!("c2st needs at least 2 folds, got {}", self.folds)));
        }
        if self.hidden == 0 || self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("c2st hidden, batch_size and max_epochs must be positive".into()));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::Config(format!("c2st val_fraction must be in (0, 1), got {}", self.val_fraction)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("c2st lr must be positive, got {}", self.lr)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct C2stReport {
    /// Mean held-out accuracy across folds.
    pub score: f64,
    pub per_fold: Vec<f64>,
    pub n_ref: usize,
    pub n_gen: usize,
    /// Samples per side after subsampling to equal counts.
    pub n_used: usize,
    pub seed: u64,
}

/// Two hidden ReLU layers and a single logit.
struct Classifier {
    layers: [Dense; 3],
    params: Vec<f64>,
}

struct Activations {
    h1: Array2<f64>,
    h2: Array2<f64>,
    logit: Array2<f64>,
}

impl Classifier {
    fn new(dim: usize, hidden: usize, seed: u64) -> Self {
        let l0 = Dense {
            offset: 0,
            fan_in: dim,
            fan_out: hidden,
        };
        let l1 = Dense {
            offset: l0.len(),
            fan_in: hidden,
            fan_out: hidden,
        };
        let l2 = Dense {
            offset: l0.len() + l1.len(),
            fan_in: hidden,
            fan_out: 1,
        };
        let mut params = vec![0.0; l0.len() + l1.len() + l2.len()];
        let mut rng = stream(seed, "classifier-init");
        for l in [l0, l1, l2] {
            l.init(&mut params, &mut rng, false);
        }
        Classifier {
            layers: [l0, l1, l2],
            params,
        }
    }

    fn forward(&self, x: ArrayView2<'_, f64>) -> Activations {
        let relu = |v: &mut f64| *v = v.max(0.0);
        let mut h1 = self.layers[0].forward(&self.params, x);
        h1.map_inplace(relu);
        let mut h2 = self.layers[1].forward(&self.params, h1.view());
        h2.map_inplace(relu);
        let logit = self.layers[2].forward(&self.params, h2.view());
        Activations { h1, h2, logit }
    }

    /// Gradient of the mean binary cross-entropy with logits.
    fn grad(&self, x: ArrayView2<'_, f64>, y: &[f64], grads: &mut [f64]) {
        let a = self.forward(x);
        let n = y.len() as f64;
        let mut g = a.logit;
        for (gi, yi) in g.iter_mut().zip(y) {
            *gi = (1.0 / (1.0 + (-*gi).exp()) - yi) / n;
        }
        grads.fill(0.0);
        let mut g2 = self.layers[2].backward(&self.params, a.h2.view(), g.view(), grads, true).expect("requested");
        g2.zip_mut_with(&a.h2, |g, h| {
            if *h <= 0.0 {
                *g = 0.0
            }
        });
        let mut g1 = self.layers[1].backward(&self.params, a.h1.view(), g2.view(), grads, true).expect("requested");
        g1.zip_mut_with(&a.h1, |g, h| {
            if *h <= 0.0 {
                *g = 0.0
            }
        });
        self.layers[0].backward(&self.params, x, g1.view(), grads, false);
    }

    fn accuracy(&self, x: ArrayView2<'_, f64>, y: &[f64]) -> f64 {
        if y.is_empty() {
            return 0.0;
        }
        let logit = self.forward(x).logit;
        let hits = logit
            .iter()
            .zip(y)
            .filter(|(z, &yi)| (**z > 0.0) == (yi > 0.5))
            .count();
        hits as f64 / y.len() as f64
    }
}

fn gather(x: &Array2<f64>, y: &[f64], idx: &[usize]) -> (Array2<f64>, Vec<f64>) {
    (x.select(Axis(0), idx), idx.iter().map(|&i| y[i]).collect())
}

/// Train on `train_idx` with early stopping on an internal split, then
/// return accuracy on `test_idx`.
fn fit_fold(x: &Array2<f64>, y: &[f64], train_idx: &[usize], test_idx: &[usize], cfg: &C2stConfig, seed: u64) -> Result<f64> {
    let mut rng = stream(seed, "fold-split");
    // Stratified validation carve-out.
    let (mut fit_idx, mut val_idx) = (Vec::new(), Vec::new());
    for label in [0.0, 1.0] {
        let mut cls: Vec<usize> = train_idx.iter().copied().filter(|&i| y[i] == label).collect();
        cls.shuffle(&mut rng);
        let n_val = ((cls.len() as f64 * cfg.val_fraction).round() as usize).clamp(1, cls.len().saturating_sub(1));
        val_idx.extend_from_slice(&cls[..n_val]);
        fit_idx.extend_from_slice(&cls[n_val..]);
    }
    let (xv, yv) = gather(x, y, &val_idx);
    let (xt, yt) = gather(x, y, test_idx);

    let mut clf = Classifier::new(x.ncols(), cfg.hidden, seed);
    let mut opt = OptimizerState::new(clf.params.len(), cfg.lr)?;
    let mut grads = vec![0.0; clf.params.len()];
    let mut best = (clf.accuracy(xv.view(), &yv), clf.params.clone());
    let mut stale = 0;
    let mut order = fit_idx.clone();
    for _ in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let (xb, yb) = gather(x, y, batch);
            clf.grad(xb.view(), &yb, &mut grads);
            opt.adam_step(&mut clf.params, &grads)?;
        }
        let acc = clf.accuracy(xv.view(), &yv);
        if acc > best.0 {
            best = (acc, clf.params.clone());
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    clf.params = best.1;
    Ok(clf.accuracy(xt.view(), &yt))
}

/// Classifier two-sample test: stratified k-fold held-out accuracy of a
/// classifier separating `reference` (label 0) from `generated` (label 1).
/// The larger set is subsampled by a seeded shuffle so both sides match.
pub fn c2st(reference: ArrayView2<'_, f64>, generated: ArrayView2<'_, f64>, cfg: &C2stConfig) -> Result<C2stReport> {
    cfg.validate()?;
    if reference.ncols() != generated.ncols() {
        return Err(Error::shape("c2st sample dimension", reference.ncols(), generated.ncols()));
    }
    let (n_ref, n_gen) = (reference.nrows(), generated.nrows());
    if n_ref.min(n_gen) < MIN_C2ST_SAMPLES {
        return Err(Error::Config(format!(
            "c2st needs at least {MIN_C2ST_SAMPLES} samples per side, got {n_ref} reference and {n_gen} generated"
        )));
    }
    if let Some(i) = reference.iter().chain(generated.iter()).position(|v| !v.is_finite()) {
        return Err(Error::numeric("c2st inputs (flat index)", i));
    }
    let n = n_ref.min(n_gen);
    let mut rng = stream(cfg.seed, "subsample");
    let pick = |rows: usize, rng: &mut _| {
        let mut idx: Vec<usize> = (0..rows).collect();
        if rows > n {
            idx.shuffle(rng);
            idx.truncate(n);
            idx.sort_unstable();
        }
        idx
    };
    let ref_idx = pick(n_ref, &mut rng);
    let gen_idx = pick(n_gen, &mut rng);
    let mut x = ndarray::concatenate![Axis(0), reference.select(Axis(0), &ref_idx), generated.select(Axis(0), &gen_idx)];
    let y: Vec<f64> = (0..2 * n).map(|i| if i < n { 0.0 } else { 1.0 }).collect();

    // Pooled z-scoring; constant columns are left centered only.
    let mean = x.mean_axis(Axis(0)).expect("non-empty");
    let std: Array1<f64> = x.std_axis(Axis(0), 0.0).mapv(|s| if s > 1e-12 { s } else { 1.0 });
    x -= &mean;
    x /= &std;

    // Stratified folds: each class shuffled, then dealt round-robin.
    let mut fold_of = vec![0usize; 2 * n];
    for (c, range) in [(0, 0..n), (1, n..2 * n)] {
        let mut idx: Vec<usize> = range.collect();
        idx.shuffle(&mut rng_from_seed(split_index(cfg.seed, "stratify", c)));
        for (pos, i) in idx.into_iter().enumerate() {
            fold_of[i] = pos % cfg.folds;
        }
    }
    let per_fold = (0..cfg.folds)
        .map(|f| {
            let (test, train): (Vec<usize>, Vec<usize>) = (0..2 * n).partition(|&i| fold_of[i] == f);
            fit_fold(&x, &y, &train, &test, cfg, split_index(cfg.seed, "fold", f as u64))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(C2stReport {
        score: per_fold.iter().sum::<f64>() / per_fold.len() as f64,
        per_fold,
        n_ref,
        n_gen,
        n_used: n,
        seed: cfg.seed,
    })
}

/// Anything that draws posterior samples for an observation.
pub trait PosteriorSampler {
    fn theta_dim(&self) -> usize;

    fn sample(&self, x: &[f64], n: usize, seed: u64) -> Result<Array2<f64>>;
}

/// A trained model integrated with a fixed number of Euler steps.
pub struct EulerSampler<'a> {
    pub model: &'a FlowModel,
    pub n_steps: usize,
}

impl<'a> EulerSampler<'a> {
    pub fn new(model: &'a FlowModel) -> Self {
        EulerSampler {
            model,
            n_steps: DEFAULT_STEPS,
        }
    }
}

impl PosteriorSampler for EulerSampler<'_> {
    fn theta_dim(&self) -> usize {
        self.model.theta_dim()
    }

    fn sample(&self, x: &[f64], n: usize, seed: u64) -> Result<Array2<f64>> {
        euler_sample(self.model, x, n, self.n_steps, seed)
    }
}

impl PosteriorSampler for Task {
    fn theta_dim(&self) -> usize {
        Task::theta_dim(self)
    }

    fn sample(&self, x: &[f64], n: usize, seed: u64) -> Result<Array2<f64>> {
        self.reference(x, n, seed)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunEvaluation {
    pub per_observation: Vec<C2stReport>,
    pub mean: f64,
    /// Sample standard deviation across observations (0 for one).
    pub sd: f64,
}

impl RunEvaluation {
    pub fn from_reports(per_observation: Vec<C2stReport>) -> Self {
        let m = per_observation.len() as f64;
        let mean = per_observation.iter().map(|r| r.score).sum::<f64>() / m;
        let sd = if per_observation.len() > 1 {
            (per_observation.iter().map(|r| (r.score - mean).powi(2)).sum::<f64>() / (m - 1.0)).sqrt()
        } else {
            0.0
        };
        RunEvaluation { per_observation, mean, sd }
    }
}

/// Reject generated draws that are not valid one-hot paths on a categorical
/// support.
pub fn check_one_hot(support: &Support, samples: ArrayView2<'_, f64>) -> Result<()> {
    if !support.is_categorical() {
        return Ok(());
    }
    match samples.outer_iter().position(|r| !support.is_one_hot(&r.to_vec())) {
        Some(i) => Err(Error::Domain(format!("generated sample {i} is not one-hot in every block"))),
        None => Ok(()),
    }
}

/// C2ST of `generated` against `oracle` at each observation row.
///
/// Observation `i` uses reference seed `(seed, "reference", i)`, generation
/// seed `(seed, "generate", i)` and classifier seed `(seed, "c2st", i)`.
pub fn evaluate_run(
    generated: &dyn PosteriorSampler,
    oracle: Option<&dyn PosteriorSampler>,
    support: &Support,
    observations: ArrayView2<'_, f64>,
    n_samples: usize,
    cfg: &C2stConfig,
) -> Result<RunEvaluation> {
    let oracle = oracle.ok_or_else(|| Error::Config("no reference oracle for this task".into()))?;
    if observations.nrows() == 0 {
        return Err(Error::Config("evaluation needs at least one observation".into()));
    }
    let seed = cfg.seed;
    let reports = observations
        .outer_iter()
        .enumerate()
        .map(|(i, x)| {
            let x = x.to_vec();
            let i = i as u64;
            let reference = oracle.sample(&x, n_samples, split_index(seed, "reference", i))?;
            let gen = generated.sample(&x, n_samples, split_index(seed, "generate", i))?;
            check_one_hot(support, gen.view())?;
            let c = C2stConfig {
                seed: split_index(seed, "c2st", i),
                ..cfg.clone()
            };
            c2st(reference.view(), gen.view(), &c)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RunEvaluation::from_reports(reports))
}

/// Split one sample set into halves and compare them, a same-distribution
/// control for a reference file.
pub fn self_c2st(samples: ArrayView2<'_, f64>, cfg: &C2stConfig) -> Result<C2stReport> {
    let mut idx: Vec<usize> = (0..samples.nrows()).collect();
    idx.shuffle(&mut rng_from_seed(split_seed(cfg.seed, "halves")));
    let half = samples.nrows() / 2;
    let a = samples.select(Axis(0), &idx[..half]);
    let b = samples.select(Axis(0), &idx[half..2 * half]);
    c2st(a.view(), b.view(), cfg)
}
