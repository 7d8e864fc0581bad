//! End-to-end acceptance checks. Each test prints one `criterion N: PASS|FAIL`
//! line to the real stdout so the summary survives output capture.
//!
//! The training recipes here are fixed up front; they are not tuned against
//! the outcome.

use std::io::Write as _;
use std::path::PathBuf;
use std::sync::{Mutex, OnceLock};

use ndarray::Array2;
use rand::Rng as _;

use sbi_vfm::eval::{c2st, C2stConfig};
use sbi_vfm::flowmatch::{
    euler_sample_inspect, loss_and_grad, loss_value, sample_time, FlowModel, Method, TimePrior, TrainingBatch,
};
use sbi_vfm::geometry::Support;
use sbi_vfm::io::SimDataset;
use sbi_vfm::nncore::{Activation, NetParams};
use sbi_vfm::rng::{rng_from_seed, split_index, standard_normal};
use sbi_vfm::tasks::{
    enumerate_posterior, ffbs_forward, loglik_terms, sgm_sample_prior, sgm_simulate, FfbsSampler, SgmConfig,
    SgmParams,
};
use sbi_vfm_cli::{cmd_run, EvalReport, ExperimentConfig, RunDir, RunManifest, TaskKind};

/// The long criteria compete for one core; run them one at a time.
static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

// println! output is captured by the harness; a direct stdout write is not.
#[allow(clippy::explicit_write)]
fn verdict(n: u32, pass: bool, detail: String) {
    let line = format!("criterion {n}: {} | {detail}", if pass { "PASS" } else { "FAIL" });
    writeln!(std::io::stdout(), "{line}").unwrap();
    assert!(pass, "{line}");
}

fn scratch(name: &str) -> PathBuf {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance").join(name);
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

#[test]
fn criterion_1_ffbs_matches_enumeration() {
    let _g = serial();
    let mut max_err = 0.0f64;
    let mut max_tv = 0.0f64;
    for i in 0..20u64 {
        let k = 2 + (i % 2) as usize;
        let t = 2 + ((i / 2) % 3) as usize;
        let dx = 1 + ((i / 6) % 2) as usize;
        let params = SgmParams::build(SgmConfig { k, t, dx, seed: i }).unwrap();
        let mut rng = rng_from_seed(1000 + i);
        let path = sgm_sample_prior(&params, &mut rng);
        let traj = sgm_simulate(&params, &path, &mut rng).unwrap();

        let log_alpha = ffbs_forward(&params, &loglik_terms(&params, &traj).unwrap()).unwrap();
        for (s, row) in log_alpha.iter().enumerate() {
            let prefix = enumerate_posterior(&params, &traj.prefix(s + 1)).unwrap();
            for (a, b) in row.iter().zip(&prefix.marginals()[s]) {
                max_err = max_err.max((a.exp() - b).abs());
            }
        }

        let post = enumerate_posterior(&params, &traj).unwrap();
        let sampler = FfbsSampler::new(&params, &traj).unwrap();
        let n = 50_000;
        let mut freq = vec![0.0; post.probs.len()];
        for _ in 0..n {
            freq[sampler.sample(&mut rng).code(k)] += 1.0 / n as f64;
        }
        let tv = 0.5 * freq.iter().zip(&post.probs).map(|(a, b)| (a - b).abs()).sum::<f64>();
        max_tv = max_tv.max(tv);
    }
    verdict(
        1,
        max_err <= 1e-10 && max_tv <= 0.03,
        format!("20 instances, max forward error {max_err:.2e} (<= 1e-10), max TV {max_tv:.4} (<= 0.03)"),
    );
}

fn random_batch(support: &Support, x_dim: usize, n: usize, rng: &mut sbi_vfm::rng::Rng) -> TrainingBatch {
    let d = support.dim();
    let mut theta1 = Array2::zeros((n, d));
    for mut row in theta1.outer_iter_mut() {
        match support {
            Support::SimplexProduct { blocks, size } => {
                for b in 0..*blocks {
                    row[b * size + rng.gen_range(0..*size)] = 1.0;
                }
            }
            Support::Box { low, high } => {
                for j in 0..d {
                    row[j] = rng.gen_range(low[j]..high[j]);
                }
            }
            Support::Unbounded { .. } => row.iter_mut().for_each(|v| *v = 2.0 * standard_normal(rng)),
        }
    }
    TrainingBatch {
        theta0: Array2::from_shape_fn((n, d), |_| standard_normal(rng)),
        theta1,
        x: Array2::from_shape_fn((n, x_dim), |_| standard_normal(rng)),
        t: (0..n).map(|_| rng.gen::<f64>()).collect(),
    }
}

#[test]
fn criterion_2_gradients_match_finite_differences() {
    let _g = serial();
    let h = 1e-5;
    let floor = 1e-6;
    let mut worst = 0.0f64;
    let mut configs = 0;
    let mut rng = rng_from_seed(2);
    for c in 0..24u64 {
        let support = match c % 3 {
            0 => {
                let d = 1 + (c as usize / 3) % 3;
                let low: Vec<f64> = (0..d).map(|_| rng.gen_range(-3.0..0.0)).collect();
                let high: Vec<f64> = low.iter().map(|l| l + rng.gen_range(0.5..4.0)).collect();
                Support::boxed(low, high).unwrap()
            }
            1 => Support::simplex_product(1 + (c as usize / 3) % 3, 2 + (c as usize / 3) % 2).unwrap(),
            _ => Support::unbounded(1 + (c as usize / 3) % 2).unwrap(),
        };
        let method = if c % 2 == 0 { Method::Pawsterior } else { Method::Fmpe };
        let x_dim = 1 + (c as usize) % 3;
        let mut model = FlowModel::new(method, support.clone(), x_dim, 8, 1 + (c as usize) % 2, Activation::Gelu, c).unwrap();
        model.params = NetParams::init(model.spec(), &mut rng_from_seed(100 + c), false);
        let batch = random_batch(&support, x_dim, 6, &mut rng);

        let analytic = loss_and_grad(&model, &batch).unwrap().grads;
        for p in 0..model.params.len() {
            let orig = model.params.as_slice()[p];
            model.params.as_mut_slice()[p] = orig + h;
            let up = loss_value(&model, &batch).unwrap();
            model.params.as_mut_slice()[p] = orig - h;
            let down = loss_value(&model, &batch).unwrap();
            model.params.as_mut_slice()[p] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[p];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            worst = worst.max(rel);
        }
        configs += 1;
    }
    verdict(
        2,
        worst <= 1e-4 && configs >= 20,
        format!("{configs} configs (box/simplex/unbounded, both losses), max relative error {worst:.2e} (<= 1e-4)"),
    );
}

struct BoxRuns {
    paw_dir: RunDir,
    paw: EvalReport,
    fmpe: EvalReport,
    seed: u64,
}

/// Box task, D = 2, 10^4 simulations, small residual net.
fn box_config(method: Method, out: PathBuf) -> ExperimentConfig {
    ExperimentConfig {
        box_dim: 2,
        hidden: 64,
        blocks: 2,
        n_sims: 10_000,
        batch_size: 256,
        epochs: 100,
        lr: 1e-3,
        time_prior_alpha: 0.0,
        n_obs: 10,
        n_posterior: 10_000,
        steps: 100,
        seed: 0,
        out: Some(out),
        ..ExperimentConfig::new(TaskKind::Box, method)
    }
}

fn box_runs() -> &'static BoxRuns {
    static RUNS: OnceLock<BoxRuns> = OnceLock::new();
    RUNS.get_or_init(|| {
        let root = scratch("box");
        let run = |method: Method, name: &str| {
            let dir = RunDir::new(root.join(name));
            let report = cmd_run(&box_config(method, dir.root.clone()), &dir).unwrap();
            (dir, report)
        };
        let (paw_dir, paw) = run(Method::Pawsterior, "pawsterior");
        let (_, fmpe) = run(Method::Fmpe, "fmpe");
        BoxRuns {
            paw_dir,
            paw,
            fmpe,
            seed: 0,
        }
    })
}

#[test]
fn criterion_3_box_confinement() {
    let _g = serial();
    let runs = box_runs();
    let model = FlowModel::load(&runs.paw_dir.checkpoint()).unwrap();
    let support = model.support().clone();
    let obs = SimDataset::read(&runs.paw_dir.holdout()).unwrap().x;
    let per_obs = 1000;
    let mut mu1_checked = 0usize;
    let mut mu1_outside = 0usize;
    let mut escaped = 0usize;
    let mut worst_excess = 0.0f64;
    for (i, x) in obs.outer_iter().enumerate() {
        let seed = split_index(runs.seed, "confinement", i as u64);
        let samples = euler_sample_inspect(&model, &x.to_vec(), per_obs, 100, seed, |step| {
            if let Some(mu1) = step.mu1 {
                for row in mu1.outer_iter() {
                    mu1_checked += 1;
                    if !support.membership(&row.to_vec()) {
                        mu1_outside += 1;
                    }
                }
            }
        })
        .unwrap();
        for row in samples.outer_iter() {
            if !support.membership_tol(&row.to_vec(), 1e-6) {
                escaped += 1;
            }
            if let Support::Box { low, high } = &support {
                for (j, v) in row.iter().enumerate() {
                    worst_excess = worst_excess.max(low[j] - v).max(v - high[j]);
                }
            }
        }
    }
    let total = obs.nrows() * per_obs;
    verdict(
        3,
        mu1_outside == 0 && escaped == 0,
        format!(
            "mu1 outside box {mu1_outside}/{mu1_checked}; final samples outside box (tol 1e-6) {escaped}/{total}, \
             worst excess {worst_excess:.3}"
        ),
    );
}

#[test]
fn criterion_4_c2st_calibration() {
    let _g = serial();
    let n = 10_000;
    let normal = |seed: u64, shift: f64| {
        let mut rng = rng_from_seed(seed);
        Array2::from_shape_fn((n, 2), |(_, j)| standard_normal(&mut rng) + if j == 0 { shift } else { 0.0 })
    };
    let mut same = Vec::new();
    for s in 0..10u64 {
        let cfg = C2stConfig {
            seed: s,
            ..C2stConfig::default()
        };
        same.push(c2st(normal(2 * s, 0.0).view(), normal(2 * s + 1, 0.0).view(), &cfg).unwrap().score);
    }
    let cfg = C2stConfig::default();
    let shifted: Vec<f64> = [0.0, 0.5, 1.0, 2.0, 4.0]
        .iter()
        .map(|&d| c2st(normal(100, 0.0).view(), normal(101, d).view(), &cfg).unwrap().score)
        .collect();
    let calibrated = same.iter().all(|s| (0.45..=0.55).contains(s));
    let monotone = shifted.windows(2).all(|w| w[1] >= w[0] - 0.01);
    let fmt = |v: &[f64]| v.iter().map(|s| format!("{s:.3}")).collect::<Vec<_>>().join(" ");
    verdict(
        4,
        calibrated && monotone,
        format!("same-distribution scores [{}] in [0.45, 0.55]; shifts 0/.5/1/2/4 -> [{}]", fmt(&same), fmt(&shifted)),
    );
}

#[test]
fn criterion_5_box_fidelity() {
    let _g = serial();
    let runs = box_runs();
    let (p, f) = (runs.paw.score, runs.fmpe.score);
    verdict(
        5,
        p <= 0.65 && p <= f + 0.02,
        format!(
            "10 observations x 10^4 samples: Pawsterior {p:.4} +- {:.4}, FMPE {f:.4} +- {:.4} (need <= 0.65 and <= FMPE + 0.02)",
            runs.paw.sd, runs.fmpe.sd
        ),
    );
}

#[test]
fn criterion_6_categorical_separation() {
    let _g = serial();
    let root = scratch("sgm");
    let mut paw = Vec::new();
    let mut fmpe = Vec::new();
    for seed in 0..3u64 {
        for (method, scores) in [(Method::Pawsterior, &mut paw), (Method::Fmpe, &mut fmpe)] {
            let dir = RunDir::new(root.join(format!("{}-{seed}", method.as_str())));
            let cfg = ExperimentConfig {
                sgm_k: 3,
                sgm_t: 4,
                sgm_dx: 2,
                hidden: 64,
                blocks: 4,
                n_sims: 10_000,
                batch_size: 256,
                epochs: 100,
                lr: 1e-3,
                n_obs: 5,
                n_posterior: 5000,
                steps: 100,
                seed,
                out: Some(dir.root.clone()),
                ..ExperimentConfig::new(TaskKind::Sgm, method)
            };
            scores.push(cmd_run(&cfg, &dir).unwrap().score);
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (p, f) = (mean(&paw), mean(&fmpe));
    verdict(
        6,
        p <= 0.85 && p <= f - 0.05,
        format!("K=3 T=4 dx=2, 3 seeds x 5 observations: Pawsterior {p:.4} {paw:.3?}, FMPE {f:.4} {fmpe:.3?} (need <= 0.85 and gap >= 0.05)"),
    );
}

#[test]
fn criterion_7_time_prior_law() {
    let _g = serial();
    let n = 10_000;
    let mut worst = 0.0f64;
    let mut parts = Vec::new();
    for alpha in [-0.5, 0.0, 1.0, 4.0] {
        let prior = TimePrior::new(alpha).unwrap();
        let mut rng = rng_from_seed(split_index(7, "alpha", ((alpha + 1.0) * 10.0) as u64));
        let mut t: Vec<f64> = (0..n).map(|_| sample_time(&prior, rng.gen()).unwrap()).collect();
        t.sort_by(f64::total_cmp);
        let ks = t
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let f = v.powf(alpha + 1.0);
                (f - i as f64 / n as f64).abs().max(((i + 1) as f64 / n as f64 - f).abs())
            })
            .fold(0.0, f64::max);
        worst = worst.max(ks);
        parts.push(format!("alpha {alpha}: {ks:.4}"));
    }
    verdict(7, worst <= 0.02, format!("KS at 10^4 draws: {} (<= 0.02)", parts.join(", ")));
}

#[test]
fn criterion_8_pipeline_determinism() {
    let _g = serial();
    let root = scratch("determinism");
    let run = |name: &str| {
        let dir = RunDir::new(root.join(name));
        let cfg = ExperimentConfig {
            sgm_k: 2,
            sgm_t: 3,
            sgm_dx: 1,
            hidden: 16,
            blocks: 1,
            n_sims: 500,
            batch_size: 64,
            epochs: 2,
            n_obs: 2,
            n_posterior: 300,
            c2st_hidden: 16,
            c2st_max_epochs: 5,
            seed: 42,
            out: Some(dir.root.clone()),
            ..ExperimentConfig::new(TaskKind::Sgm, Method::Pawsterior)
        };
        let report = cmd_run(&cfg, &dir).unwrap();
        let manifest: RunManifest =
            serde_json::from_str(&std::fs::read_to_string(dir.root.join("manifest.json")).unwrap()).unwrap();
        (report, manifest.artifacts)
    };
    let (ra, ha) = run("a");
    let (rb, hb) = run("b");
    let same_scores = ra.score.to_bits() == rb.score.to_bits()
        && ra.per_observation.iter().zip(&rb.per_observation).all(|(a, b)| a.score.to_bits() == b.score.to_bits());
    verdict(
        8,
        ha == hb && same_scores && !ha.is_empty(),
        format!("{} artifact hashes identical: {}; C2ST {:.4} vs {:.4}", ha.len(), ha == hb, ra.score, rb.score),
    );
}
