use ndarray::Array2;
use rand::Rng as _;

use sbi_vfm::flowmatch::{
    euler_sample, fmpe_loss, loss_value, pawsterior_loss, train, Dataset, FlowModel, Method, TrainConfig,
    TrainingBatch,
};
use sbi_vfm::geometry::{two_sided_velocity, ScheduleKind, Support};
use sbi_vfm::nncore::{Activation, NetParams};
use sbi_vfm::rng::{fill_standard_normal, rng_from_seed, split_index, standard_normal};
use sbi_vfm::Error;

fn random_model(method: Method, support: Support, x_dim: usize, seed: u64) -> FlowModel {
    let mut m = FlowModel::new(method, support, x_dim, 12, 2, Activation::Gelu, seed).unwrap();
    m.params = NetParams::init(m.spec(), &mut rng_from_seed(seed + 1000), false);
    m
}

/// A model whose network ignores its input and emits `bias`.
fn constant_model(method: Method, support: Support, bias: &[f64]) -> FlowModel {
    let mut m = FlowModel::new(method, support, 1, 4, 1, Activation::Gelu, 0).unwrap();
    let p = m.params.as_mut_slice();
    p.fill(0.0);
    let n = p.len();
    p[n - bias.len()..].copy_from_slice(bias);
    m
}

fn random_batch(model: &FlowModel, n: usize, seed: u64) -> TrainingBatch {
    let mut rng = rng_from_seed(seed);
    let d = model.theta_dim();
    let support = model.support().clone();
    let theta1 = Array2::from_shape_fn((n, d), |_| 0.0);
    let mut theta1 = theta1;
    for mut row in theta1.outer_iter_mut() {
        match &support {
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
            Support::Unbounded { .. } => row.iter_mut().for_each(|v| *v = standard_normal(&mut rng)),
        }
    }
    TrainingBatch {
        theta0: Array2::from_shape_fn((n, d), |_| standard_normal(&mut rng)),
        theta1,
        x: Array2::from_shape_fn((n, model.x_dim()), |_| standard_normal(&mut rng)),
        t: (0..n).map(|_| rng.gen::<f64>()).collect(),
    }
}

#[test]
fn simplex_means_stay_on_simplex() {
    let support = Support::simplex_product(3, 4).unwrap();
    let m = random_model(Method::Pawsterior, support.clone(), 3, 1);
    let mut rng = rng_from_seed(2);
    for _ in 0..1000 {
        let theta: Vec<f64> = (0..12).map(|_| 3.0 * standard_normal(&mut rng)).collect();
        let x: Vec<f64> = (0..3).map(|_| 3.0 * standard_normal(&mut rng)).collect();
        let (_, mu1) = m.endpoint_means(&theta, rng.gen(), &x).unwrap();
        assert!(support.membership(&mu1));
    }
}

#[test]
fn endpoint_means_are_deterministic() {
    let m = random_model(Method::Pawsterior, Support::boxed(vec![-1.0; 2], vec![1.0; 2]).unwrap(), 2, 3);
    let a = m.endpoint_means(&[0.3, -0.1], 0.4, &[1.0, 2.0]).unwrap();
    let b = m.endpoint_means(&[0.3, -0.1], 0.4, &[1.0, 2.0]).unwrap();
    assert_eq!(a, b);
}

#[test]
fn constant_endpoints_give_constant_velocity() {
    let m = constant_model(Method::Pawsterior, Support::unbounded(2).unwrap(), &[1.0, 0.0, 0.0, 1.0]);
    for k in 0..=10 {
        let t = k as f64 / 10.0;
        let v = m.velocity(&[0.7, -3.0], t, &[0.0]).unwrap();
        assert_eq!(v, vec![-1.0, 1.0]);
    }
    let same = constant_model(Method::Pawsterior, Support::unbounded(2).unwrap(), &[0.5, 0.2, 0.5, 0.2]);
    assert_eq!(same.velocity(&[0.0, 0.0], 0.3, &[1.0]).unwrap(), vec![0.0, 0.0]);
}

#[test]
fn velocity_depends_only_on_means() {
    // A box head with raw bias r and an unbounded head emitting box(r)
    // directly have equal means, so their velocities agree.
    let support = Support::boxed(vec![-1.0, 0.0], vec![1.0, 5.0]).unwrap();
    let raw = [0.3, -0.4, 0.8, -1.2];
    let boxed = constant_model(Method::Pawsterior, support.clone(), &raw);
    let mu1 = support.apply_head1(&raw[2..]).unwrap();
    let free = constant_model(Method::Pawsterior, Support::unbounded(2).unwrap(), &[raw[0], raw[1], mu1[0], mu1[1]]);
    for t in [0.0, 0.25, 0.9, 1.0] {
        let (a, b) = (boxed.velocity(&[0.1, 0.2], t, &[0.0]).unwrap(), free.velocity(&[0.1, 0.2], t, &[0.0]).unwrap());
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-15);
        }
        let (m0, m1) = boxed.endpoint_means(&[0.1, 0.2], t, &[0.0]).unwrap();
        assert_eq!(two_sided_velocity(&ScheduleKind::StraightLine, &m0, &m1, t).unwrap(), a);
    }
}

#[test]
fn pawsterior_loss_decomposes_per_coordinate() {
    for (support, x_dim) in [
        (Support::boxed(vec![-1.0; 3], vec![1.0; 3]).unwrap(), 2),
        (Support::simplex_product(2, 3).unwrap(), 4),
        (Support::unbounded(2).unwrap(), 1),
    ] {
        let m = random_model(Method::Pawsterior, support.clone(), x_dim, 7);
        let batch = random_batch(&m, 16, 8);
        let joint = pawsterior_loss(&m, &batch).unwrap().loss;
        let theta_t = batch.theta_t();
        let mut total = 0.0;
        for i in 0..batch.len() {
            let (mu0, mu1) = m
                .endpoint_means(&theta_t.row(i).to_vec(), batch.t[i], &batch.x.row(i).to_vec())
                .unwrap();
            for (j, m0) in mu0.iter().enumerate() {
                total += 0.5 * (m0 - batch.theta0[[i, j]]).powi(2);
            }
            for (j, m1) in mu1.iter().enumerate() {
                let target = batch.theta1[[i, j]];
                total += if support.is_categorical() {
                    -target * m1.ln()
                } else {
                    0.5 * (m1 - target).powi(2)
                };
            }
        }
        let separate = total / batch.len() as f64;
        assert!((joint - separate).abs() < 1e-10, "{joint} vs {separate}");
    }
}

#[test]
fn fmpe_loss_examples() {
    let c = [0.5, -1.5];
    let m = constant_model(Method::Fmpe, Support::unbounded(2).unwrap(), &c);
    let mut batch = random_batch(&m, 8, 1);
    for i in 0..8 {
        for j in 0..2 {
            batch.theta1[[i, j]] = batch.theta0[[i, j]] + c[j];
        }
    }
    assert!(fmpe_loss(&m, &batch).unwrap().loss < 1e-28);

    let zero = constant_model(Method::Fmpe, Support::unbounded(2).unwrap(), &[0.0, 0.0]);
    for i in 0..8 {
        batch.theta1[[i, 0]] = batch.theta0[[i, 0]] + 1.0;
        batch.theta1[[i, 1]] = batch.theta0[[i, 1]];
    }
    assert!((fmpe_loss(&zero, &batch).unwrap().loss - 1.0).abs() < 1e-12);
}

#[test]
fn point_mass_task_is_learned() {
    let c = [0.4, -0.7];
    let support = Support::boxed(vec![-1.0; 2], vec![1.0; 2]).unwrap();
    let mut m = FlowModel::new(Method::Pawsterior, support, 1, 32, 1, Activation::Gelu, 0).unwrap();
    let n = 512;
    let theta = Array2::from_shape_fn((n, 2), |(_, j)| c[j]);
    let mut rng = rng_from_seed(5);
    let x = Array2::from_shape_fn((n, 1), |_| standard_normal(&mut rng));
    let cfg = TrainConfig {
        batch_size: 64,
        epochs: 1000,
        max_steps: Some(500),
        ..TrainConfig::default()
    };
    let report = train(&mut m, &Dataset::new(theta, x).unwrap(), &cfg).unwrap();
    assert_eq!(report.steps, 500);
    for (th, t) in [([0.0, 0.0], 0.1), ([0.3, -0.5], 0.6), ([0.4, -0.7], 0.95)] {
        let (_, mu1) = m.endpoint_means(&th, t, &[0.2]).unwrap();
        for j in 0..2 {
            assert!((mu1[j] - c[j]).abs() <= 0.05, "t={t}: {mu1:?}");
        }
    }
}

#[test]
fn training_is_reproducible() {
    let support = Support::boxed(vec![-1.0; 2], vec![1.0; 2]).unwrap();
    let mut rng = rng_from_seed(1);
    let theta = Array2::from_shape_fn((200, 2), |_| rng.gen_range(-1.0..1.0));
    let x = theta.mapv(|v| v + 0.1 * standard_normal(&mut rng));
    let data = Dataset::new(theta, x).unwrap();
    let cfg = TrainConfig {
        batch_size: 32,
        epochs: 3,
        ..TrainConfig::default()
    };
    let run = || {
        let mut m = FlowModel::new(Method::Pawsterior, support.clone(), 2, 16, 1, Activation::Gelu, 3).unwrap();
        let r = train(&mut m, &data, &cfg).unwrap();
        (r.curve.last().unwrap().train_loss, m.params)
    };
    assert_eq!(run(), run());
}

fn chain_start(seed: u64, i: usize, d: usize) -> Vec<f64> {
    let mut v = vec![0.0; d];
    fill_standard_normal(&mut rng_from_seed(split_index(seed, "chain", i as u64)), &mut v);
    v
}

#[test]
fn constant_field_is_integrated_exactly() {
    let c = [0.25, -2.0];
    let m = constant_model(Method::Fmpe, Support::unbounded(2).unwrap(), &c);
    for steps in [1, 7, 100] {
        let s = euler_sample(&m, &[0.0], 5, steps, 9).unwrap();
        for i in 0..5 {
            let start = chain_start(9, i, 2);
            for j in 0..2 {
                assert!((s[[i, j]] - (start[j] + c[j])).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn zero_field_returns_base_draws() {
    let m = constant_model(Method::Fmpe, Support::unbounded(3).unwrap(), &[0.0; 3]);
    let n = 4000;
    let s = euler_sample(&m, &[0.0], n, 10, 1).unwrap();
    let bound = 4.0 / (n as f64).sqrt();
    for mean in s.mean_axis(ndarray::Axis(0)).unwrap() {
        assert!(mean.abs() < bound);
    }
    // Batching does not change any chain.
    let big = euler_sample(&m, &[0.0], 2100, 10, 1).unwrap();
    assert_eq!(big.row(2050).to_vec(), chain_start(1, 2050, 3));
}

#[test]
fn simplex_samples_are_one_hot() {
    let support = Support::simplex_product(4, 3).unwrap();
    for method in [Method::Pawsterior, Method::Fmpe] {
        let m = random_model(method, support.clone(), 2, 4);
        let s = euler_sample(&m, &[0.5, -0.5], 300, 20, 2).unwrap();
        assert!(s.outer_iter().all(|r| support.is_one_hot(&r.to_vec())));
    }
}

#[test]
fn sampling_is_deterministic_and_validates() {
    let m = random_model(Method::Pawsterior, Support::boxed(vec![-1.0; 2], vec![1.0; 2]).unwrap(), 1, 0);
    assert_eq!(euler_sample(&m, &[0.3], 64, 10, 5).unwrap(), euler_sample(&m, &[0.3], 64, 10, 5).unwrap());
    assert_ne!(euler_sample(&m, &[0.3], 64, 10, 5).unwrap(), euler_sample(&m, &[0.3], 64, 10, 6).unwrap());
    assert!(matches!(euler_sample(&m, &[0.3], 4, 0, 0), Err(Error::Config(_))));
    assert!(matches!(euler_sample(&m, &[0.3, 0.1], 4, 10, 0), Err(Error::Shape { .. })));

    let blowup = constant_model(Method::Pawsterior, Support::unbounded(1).unwrap(), &[-f64::MAX, f64::MAX]);
    assert!(matches!(
        euler_sample(&blowup, &[0.0], 3, 10, 0),
        Err(Error::Numeric { index: 0, .. })
    ));
}

#[test]
fn loss_value_matches_gradient_path_for_every_head() {
    for support in [
        Support::boxed(vec![-2.0], vec![3.0]).unwrap(),
        Support::simplex_product(1, 5).unwrap(),
    ] {
        for method in [Method::Pawsterior, Method::Fmpe] {
            let m = random_model(method, support.clone(), 2, 11);
            let batch = random_batch(&m, 10, 12);
            let with = sbi_vfm::flowmatch::loss_and_grad(&m, &batch).unwrap();
            assert_eq!(with.loss, loss_value(&m, &batch).unwrap());
            assert_eq!(with.grads.len(), m.params.len());
        }
    }
}
