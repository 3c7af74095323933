mod common;

use common::model::{param_grad_check, random_batch, tiny_model};
use common::{random_tensor, rng};
use proptest::prelude::*;
use splatode::checkpoint::Session;
use splatode::forecaster::{Forecaster, Variant};
use splatode::ode::SolverConfig;
use splatode::training::LossConfig;
use splatode::Tensor;

fn loss_all_terms() -> LossConfig {
    LossConfig {
        lambda_latent: 0.3,
        lambda_traj: 0.01,
        ..LossConfig::default()
    }
}

fn tight() -> SolverConfig {
    SolverConfig {
        rtol: 1e-10,
        atol: 1e-12,
        ..SolverConfig::default()
    }
}

#[test]
fn pipeline_gradients_match_finite_differences_fixed_step() {
    let model = tiny_model(Variant::Deterministic, SolverConfig::rk4(0.05));
    let batch = random_batch(1, 2, 5, 4);
    let err = param_grad_check(&model, &batch, &loss_all_terms(), None, 1e-6);
    assert!(err < 1e-4, "{err}");
}

#[test]
fn pipeline_gradients_match_finite_differences_adaptive() {
    let model = tiny_model(Variant::Deterministic, tight());
    let batch = random_batch(2, 2, 5, 3);
    let err = param_grad_check(&model, &batch, &loss_all_terms(), None, 1e-6);
    assert!(err < 1e-4, "{err}");
}

#[test]
fn variational_objective_gradients_match_finite_differences() {
    let model = tiny_model(Variant::Variational, SolverConfig::rk4(0.05));
    let batch = random_batch(3, 2, 5, 3);
    let eps = random_tensor(&mut rng(4), &[2, 4], -1.0, 1.0);
    let err = param_grad_check(&model, &batch, &loss_all_terms(), Some(&eps), 1e-6);
    assert!(err < 1e-4, "{err}");
}

#[test]
fn autoregressive_gradients_match_finite_differences() {
    let model = tiny_model(Variant::Autoregressive, SolverConfig::default());
    let batch = random_batch(5, 2, 5, 3);
    let err = param_grad_check(&model, &batch, &loss_all_terms(), None, 1e-6);
    assert!(err < 1e-4, "{err}");
}

fn run(
    model: &Forecaster<f64>,
    ctx: &Tensor<f64>,
    times: &[Vec<f64>],
    eps: Option<&Tensor<f64>>,
) -> (Tensor<f64>, Tensor<f64>, Option<Tensor<f64>>) {
    let s = Session::new(model.params(), false);
    let c = s.tape.constant(ctx.clone());
    let fc = model.forward(&s, c, times, eps, true).unwrap();
    let field = fc.field.map(|f| s.tape.value(f).clone());
    let pred = s.tape.value(fc.pred).clone();
    let z0 = s.tape.value(fc.z0).clone();
    (pred, z0, field)
}

#[test]
fn output_shapes() {
    let ctx = random_tensor(&mut rng(6), &[3, 5, 10], -1.0, 1.0);
    let times = vec![vec![0.1, 0.2, 0.3, 0.4]; 3];
    for variant in [Variant::Deterministic, Variant::Variational] {
        let m = tiny_model(variant, SolverConfig::default());
        let (pred, z0, field) = run(&m, &ctx, &times, None);
        assert_eq!(pred.shape(), &[3, 4, 10]);
        assert_eq!(z0.shape(), &[3, 4]);
        assert_eq!(field.unwrap().shape(), &[4, 3, 4]);
    }
    let ar = tiny_model(Variant::Autoregressive, SolverConfig::default());
    let (pred, _, field) = run(&ar, &ctx, &times, None);
    assert_eq!(pred.shape(), &[3, 4, 10]);
    assert!(field.is_none());
    let bad = random_tensor(&mut rng(6), &[3, 4, 10], -1.0, 1.0);
    let s = Session::new(ar.params(), false);
    assert!(ar.forward(&s, s.tape.constant(bad), &times, None, false).is_err());
}

#[test]
fn every_parameter_group_receives_gradient() {
    for variant in [Variant::Deterministic, Variant::Variational] {
        let model = tiny_model(variant, SolverConfig::rk4(0.05));
        let batch = random_batch(8, 3, 5, 4);
        let eps = random_tensor(&mut rng(9), &[3, 4], -1.0, 1.0);
        let (_, grads) = common::model::objective(&model, &batch, &loss_all_terms(), Some(&eps));
        let global: f64 = grads.iter().flat_map(|g| g.data()).map(|x| x * x).sum::<f64>().sqrt();
        for (name, g) in model.params().names().iter().zip(&grads) {
            let norm: f64 = g.data().iter().map(|x| x * x).sum::<f64>().sqrt();
            if name.ends_with(".k.b") {
                // Adding a constant to every key shifts all scores of a query equally.
                assert!(norm < 1e-12 * global, "{name}: {norm}");
                continue;
            }
            assert!(
                norm > 1e-9 * global && norm.is_finite(),
                "{variant:?}: no gradient reaches {name}"
            );
        }
    }
}

#[test]
fn zeroed_head_maps_to_the_origin() {
    let mut model = tiny_model(Variant::Deterministic, SolverConfig::default());
    model.zero_parameters("head");
    let ctx = Tensor::zeros(&[2, 5, 10]);
    let (_, z0, _) = run(&model, &ctx, &[vec![0.1], vec![0.1]], None);
    assert!(z0.data().iter().all(|v| *v == 0.0));
}

#[test]
fn vanishing_posterior_noise_recovers_the_mean_path() {
    let mut model = tiny_model(Variant::Variational, SolverConfig::rk4(0.05));
    model.zero_parameters("head_logvar");
    let bias = model
        .params()
        .names()
        .iter()
        .find(|n| n.starts_with("head_logvar") && n.ends_with('b'))
        .cloned()
        .unwrap();
    model.set_parameter(&bias, Tensor::full(&[4], -40.0)).unwrap();
    let ctx = random_tensor(&mut rng(10), &[2, 5, 10], -1.0, 1.0);
    let times = vec![vec![0.1, 0.3, 0.6]; 2];
    let eps = random_tensor(&mut rng(11), &[2, 4], -3.0, 3.0);
    let (noisy, _, _) = run(&model, &ctx, &times, Some(&eps));
    let (mean, _, _) = run(&model, &ctx, &times, None);
    let worst = noisy
        .data()
        .iter()
        .zip(mean.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(worst < 1e-6, "{worst}");
}

#[test]
fn save_and_load_preserve_predictions() {
    let model = tiny_model(Variant::Deterministic, SolverConfig::default());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("f.ckpt");
    model.save(&path).unwrap();
    let back = Forecaster::<f64>::load(&path).unwrap();
    assert_eq!(back.config, model.config);
    let ctx: Vec<Vec<[f64; 10]>> = vec![(0..5).map(|i| std::array::from_fn(|d| (i + d) as f64 * 0.1)).collect()];
    assert_eq!(
        model.predict(&ctx, &[0.1, 0.2], 8).unwrap(),
        back.predict(&ctx, &[0.1, 0.2], 8).unwrap()
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn identical_contexts_share_a_latent_and_order_matters(seed in any::<u64>()) {
        let model = tiny_model(Variant::Deterministic, SolverConfig::default());
        let one = random_tensor(&mut rng(seed), &[1, 5, 10], -1.0, 1.0);
        let mut twice = one.data().to_vec();
        twice.extend_from_slice(one.data());
        let mut reversed = Vec::new();
        for i in (0..5).rev() {
            reversed.extend_from_slice(&one.data()[i * 10..(i + 1) * 10]);
        }
        twice.extend(reversed);
        let ctx = Tensor::new(&[3, 5, 10], twice).unwrap();
        let (pred, z0, _) = run(&model, &ctx, &vec![vec![0.2]; 3], None);
        let z = z0.data();
        prop_assert_eq!(&z[0..4], &z[4..8]);
        prop_assert_eq!(&pred.data()[0..10], &pred.data()[10..20]);
        let diff: f64 = z[0..4].iter().zip(&z[8..12]).map(|(a, b)| (a - b).abs()).sum();
        prop_assert!(diff > 1e-8, "time reversal left z0 unchanged");
    }
}
