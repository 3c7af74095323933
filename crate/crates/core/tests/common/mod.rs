//! Helpers shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use splatode::{Result, Tape, Tensor, Var};

pub mod oracles;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Uniform magnitude in `[lo, hi)` with a random sign, keeping values away from zero.
pub fn signed_away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(lo..hi);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// Normwise relative error `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂, floor)`.
pub fn rel_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(floor)
}

/// Scalar-valued function of several tensors, built on a fresh tape.
pub type Builder<'a> = dyn Fn(&Tape<f64>, &[Var]) -> Result<Var> + 'a;

pub fn eval_scalar(f: &Builder<'_>, inputs: &[Tensor<f64>]) -> f64 {
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&tape, &vars).unwrap();
    let v = tape.value(out).item();
    v
}

pub fn analytic_grads(f: &Builder<'_>, inputs: &[Tensor<f64>]) -> Vec<Vec<f64>> {
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&tape, &vars).unwrap();
    let grads = tape.backward(out).unwrap();
    vars.iter()
        .zip(inputs)
        .map(|(&v, t)| {
            grads
                .get(v)
                .map(|g| g.data().to_vec())
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect()
}

/// Central differences with step `h` for every input element.
pub fn numeric_grads(f: &Builder<'_>, inputs: &[Tensor<f64>], h: f64) -> Vec<Vec<f64>> {
    (0..inputs.len())
        .map(|i| {
            (0..inputs[i].numel())
                .map(|j| {
                    let mut plus = inputs.to_vec();
                    plus[i].data_mut()[j] += h;
                    let mut minus = inputs.to_vec();
                    minus[i].data_mut()[j] -= h;
                    (eval_scalar(f, &plus) - eval_scalar(f, &minus)) / (2.0 * h)
                })
                .collect()
        })
        .collect()
}

/// Worst normwise relative error over all inputs.
pub fn grad_check(f: &Builder<'_>, inputs: &[Tensor<f64>], h: f64) -> f64 {
    let a = analytic_grads(f, inputs);
    let n = numeric_grads(f, inputs, h);
    a.iter().zip(&n).map(|(x, y)| rel_error(x, y, 1e-8)).fold(0.0, f64::max)
}

/// Contracts `y` with a fixed random weight of the same shape so that every
/// output element contributes to the scalar.
pub fn project(tape: &Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(y);
    let w = random_tensor(&mut rng(seed ^ 0xfeed), &shape, -1.0, 1.0);
    let w = tape.constant(w);
    Ok(tape.sum(tape.mul(y, w)?))
}

pub struct OpCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor<f64>>,
    pub build: Box<Builder<'static>>,
}

fn case(
    name: &'static str,
    inputs: Vec<Tensor<f64>>,
    seed: u64,
    f: impl Fn(&Tape<f64>, &[Var]) -> Result<Var> + 'static,
) -> OpCase {
    OpCase {
        name,
        inputs,
        build: Box::new(move |t, v| {
            let y = f(t, v)?;
            project(t, y, seed)
        }),
    }
}

/// One randomly shaped instance of every differentiable op, each reduced
/// to a scalar through a random projection. Inputs avoid kinks and domain
/// edges (zero for `abs`/`relu`, non-positive values for `log`/`sqrt`).
pub fn op_cases(seed: u64) -> Vec<OpCase> {
    let mut r = rng(seed);
    let dim = |r: &mut ChaCha8Rng| r.random_range(1..5usize);
    let (a, b, c) = (dim(&mut r), dim(&mut r) + 1, dim(&mut r));
    let k = dim(&mut r);
    let u = |r: &mut ChaCha8Rng, s: &[usize]| random_tensor(r, s, -1.5, 1.5);
    let pos = |r: &mut ChaCha8Rng, s: &[usize]| random_tensor(r, s, 0.3, 2.5);
    let away = |r: &mut ChaCha8Rng, s: &[usize]| signed_away_from_zero(r, s, 0.1, 1.5);
    let axis3 = r.random_range(0..3usize);
    let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
    let perm = perms[r.random_range(0..6usize)];
    let c1 = r.random_range(0.5..2.0f64);
    let slice_start = r.random_range(0..b);
    let slice_end = r.random_range(slice_start + 1..=b);
    let reshape_to = [b, a * c];

    vec![
        case("add", vec![u(&mut r, &[a, b]), u(&mut r, &[a, b])], seed, |t, v| {
            t.add(v[0], v[1])
        }),
        case(
            "add_broadcast",
            vec![u(&mut r, &[a, b, c]), u(&mut r, &[b, c])],
            seed,
            |t, v| t.add(v[0], v[1]),
        ),
        case("sub", vec![u(&mut r, &[a, b, c]), u(&mut r, &[c])], seed, |t, v| {
            t.sub(v[0], v[1])
        }),
        case("mul", vec![u(&mut r, &[a, b]), u(&mut r, &[a, b])], seed, |t, v| {
            t.mul(v[0], v[1])
        }),
        case(
            "mul_broadcast",
            vec![u(&mut r, &[a, b, c]), u(&mut r, &[b, c])],
            seed,
            |t, v| t.mul(v[0], v[1]),
        ),
        case("div", vec![u(&mut r, &[a, b]), away(&mut r, &[a, b])], seed, |t, v| {
            t.div(v[0], v[1])
        }),
        case(
            "div_broadcast",
            vec![u(&mut r, &[a, b]), away(&mut r, &[b])],
            seed,
            |t, v| t.div(v[0], v[1]),
        ),
        case("add_scalar", vec![u(&mut r, &[a, b])], seed, move |t, v| {
            Ok(t.add_scalar(v[0], c1))
        }),
        case("mul_scalar", vec![u(&mut r, &[a, b])], seed, move |t, v| {
            Ok(t.mul_scalar(v[0], c1))
        }),
        case("neg", vec![u(&mut r, &[a, b])], seed, |t, v| Ok(t.neg(v[0]))),
        case("matmul", vec![u(&mut r, &[a, k]), u(&mut r, &[k, c])], seed, |t, v| {
            t.matmul(v[0], v[1])
        }),
        case(
            "matmul_shared_rhs",
            vec![u(&mut r, &[a, b, k]), u(&mut r, &[k, c])],
            seed,
            |t, v| t.matmul(v[0], v[1]),
        ),
        case(
            "matmul_batched",
            vec![u(&mut r, &[a, b, k]), u(&mut r, &[a, k, c])],
            seed,
            |t, v| t.matmul(v[0], v[1]),
        ),
        case("reshape", vec![u(&mut r, &[a, b, c])], seed, move |t, v| {
            t.reshape(v[0], &reshape_to)
        }),
        case("permute", vec![u(&mut r, &[a, b, c])], seed, move |t, v| {
            t.permute(v[0], &perm)
        }),
        case("transpose", vec![u(&mut r, &[a, b])], seed, |t, v| t.transpose(v[0])),
        case("tanh", vec![u(&mut r, &[a, b])], seed, |t, v| Ok(t.tanh(v[0]))),
        case("relu", vec![away(&mut r, &[a, b])], seed, |t, v| Ok(t.relu(v[0]))),
        case("exp", vec![u(&mut r, &[a, b])], seed, |t, v| Ok(t.exp(v[0]))),
        case("log", vec![pos(&mut r, &[a, b])], seed, |t, v| t.log(v[0])),
        case("sqrt", vec![pos(&mut r, &[a, b])], seed, |t, v| t.sqrt(v[0])),
        case("sin", vec![u(&mut r, &[a, b])], seed, |t, v| Ok(t.sin(v[0]))),
        case("cos", vec![u(&mut r, &[a, b])], seed, |t, v| Ok(t.cos(v[0]))),
        case("abs", vec![away(&mut r, &[a, b])], seed, |t, v| Ok(t.abs(v[0]))),
        case("square", vec![u(&mut r, &[a, b])], seed, |t, v| Ok(t.square(v[0]))),
        case("sum", vec![u(&mut r, &[a, b, c])], seed, |t, v| Ok(t.sum(v[0]))),
        case("mean", vec![u(&mut r, &[a, b, c])], seed, |t, v| Ok(t.mean(v[0]))),
        case("sum_axis", vec![u(&mut r, &[a, b, c])], seed, move |t, v| {
            t.sum_axis(v[0], axis3)
        }),
        case("mean_axis", vec![u(&mut r, &[a, b, c])], seed, move |t, v| {
            t.mean_axis(v[0], axis3)
        }),
        case("softmax", vec![u(&mut r, &[a, b, c])], seed, |t, v| Ok(t.softmax(v[0]))),
        case("layer_norm", vec![u(&mut r, &[a, b + 1])], seed, |t, v| {
            Ok(t.layer_norm(v[0], 1e-5))
        }),
        case(
            "concat",
            vec![u(&mut r, &[a, b, c]), u(&mut r, &[a, k, c])],
            seed,
            |t, v| t.concat(&[v[0], v[1]], 1),
        ),
        case("slice", vec![u(&mut r, &[a, b, c])], seed, move |t, v| {
            t.slice(v[0], 1, slice_start, slice_end)
        }),
        case("shared_input", vec![u(&mut r, &[a, b])], seed, |t, v| {
            let y = t.mul(v[0], v[0])?;
            t.add(y, t.tanh(v[0]))
        }),
    ]
}

/// Independent count of valid start times: the number of stride points in
/// `[t_min, last]`, plus one when `last` itself is off the grid.
pub fn expected_grid_len(cfg: &splatode::sampling::SamplerConfig, window: (f64, f64)) -> usize {
    let last = window.1 - cfg.t_c - cfg.min_target_span();
    let stride = cfg.stride();
    let n = ((last - window.0) / stride + 1e-9).floor() as usize + 1;
    let top = window.0 + (n - 1) as f64 * stride;
    n + usize::from((top - last).abs() > 1e-9)
}

/// A sampler configuration and window drawn so that at least one start time exists.
pub fn random_sampler(r: &mut ChaCha8Rng) -> (splatode::sampling::SamplerConfig, (f64, f64)) {
    let t_min = r.random_range(-1.0..1.0);
    let span = r.random_range(0.5..3.0);
    let n_c = r.random_range(2..40usize);
    let n_e = r.random_range(1..15usize);
    let t_c = span * r.random_range(0.1..0.8);
    let min_t_e = (span - t_c) * r.random_range(0.02..0.9);
    let stride = (span - t_c - min_t_e) * r.random_range(0.01..0.7) + 1e-3;
    let cfg = splatode::sampling::SamplerConfig {
        n_c,
        n_e,
        t_c,
        t0_stride: Some(stride),
        min_t_e: Some(min_t_e),
    };
    (cfg, (t_min, t_min + span))
}

pub mod model {
    use splatode::checkpoint::Session;
    use splatode::forecaster::{Forecaster, ForecasterConfig, Variant};
    use splatode::ode::SolverConfig;
    use splatode::sampling::Normalizer;
    use splatode::training::{batch_objective, Batch, LossConfig};
    use splatode::Tensor;

    use super::{random_tensor, rel_error, rng};

    pub fn tiny_config(variant: Variant, solver: SolverConfig) -> ForecasterConfig {
        ForecasterConfig {
            variant,
            d_model: 8,
            heads: 2,
            layers: 1,
            ff_mult: 2,
            latent: 4,
            ode_hidden: 8,
            ode_layers: 2,
            dec_hidden: 8,
            dec_layers: 2,
            n_c: 5,
            solver,
            seed: 3,
        }
    }

    pub fn tiny_model(variant: Variant, solver: SolverConfig) -> Forecaster<f64> {
        Forecaster::new(tiny_config(variant, solver), Normalizer::default()).unwrap()
    }

    /// Random normalized batch of `b` rows with `n` targets each.
    pub fn random_batch(seed: u64, b: usize, n_c: usize, n: usize) -> Batch<f64> {
        let mut r = rng(seed);
        let dt: Vec<f64> = (0..b).map(|i| 0.05 + 0.01 * i as f64).collect();
        Batch {
            context: random_tensor(&mut r, &[b, n_c, 10], -1.0, 1.0),
            target: random_tensor(&mut r, &[b, n, 10], -1.0, 1.0),
            rel_times: dt.iter().map(|h| (1..=n).map(|j| j as f64 * h).collect()).collect(),
            dt,
        }
    }

    /// Objective of `model` on `batch` with the regularizers at full weight.
    pub fn objective(
        model: &Forecaster<f64>,
        batch: &Batch<f64>,
        loss: &LossConfig,
        eps: Option<&Tensor<f64>>,
    ) -> (f64, Vec<Tensor<f64>>) {
        let s = Session::new(model.params(), true);
        let obj = batch_objective(model, &s, batch, loss, eps).unwrap();
        let (total, parts) = obj.total(&s.tape, loss, 1.0).unwrap();
        let mut g = s.tape.backward(total).unwrap();
        (parts.total, s.param_grads(&mut g))
    }

    /// Worst per-tensor normwise relative error between backpropagated and
    /// central-difference parameter gradients of the full objective. The
    /// denominator is floored at 1e-4 of the global gradient norm so that
    /// tensors whose exact gradient is zero (attention key biases, which a
    /// softmax cancels) compare difference noise against the overall scale.
    pub fn param_grad_check(
        model: &Forecaster<f64>,
        batch: &Batch<f64>,
        loss: &LossConfig,
        eps: Option<&Tensor<f64>>,
        h: f64,
    ) -> f64 {
        let (_, analytic) = objective(model, batch, loss, eps);
        let global: f64 = analytic
            .iter()
            .flat_map(|g| g.data())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt();
        let mut probe = model.clone();
        let mut worst: f64 = 0.0;
        for (i, a) in analytic.iter().enumerate() {
            let mut numeric = vec![0.0; a.numel()];
            for (j, slot) in numeric.iter_mut().enumerate() {
                let orig = probe.params().values()[i].data()[j];
                probe.params_mut().values_mut()[i].data_mut()[j] = orig + h;
                let plus = objective(&probe, batch, loss, eps).0;
                probe.params_mut().values_mut()[i].data_mut()[j] = orig - h;
                let minus = objective(&probe, batch, loss, eps).0;
                probe.params_mut().values_mut()[i].data_mut()[j] = orig;
                *slot = (plus - minus) / (2.0 * h);
            }
            worst = worst.max(rel_error(a.data(), &numeric, 1e-4 * global.max(1e-3)));
        }
        worst
    }
}
