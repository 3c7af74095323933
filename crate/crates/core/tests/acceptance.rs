//! Acceptance suite: one PASS/FAIL line per criterion, tolerances pinned below.
//!
//! Runs as a plain binary (no libtest harness) so the report is always
//! printed. Exits non-zero when any criterion fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use common::model::{param_grad_check, random_batch, tiny_model};
use common::oracles::{
    axis_camera, close, convergence_exponent, decay, eval, fixture, hand_alpha, isotropic, oscillator, ref_kl, ref_l_e,
    ref_nll, ref_r_latent, ref_r_traj, solve, states,
};
use common::{expected_grid_len, grad_check, op_cases, random_sampler, random_tensor, rng};
use rand::seq::SliceRandom;
use splatode::checkpoint::Session;
use splatode::forecaster::{Forecaster, Variant};
use splatode::ode::SolverConfig;
use splatode::pipeline::{
    ablation_csv, ablation_row, metrics_csv, prepare, run_extrapolation, train_variant, ExperimentConfig,
    ExtrapolationReport, Prepared,
};
use splatode::raster::{render, render_with_weights, ssim};
use splatode::sampling::{build_dataset, SamplerConfig};
use splatode::scene::{preset_scene, Preset, PresetConfig, StateVec};
use splatode::training::{
    adaptive_scale, kl_standard_normal, loss_extrapolation, nll_gaussian, reg_latent, reg_traj, LossConfig,
    TrainOutputs,
};
use splatode::trajectory::TrajectorySet;
use splatode::{Tape, Tensor};

// Pinned tolerances and budgets.
const OP_GRAD_TOL: f64 = 1e-5;
const PIPELINE_GRAD_TOL: f64 = 1e-4;
const FD_STEP: f64 = 1e-6;
const DECAY_TOL: f64 = 1e-5;
const OSCILLATOR_TOL: f64 = 1e-4;
const RK4_EXPONENT: (f64, f64) = (3.7, 4.3);
const LOSS_TOL: f64 = 1e-12;
const SAMPLING_TOL: f64 = 1e-12;
const RASTER_TOL: f64 = 1e-6;
const SSIM_TOL: f64 = 1e-9;
const L1_RADIUS_FRACTION: f64 = 0.05;
const PSNR_MARGIN_DB: f64 = 3.0;
const OOD_RATIO: f64 = 2.0;
const SIGMA_LIMIT_TOL: f64 = 1e-6;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn within(elapsed: Duration, budget_s: f64) -> (bool, String) {
    let s = elapsed.as_secs_f64();
    (s < budget_s, format!("{s:.1} s (budget {budget_s} s)"))
}

fn c1_autodiff() -> Verdict {
    let start = Instant::now();
    let mut worst_op = (0.0f64, "");
    for seed in 0..16 {
        for case in op_cases(seed) {
            let e = grad_check(&*case.build, &case.inputs, FD_STEP);
            if e > worst_op.0 || e.is_nan() {
                worst_op = (e, case.name);
            }
        }
    }
    let loss = LossConfig {
        lambda_latent: 0.3,
        lambda_traj: 0.01,
        ..LossConfig::default()
    };
    let mut worst_pipe: f64 = 0.0;
    for (variant, solver) in [
        (Variant::Deterministic, SolverConfig::rk4(0.05)),
        (
            Variant::Deterministic,
            SolverConfig {
                rtol: 1e-10,
                atol: 1e-12,
                ..SolverConfig::default()
            },
        ),
        (Variant::Autoregressive, SolverConfig::default()),
    ] {
        let model = tiny_model(variant, solver);
        worst_pipe = worst_pipe.max(param_grad_check(
            &model,
            &random_batch(21, 2, 5, 3),
            &loss,
            None,
            FD_STEP,
        ));
    }
    let (fast, time) = within(start.elapsed(), 60.0);
    verdict(
        worst_op.0 < OP_GRAD_TOL && worst_pipe < PIPELINE_GRAD_TOL && fast,
        format!(
            "worst op rel err {:.2e} ({}) < {OP_GRAD_TOL:e}; pipeline rel err {worst_pipe:.2e} < {PIPELINE_GRAD_TOL:e}; {time}",
            worst_op.0, worst_op.1
        ),
    )
}

fn c2_solver() -> Verdict {
    let start = Instant::now();
    let z = solve(&SolverConfig::default(), &[1.0], &[1], 1.0, decay)[0];
    let decay_err = (z - (-1.0f64).exp()).abs();
    // One period at tightened tolerances; the default ones admit ~2e-3 here.
    let tight = SolverConfig {
        rtol: 1e-7,
        atol: 1e-9,
        ..SolverConfig::default()
    };
    let o = solve(&tight, &[1.0, 0.0], &[1, 2], 2.0 * std::f64::consts::PI, oscillator);
    let osc_err = ((o[0] - 1.0).powi(2) + o[1].powi(2)).sqrt();
    let p = convergence_exponent(&[0.2, 0.1, 0.05, 0.025]);
    let (fast, time) = within(start.elapsed(), 10.0);
    verdict(
        decay_err < DECAY_TOL && osc_err < OSCILLATOR_TOL && (RK4_EXPONENT.0..=RK4_EXPONENT.1).contains(&p) && fast,
        format!(
            "decay err {decay_err:.2e} < {DECAY_TOL:e}; oscillator return {osc_err:.2e} < {OSCILLATOR_TOL:e} (rtol 1e-7, atol 1e-9); RK4 exponent {p:.3}; {time}"
        ),
    )
}

fn c3_losses() -> Verdict {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut all_close = true;
    for seed in 0..100 {
        let fx = fixture(seed);
        let c = |t: &Tape<f64>, x: &Tensor<f64>| t.constant(x.clone());
        let pairs = [
            (
                eval(|t| loss_extrapolation(t, c(t, &fx.pred), c(t, &fx.target)).unwrap()),
                ref_l_e(&fx.pred, &fx.target),
            ),
            (
                eval(|t| reg_latent(t, c(t, &fx.field), &fx.dt).unwrap()),
                ref_r_latent(&fx.field, &fx.dt),
            ),
            (
                eval(|t| reg_traj(t, c(t, &fx.pred), &fx.dt).unwrap()),
                ref_r_traj(&fx.pred, &fx.dt),
            ),
            (
                eval(|t| kl_standard_normal(t, c(t, &fx.mu), c(t, &fx.logvar)).unwrap()),
                ref_kl(&fx.mu, &fx.logvar),
            ),
            (
                eval(|t| nll_gaussian(t, c(t, &fx.pred), c(t, &fx.target), fx.sigma).unwrap()),
                ref_nll(&fx.pred, &fx.target, fx.sigma),
            ),
        ];
        for (got, want) in pairs {
            all_close &= close(got, want);
            worst = worst.max((got - want).abs() / want.abs().max(1.0));
        }
    }
    // Constant velocity along positions: zero acceleration penalty.
    let (b, n, dt) = (3, 8, [0.05, 0.1, 0.2]);
    let mut data = Vec::new();
    for (r, h) in dt.iter().enumerate() {
        for j in 0..n {
            for ch in 0..10 {
                data.push(0.3 * ch as f64 + (r + 1) as f64 * (ch as f64 - 4.0) * h * j as f64);
            }
        }
    }
    let p = Tensor::new(&[b, n, 10], data).unwrap();
    let rt = eval(|t| reg_traj(t, t.constant(p.clone()), &dt).unwrap());
    let cfg = LossConfig::default();
    let ends = adaptive_scale(cfg.l_end, &cfg) == 1.0 && adaptive_scale(cfg.l_init, &cfg) == (-1.0 / cfg.tau).exp();
    let (fast, time) = within(start.elapsed(), 10.0);
    verdict(
        all_close && worst <= LOSS_TOL && rt < LOSS_TOL && ends && fast,
        format!("worst rel diff vs reference {worst:.1e} over 100 fixtures; R_traj on constant velocity {rt:.1e}; s_t endpoints exact: {ends}; {time}"),
    )
}

fn c4_sampling() -> Verdict {
    let start = Instant::now();
    let cfg = SamplerConfig {
        n_c: 30,
        n_e: 10,
        t_c: 0.6,
        ..SamplerConfig::default()
    };
    let ctx = cfg.context_times(0.0);
    let tgt = cfg.target_times(0.0, 1.0);
    let mut err: f64 = (cfg.dt_context() - 0.6 / 29.0).abs();
    for (i, t) in ctx.iter().enumerate() {
        err = err.max((t - i as f64 * 0.6 / 29.0).abs());
    }
    for (j, t) in tgt.iter().enumerate() {
        err = err.max((t - (0.64 + 0.04 * j as f64)).abs());
    }
    let shapes = ctx.len() == 30 && tgt.len() == 10;
    let mut r = rng(404);
    let mut mismatches = 0;
    for _ in 0..50 {
        let (cfg, window) = random_sampler(&mut r);
        let mut src = TrajectorySet::new(2, vec![window.0, window.1]);
        for k in 0..2 {
            let st: StateVec = [k as f64; 10];
            src.set(k, 0, st);
            src.set(k, 1, st);
        }
        let data = build_dataset(&src, &cfg).unwrap();
        if data.len() != 2 * expected_grid_len(&cfg, window) {
            mismatches += 1;
        }
    }
    let (fast, time) = within(start.elapsed(), 5.0);
    verdict(
        err < SAMPLING_TOL && shapes && mismatches == 0 && fast,
        format!("reference grid max err {err:.1e}; cardinality mismatches {mismatches}/50; {time}"),
    )
}

fn c5_raster() -> Verdict {
    let start = Instant::now();
    let cfg = PresetConfig {
        image_size: 32,
        ..PresetConfig::default()
    };
    let (mut weights_ok, mut perm_ok, mut ssim_err) = (true, true, 0.0f64);
    for seed in 0..8u64 {
        let spec = preset_scene(Preset::Mixed, 48, seed, &cfg).unwrap();
        let st = spec.states_at(0.1 * seed as f64).unwrap();
        let (img, w) = render_with_weights(&spec.gaussians, &st, &spec.cameras[0]).unwrap();
        weights_ok &= w.iter().all(|v| (0.0..=1.0).contains(v));
        let mut order: Vec<usize> = (0..spec.len()).collect();
        order.shuffle(&mut rng(seed));
        let gs: Vec<_> = order.iter().map(|&i| spec.gaussians[i].clone()).collect();
        let ss: Vec<_> = order.iter().map(|&i| st[i]).collect();
        perm_ok &= render(&gs, &ss, &spec.cameras[0]).unwrap().rgb == img.rgb;
        ssim_err = ssim_err.max((ssim(&img, &img).unwrap() - 1.0).abs());
    }
    let f = 40.0;
    let cam = axis_camera(32, f);
    let (c1, c2) = ([0.3, 0.2, 0.1], [0.1, 0.5, 0.6]);
    let gs = vec![
        isotropic([0.0, 0.0, 3.0], 0.2, 1.1, c2),
        isotropic([0.0, 0.0, 2.0], 0.12, 0.4, c1),
    ];
    let img = render(&gs, &states(&gs), &cam).unwrap();
    let mut pix_err: f64 = 0.0;
    for (px, py) in [(16usize, 16usize), (17, 15), (14, 18), (20, 16)] {
        let d = [px as f64 + 0.5 - 16.0, py as f64 + 0.5 - 16.0];
        let (a1, a2) = (hand_alpha(0.4, 0.12, 2.0, f, d), hand_alpha(1.1, 0.2, 3.0, f, d));
        let got = img.pixel(px, py);
        for k in 0..3 {
            pix_err = pix_err.max((got[k] as f64 - (c1[k] * a1 + c2[k] * a2 * (1.0 - a1))).abs());
        }
    }
    let (fast, time) = within(start.elapsed(), 30.0);
    verdict(
        weights_ok && perm_ok && pix_err < RASTER_TOL && ssim_err < SSIM_TOL && fast,
        format!(
            "weights in [0,1]: {weights_ok}; permutation bit-exact: {perm_ok}; two-splat err {pix_err:.1e}; |SSIM(I,I)-1| {ssim_err:.1e}; {time}"
        ),
    )
}

struct DeskRun {
    prep: Prepared,
    model: Forecaster<f64>,
    report: ExtrapolationReport,
    metrics: String,
    elapsed: Duration,
    dir: tempfile::TempDir,
}

fn desk_config() -> ExperimentConfig {
    ExperimentConfig::desk().with_seed(0)
}

fn desk_run() -> DeskRun {
    let dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let prep = prepare(&desk_config()).unwrap();
    let (model, report) = run_extrapolation::<f64>(&prep, Variant::Deterministic, Some(dir.path())).unwrap();
    let elapsed = start.elapsed();
    let metrics = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    DeskRun {
        prep,
        model,
        report,
        metrics,
        elapsed,
        dir,
    }
}

fn c6_desk(run: &DeskRun) -> Verdict {
    let cfg = &run.prep.config;
    let setup = cfg.preset == Preset::Circular
        && cfg.gaussians == 128
        && cfg.scene.period == 1.25
        && (cfg.scene.t_min, cfg.scene.t_max) == (0.0, 1.0)
        && cfg.split == 0.8
        && cfg.train.epochs <= 40
        && run.report.horizon_times.len() == 10;
    let r = run.report.mean_radius;
    let l1 = ExtrapolationReport::mean(&run.report.forecast_l1);
    let (psnr, freeze) = (
        run.report.mean_psnr("forecast"),
        run.report.mean_psnr("freeze-last-frame"),
    );
    let (fast, time) = within(run.elapsed, 600.0);
    verdict(
        setup && l1 < L1_RADIUS_FRACTION * r && psnr >= freeze + PSNR_MARGIN_DB && fast,
        format!(
            "mean position L1 {l1:.4} = {:.2}% of radius {r:.3} (< {}%); PSNR {psnr:.2} dB vs freeze-last-frame {freeze:.2} dB (margin >= {PSNR_MARGIN_DB} dB); {time}",
            100.0 * l1 / r,
            100.0 * L1_RADIUS_FRACTION
        ),
    )
}

fn c7_ood(run: &DeskRun) -> Verdict {
    let f = ExtrapolationReport::mean(&run.report.forecast_l1);
    let t = ExtrapolationReport::mean(&run.report.timestamp_l1);
    verdict(
        t >= OOD_RATIO * f,
        format!(
            "timestamp-conditioned L1 {t:.4} vs forecast {f:.4}: ratio {:.1} (>= {OOD_RATIO})",
            t / f
        ),
    )
}

fn c8_ablation(run: &DeskRun) -> Verdict {
    let start = Instant::now();
    // Same prepared samples, normalizer and training settings as the ODE run.
    let (ar, ar_train) = train_variant::<f64>(&run.prep, Variant::Autoregressive, &TrainOutputs::default()).unwrap();
    let rows = vec![
        ablation_row(&run.prep, &run.model, &run.report.train).unwrap(),
        ablation_row(&run.prep, &ar, &ar_train).unwrap(),
    ];
    let path = run.dir.path().join("ablation.csv");
    std::fs::write(&path, ablation_csv(&rows)).unwrap();
    let written = std::fs::read_to_string(&path).unwrap();
    let ok = written.lines().count() == 3 && rows.iter().all(|r| r.horizon_end_position_l1.is_finite());
    let direction = if rows[0].horizon_end_position_l1 <= rows[1].horizon_end_position_l1 {
        "ODE <= autoregressive"
    } else {
        "ODE > autoregressive"
    };
    verdict(
        ok,
        format!(
            "comparison CSV written with both variants; horizon-end L1 ODE {:.4}, autoregressive {:.4} ({direction}, reported only); {:.1} s",
            rows[0].horizon_end_position_l1,
            rows[1].horizon_end_position_l1,
            start.elapsed().as_secs_f64()
        ),
    )
}

fn c9_variational() -> Verdict {
    let start = Instant::now();
    let mut min_kl = f64::INFINITY;
    for seed in 0..200 {
        let fx = fixture(seed);
        min_kl = min_kl.min(eval(|t| {
            kl_standard_normal(t, t.constant(fx.mu.clone()), t.constant(fx.logvar.clone())).unwrap()
        }));
    }
    let kl_of = |mu: Vec<f64>, lv: Vec<f64>| {
        let n = mu.len();
        eval(|t| {
            kl_standard_normal(
                t,
                t.constant(Tensor::new(&[1, n], mu.clone()).unwrap()),
                t.constant(Tensor::new(&[1, n], lv.clone()).unwrap()),
            )
            .unwrap()
        })
    };
    let closed = kl_of(vec![0.0, 0.0], vec![0.0, 0.0]) == 0.0
        && kl_of(vec![1.0, 0.0], vec![0.0, 0.0]) == 0.5
        && (kl_of(vec![0.0, 0.0], vec![2f64.ln(), 0.0]) - 0.5 * (1.0 - 2f64.ln())).abs() < 1e-15;

    let mut model = tiny_model(Variant::Variational, SolverConfig::rk4(0.05));
    model.zero_parameters("head_logvar");
    model.set_parameter("head_logvar.b", Tensor::full(&[4], -40.0)).unwrap();
    let ctx = random_tensor(&mut rng(12), &[2, 5, 10], -1.0, 1.0);
    let eps = random_tensor(&mut rng(13), &[2, 4], -3.0, 3.0);
    let times = vec![vec![0.1, 0.3, 0.6]; 2];
    let forward = |eps: Option<&Tensor<f64>>| {
        let s = Session::new(model.params(), false);
        let c = s.tape.constant(ctx.clone());
        let fc = model.forward(&s, c, &times, eps, false).unwrap();
        let v = s.tape.value(fc.pred).clone();
        v
    };
    let (noisy, mean) = (forward(Some(&eps)), forward(None));
    let limit = noisy
        .data()
        .iter()
        .zip(mean.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);

    let model = tiny_model(Variant::Variational, SolverConfig::rk4(0.05));
    let loss = LossConfig {
        lambda_latent: 0.3,
        lambda_traj: 0.01,
        ..LossConfig::default()
    };
    let eps = random_tensor(&mut rng(14), &[2, 4], -1.0, 1.0);
    let elbo = param_grad_check(&model, &random_batch(15, 2, 5, 3), &loss, Some(&eps), FD_STEP);
    let (fast, time) = within(start.elapsed(), 60.0);
    verdict(
        min_kl >= 0.0 && closed && limit < SIGMA_LIMIT_TOL && elbo < PIPELINE_GRAD_TOL && fast,
        format!(
            "min KL {min_kl:.2e} >= 0; closed forms exact: {closed}; sigma->0 gap {limit:.1e} < {SIGMA_LIMIT_TOL:e}; ELBO grad rel err {elbo:.2e}; {time}"
        ),
    )
}

fn c10_determinism(first: &DeskRun) -> Verdict {
    let second = desk_run();
    let same = second.metrics == first.metrics;
    let horizon_same = second.report.horizon_csv() == first.report.horizon_csv();
    verdict(
        same && horizon_same && metrics_csv(&first.report.frames) == first.metrics,
        format!(
            "metrics CSV ({} bytes) bit-identical on rerun: {same}; horizon CSV identical: {horizon_same}; rerun {:.1} s",
            first.metrics.len(),
            second.elapsed.as_secs_f64()
        ),
    )
}

fn run(id: usize, name: &str, f: impl FnOnce() -> Verdict) -> bool {
    let v = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        verdict(false, format!("panicked: {msg}"))
    });
    println!(
        "criterion {id:>2} [{}] {name}: {}",
        if v.pass { "PASS" } else { "FAIL" },
        v.detail
    );
    v.pass
}

fn main() {
    let mut results = vec![
        run(1, "autodiff gradient checks", c1_autodiff),
        run(2, "solver oracles", c2_solver),
        run(3, "loss and regularizer exactness", c3_losses),
        run(4, "sampling arithmetic", c4_sampling),
        run(5, "rasterizer properties", c5_raster),
    ];
    let desk = catch_unwind(desk_run);
    match &desk {
        Ok(d) => {
            results.push(run(6, "desk-scale extrapolation", || c6_desk(d)));
            results.push(run(7, "out-of-window failure of the timestamp model", || c7_ood(d)));
            results.push(run(8, "ablation harness", || c8_ablation(d)));
        }
        Err(_) => {
            for (id, name) in [
                (6, "desk-scale extrapolation"),
                (7, "out-of-window failure of the timestamp model"),
                (8, "ablation harness"),
            ] {
                results.push(run(id, name, || verdict(false, "desk run failed".into())));
            }
        }
    }
    results.push(run(9, "variational variant", c9_variational));
    match &desk {
        Ok(d) => results.push(run(10, "determinism", || c10_determinism(d))),
        Err(_) => results.push(run(10, "determinism", || verdict(false, "desk run failed".into()))),
    }
    let passed = results.iter().filter(|p| **p).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
