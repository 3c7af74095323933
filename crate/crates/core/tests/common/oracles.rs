//! Independent reference implementations used as test oracles.

use rand::Rng;
use splatode::ode::{integrate, OutputTimes, SolverConfig};
use splatode::raster::COV_FLOOR;
use splatode::scene::{sigmoid, Camera, CanonicalGaussian, StateVec};
use splatode::{Result, Tape, Tensor, Var};

use super::{random_tensor, rng};

pub fn decay(tape: &Tape<f64>, z: Var) -> Result<Var> {
    Ok(tape.neg(z))
}

/// (z1, z2)' = (z2, -z1) on a `[1, 2]` state.
pub fn oscillator(tape: &Tape<f64>, z: Var) -> Result<Var> {
    let z1 = tape.slice(z, 1, 0, 1)?;
    let z2 = tape.slice(z, 1, 1, 2)?;
    tape.concat(&[z2, tape.neg(z1)], 1)
}

pub fn solve(
    cfg: &SolverConfig,
    z0: &[f64],
    shape: &[usize],
    t: f64,
    f: fn(&Tape<f64>, Var) -> Result<Var>,
) -> Vec<f64> {
    let tape = Tape::new();
    let z = tape.constant(Tensor::from_f64(shape, z0).unwrap());
    let sol = integrate(&tape, &f, z, 0.0, OutputTimes::Shared(&[t]), cfg).unwrap();
    let v = tape.value(sol.states[0]).to_f64_vec();
    v
}

/// Least-squares slope of log(error) against log(h).
pub fn convergence_exponent(steps: &[f64]) -> f64 {
    let pts: Vec<(f64, f64)> = steps
        .iter()
        .map(|&h| {
            let z = solve(&SolverConfig::rk4(h), &[1.0], &[1], 1.0, decay);
            (h.ln(), (z[0] - (-1.0f64).exp()).abs().ln())
        })
        .collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

// Loop-based reference implementations, indexed explicitly.

pub fn at3(t: &Tensor<f64>, i: usize, j: usize, k: usize) -> f64 {
    let s = t.shape();
    t.data()[(i * s[1] + j) * s[2] + k]
}

pub fn ref_l_e(p: &Tensor<f64>, g: &Tensor<f64>) -> f64 {
    let s = p.shape();
    let mut acc = 0.0;
    for b in 0..s[0] {
        for j in 0..s[1] {
            for c in 0..s[2] {
                acc += (at3(p, b, j, c) - at3(g, b, j, c)).abs();
            }
        }
    }
    acc / (s[0] * s[1]) as f64
}

pub fn ref_r_latent(f: &Tensor<f64>, dt: &[f64]) -> f64 {
    let s = f.shape();
    let (n, b, l) = (s[0], s[1], s[2]);
    if n < 2 {
        return 0.0;
    }
    let mut acc = 0.0;
    for r in 0..b {
        for j in 0..n - 1 {
            for k in 0..l {
                let d = (at3(f, j + 1, r, k) - at3(f, j, r, k)) / dt[r];
                acc += d * d;
            }
        }
    }
    acc / ((n - 1) * b) as f64
}

pub fn ref_r_traj(p: &Tensor<f64>, dt: &[f64]) -> f64 {
    let s = p.shape();
    let (b, n) = (s[0], s[1]);
    if n < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for r in 0..b {
        let h = dt[r];
        for j in 1..n - 1 {
            for c in 0..3 {
                let a = (at3(p, r, j + 1, c) - 2.0 * at3(p, r, j, c) + at3(p, r, j - 1, c)) / (h * h);
                acc += a * a;
            }
        }
    }
    acc / (b * n) as f64
}

pub fn ref_kl(mu: &Tensor<f64>, lv: &Tensor<f64>) -> f64 {
    let b = mu.shape()[0];
    let acc: f64 = mu
        .data()
        .iter()
        .zip(lv.data())
        .map(|(m, v)| m * m + v.exp() - v - 1.0)
        .sum();
    0.5 * acc / b as f64
}

pub fn ref_nll(p: &Tensor<f64>, g: &Tensor<f64>, sigma: f64) -> f64 {
    let s = p.shape();
    let sq: f64 = p.data().iter().zip(g.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    let per_row = (s[1] * s[2]) as f64 * 0.5 * (2.0 * std::f64::consts::PI * sigma * sigma).ln();
    sq / (2.0 * sigma * sigma * s[0] as f64) + per_row
}

pub fn eval(f: impl Fn(&Tape<f64>) -> splatode::Var) -> f64 {
    let tape = Tape::new();
    let v = f(&tape);
    let x = tape.value(v).item();
    x
}

pub struct Fixture {
    pub pred: Tensor<f64>,
    pub target: Tensor<f64>,
    pub field: Tensor<f64>,
    pub mu: Tensor<f64>,
    pub logvar: Tensor<f64>,
    pub dt: Vec<f64>,
    pub sigma: f64,
}

pub fn fixture(seed: u64) -> Fixture {
    let mut r = rng(seed);
    let b = r.random_range(1..5usize);
    let n = r.random_range(1..7usize);
    let c = r.random_range(3..11usize);
    let l = r.random_range(1..5usize);
    Fixture {
        pred: random_tensor(&mut r, &[b, n, c], -2.0, 2.0),
        target: random_tensor(&mut r, &[b, n, c], -2.0, 2.0),
        field: random_tensor(&mut r, &[n, b, l], -2.0, 2.0),
        mu: random_tensor(&mut r, &[b, l], -2.0, 2.0),
        logvar: random_tensor(&mut r, &[b, l], -2.0, 1.0),
        dt: (0..b).map(|_| r.random_range(0.01..0.2)).collect(),
        sigma: r.random_range(0.01..1.0),
    }
}

pub fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12 * b.abs().max(1.0)
}

/// Identity pose looking down +z with the principal point at the image center.
pub fn axis_camera(size: usize, f: f64) -> Camera {
    Camera {
        rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        translation: [0.0; 3],
        fx: f,
        fy: f,
        cx: size as f64 / 2.0,
        cy: size as f64 / 2.0,
        width: size,
        height: size,
    }
}

pub fn isotropic(mu: [f64; 3], sigma: f64, alpha: f64, rgb: [f64; 3]) -> CanonicalGaussian {
    CanonicalGaussian::new(mu, [1.0, 0.0, 0.0, 0.0], [sigma.ln(); 3], alpha, rgb.to_vec()).unwrap()
}

pub fn states(gs: &[CanonicalGaussian]) -> Vec<StateVec> {
    gs.iter().map(|g| g.state()).collect()
}

/// Per-splat opacity at a pixel, written out from the closed-form
/// on-axis covariance rather than through the projection code.
pub fn hand_alpha(alpha_logit: f64, sigma: f64, z: f64, f: f64, d: [f64; 2]) -> f64 {
    let var = (f * sigma / z).powi(2) + COV_FLOOR;
    let m2 = (d[0] * d[0] + d[1] * d[1]) / var;
    if m2 > 9.0 {
        0.0
    } else {
        sigmoid(alpha_logit) * (-0.5 * m2).exp()
    }
}
