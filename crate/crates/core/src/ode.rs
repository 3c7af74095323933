//! Explicit Runge–Kutta integration of autonomous ODEs `ż = f(z)` on a [`Tape`].
//!
//! Every stage is recorded on the tape, so gradients flow through the
//! unrolled steps. Step-size control (accept/reject, next step) is computed
//! from plain values and is not differentiated.
//!
//! Batching contract: `z0` of shape `[B, d]` is integrated as one system.
//! The adaptive step is shared by all rows and the error norm is the RMS
//! over the whole batch. Rows may request different output times; each is
//! served by the dense interpolant of the step that contains it.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Rk4,
    Dopri5,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub method: Method,
    pub rtol: f64,
    pub atol: f64,
    /// First trial step for dopri5 (heuristic when `None`); fixed step for rk4.
    pub initial_step: Option<f64>,
    pub max_steps: usize,
    pub safety: f64,
    pub min_factor: f64,
    pub max_factor: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            method: Method::Dopri5,
            rtol: 1e-3,
            atol: 1e-4,
            initial_step: None,
            max_steps: 10_000,
            safety: 0.9,
            min_factor: 0.1,
            max_factor: 5.0,
        }
    }
}

impl SolverConfig {
    pub fn rk4(step: f64) -> Self {
        Self {
            method: Method::Rk4,
            initial_step: Some(step),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rtol > 0.0 && self.atol > 0.0) {
            return Err(Error::Invalid("rtol and atol must be positive".into()));
        }
        if self.max_steps == 0 {
            return Err(Error::Invalid("max_steps must be at least 1".into()));
        }
        if let Some(h) = self.initial_step {
            if !(h > 0.0) {
                return Err(Error::Invalid("initial_step must be positive".into()));
            }
        }
        if !(self.min_factor > 0.0 && self.min_factor <= 1.0 && self.max_factor >= 1.0) {
            return Err(Error::Invalid("step factor bounds must bracket 1".into()));
        }
        Ok(())
    }
}

/// Autonomous vector field evaluated on a tape. `z` has shape `[B, d]` or `[d]`.
pub trait VectorField<T: Scalar> {
    fn eval(&self, tape: &Tape<T>, z: Var) -> Result<Var>;
}

impl<T: Scalar, F> VectorField<T> for F
where
    F: Fn(&Tape<T>, Var) -> Result<Var>,
{
    fn eval(&self, tape: &Tape<T>, z: Var) -> Result<Var> {
        self(tape, z)
    }
}

/// Requested output times.
#[derive(Clone, Copy, Debug)]
pub enum OutputTimes<'a> {
    /// The same times for every row.
    Shared(&'a [f64]),
    /// One list per row; all lists have equal length.
    PerRow(&'a [Vec<f64>]),
}

#[derive(Debug)]
pub struct Solution {
    /// One state per output index, each with the shape of `z0`.
    pub states: Vec<Var>,
    pub accepted: usize,
    pub rejected: usize,
    pub evaluations: usize,
}

struct Plan {
    rows: usize,
    width: usize,
    n_out: usize,
    times: Vec<Vec<f64>>, // [row][j]
    shared: bool,
}

impl Plan {
    fn time(&self, row: usize, j: usize) -> f64 {
        if self.shared {
            self.times[0][j]
        } else {
            self.times[row][j]
        }
    }

    fn t_end(&self) -> f64 {
        self.times
            .iter()
            .filter_map(|r| r.last().copied())
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

fn plan(shape: &[usize], t0: f64, times: OutputTimes<'_>) -> Result<Plan> {
    let (rows, width) = match shape.len() {
        1 => (1, shape[0]),
        2 => (shape[0], shape[1]),
        _ => return Err(Error::shape("integrate", shape, &[])),
    };
    let (lists, shared): (Vec<Vec<f64>>, bool) = match times {
        OutputTimes::Shared(ts) => (vec![ts.to_vec()], true),
        OutputTimes::PerRow(rs) => {
            if rs.len() != rows {
                return Err(Error::Invalid(format!("{} time lists for {rows} rows", rs.len())));
            }
            (rs.to_vec(), false)
        }
    };
    let n_out = lists[0].len();
    if n_out == 0 {
        return Err(Error::Invalid("no output times requested".into()));
    }
    for ts in &lists {
        if ts.len() != n_out {
            return Err(Error::Invalid("rows request different numbers of outputs".into()));
        }
        if ts.iter().any(|t| !t.is_finite()) {
            return Err(Error::Invalid("output times must be finite".into()));
        }
        if ts[0] < t0 {
            return Err(Error::Invalid(format!("output time {} precedes t0 = {t0}", ts[0])));
        }
        if ts.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Invalid("output times must be strictly increasing".into()));
        }
    }
    Ok(Plan {
        rows,
        width,
        n_out,
        times: lists,
        shared,
    })
}

/// Scalar coefficient for a term: either one value for all rows or one per row.
enum Coef {
    All(f64),
    Rows(Vec<f64>),
}

/// `Σ coef_i · term_i` recorded on the tape.
fn combine<T: Scalar>(tape: &Tape<T>, shape: &[usize], width: usize, terms: &[(Var, Coef)]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for (v, c) in terms {
        let scaled = match c {
            Coef::All(x) if *x == 0.0 => continue,
            Coef::All(x) if *x == 1.0 => *v,
            Coef::All(x) => tape.mul_scalar(*v, T::lit(*x)),
            Coef::Rows(rs) => {
                if rs.iter().all(|&x| x == 0.0) {
                    continue;
                }
                let data = rs.iter().flat_map(|&x| std::iter::repeat_n(T::lit(x), width)).collect();
                let k = tape.constant(Tensor::new(shape, data)?);
                tape.mul(*v, k)?
            }
        };
        acc = Some(match acc {
            Some(a) => tape.add(a, scaled)?,
            None => scaled,
        });
    }
    match acc {
        Some(a) => Ok(a),
        None => Ok(tape.constant(Tensor::zeros(shape))),
    }
}

fn check_finite<T: Scalar>(tape: &Tape<T>, v: Var, what: &str) -> Result<()> {
    if tape.value(v).all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{what} produced a non-finite value")))
    }
}

fn rms(vals: impl Iterator<Item = f64>, n: usize) -> f64 {
    (vals.map(|v| v * v).sum::<f64>() / n as f64).sqrt()
}

/// Integrates `ż = f(z)` from `(t0, z0)` and returns states at the requested times.
pub fn integrate<T: Scalar, F: VectorField<T> + ?Sized>(
    tape: &Tape<T>,
    f: &F,
    z0: Var,
    t0: f64,
    times: OutputTimes<'_>,
    cfg: &SolverConfig,
) -> Result<Solution> {
    cfg.validate()?;
    let shape = tape.shape(z0);
    let plan = plan(&shape, t0, times)?;
    check_finite(tape, z0, "initial state")?;
    match cfg.method {
        Method::Rk4 => rk4(tape, f, z0, t0, &plan, &shape, cfg),
        Method::Dopri5 => dopri5(tape, f, z0, t0, &plan, &shape, cfg),
    }
}

/// Adds `contrib` into `slot`.
fn accumulate<T: Scalar>(tape: &Tape<T>, slot: &mut Option<Var>, contrib: Var) -> Result<()> {
    *slot = Some(match *slot {
        Some(prev) => tape.add(prev, contrib)?,
        None => contrib,
    });
    Ok(())
}

/// Rows whose output `j` equals `t0` exactly take `z0` directly.
fn seed_initial_outputs<T: Scalar>(
    tape: &Tape<T>,
    z0: Var,
    t0: f64,
    plan: &Plan,
    shape: &[usize],
    outputs: &mut [Option<Var>],
) -> Result<()> {
    let mask: Vec<f64> = (0..plan.rows)
        .map(|r| if plan.time(r, 0) == t0 { 1.0 } else { 0.0 })
        .collect();
    if mask.iter().all(|&m| m == 0.0) {
        return Ok(());
    }
    let coef = if mask.iter().all(|&m| m == 1.0) {
        Coef::All(1.0)
    } else {
        Coef::Rows(mask)
    };
    let c = combine(tape, shape, plan.width, &[(z0, coef)])?;
    accumulate(tape, &mut outputs[0], c)
}

fn rk4<T: Scalar, F: VectorField<T> + ?Sized>(
    tape: &Tape<T>,
    f: &F,
    z0: Var,
    t0: f64,
    plan: &Plan,
    shape: &[usize],
    cfg: &SolverConfig,
) -> Result<Solution> {
    let h0 = cfg.initial_step.unwrap_or(0.01);
    let mut states = Vec::with_capacity(plan.n_out);
    let mut y = z0;
    let mut evaluations = 0;
    let mut steps = 0;
    let width = plan.width;
    for j in 0..plan.n_out {
        let spans: Vec<f64> = (0..plan.rows)
            .map(|r| plan.time(r, j) - if j == 0 { t0 } else { plan.time(r, j - 1) })
            .collect();
        let longest = spans.iter().cloned().fold(0.0, f64::max);
        if longest > 0.0 {
            let n_sub = ((longest / h0) - 1e-9).ceil().max(1.0) as usize;
            let hs: Vec<f64> = spans.iter().map(|s| s / n_sub as f64).collect();
            let uniform = hs.iter().all(|&h| h == hs[0]);
            let coef = |scale: f64| {
                if uniform {
                    Coef::All(hs[0] * scale)
                } else {
                    Coef::Rows(hs.iter().map(|h| h * scale).collect())
                }
            };
            for _ in 0..n_sub {
                steps += 1;
                if steps > cfg.max_steps {
                    return Err(Error::MaxSteps {
                        steps: cfg.max_steps,
                        t: plan.time(0, j),
                        state: tape.value(y).to_f64_vec(),
                    });
                }
                let k1 = f.eval(tape, y)?;
                let y2 = combine(tape, shape, width, &[(y, Coef::All(1.0)), (k1, coef(0.5))])?;
                let k2 = f.eval(tape, y2)?;
                let y3 = combine(tape, shape, width, &[(y, Coef::All(1.0)), (k2, coef(0.5))])?;
                let k3 = f.eval(tape, y3)?;
                let y4 = combine(tape, shape, width, &[(y, Coef::All(1.0)), (k3, coef(1.0))])?;
                let k4 = f.eval(tape, y4)?;
                evaluations += 4;
                y = combine(
                    tape,
                    shape,
                    width,
                    &[
                        (y, Coef::All(1.0)),
                        (k1, coef(1.0 / 6.0)),
                        (k2, coef(1.0 / 3.0)),
                        (k3, coef(1.0 / 3.0)),
                        (k4, coef(1.0 / 6.0)),
                    ],
                )?;
                check_finite(tape, y, "vector field")?;
            }
        }
        states.push(y);
    }
    Ok(Solution {
        states,
        accepted: steps,
        rejected: 0,
        evaluations,
    })
}

// Dormand–Prince 5(4) tableau; the field is autonomous so the nodes c_i are not needed.
const A: [&[f64]; 7] = [
    &[],
    &[1.0 / 5.0],
    &[3.0 / 40.0, 9.0 / 40.0],
    &[44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0],
    &[19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0],
    &[
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
    ],
    &[
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
const B5: [f64; 7] = [
    35.0 / 384.0,
    0.0,
    500.0 / 1113.0,
    125.0 / 192.0,
    -2187.0 / 6784.0,
    11.0 / 84.0,
    0.0,
];
const B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];
// Dense-output coefficients of the 4th-order continuous extension.
const D: [f64; 7] = [
    -12715105075.0 / 11282082432.0,
    0.0,
    87487479700.0 / 32700410799.0,
    -10690763975.0 / 1880347072.0,
    701980252875.0 / 199316789632.0,
    -1453857185.0 / 822651844.0,
    69997945.0 / 29380423.0,
];

/// Coefficients on `(y0, y1, k1..k7)` of the interpolant at fraction `theta` of step `h`.
fn dense_coefficients(theta: f64, h: f64) -> [f64; 9] {
    let t1 = 1.0 - theta;
    let c_diff = theta - theta * t1 + 2.0 * theta * theta * t1;
    let quart = h * theta * theta * t1 * t1;
    let mut c = [0.0; 9];
    c[0] = 1.0 - c_diff;
    c[1] = c_diff;
    for i in 0..7 {
        c[2 + i] = quart * D[i];
    }
    c[2] += h * (theta * t1 - theta * theta * t1);
    c[8] -= h * theta * theta * t1;
    c
}

fn dopri5<T: Scalar, F: VectorField<T> + ?Sized>(
    tape: &Tape<T>,
    f: &F,
    z0: Var,
    t0: f64,
    plan: &Plan,
    shape: &[usize],
    cfg: &SolverConfig,
) -> Result<Solution> {
    let width = plan.width;
    let n = plan.rows * width;
    let mut outputs: Vec<Option<Var>> = vec![None; plan.n_out];
    seed_initial_outputs(tape, z0, t0, plan, shape, &mut outputs)?;

    let t_end = plan.t_end();
    let mut t = t0;
    let mut y = z0;
    let mut k1 = f.eval(tape, y)?;
    check_finite(tape, k1, "vector field")?;
    let mut evaluations = 1;
    let mut h = match cfg.initial_step {
        Some(h) => h,
        None => {
            evaluations += 1;
            initial_step(tape, f, y, k1, cfg)?
        }
    };
    let (mut accepted, mut rejected) = (0usize, 0usize);
    // Output index each row is waiting for next.
    let mut next: Vec<usize> = (0..plan.rows)
        .map(|r| if plan.time(r, 0) == t0 { 1 } else { 0 })
        .collect();

    while t < t_end {
        if accepted + rejected >= cfg.max_steps {
            return Err(Error::MaxSteps {
                steps: cfg.max_steps,
                t,
                state: tape.value(y).to_f64_vec(),
            });
        }
        let clipped = t + h >= t_end;
        if clipped {
            h = t_end - t;
        }
        let mut k = vec![k1];
        for s in 1..7 {
            let mut terms = vec![(y, Coef::All(1.0))];
            terms.extend(A[s].iter().enumerate().map(|(i, &a)| (k[i], Coef::All(h * a))));
            let ys = combine(tape, shape, width, &terms)?;
            if s == 6 {
                // Stage 7 is evaluated at the 5th-order solution (FSAL).
                k.push(ys);
                break;
            }
            k.push(f.eval(tape, ys)?);
            evaluations += 1;
        }
        let y_new = k.pop().unwrap();
        check_finite(tape, y_new, "vector field")?;
        let k7 = f.eval(tape, y_new)?;
        evaluations += 1;
        check_finite(tape, k7, "vector field")?;
        k.push(k7);

        let err_norm = {
            let yv = tape.value(y);
            let ynv = tape.value(y_new);
            let kv: Vec<_> = k.iter().map(|&v| tape.value(v)).collect();
            let scaled = (0..n).map(|i| {
                let e: f64 = (0..7).map(|s| h * (B5[s] - B4[s]) * kv[s].data()[i].as_f64()).sum();
                let sc = cfg.atol + cfg.rtol * yv.data()[i].as_f64().abs().max(ynv.data()[i].as_f64().abs());
                e / sc
            });
            rms(scaled, n)
        };
        if !err_norm.is_finite() {
            return Err(Error::NonFinite("error estimate".into()));
        }

        if err_norm <= 1.0 {
            let t_new = if clipped { t_end } else { t + h };
            for j in 0..plan.n_out {
                let mut rows = vec![0.0; plan.rows];
                let mut any = false;
                let mut thetas = Vec::new();
                for r in 0..plan.rows {
                    if next[r] == j && plan.time(r, j) <= t_new {
                        let theta = if plan.time(r, j) >= t_new {
                            1.0
                        } else {
                            (plan.time(r, j) - t) / h
                        };
                        rows[r] = 1.0;
                        thetas.push((r, theta));
                        any = true;
                    }
                }
                if !any {
                    continue;
                }
                let all_rows = thetas.len() == plan.rows;
                let uniform = all_rows && thetas.iter().all(|&(_, th)| th == thetas[0].1);
                let mut per_term: Vec<Vec<f64>> = vec![vec![0.0; plan.rows]; 9];
                for &(r, theta) in &thetas {
                    let c = dense_coefficients(theta, h);
                    for (term, &cv) in per_term.iter_mut().zip(&c) {
                        term[r] = cv;
                    }
                }
                let vars = [y, y_new, k[0], k[1], k[2], k[3], k[4], k[5], k[6]];
                let terms: Vec<(Var, Coef)> = vars
                    .iter()
                    .zip(per_term)
                    .map(|(&v, coefs)| {
                        let c = if uniform {
                            Coef::All(coefs[0])
                        } else {
                            Coef::Rows(coefs)
                        };
                        (v, c)
                    })
                    .collect();
                let contrib = combine(tape, shape, width, &terms)?;
                accumulate(tape, &mut outputs[j], contrib)?;
                for &(r, _) in &thetas {
                    next[r] += 1;
                }
            }
            t = t_new;
            y = y_new;
            k1 = k[6];
            accepted += 1;
            let factor = if err_norm == 0.0 {
                cfg.max_factor
            } else {
                (cfg.safety * err_norm.powf(-0.2)).clamp(cfg.min_factor, cfg.max_factor)
            };
            h *= factor;
        } else {
            rejected += 1;
            h *= (cfg.safety * err_norm.powf(-0.2)).clamp(cfg.min_factor, 1.0);
        }
    }

    let states = outputs
        .into_iter()
        .map(|o| o.ok_or_else(|| Error::Invalid("output time not reached".into())))
        .collect::<Result<Vec<_>>>()?;
    Ok(Solution {
        states,
        accepted,
        rejected,
        evaluations,
    })
}

/// Starting step from the local scale of the solution (Hairer, Nørsett & Wanner).
fn initial_step<T: Scalar, F: VectorField<T> + ?Sized>(
    tape: &Tape<T>,
    f: &F,
    y0: Var,
    f0: Var,
    cfg: &SolverConfig,
) -> Result<f64> {
    let y = tape.value(y0).to_f64_vec();
    let d = tape.value(f0).to_f64_vec();
    let n = y.len();
    let sc: Vec<f64> = y.iter().map(|v| cfg.atol + cfg.rtol * v.abs()).collect();
    let d0 = rms(y.iter().zip(&sc).map(|(a, s)| a / s), n);
    let d1 = rms(d.iter().zip(&sc).map(|(a, s)| a / s), n);
    let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    let y1: Vec<T> = y.iter().zip(&d).map(|(a, b)| T::lit(a + h0 * b)).collect();
    let y1 = tape.constant(Tensor::new(&tape.shape(y0), y1)?);
    let f1 = tape.value(f.eval(tape, y1)?).to_f64_vec();
    let d2 = rms(f1.iter().zip(&d).zip(&sc).map(|((a, b), s)| (a - b) / s), n) / h0;
    let h1 = if d1.max(d2) <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / d1.max(d2)).powf(0.2)
    };
    Ok((100.0 * h0).min(h1))
}
