//! Training objective and loop for the forecaster.
//!
//! Total loss: `L_e + s_t (λ_latent R_latent + λ_traj R_traj)`, where `s_t`
//! shrinks the regularizers while a running average of `L_e` is still large.
//! The variational variant replaces `L_e` in the objective by a Gaussian
//! negative log-likelihood plus the KL divergence to a unit-normal prior;
//! `L_e` is still computed and drives the running average.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::checkpoint::{ParamStore, Session};
use crate::error::{Error, Result};
use crate::forecaster::{Forecaster, Variant};
use crate::optim::{cosine_lr, Adam, AdamConfig};
use crate::sampling::{flatten_states, Normalizer, SampleSet};
use crate::scalar::Scalar;
use crate::scene::STATE_DIM;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub lambda_latent: f64,
    pub lambda_traj: f64,
    pub tau: f64,
    pub l_init: f64,
    pub l_end: f64,
    pub ema_decay: f64,
    /// Likelihood standard deviation of the variational objective.
    pub nll_sigma: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_latent: 1e-5,
            lambda_traj: 1e-1,
            tau: 0.5,
            l_init: 0.02,
            l_end: 0.0,
            ema_decay: 0.9,
            nll_sigma: 0.05,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_latent < 0.0 || self.lambda_traj < 0.0 {
            return Err(Error::Invalid("regularizer weights must be non-negative".into()));
        }
        if !(self.tau > 0.0) || !(self.l_init > self.l_end) {
            return Err(Error::Invalid("need τ > 0 and L_init > L_end".into()));
        }
        if !(0.0..1.0).contains(&self.ema_decay) || !(self.nll_sigma > 0.0) {
            return Err(Error::Invalid("need α ∈ [0, 1) and σ > 0".into()));
        }
        Ok(())
    }
}

/// `exp(−clip((ema − L_end)/(L_init − L_end), 0, 1) / τ)`.
pub fn adaptive_scale(ema: f64, cfg: &LossConfig) -> f64 {
    let r = ((ema - cfg.l_end) / (cfg.l_init - cfg.l_end)).clamp(0.0, 1.0);
    (-r / cfg.tau).exp()
}

/// Running average; the first observation initializes it.
pub fn update_ema(prev: Option<f64>, current: f64, alpha: f64) -> f64 {
    match prev {
        Some(p) => alpha * p + (1.0 - alpha) * current,
        None => current,
    }
}

fn full_const<T: Scalar>(tape: &Tape<T>, shape: &[usize], f: impl Fn(&[usize]) -> f64) -> Var {
    let n: usize = shape.iter().product();
    let mut idx = vec![0usize; shape.len()];
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        data.push(T::lit(f(&idx)));
        for d in (0..shape.len()).rev() {
            idx[d] += 1;
            if idx[d] < shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    tape.constant(Tensor::new(shape, data).unwrap())
}

/// Batch mean of `(1/N) Σ_j ‖pred_j − target_j‖₁` for `[B, N, C]` inputs.
pub fn loss_extrapolation<T: Scalar>(tape: &Tape<T>, pred: Var, target: Var) -> Result<Var> {
    let shape = tape.shape(pred);
    if shape != tape.shape(target) || shape.len() != 3 {
        return Err(Error::shape("loss_extrapolation", &shape, &tape.shape(target)));
    }
    let total = tape.sum(tape.abs(tape.sub(pred, target)?));
    Ok(tape.mul_scalar(total, T::lit(1.0 / (shape[0] * shape[1]) as f64)))
}

/// Batch mean of `(1/(N−1)) Σ_j ‖(f_{j+1} − f_j)/Δt‖²` for field values
/// `[N, B, L]` and per-row spacing `dt[b]`. Zero when `N < 2`.
pub fn reg_latent<T: Scalar>(tape: &Tape<T>, field: Var, dt: &[f64]) -> Result<Var> {
    let shape = tape.shape(field);
    let (n, b) = (shape[0], shape[1]);
    if dt.len() != b {
        return Err(Error::Invalid("one Δt per batch row required".into()));
    }
    if n < 2 {
        return Ok(tape.constant(Tensor::scalar(T::zero())));
    }
    let diff = tape.sub(tape.slice(field, 0, 1, n)?, tape.slice(field, 0, 0, n - 1)?)?;
    let mut dshape = shape.clone();
    dshape[0] = n - 1;
    let inv = full_const(tape, &dshape, |i| 1.0 / dt[i[1]]);
    let rate = tape.mul(diff, inv)?;
    let total = tape.sum(tape.square(rate));
    Ok(tape.mul_scalar(total, T::lit(1.0 / ((n - 1) * b) as f64)))
}

/// `(1/(B·N)) Σ_b Σ_{j=1}^{N−2} ‖(v_{j+1} − v_j)/Δt‖²` with
/// `v_j = (μ_{j+1} − μ_j)/Δt`, on the first three channels of `[B, N, C]`.
/// The divisor is `N`, not the number of summed terms. Zero when `N < 3`.
pub fn reg_traj<T: Scalar>(tape: &Tape<T>, pred: Var, dt: &[f64]) -> Result<Var> {
    let shape = tape.shape(pred);
    let (b, n) = (shape[0], shape[1]);
    if dt.len() != b {
        return Err(Error::Invalid("one Δt per batch row required".into()));
    }
    if n < 3 {
        return Ok(tape.constant(Tensor::scalar(T::zero())));
    }
    let mu = if shape[2] == 3 {
        pred
    } else {
        tape.slice(pred, 2, 0, 3)?
    };
    let vel = tape.sub(tape.slice(mu, 1, 1, n)?, tape.slice(mu, 1, 0, n - 1)?)?;
    let vel = tape.mul(vel, full_const(tape, &[b, n - 1, 3], |i| 1.0 / dt[i[0]]))?;
    let acc = tape.sub(tape.slice(vel, 1, 1, n - 1)?, tape.slice(vel, 1, 0, n - 2)?)?;
    let acc = tape.mul(acc, full_const(tape, &[b, n - 2, 3], |i| 1.0 / dt[i[0]]))?;
    let total = tape.sum(tape.square(acc));
    Ok(tape.mul_scalar(total, T::lit(1.0 / (b * n) as f64)))
}

/// Batch mean of `KL(N(μ, diag σ²) ‖ N(0, I))`.
pub fn kl_standard_normal<T: Scalar>(tape: &Tape<T>, mu: Var, logvar: Var) -> Result<Var> {
    let b = tape.shape(mu)[0];
    let term = tape.add(tape.square(mu), tape.exp(logvar))?;
    let term = tape.sub(term, logvar)?;
    let term = tape.add_scalar(term, -T::one());
    Ok(tape.mul_scalar(tape.sum(term), T::lit(0.5 / b as f64)))
}

/// Batch mean of `Σ_t [‖G − Ĝ‖²/(2σ²) + (C/2) ln(2πσ²)]`.
pub fn nll_gaussian<T: Scalar>(tape: &Tape<T>, pred: Var, target: Var, sigma: f64) -> Result<Var> {
    let shape = tape.shape(pred);
    let (b, n, c) = (shape[0], shape[1], shape[2]);
    let sq = tape.sum(tape.square(tape.sub(pred, target)?));
    let scaled = tape.mul_scalar(sq, T::lit(1.0 / (2.0 * sigma * sigma * b as f64)));
    let constant = (n * c) as f64 * 0.5 * (2.0 * std::f64::consts::PI * sigma * sigma).ln();
    Ok(tape.add_scalar(scaled, T::lit(constant)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_end: f64,
    pub loss: LossConfig,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 512,
            lr: 1e-3,
            lr_end: 1e-6,
            loss: LossConfig::default(),
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub l_e: f64,
    pub r_latent: f64,
    pub r_traj: f64,
    pub s_t: f64,
    pub lr: f64,
}

pub const LOG_HEADER: &str = "step,l_e,r_latent,r_traj,s_t,lr";

impl LogRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.step, self.l_e, self.r_latent, self.r_traj, self.s_t, self.lr
        )
    }
}

pub fn log_to_csv(rows: &[LogRow]) -> String {
    let mut out = String::from(LOG_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{}", r.csv());
    }
    out
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub log: Vec<LogRow>,
    pub steps: usize,
    pub final_ema: f64,
    /// Mean `L_e` of each epoch.
    pub epoch_loss: Vec<f64>,
}

/// Where the loop writes its artifacts; both optional.
#[derive(Clone, Debug, Default)]
pub struct TrainOutputs {
    pub log_csv: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

/// Normalizer fitted to every context state in the dataset.
pub fn fit_normalizer(data: &SampleSet) -> Normalizer {
    Normalizer::fit(data.pairs.iter().flat_map(|p| p.context.iter()))
}

/// Per-batch tensors and metadata.
pub struct Batch<T> {
    pub context: Tensor<T>,
    pub target: Tensor<T>,
    pub rel_times: Vec<Vec<f64>>,
    pub dt: Vec<f64>,
}

pub fn make_batch<T: Scalar>(data: &SampleSet, idx: &[usize], norm: &Normalizer) -> Result<Batch<T>> {
    let (n_c, n_e) = (data.config.n_c, data.config.n_e);
    let mut ctx = Vec::with_capacity(idx.len() * n_c * STATE_DIM);
    let mut tgt = Vec::with_capacity(idx.len() * n_e * STATE_DIM);
    let mut rel_times = Vec::with_capacity(idx.len());
    let mut dt = Vec::with_capacity(idx.len());
    for &i in idx {
        let p = &data.pairs[i];
        let c: Vec<_> = p.context.iter().map(|s| norm.apply(s)).collect();
        let g: Vec<_> = p.target.iter().map(|s| norm.apply(s)).collect();
        ctx.extend(flatten_states(&c).into_iter().map(T::lit));
        tgt.extend(flatten_states(&g).into_iter().map(T::lit));
        let end = p.context_end();
        rel_times.push(p.target_times.iter().map(|t| t - end).collect());
        dt.push(p.dt_target());
    }
    Ok(Batch {
        context: Tensor::new(&[idx.len(), n_c, STATE_DIM], ctx)?,
        target: Tensor::new(&[idx.len(), n_e, STATE_DIM], tgt)?,
        rel_times,
        dt,
    })
}

/// Scalar parts of one batch objective.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub l_e: f64,
    pub r_latent: f64,
    pub r_traj: f64,
    pub total: f64,
}

/// Graph nodes of one batch objective before the regularizers are weighted.
pub struct Objective {
    /// `L_e`, always present for monitoring.
    pub l_e: Var,
    /// Data term: `L_e`, or NLL + KL for the variational variant.
    pub data: Var,
    pub r_latent: Var,
    pub r_traj: Var,
}

impl Objective {
    /// `data + s_t (λ_latent R_latent + λ_traj R_traj)` with `s_t` as a constant.
    pub fn total<T: Scalar>(&self, tape: &Tape<T>, loss: &LossConfig, s_t: f64) -> Result<(Var, LossParts)> {
        let reg = tape.add(
            tape.mul_scalar(self.r_latent, T::lit(loss.lambda_latent * s_t)),
            tape.mul_scalar(self.r_traj, T::lit(loss.lambda_traj * s_t)),
        )?;
        let total = tape.add(self.data, reg)?;
        let parts = LossParts {
            l_e: tape.value(self.l_e).item().as_f64(),
            r_latent: tape.value(self.r_latent).item().as_f64(),
            r_traj: tape.value(self.r_traj).item().as_f64(),
            total: tape.value(total).item().as_f64(),
        };
        Ok((total, parts))
    }
}

/// Records the forward pass and every loss term for one batch.
pub fn batch_objective<T: Scalar>(
    model: &Forecaster<T>,
    s: &Session<T>,
    batch: &Batch<T>,
    loss: &LossConfig,
    eps: Option<&Tensor<T>>,
) -> Result<Objective> {
    let t = &s.tape;
    let ctx = t.constant(batch.context.clone());
    let target = t.constant(batch.target.clone());
    let want_field = loss.lambda_latent > 0.0 && model.config.variant != Variant::Autoregressive;
    let fc = model.forward(s, ctx, &batch.rel_times, eps, want_field)?;
    let l_e = loss_extrapolation(t, fc.pred, target)?;
    let r_traj = reg_traj(t, fc.pred, &batch.dt)?;
    let r_latent = match fc.field {
        Some(f) => reg_latent(t, f, &batch.dt)?,
        None => t.constant(Tensor::scalar(T::zero())),
    };
    let data = match (model.config.variant, fc.logvar) {
        (Variant::Variational, Some(lv)) => {
            let nll = nll_gaussian(t, fc.pred, target, loss.nll_sigma)?;
            t.add(nll, kl_standard_normal(t, fc.z0, lv)?)?
        }
        _ => l_e,
    };
    Ok(Objective {
        l_e,
        data,
        r_latent,
        r_traj,
    })
}

/// Trains `model` in place on shuffled mini-batches.
///
/// The running average of `L_e` is updated with each batch before `s_t` is
/// computed for that batch. A non-finite loss or gradient restores the
/// parameters of the last completed epoch and returns [`Error::NonFinite`].
pub fn train<T: Scalar>(
    model: &mut Forecaster<T>,
    data: &SampleSet,
    cfg: &TrainConfig,
    outputs: &TrainOutputs,
) -> Result<TrainReport> {
    cfg.loss.validate()?;
    if data.is_empty() {
        return Err(Error::Invalid("empty training dataset".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Invalid("batch size must be positive".into()));
    }
    if data.config.n_c != model.config.n_c {
        return Err(Error::Invalid("dataset N_c differs from the model's".into()));
    }
    let norm = model.normalizer;
    let steps_per_epoch = data.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * steps_per_epoch;
    let mut opt = Adam::new(model.params(), cfg.adam.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut report = TrainReport::default();
    let mut ema = None;
    let mut last_good = model.params().clone();
    let mut log_text = format!("{LOG_HEADER}\n");
    let abort =
        |model: &mut Forecaster<T>, last_good: ParamStore<T>, log_text: &str, msg: String| -> Result<TrainReport> {
            *model.params_mut() = last_good;
            if let Some(path) = &outputs.log_csv {
                std::fs::write(path, log_text)?;
            }
            Err(Error::NonFinite(msg))
        };
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = make_batch::<T>(data, chunk, &norm)?;
            let eps = (model.config.variant == Variant::Variational).then(|| {
                let n = chunk.len() * model.config.latent;
                let data = (0..n).map(|_| T::lit(StandardNormal.sample(&mut rng))).collect();
                Tensor::new(&[chunk.len(), model.config.latent], data).unwrap()
            });
            let s = Session::new(model.params(), true);
            let obj = batch_objective(model, &s, &batch, &cfg.loss, eps.as_ref())?;
            let l_e = s.tape.value(obj.l_e).item().as_f64();
            let next_ema = update_ema(ema, l_e, cfg.loss.ema_decay);
            let s_t = adaptive_scale(next_ema, &cfg.loss);
            let (loss, parts) = obj.total(&s.tape, &cfg.loss, s_t)?;
            if !parts.total.is_finite() {
                let msg = format!(
                    "total loss at epoch {epoch}, step {} (L_e = {}, R_latent = {}, R_traj = {}); parameters restored to the last completed epoch",
                    report.steps, parts.l_e, parts.r_latent, parts.r_traj
                );
                return abort(model, last_good, &log_text, msg);
            }
            let mut grads = s.tape.backward(loss)?;
            let grads = s.param_grads(&mut grads);
            if grads.iter().any(|g| !g.all_finite()) {
                let msg = format!(
                    "gradient at epoch {epoch}, step {}; parameters restored to the last completed epoch",
                    report.steps
                );
                return abort(model, last_good, &log_text, msg);
            }
            ema = Some(next_ema);
            let lr = cosine_lr(report.steps, total_steps, cfg.lr, cfg.lr_end);
            opt.step(model.params_mut(), &grads, lr)?;
            let row = LogRow {
                step: report.steps,
                l_e: parts.l_e,
                r_latent: parts.r_latent,
                r_traj: parts.r_traj,
                s_t,
                lr,
            };
            let _ = writeln!(log_text, "{}", row.csv());
            report.log.push(row);
            report.steps += 1;
            epoch_sum += parts.l_e * chunk.len() as f64;
        }
        report.epoch_loss.push(epoch_sum / data.len() as f64);
        last_good = model.params().clone();
        if let Some(path) = &outputs.checkpoint {
            model.save(path)?;
        }
        if let Some(path) = &outputs.log_csv {
            std::fs::write(path, &log_text)?;
        }
    }
    report.final_ema = ema.unwrap_or(f64::NAN);
    Ok(report)
}

/// Writes the per-step log to `path`.
pub fn write_log(path: &Path, rows: &[LogRow]) -> Result<()> {
    std::fs::write(path, log_to_csv(rows))?;
    Ok(())
}
