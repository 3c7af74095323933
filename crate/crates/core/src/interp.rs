//! Canonical-plus-deformation interpolation model.
//!
//! The canonical set is the time-average of the supervising trajectories and
//! stays fixed; a ReLU MLP on frequency-encoded `(t, μ̄)` predicts the 10
//! per-Gaussian offsets. Training regresses the offsets directly against
//! ground-truth states with an L1 loss.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{ParamStore, Session};
use crate::error::{Error, Result};
use crate::nn::{Activation, Mlp};
use crate::optim::{cosine_lr, Adam, AdamConfig};
use crate::scene::{StateVec, STATE_DIM};
use crate::tensor::Tensor;
use crate::trajectory::{TrajectorySet, TrajectorySource};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InterpConfig {
    pub hidden: usize,
    pub layers: usize,
    pub time_octaves: usize,
    pub space_octaves: usize,
    pub epochs: usize,
    /// Frame timestamps per optimizer step (all Gaussians are used each step).
    pub times_per_step: usize,
    pub lr: f64,
    pub lr_end: f64,
    /// Stop once an epoch's mean L1 falls below this value.
    pub threshold: f64,
    pub seed: u64,
}

impl Default for InterpConfig {
    fn default() -> Self {
        Self {
            hidden: 128,
            layers: 3,
            time_octaves: 6,
            space_octaves: 4,
            epochs: 300,
            times_per_step: 8,
            lr: 1e-3,
            lr_end: 1e-5,
            threshold: 1e-4,
            seed: 0,
        }
    }
}

impl InterpConfig {
    pub fn input_dim(&self) -> usize {
        (1 + 2 * self.time_octaves) + 3 * (1 + 2 * self.space_octaves)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Meta {
    config: InterpConfig,
    canonical: Vec<StateVec>,
    window: (f64, f64),
    frozen: bool,
}

#[derive(Clone, Debug)]
pub struct InterpModel {
    pub config: InterpConfig,
    pub canonical: Vec<StateVec>,
    /// Observed window `[t_min, t_max]`.
    pub window: (f64, f64),
    pub frozen: bool,
    store: ParamStore<f64>,
    net: Mlp,
}

#[derive(Clone, Debug, Default)]
pub struct InterpReport {
    pub epochs_run: usize,
    pub steps: usize,
    /// Mean L1 per epoch.
    pub epoch_loss: Vec<f64>,
}

fn encode(out: &mut Vec<f64>, x: f64, octaves: usize) {
    out.push(x);
    for i in 0..octaves {
        let w = (1u64 << i) as f64 * std::f64::consts::PI * x;
        out.push(w.sin());
        out.push(w.cos());
    }
}

impl InterpModel {
    /// Fresh model whose canonical set is the time-mean of `truth`.
    pub fn new(truth: &TrajectorySet, config: InterpConfig) -> Result<Self> {
        let steps = truth.num_steps();
        if steps < 2 || truth.num_gaussians() == 0 {
            return Err(Error::Invalid(
                "interpolation needs at least two frames and one Gaussian".into(),
            ));
        }
        let window = (truth.timestamps()[0], truth.timestamps()[steps - 1]);
        if !(window.0 < window.1) {
            return Err(Error::Invalid("trajectory timestamps must increase".into()));
        }
        let canonical = (0..truth.num_gaussians())
            .map(|k| {
                let mut mean = [0.0; STATE_DIM];
                for i in 0..steps {
                    let st = truth.get(k, i);
                    for d in 0..STATE_DIM {
                        mean[d] += st[d] / steps as f64;
                    }
                }
                mean
            })
            .collect();
        Ok(Self::with_parts(config, canonical, window, false))
    }

    fn with_parts(config: InterpConfig, canonical: Vec<StateVec>, window: (f64, f64), frozen: bool) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let mut dims = vec![config.input_dim()];
        dims.extend(std::iter::repeat_n(config.hidden, config.layers));
        dims.push(STATE_DIM);
        let net = Mlp::new(
            &mut store,
            "deform",
            &dims,
            Activation::Relu,
            Activation::Identity,
            &mut rng,
        );
        // Start from zero offsets so an untrained model reproduces the canonical set.
        let out = store.id(&format!("deform.{}.w", dims.len() - 2)).unwrap();
        store.get_mut(out).data_mut().iter_mut().for_each(|v| *v = 0.0);
        Self {
            config,
            canonical,
            window,
            frozen,
            store,
            net,
        }
    }

    pub fn params(&self) -> &ParamStore<f64> {
        &self.store
    }

    fn features(&self, pairs: &[(usize, f64)]) -> Tensor<f64> {
        let (t0, t1) = self.window;
        let dim = self.config.input_dim();
        let mut data = Vec::with_capacity(pairs.len() * dim);
        for &(k, t) in pairs {
            encode(&mut data, (t - t0) / (t1 - t0), self.config.time_octaves);
            for d in 0..3 {
                encode(&mut data, self.canonical[k][d], self.config.space_octaves);
            }
        }
        Tensor::new(&[pairs.len(), dim], data).unwrap()
    }

    fn predict_pairs(&self, pairs: &[(usize, f64)]) -> Result<Vec<StateVec>> {
        let s = Session::new(&self.store, false);
        let x = s.tape.constant(self.features(pairs));
        let y = self.net.forward(&s, x)?;
        let out = s.tape.value(y);
        let offsets = out.data();
        let states: Vec<StateVec> = pairs
            .iter()
            .enumerate()
            .map(|(r, &(k, _))| std::array::from_fn(|d| self.canonical[k][d] + offsets[r * STATE_DIM + d]))
            .collect();
        if states.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("interpolation output".into()));
        }
        Ok(states)
    }

    /// States of every Gaussian at `t`, restricted to the observed window.
    pub fn query(&self, t: f64) -> Result<Vec<StateVec>> {
        if !(t >= self.window.0 && t <= self.window.1) {
            return Err(Error::Invalid(format!(
                "t = {t} is outside the observed window [{}, {}]; use query_beyond_window to extrapolate deliberately",
                self.window.0, self.window.1
            )));
        }
        self.query_beyond_window(t)
    }

    /// Unchecked query, used only to reproduce out-of-window behaviour.
    pub fn query_beyond_window(&self, t: f64) -> Result<Vec<StateVec>> {
        if !self.frozen {
            return Err(Error::Invalid(
                "interpolation model must be trained and frozen before querying".into(),
            ));
        }
        let pairs: Vec<(usize, f64)> = (0..self.canonical.len()).map(|k| (k, t)).collect();
        self.predict_pairs(&pairs)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = Meta {
            config: self.config.clone(),
            canonical: self.canonical.clone(),
            window: self.window,
            frozen: self.frozen,
        };
        self.store.save(path, Some(&serde_json::to_string(&meta)?))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (store, meta) = ParamStore::<f64>::load(path)?;
        let meta: Meta = serde_json::from_str(
            meta.as_deref()
                .ok_or_else(|| Error::Format("interpolation checkpoint lacks metadata".into()))?,
        )?;
        let mut model = Self::with_parts(meta.config, meta.canonical, meta.window, meta.frozen);
        model.store.load_from(&store)?;
        Ok(model)
    }
}

impl TrajectorySource for InterpModel {
    fn num_gaussians(&self) -> usize {
        self.canonical.len()
    }

    fn window(&self) -> (f64, f64) {
        self.window
    }

    fn states_at(&self, t: f64) -> Result<Vec<StateVec>> {
        self.query(t)
    }
}

/// Fits the deformation network to `truth` and freezes the model. With zero
/// epochs the initialized model is returned unfrozen.
pub fn train_interp(truth: &TrajectorySet, config: InterpConfig) -> Result<(InterpModel, InterpReport)> {
    let mut model = InterpModel::new(truth, config.clone())?;
    let mut report = InterpReport::default();
    if config.epochs == 0 {
        return Ok((model, report));
    }
    let m = truth.num_gaussians();
    let n_t = truth.num_steps();
    let per_step = config.times_per_step.clamp(1, n_t);
    let steps_per_epoch = n_t.div_ceil(per_step);
    let total = config.epochs * steps_per_epoch;
    let mut opt = Adam::new(&model.store, AdamConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed);
    let mut order: Vec<usize> = (0..n_t).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_sum = 0.0;
        for chunk in order.chunks(per_step) {
            let pairs: Vec<(usize, f64)> = chunk
                .iter()
                .flat_map(|&i| (0..m).map(move |k| (k, i)))
                .map(|(k, i)| (k, truth.timestamps()[i]))
                .collect();
            let mut target = Vec::with_capacity(pairs.len() * STATE_DIM);
            for &i in chunk {
                for k in 0..m {
                    let st = truth.get(k, i);
                    target.extend((0..STATE_DIM).map(|d| st[d] - model.canonical[k][d]));
                }
            }
            let s = Session::new(&model.store, true);
            let x = s.tape.constant(model.features(&pairs));
            let y = model.net.forward(&s, x)?;
            let t = s.tape.constant(Tensor::new(&[pairs.len(), STATE_DIM], target)?);
            let diff = s.tape.sub(y, t)?;
            let loss = s.tape.mean(s.tape.abs(diff));
            let value = s.tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::NonFinite(format!(
                    "interpolation loss at epoch {epoch}, step {}",
                    report.steps
                )));
            }
            let mut grads = s.tape.backward(loss)?;
            let grads = s.param_grads(&mut grads);
            let lr = cosine_lr(report.steps, total, config.lr, config.lr_end);
            opt.step(&mut model.store, &grads, lr)?;
            report.steps += 1;
            epoch_sum += value * chunk.len() as f64;
        }
        let mean = epoch_sum / n_t as f64;
        report.epoch_loss.push(mean);
        report.epochs_run = epoch + 1;
        if mean < config.threshold {
            break;
        }
    }
    model.frozen = true;
    Ok((model, report))
}
