//! Trajectory forecaster: Transformer encoder → latent initial state →
//! autonomous neural ODE → MLP decoder.
//!
//! Inputs are `[B, N_c, 10]` context blocks whose positions have already been
//! normalized (see [`Normalizer`]). Time inside the model is measured from
//! the end of each row's context, so the field itself never sees absolute
//! time.
//!
//! Two alternatives share the encoder and decoder: a variational head that
//! samples the initial state, and an autoregressive variant without the ODE
//! that rolls a fixed-length window forward one prediction at a time.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::checkpoint::{ParamStore, Session};
use crate::error::{Error, Result};
use crate::nn::{Activation, LayerNorm, Linear, Mlp};
use crate::ode::{integrate, OutputTimes, SolverConfig};
use crate::sampling::{flatten_states, unflatten_states, Normalizer};
use crate::scalar::Scalar;
use crate::scene::{StateVec, STATE_DIM};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Deterministic,
    Variational,
    Autoregressive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForecasterConfig {
    pub variant: Variant,
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    /// Feed-forward width as a multiple of `d_model`.
    pub ff_mult: usize,
    pub latent: usize,
    pub ode_hidden: usize,
    /// Linear layers in the vector field.
    pub ode_layers: usize,
    pub dec_hidden: usize,
    /// Linear layers in the decoder.
    pub dec_layers: usize,
    pub n_c: usize,
    pub solver: SolverConfig,
    pub seed: u64,
}

impl Default for ForecasterConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Deterministic,
            d_model: 128,
            heads: 8,
            layers: 5,
            ff_mult: 4,
            latent: 64,
            ode_hidden: 64,
            ode_layers: 4,
            dec_hidden: 128,
            dec_layers: 5,
            n_c: 30,
            solver: SolverConfig::default(),
            seed: 0,
        }
    }
}

impl ForecasterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Invalid("d_model must be a positive multiple of heads".into()));
        }
        if self.latent == 0 || self.n_c < 1 || self.ode_layers < 1 || self.dec_layers < 1 {
            return Err(Error::Invalid("latent, N_c and layer counts must be positive".into()));
        }
        self.solver.validate()
    }
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    ln1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
}

/// Model outputs for one batch.
#[derive(Clone, Debug)]
pub struct Forecast {
    /// `[B, N, 10]` predictions (normalized positions).
    pub pred: Var,
    /// Field values `f(z(t_j))`, `[N, B, latent]`, when requested.
    pub field: Option<Var>,
    /// Initial latent state (or posterior mean), `[B, latent]`.
    pub z0: Var,
    pub logvar: Option<Var>,
    pub solver_steps: usize,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    config: ForecasterConfig,
    normalizer: Normalizer,
}

#[derive(Clone, Debug)]
pub struct Forecaster<T> {
    pub config: ForecasterConfig,
    pub normalizer: Normalizer,
    store: ParamStore<T>,
    pe: Tensor<T>,
    embed: Linear,
    layers: Vec<EncoderLayer>,
    ln_f: LayerNorm,
    head: Linear,
    head_logvar: Option<Linear>,
    field: Mlp,
    decoder: Mlp,
}

/// Sinusoidal position table `[n, d]`.
pub fn positional_encoding<T: Scalar>(n: usize, d: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(n * d);
    for pos in 0..n {
        for i in 0..d {
            let rate = 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let a = pos as f64 / rate;
            data.push(T::lit(if i % 2 == 0 { a.sin() } else { a.cos() }));
        }
    }
    Tensor::new(&[n, d], data).unwrap()
}

impl<T: Scalar> Forecaster<T> {
    pub fn new(config: ForecasterConfig, normalizer: Normalizer) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let d = config.d_model;
        let embed = Linear::new(&mut store, "embed", STATE_DIM, d, &mut rng);
        let layers = (0..config.layers)
            .map(|l| {
                let p = format!("enc.{l}");
                EncoderLayer {
                    ln1: LayerNorm::new(&mut store, &format!("{p}.ln1"), d),
                    q: Linear::new(&mut store, &format!("{p}.q"), d, d, &mut rng),
                    k: Linear::new(&mut store, &format!("{p}.k"), d, d, &mut rng),
                    v: Linear::new(&mut store, &format!("{p}.v"), d, d, &mut rng),
                    o: Linear::new(&mut store, &format!("{p}.o"), d, d, &mut rng),
                    ln2: LayerNorm::new(&mut store, &format!("{p}.ln2"), d),
                    ff1: Linear::new(&mut store, &format!("{p}.ff1"), d, d * config.ff_mult, &mut rng),
                    ff2: Linear::new(&mut store, &format!("{p}.ff2"), d * config.ff_mult, d, &mut rng),
                }
            })
            .collect();
        let ln_f = LayerNorm::new(&mut store, "enc.ln", d);
        let head = Linear::new(&mut store, "head", d, config.latent, &mut rng);
        let head_logvar = (config.variant == Variant::Variational)
            .then(|| Linear::new(&mut store, "head_logvar", d, config.latent, &mut rng));
        let mut dims = vec![config.latent];
        dims.extend(std::iter::repeat_n(config.ode_hidden, config.ode_layers - 1));
        dims.push(config.latent);
        let field = Mlp::new(
            &mut store,
            "ode",
            &dims,
            Activation::Tanh,
            Activation::Identity,
            &mut rng,
        );
        let mut dims = vec![config.latent];
        dims.extend(std::iter::repeat_n(config.dec_hidden, config.dec_layers - 1));
        dims.push(STATE_DIM);
        let decoder = Mlp::new(
            &mut store,
            "dec",
            &dims,
            Activation::Relu,
            Activation::Identity,
            &mut rng,
        );
        Ok(Self {
            pe: positional_encoding(config.n_c, d),
            config,
            normalizer,
            store,
            embed,
            layers,
            ln_f,
            head,
            head_logvar,
            field,
            decoder,
        })
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    /// Sets every parameter whose name starts with `prefix` to zero.
    pub fn zero_parameters(&mut self, prefix: &str) {
        let names: Vec<String> = self.store.names().to_vec();
        for name in names.iter().filter(|n| n.starts_with(prefix)) {
            let id = self.store.id(name).unwrap();
            self.store
                .get_mut(id)
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = T::zero());
        }
    }

    pub fn set_parameter(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let id = self
            .store
            .id(name)
            .ok_or_else(|| Error::Invalid(format!("no parameter named {name}")))?;
        if self.store.get(id).shape() != value.shape() {
            return Err(Error::shape("set_parameter", self.store.get(id).shape(), value.shape()));
        }
        *self.store.get_mut(id) = value;
        Ok(())
    }

    fn attention(&self, s: &Session<T>, layer: &EncoderLayer, h: Var, b: usize, n: usize) -> Result<Var> {
        let t = &s.tape;
        let (d, heads) = (self.config.d_model, self.config.heads);
        let dh = d / heads;
        let split = |x: Var| -> Result<Var> {
            let x = t.reshape(x, &[b, n, heads, dh])?;
            let x = t.permute(x, &[0, 2, 1, 3])?;
            t.reshape(x, &[b * heads, n, dh])
        };
        let q = split(layer.q.forward(s, h)?)?;
        let k = split(layer.k.forward(s, h)?)?;
        let v = split(layer.v.forward(s, h)?)?;
        let scores = t.matmul(q, t.transpose(k)?)?;
        let scores = t.mul_scalar(scores, T::lit(1.0 / (dh as f64).sqrt()));
        let att = t.matmul(t.softmax(scores), v)?;
        let att = t.reshape(att, &[b, heads, n, dh])?;
        let att = t.permute(att, &[0, 2, 1, 3])?;
        let att = t.reshape(att, &[b, n, d])?;
        layer.o.forward(s, att)
    }

    /// Pooled encoder features `[B, d_model]`.
    fn encode_features(&self, s: &Session<T>, ctx: Var) -> Result<Var> {
        let t = &s.tape;
        let shape = t.shape(ctx);
        if shape.len() != 3 || shape[1] != self.config.n_c || shape[2] != STATE_DIM {
            return Err(Error::shape("encode", &shape, &[0, self.config.n_c, STATE_DIM]));
        }
        let (b, n) = (shape[0], shape[1]);
        let mut x = self.embed.forward(s, ctx)?;
        x = t.add(x, t.constant(self.pe.clone()))?;
        for layer in &self.layers {
            let h = layer.ln1.forward(s, x)?;
            x = t.add(x, self.attention(s, layer, h, b, n)?)?;
            let h = layer.ln2.forward(s, x)?;
            let h = t.relu(layer.ff1.forward(s, h)?);
            x = t.add(x, layer.ff2.forward(s, h)?)?;
        }
        let x = self.ln_f.forward(s, x)?;
        t.mean_axis(x, 1)
    }

    /// Initial latent state, or posterior `(μ_z, log σ_z²)` for the variational head.
    pub fn encode(&self, s: &Session<T>, ctx: Var) -> Result<(Var, Option<Var>)> {
        let h = self.encode_features(s, ctx)?;
        let mu = self.head.forward(s, h)?;
        let logvar = match &self.head_logvar {
            Some(l) => Some(l.forward(s, h)?),
            None => None,
        };
        Ok((mu, logvar))
    }

    /// `μ + exp(½ logvar) ⊙ ε`.
    pub fn reparameterize(&self, tape: &Tape<T>, mu: Var, logvar: Var, eps: &Tensor<T>) -> Result<Var> {
        let sigma = tape.exp(tape.mul_scalar(logvar, T::lit(0.5)));
        let noise = tape.mul(sigma, tape.constant(eps.clone()))?;
        tape.add(mu, noise)
    }

    pub fn field(&self, s: &Session<T>, z: Var) -> Result<Var> {
        self.field.forward(s, z)
    }

    pub fn decode(&self, s: &Session<T>, z: Var) -> Result<Var> {
        self.decoder.forward(s, z)
    }

    /// Runs the model on a batch.
    ///
    /// `rel_times[b]` lists the prediction times of row `b` relative to the end
    /// of its context (non-negative, increasing, equal length across rows).
    /// The autoregressive variant ignores the values and predicts one step
    /// per entry. `eps` supplies the reparameterization noise; the posterior
    /// mean is used when it is `None`.
    pub fn forward(
        &self,
        s: &Session<T>,
        ctx: Var,
        rel_times: &[Vec<f64>],
        eps: Option<&Tensor<T>>,
        want_field: bool,
    ) -> Result<Forecast> {
        let t = &s.tape;
        let b = t.shape(ctx)[0];
        if rel_times.len() != b || rel_times.is_empty() {
            return Err(Error::Invalid("one time list per batch row required".into()));
        }
        let n = rel_times[0].len();
        if n == 0 || rel_times.iter().any(|r| r.len() != n) {
            return Err(Error::Invalid(
                "every row needs the same positive number of times".into(),
            ));
        }
        if self.config.variant == Variant::Autoregressive {
            return self.forward_autoregressive(s, ctx, n);
        }
        let (mu, logvar) = self.encode(s, ctx)?;
        let z0 = match (logvar, eps) {
            (Some(lv), Some(e)) => self.reparameterize(t, mu, lv, e)?,
            _ => mu,
        };
        let shared = rel_times.iter().all(|r| r == &rel_times[0]);
        let times = if shared {
            OutputTimes::Shared(&rel_times[0])
        } else {
            OutputTimes::PerRow(rel_times)
        };
        let f = |_: &Tape<T>, z: Var| self.field.forward(s, z);
        let sol = integrate(t, &f, z0, 0.0, times, &self.config.solver)?;
        let latent = self.config.latent;
        let stacked = t.concat(&sol.states, 0)?; // [N·B, L]
        let decoded = self.decoder.forward(s, stacked)?;
        let decoded = t.reshape(decoded, &[n, b, STATE_DIM])?;
        let pred = t.permute(decoded, &[1, 0, 2])?;
        let field = if want_field {
            let fz = self.field.forward(s, stacked)?;
            Some(t.reshape(fz, &[n, b, latent])?)
        } else {
            None
        };
        Ok(Forecast {
            pred,
            field,
            z0: mu,
            logvar,
            solver_steps: sol.accepted,
        })
    }

    /// Rolls the window forward `n_steps` times; output `[B, n_steps, 10]`.
    pub fn forward_autoregressive(&self, s: &Session<T>, ctx: Var, n_steps: usize) -> Result<Forecast> {
        let t = &s.tape;
        let b = t.shape(ctx)[0];
        let n_c = self.config.n_c;
        let mut window = ctx;
        let mut outs = Vec::with_capacity(n_steps);
        let mut first_z = None;
        for _ in 0..n_steps {
            let (z, _) = self.encode(s, window)?;
            first_z.get_or_insert(z);
            let y = self.decoder.forward(s, z)?;
            let y = t.reshape(y, &[b, 1, STATE_DIM])?;
            outs.push(y);
            window = if n_c > 1 {
                t.concat(&[t.slice(window, 1, 1, n_c)?, y], 1)?
            } else {
                y
            };
        }
        Ok(Forecast {
            pred: t.concat(&outs, 1)?,
            field: None,
            z0: first_z.unwrap(),
            logvar: None,
            solver_steps: 0,
        })
    }

    fn context_tensor(&self, contexts: &[Vec<StateVec>]) -> Result<Tensor<T>> {
        let n_c = self.config.n_c;
        let mut data = Vec::with_capacity(contexts.len() * n_c * STATE_DIM);
        for c in contexts {
            if c.len() != n_c {
                return Err(Error::shape("context", &[c.len(), STATE_DIM], &[n_c, STATE_DIM]));
            }
            let normed: Vec<StateVec> = c.iter().map(|st| self.normalizer.apply(st)).collect();
            data.extend(flatten_states(&normed).into_iter().map(T::lit));
        }
        Tensor::new(&[contexts.len(), n_c, STATE_DIM], data)
    }

    /// Predicts raw (denormalized) states for each context at `rel_times`
    /// after its end. Evaluation mode: no noise, posterior mean.
    pub fn predict(&self, contexts: &[Vec<StateVec>], rel_times: &[f64], chunk: usize) -> Result<Vec<Vec<StateVec>>> {
        if rel_times.is_empty() {
            return Err(Error::Invalid("no prediction times".into()));
        }
        if rel_times[0] < 0.0 || rel_times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Invalid(
                "prediction times must be non-negative and strictly increasing".into(),
            ));
        }
        let mut out = Vec::with_capacity(contexts.len());
        for block in contexts.chunks(chunk.max(1)) {
            let s = Session::new(&self.store, false);
            let ctx = s.tape.constant(self.context_tensor(block)?);
            let times = vec![rel_times.to_vec(); block.len()];
            let fc = self.forward(&s, ctx, &times, None, false)?;
            let pred = s.tape.value(fc.pred);
            if !pred.all_finite() {
                return Err(Error::NonFinite("forecast output".into()));
            }
            let flat: Vec<f64> = pred.to_f64_vec();
            let per = rel_times.len() * STATE_DIM;
            for row in flat.chunks_exact(per) {
                out.push(
                    unflatten_states(row)
                        .iter()
                        .map(|st| self.normalizer.invert(st))
                        .collect(),
                );
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = Meta {
            config: self.config.clone(),
            normalizer: self.normalizer,
        };
        self.store.save(path, Some(&serde_json::to_string(&meta)?))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (store, meta) = ParamStore::<T>::load(path)?;
        let meta: Meta = serde_json::from_str(
            meta.as_deref()
                .ok_or_else(|| Error::Format("forecaster checkpoint lacks metadata".into()))?,
        )?;
        let mut model = Self::new(meta.config, meta.normalizer)?;
        model.store.load_from(&store)?;
        Ok(model)
    }
}
