//! Context/target pair construction over every Gaussian and every valid start
//! time, plus the inference-time context that ends at the last observation.
//!
//! For a start time `t0` the context holds `N_c` states on `[t0, t0 + T_c]`
//! (spacing `T_c / (N_c − 1)`), and the target holds `N_e` states on
//! `(t0 + T_c, t_max]` (spacing `T_e / N_e`, `T_e = t_max − t0 − T_c`).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{StateVec, STATE_DIM};
use crate::trajectory::{TrajectorySet, TrajectorySource};

/// Slack used when comparing start times against the valid range.
const GRID_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub n_c: usize,
    pub n_e: usize,
    pub t_c: f64,
    /// Spacing of start times; the context spacing when `None`.
    pub t0_stride: Option<f64>,
    /// Shortest admissible target span; the context spacing when `None`.
    pub min_t_e: Option<f64>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            n_c: 30,
            n_e: 10,
            t_c: 0.6,
            t0_stride: None,
            min_t_e: None,
        }
    }
}

impl SamplerConfig {
    pub fn dt_context(&self) -> f64 {
        self.t_c / (self.n_c - 1) as f64
    }

    pub fn stride(&self) -> f64 {
        self.t0_stride.unwrap_or_else(|| self.dt_context())
    }

    pub fn min_target_span(&self) -> f64 {
        self.min_t_e.unwrap_or_else(|| self.dt_context())
    }

    pub fn validate(&self, window: (f64, f64)) -> Result<()> {
        if self.n_c < 2 || self.n_e < 1 {
            return Err(Error::Invalid("need N_c ≥ 2 and N_e ≥ 1".into()));
        }
        if !(self.t_c > 0.0) || self.t_c >= window.1 - window.0 {
            return Err(Error::Invalid(format!(
                "context span {} must be positive and shorter than the window [{}, {}]",
                self.t_c, window.0, window.1
            )));
        }
        if !(self.stride() > 0.0) || !(self.min_target_span() > 0.0) {
            return Err(Error::Invalid("stride and minimum target span must be positive".into()));
        }
        Ok(())
    }

    /// `t0, t0 + Δ_c, …, t0 + T_c` (last entry exact).
    pub fn context_times(&self, t0: f64) -> Vec<f64> {
        let dt = self.dt_context();
        let mut times: Vec<f64> = (0..self.n_c).map(|i| t0 + i as f64 * dt).collect();
        times[self.n_c - 1] = t0 + self.t_c;
        times
    }

    /// `t_c_end + Δ_e, …, t_max` (last entry exact).
    pub fn target_times(&self, t0: f64, t_max: f64) -> Vec<f64> {
        let end = t0 + self.t_c;
        let dt = (t_max - end) / self.n_e as f64;
        let mut times: Vec<f64> = (1..=self.n_e).map(|j| end + j as f64 * dt).collect();
        times[self.n_e - 1] = t_max;
        times
    }

    /// Start times: the stride grid from `t_min` up to the last valid start,
    /// followed by the last valid start itself when it is not on the grid.
    pub fn t0_grid(&self, window: (f64, f64)) -> Result<Vec<f64>> {
        self.validate(window)?;
        let (t_min, t_max) = window;
        let last = t_max - self.t_c - self.min_target_span();
        if last < t_min - GRID_EPS {
            return Err(Error::Invalid(
                "no valid start time: window too short for T_c plus the minimum target span".into(),
            ));
        }
        let stride = self.stride();
        let mut grid = Vec::new();
        let mut i = 0usize;
        loop {
            let t0 = t_min + i as f64 * stride;
            if t0 > last + GRID_EPS {
                break;
            }
            grid.push(t0.min(last));
            i += 1;
        }
        if (grid.last().copied().unwrap() - last).abs() > GRID_EPS {
            grid.push(last);
        }
        Ok(grid)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplePair {
    pub gaussian_id: usize,
    pub t0: f64,
    pub context: Vec<StateVec>,
    pub context_times: Vec<f64>,
    pub target: Vec<StateVec>,
    pub target_times: Vec<f64>,
}

impl SamplePair {
    pub fn context_end(&self) -> f64 {
        *self.context_times.last().unwrap()
    }

    pub fn target_span(&self) -> f64 {
        *self.target_times.last().unwrap() - self.context_end()
    }

    pub fn dt_target(&self) -> f64 {
        self.target_span() / self.target_times.len() as f64
    }
}

#[derive(Clone, Debug)]
pub struct SampleSet {
    pub config: SamplerConfig,
    pub window: (f64, f64),
    pub pairs: Vec<SamplePair>,
}

impl SampleSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Union of pairs over all Gaussians and all valid start times, ordered by
/// start time and then Gaussian index.
pub fn build_dataset(src: &dyn TrajectorySource, cfg: &SamplerConfig) -> Result<SampleSet> {
    let window = src.window();
    let grid = cfg.t0_grid(window)?;
    let m = src.num_gaussians();
    let mut pairs = Vec::with_capacity(grid.len() * m);
    for &t0 in &grid {
        let context_times = cfg.context_times(t0);
        let target_times = cfg.target_times(t0, window.1);
        let ctx = sample_states(src, &context_times)?;
        let tgt = sample_states(src, &target_times)?;
        for k in 0..m {
            pairs.push(SamplePair {
                gaussian_id: k,
                t0,
                context: ctx.iter().map(|row| row[k]).collect(),
                context_times: context_times.clone(),
                target: tgt.iter().map(|row| row[k]).collect(),
                target_times: target_times.clone(),
            });
        }
    }
    Ok(SampleSet {
        config: cfg.clone(),
        window,
        pairs,
    })
}

fn sample_states(src: &dyn TrajectorySource, times: &[f64]) -> Result<Vec<Vec<StateVec>>> {
    times.iter().map(|&t| src.states_at(t)).collect()
}

/// Context segment of length `N_c` ending exactly at the end of the observed window.
#[derive(Clone, Debug, PartialEq)]
pub struct FinalContext {
    pub times: Vec<f64>,
    /// `[M][N_c]` states.
    pub contexts: Vec<Vec<StateVec>>,
}

pub fn final_context(src: &dyn TrajectorySource, cfg: &SamplerConfig) -> Result<FinalContext> {
    let window = src.window();
    cfg.validate(window)?;
    let t0 = window.1 - cfg.t_c;
    let mut times = cfg.context_times(t0);
    times[cfg.n_c - 1] = window.1;
    let rows = sample_states(src, &times)?;
    let contexts = (0..src.num_gaussians())
        .map(|k| rows.iter().map(|row| row[k]).collect())
        .collect();
    Ok(FinalContext { times, contexts })
}

/// Affine map applied to positions before they enter the forecaster.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub center: [f64; 3],
    pub scale: f64,
}

impl Default for Normalizer {
    fn default() -> Self {
        Self {
            center: [0.0; 3],
            scale: 1.0,
        }
    }
}

impl Normalizer {
    /// Centroid and RMS radius of every position in the given states.
    pub fn fit<'a>(states: impl IntoIterator<Item = &'a StateVec>) -> Self {
        let pts: Vec<[f64; 3]> = states.into_iter().map(|s| [s[0], s[1], s[2]]).collect();
        if pts.is_empty() {
            return Self::default();
        }
        let n = pts.len() as f64;
        let center: [f64; 3] = std::array::from_fn(|d| pts.iter().map(|p| p[d]).sum::<f64>() / n);
        let ms = pts
            .iter()
            .map(|p| (0..3).map(|d| (p[d] - center[d]).powi(2)).sum::<f64>())
            .sum::<f64>()
            / n;
        let scale = if ms.sqrt() > 1e-12 { ms.sqrt() } else { 1.0 };
        Self { center, scale }
    }

    pub fn apply(&self, s: &StateVec) -> StateVec {
        let mut out = *s;
        for d in 0..3 {
            out[d] = (s[d] - self.center[d]) / self.scale;
        }
        out
    }

    pub fn invert(&self, s: &StateVec) -> StateVec {
        let mut out = *s;
        for d in 0..3 {
            out[d] = s[d] * self.scale + self.center[d];
        }
        out
    }
}

#[derive(Serialize, Deserialize)]
struct SidecarEntry {
    gaussian_id: usize,
    t0: f64,
    context_times: Vec<f64>,
    target_times: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    config: SamplerConfig,
    window: (f64, f64),
    samples: Vec<SidecarEntry>,
}

impl SampleSet {
    /// Writes the samples as a trajectory file (one row per sample, context
    /// followed by target, step indices as timestamps) plus a JSON index.
    pub fn save(&self, traj_path: &Path, index_path: &Path) -> Result<()> {
        let n_c = self.config.n_c;
        let steps = n_c + self.config.n_e;
        let mut set = TrajectorySet::new(self.pairs.len(), (0..steps).map(|i| i as f64).collect());
        for (r, p) in self.pairs.iter().enumerate() {
            for (i, st) in p.context.iter().chain(&p.target).enumerate() {
                set.set(r, i, *st);
            }
        }
        set.save(traj_path)?;
        let sidecar = Sidecar {
            config: self.config.clone(),
            window: self.window,
            samples: self
                .pairs
                .iter()
                .map(|p| SidecarEntry {
                    gaussian_id: p.gaussian_id,
                    t0: p.t0,
                    context_times: p.context_times.clone(),
                    target_times: p.target_times.clone(),
                })
                .collect(),
        };
        std::fs::write(index_path, serde_json::to_string(&sidecar)?)?;
        Ok(())
    }

    /// Reads a dataset written by [`SampleSet::save`]; states come back at f32 precision.
    pub fn load(traj_path: &Path, index_path: &Path) -> Result<Self> {
        let set = TrajectorySet::load(traj_path)?;
        if !index_path.exists() {
            return Err(Error::MissingArtifact(index_path.to_path_buf()));
        }
        let sidecar: Sidecar = serde_json::from_str(&std::fs::read_to_string(index_path)?)?;
        let n_c = sidecar.config.n_c;
        if set.num_gaussians() != sidecar.samples.len() || set.num_steps() != n_c + sidecar.config.n_e {
            return Err(Error::Format("dataset index does not match trajectory file".into()));
        }
        let pairs = sidecar
            .samples
            .into_iter()
            .enumerate()
            .map(|(r, e)| {
                let row: Vec<StateVec> = (0..set.num_steps()).map(|i| set.get(r, i)).collect();
                SamplePair {
                    gaussian_id: e.gaussian_id,
                    t0: e.t0,
                    context: row[..n_c].to_vec(),
                    context_times: e.context_times,
                    target: row[n_c..].to_vec(),
                    target_times: e.target_times,
                }
            })
            .collect();
        Ok(Self {
            config: sidecar.config,
            window: sidecar.window,
            pairs,
        })
    }
}

pub(crate) fn flatten_states(rows: &[StateVec]) -> Vec<f64> {
    rows.iter().flat_map(|s| s.iter().copied()).collect::<Vec<_>>()
}

pub(crate) fn unflatten_states(data: &[f64]) -> Vec<StateVec> {
    data.chunks_exact(STATE_DIM).map(|c| c.try_into().unwrap()).collect()
}
