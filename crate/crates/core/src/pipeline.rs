//! End-to-end desk-scale experiment: synthetic scene → interpolation model →
//! sampled training pairs → forecaster → extrapolation metrics.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forecaster::{Forecaster, ForecasterConfig, Variant};
use crate::interp::{train_interp, InterpConfig, InterpModel, InterpReport};
use crate::ode::SolverConfig;
use crate::raster::{self, Image};
use crate::sampling::{build_dataset, final_context, SampleSet, SamplerConfig};
use crate::scalar::Scalar;
use crate::scene::{generate_dataset, norm3, preset_scene, Preset, PresetConfig, SceneDataset, SceneSpec, StateVec};
use crate::training::{fit_normalizer, train, LossConfig, TrainConfig, TrainOutputs, TrainReport};
use crate::trajectory::{TrajectorySet, TrajectorySource};

/// Which trajectories feed the sampler.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceKind {
    /// The trained interpolation model.
    Interp,
    /// Analytic ground truth restricted to the observed window.
    Analytic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub preset: Preset,
    pub gaussians: usize,
    pub frames: usize,
    pub split: f64,
    pub scene: PresetConfig,
    pub scene_seed: u64,
    pub interp: InterpConfig,
    pub source: SourceKind,
    pub sampler: SamplerConfig,
    pub model: ForecasterConfig,
    pub train: TrainConfig,
    /// Number of evenly spaced evaluation times after the observed window.
    pub horizon_steps: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            preset: Preset::Circular,
            gaussians: 128,
            frames: 100,
            split: 0.8,
            scene: PresetConfig::default(),
            scene_seed: 0,
            interp: InterpConfig::default(),
            source: SourceKind::Interp,
            sampler: SamplerConfig::default(),
            model: ForecasterConfig::default(),
            train: TrainConfig::default(),
            horizon_steps: 10,
        }
    }
}

impl ExperimentConfig {
    /// Reduced sizes that finish the circular extrapolation run on one CPU
    /// core in a few minutes. The context window is shortened so that an
    /// 80-frame observed window still yields a dense grid of start times,
    /// and the trajectory-smoothness weight is off because on a fast orbit
    /// the raw acceleration penalty swamps the data term.
    pub fn desk() -> Self {
        Self {
            interp: InterpConfig {
                epochs: 150,
                ..InterpConfig::default()
            },
            sampler: SamplerConfig {
                t_c: 0.4,
                t0_stride: Some(0.0275),
                ..SamplerConfig::default()
            },
            model: ForecasterConfig {
                d_model: 32,
                heads: 4,
                layers: 1,
                latent: 32,
                ode_hidden: 64,
                dec_hidden: 64,
                solver: SolverConfig::default(),
                ..ForecasterConfig::default()
            },
            train: TrainConfig {
                epochs: 40,
                batch_size: 16,
                lr: 1e-3,
                loss: LossConfig {
                    lambda_traj: 0.0,
                    ..LossConfig::default()
                },
                ..TrainConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.scene_seed = seed;
        self.interp.seed = seed;
        self.model.seed = seed;
        self.train.seed = seed;
        self
    }
}

/// Restricts another source to a sub-window.
pub struct Windowed<'a> {
    pub inner: &'a dyn TrajectorySource,
    pub window: (f64, f64),
}

impl TrajectorySource for Windowed<'_> {
    fn num_gaussians(&self) -> usize {
        self.inner.num_gaussians()
    }

    fn window(&self) -> (f64, f64) {
        self.window
    }

    fn states_at(&self, t: f64) -> Result<Vec<StateVec>> {
        if !(t >= self.window.0 && t <= self.window.1) {
            return Err(Error::Invalid(format!(
                "t = {t} outside [{}, {}]",
                self.window.0, self.window.1
            )));
        }
        self.inner.states_at(t)
    }
}

/// Everything the forecaster variants share.
pub struct Prepared {
    pub config: ExperimentConfig,
    pub spec: SceneSpec,
    pub data: SceneDataset,
    pub interp: InterpModel,
    pub interp_report: InterpReport,
    pub samples: SampleSet,
    /// Contexts ending at the last observed time, one per Gaussian.
    pub final_contexts: Vec<Vec<StateVec>>,
    pub t_split: f64,
}

impl Prepared {
    /// Evenly spaced evaluation times in `(t_split, t_max]`.
    pub fn horizon_times(&self) -> Vec<f64> {
        let n = self.config.horizon_steps;
        let span = self.spec.t_max - self.t_split;
        (1..=n).map(|j| self.t_split + span * j as f64 / n as f64).collect()
    }

    pub fn eval_frames(&self) -> impl Iterator<Item = &crate::scene::Frame> {
        self.data.frames.iter().filter(|f| f.split == crate::scene::Split::Eval)
    }

    /// Mean distance of the ground-truth centers from the scene centroid at `t_split`.
    pub fn mean_radius(&self) -> Result<f64> {
        let st = self.spec.states_at(self.t_split)?;
        let n = st.len() as f64;
        let c: [f64; 3] = std::array::from_fn(|d| st.iter().map(|s| s[d]).sum::<f64>() / n);
        Ok(st
            .iter()
            .map(|s| norm3([s[0] - c[0], s[1] - c[1], s[2] - c[2]]))
            .sum::<f64>()
            / n)
    }
}

pub fn prepare(config: &ExperimentConfig) -> Result<Prepared> {
    let spec = preset_scene(config.preset, config.gaussians, config.scene_seed, &config.scene)?;
    let data = generate_dataset(&spec, config.frames, config.split)?;
    let train_times = data.truth.timestamps()[..data.n_train].to_vec();
    let observed = TrajectorySet::from_source(&spec, train_times)?;
    let (interp, interp_report) = train_interp(&observed, config.interp.clone())?;
    let window = (spec.t_min, data.t_split);
    let analytic = Windowed { inner: &spec, window };
    let source: &dyn TrajectorySource = match config.source {
        SourceKind::Interp => &interp,
        SourceKind::Analytic => &analytic,
    };
    let samples = build_dataset(source, &config.sampler)?;
    let final_contexts = final_context(source, &config.sampler)?.contexts;
    Ok(Prepared {
        config: config.clone(),
        t_split: data.t_split,
        spec,
        data,
        interp,
        interp_report,
        samples,
        final_contexts,
    })
}

pub fn train_variant<T: Scalar>(
    prep: &Prepared,
    variant: Variant,
    outputs: &TrainOutputs,
) -> Result<(Forecaster<T>, TrainReport)> {
    let cfg = ForecasterConfig {
        variant,
        n_c: prep.config.sampler.n_c,
        ..prep.config.model.clone()
    };
    let mut model = Forecaster::<T>::new(cfg, fit_normalizer(&prep.samples))?;
    let report = train(&mut model, &prep.samples, &prep.config.train, outputs)?;
    Ok((model, report))
}

/// Predicted states of every Gaussian at absolute times `times > t_split`.
///
/// The autoregressive variant only produces values on its own step grid, so
/// `times` must then be the evenly spaced horizon grid.
pub fn forecast_states<T: Scalar>(prep: &Prepared, model: &Forecaster<T>, times: &[f64]) -> Result<Vec<Vec<StateVec>>> {
    let rel: Vec<f64> = times.iter().map(|t| t - prep.t_split).collect();
    let per_gaussian = model.predict(&prep.final_contexts, &rel, 256)?;
    Ok((0..times.len())
        .map(|j| per_gaussian.iter().map(|row| row[j]).collect())
        .collect())
}

/// Mean over Gaussians of the L1 distance between predicted and true centers.
pub fn position_l1(pred: &[StateVec], truth: &[StateVec]) -> f64 {
    let n = pred.len().max(1) as f64;
    pred.iter()
        .zip(truth)
        .map(|(p, g)| (0..3).map(|d| (p[d] - g[d]).abs()).sum::<f64>())
        .sum::<f64>()
        / n
}

#[derive(Clone, Debug)]
pub struct FrameMetric {
    pub frame_index: usize,
    pub t: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub variant: String,
}

pub const METRICS_HEADER: &str = "frame_index,t,psnr,ssim,variant";

pub fn metrics_csv(rows: &[FrameMetric]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{},{}", r.frame_index, r.t, r.psnr, r.ssim, r.variant);
    }
    out
}

pub fn render_states(spec: &SceneSpec, states: &[StateVec], camera: usize) -> Result<Image> {
    let cam = spec
        .cameras
        .get(camera)
        .ok_or_else(|| Error::Invalid(format!("no camera {camera}")))?;
    raster::render(&spec.gaussians, states, cam)
}

#[derive(Clone, Debug)]
pub struct ExtrapolationReport {
    pub horizon_times: Vec<f64>,
    /// Per horizon step, forecast vs analytic truth.
    pub forecast_l1: Vec<f64>,
    /// Per horizon step, interpolation model queried past its window.
    pub timestamp_l1: Vec<f64>,
    pub mean_radius: f64,
    pub frames: Vec<FrameMetric>,
    pub train: TrainReport,
}

impl ExtrapolationReport {
    pub fn mean(values: &[f64]) -> f64 {
        values.iter().sum::<f64>() / values.len().max(1) as f64
    }

    fn mean_metric(&self, variant: &str, f: impl Fn(&FrameMetric) -> f64) -> f64 {
        let v: Vec<f64> = self.frames.iter().filter(|r| r.variant == variant).map(f).collect();
        Self::mean(&v)
    }

    pub fn mean_psnr(&self, variant: &str) -> f64 {
        self.mean_metric(variant, |r| r.psnr)
    }

    pub fn mean_ssim(&self, variant: &str) -> f64 {
        self.mean_metric(variant, |r| r.ssim)
    }

    /// One row per horizon step and variant: `step,t,variant,position_l1`.
    pub fn horizon_csv(&self) -> String {
        let mut out = String::from("step,t,variant,position_l1\n");
        for (j, t) in self.horizon_times.iter().enumerate() {
            let _ = writeln!(out, "{},{},forecast,{}", j + 1, t, self.forecast_l1[j]);
            let _ = writeln!(out, "{},{},timestamp-baseline,{}", j + 1, t, self.timestamp_l1[j]);
        }
        out
    }
}

/// Forecast, timestamp-conditioned and freeze-last-frame comparisons on the
/// held-out part of the scene.
pub fn evaluate<T: Scalar>(prep: &Prepared, model: &Forecaster<T>, train: TrainReport) -> Result<ExtrapolationReport> {
    let horizon = prep.horizon_times();
    let truth: Vec<Vec<StateVec>> = horizon.iter().map(|&t| prep.spec.states_at(t)).collect::<Result<_>>()?;
    let predicted = forecast_states(prep, model, &horizon)?;
    let forecast_l1 = predicted.iter().zip(&truth).map(|(p, g)| position_l1(p, g)).collect();
    let timestamp_l1 = horizon
        .iter()
        .zip(&truth)
        .map(|(&t, g)| Ok(position_l1(&prep.interp.query_beyond_window(t)?, g)))
        .collect::<Result<Vec<_>>>()?;

    let eval: Vec<&crate::scene::Frame> = prep.eval_frames().collect();
    let last_train = prep
        .data
        .frames
        .iter()
        .rfind(|f| f.split == crate::scene::Split::Train)
        .ok_or_else(|| Error::Invalid("no training frames".into()))?;
    let mut frames = Vec::new();
    let image_variants: Vec<(&str, Vec<Vec<StateVec>>)> = if model.config.variant == Variant::Autoregressive {
        Vec::new()
    } else {
        let times: Vec<f64> = eval.iter().map(|f| f.t).collect();
        vec![("forecast", forecast_states(prep, model, &times)?)]
    };
    for (i, f) in eval.iter().enumerate() {
        for (name, states) in &image_variants {
            let img = render_states(&prep.spec, &states[i], f.camera)?;
            frames.push(FrameMetric {
                frame_index: f.index,
                t: f.t,
                psnr: raster::psnr(&img, &f.image)?,
                ssim: raster::ssim(&img, &f.image)?,
                variant: name.to_string(),
            });
        }
        let img = render_states(&prep.spec, &prep.interp.query_beyond_window(f.t)?, f.camera)?;
        frames.push(FrameMetric {
            frame_index: f.index,
            t: f.t,
            psnr: raster::psnr(&img, &f.image)?,
            ssim: raster::ssim(&img, &f.image)?,
            variant: "timestamp-baseline".into(),
        });
        frames.push(FrameMetric {
            frame_index: f.index,
            t: f.t,
            psnr: raster::psnr(&last_train.image, &f.image)?,
            ssim: raster::ssim(&last_train.image, &f.image)?,
            variant: "freeze-last-frame".into(),
        });
    }
    Ok(ExtrapolationReport {
        horizon_times: horizon,
        forecast_l1,
        timestamp_l1,
        mean_radius: prep.mean_radius()?,
        frames,
        train,
    })
}

/// Trains and evaluates one variant; writes artifacts when `out_dir` is given.
pub fn run_extrapolation<T: Scalar>(
    prep: &Prepared,
    variant: Variant,
    out_dir: Option<&Path>,
) -> Result<(Forecaster<T>, ExtrapolationReport)> {
    let outputs = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            TrainOutputs {
                log_csv: Some(dir.join("train_log.csv")),
                checkpoint: Some(dir.join("forecaster.ckpt")),
            }
        }
        None => TrainOutputs::default(),
    };
    let (model, train) = train_variant::<T>(prep, variant, &outputs)?;
    let report = evaluate(prep, &model, train)?;
    if let Some(dir) = out_dir {
        std::fs::write(dir.join("metrics.csv"), metrics_csv(&report.frames))?;
        std::fs::write(dir.join("horizon.csv"), report.horizon_csv())?;
    }
    Ok((model, report))
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub variant: Variant,
    pub mean_position_l1: f64,
    pub horizon_end_position_l1: f64,
    pub final_train_loss: f64,
}

pub const ABLATION_HEADER: &str = "variant,mean_position_l1,horizon_end_position_l1,final_train_l_e";

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = format!("{ABLATION_HEADER}\n");
    for r in rows {
        let name = serde_json::to_value(r.variant)
            .ok()
            .and_then(|v| v.as_str().map(str::to_owned))
            .unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{}",
            name, r.mean_position_l1, r.horizon_end_position_l1, r.final_train_loss
        );
    }
    out
}

/// Horizon errors of an already trained model.
pub fn ablation_row<T: Scalar>(prep: &Prepared, model: &Forecaster<T>, train: &TrainReport) -> Result<AblationRow> {
    let horizon = prep.horizon_times();
    let predicted = forecast_states(prep, model, &horizon)?;
    let l1: Vec<f64> = predicted
        .iter()
        .zip(&horizon)
        .map(|(p, &t)| Ok(position_l1(p, &prep.spec.states_at(t)?)))
        .collect::<Result<_>>()?;
    Ok(AblationRow {
        variant: model.config.variant,
        mean_position_l1: ExtrapolationReport::mean(&l1),
        horizon_end_position_l1: *l1.last().unwrap(),
        final_train_loss: train.epoch_loss.last().copied().unwrap_or(f64::NAN),
    })
}

/// Trains each variant on the same sampled pairs and reports horizon errors.
pub fn run_ablation<T: Scalar>(prep: &Prepared, variants: &[Variant]) -> Result<Vec<AblationRow>> {
    variants
        .iter()
        .map(|&v| {
            let (model, train) = train_variant::<T>(prep, v, &TrainOutputs::default())?;
            ablation_row(prep, &model, &train)
        })
        .collect()
}
