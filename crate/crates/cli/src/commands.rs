use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Serialize;
use splatode::forecaster::{Forecaster, ForecasterConfig};
use splatode::interp::{train_interp, InterpModel};
use splatode::pipeline::{
    self, ablation_csv, ablation_row, metrics_csv, render_states, run_extrapolation, train_variant, FrameMetric,
    SourceKind, Windowed,
};
use splatode::raster;
use splatode::sampling::{build_dataset, final_context};
use splatode::scene::{generate_dataset, preset_scene, SceneSpec, Split, StateVec};
use splatode::training::{fit_normalizer, train, TrainOutputs};
use splatode::trajectory::{TrajectorySet, TrajectorySource};
use splatode::Error;

use crate::config::{require_path, CliVariant, RunConfig};
use crate::layout::{self, DatasetMeta, FrameRecord, IndexEntry, SceneDir};
use crate::plot::{plot_metrics, read_metrics};
use crate::{Command, Common, UsageError};

/// Two timestamps closer than this are treated as the same frame.
const TIME_MATCH: f64 = 1e-9;

pub fn run(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::GenerateScene {
            preset,
            gaussians,
            frames,
            split,
            image_size,
            out,
            common,
        } => {
            let mut cfg = load(&common)?;
            let e = &mut cfg.experiment;
            if let Some(p) = preset {
                e.preset = p;
            }
            if let Some(m) = gaussians {
                e.gaussians = m;
            }
            if let Some(n) = frames {
                e.frames = n;
            }
            if let Some(f) = split {
                e.split = f;
            }
            if let Some(s) = image_size {
                e.scene.image_size = s;
            }
            let out = require_path(out, &cfg.out_dir, "out")?;
            generate_scene(&cfg, &out)
        }
        Command::TrainInterp {
            scene,
            out,
            epochs,
            common,
        } => {
            let mut cfg = load(&common)?;
            if let Some(n) = epochs {
                cfg.experiment.interp.epochs = n;
            }
            let scene = require_path(scene, &cfg.scene_path, "scene")?;
            let out = require_path(out, &None, "out")?;
            train_interp_cmd(&cfg, &scene, &out)
        }
        Command::TrainForecast {
            scene,
            interp,
            out,
            variant,
            epochs,
            source,
            common,
        } => {
            let mut cfg = load(&common)?;
            if let Some(v) = variant {
                cfg.variant = v;
            }
            if let Some(n) = epochs {
                cfg.experiment.train.epochs = n;
            }
            if let Some(s) = source {
                cfg.experiment.source = s;
            }
            let scene = require_path(scene, &cfg.scene_path, "scene")?;
            cfg.scene_path = Some(scene.clone());
            let out = require_path(out, &cfg.out_dir, "out")?;
            train_forecast(&cfg, &scene, &interp, &out)
        }
        Command::Extrapolate {
            scene,
            interp,
            forecaster,
            times,
            horizon,
            variant,
            out,
            common,
        } => {
            let scene = scene.ok_or_else(|| UsageError("--scene is required".into()))?;
            let out = out.ok_or_else(|| UsageError("--out is required".into()))?;
            extrapolate(
                &common,
                &scene,
                &interp,
                forecaster.as_deref(),
                times,
                horizon,
                variant,
                &out,
            )
        }
        Command::Render {
            scene,
            traj,
            out,
            camera,
            png,
            common,
        } => {
            let cfg = load(&common)?;
            let scene = require_path(scene, &cfg.scene_path, "scene")?;
            let out = require_path(out, &cfg.out_dir, "out")?;
            render_cmd(&scene, &traj, &out, camera, png)
        }
        Command::Evaluate {
            scene,
            preds,
            freeze_baseline,
            out,
            plot,
            common,
        } => {
            let cfg = load(&common)?;
            let scene = require_path(scene, &cfg.scene_path, "scene")?;
            let out = require_path(out, &cfg.out_dir, "out")?;
            let plot = plot.unwrap_or_else(|| out.with_extension("svg"));
            evaluate_cmd(&scene, &preds, freeze_baseline, &out, &plot)
        }
        Command::Plot { metrics, out } => {
            let mut rows = Vec::new();
            for path in &metrics {
                rows.extend(read_metrics(path)?);
            }
            plot_metrics(&rows, &out)?;
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::Experiment {
            out,
            variant,
            epochs,
            ablation,
            common,
        } => {
            let mut cfg = load(&common)?;
            if let Some(v) = variant {
                cfg.variant = v;
            }
            if let Some(n) = epochs {
                cfg.experiment.train.epochs = n;
            }
            let out = require_path(out, &cfg.out_dir, "out")?;
            experiment(&cfg, &out, ablation)
        }
    }
}

fn load(common: &Common) -> anyhow::Result<RunConfig> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    cfg.resolve_seed(common.seed)?;
    Ok(cfg)
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn generate_scene(cfg: &RunConfig, out: &Path) -> anyhow::Result<()> {
    let e = &cfg.experiment;
    let spec = preset_scene(e.preset, e.gaussians, e.scene_seed, &e.scene)?;
    let data = generate_dataset(&spec, e.frames, e.split)?;
    create_dir(out)?;
    std::fs::write(out.join(layout::SCENE_FILE), spec.to_json()?)?;
    layout::write_json(&out.join(layout::POSES_FILE), &spec.cameras)?;
    data.truth.save(&out.join(layout::TRUTH_FILE))?;

    let mut records = Vec::with_capacity(data.frames.len());
    let mut indices: [Vec<IndexEntry>; 2] = [Vec::new(), Vec::new()];
    for f in &data.frames {
        let (sub, slot) = match f.split {
            Split::Train => ("train", 0),
            Split::Eval => ("eval", 1),
        };
        let dir = out.join("frames").join(sub);
        create_dir(&dir)?;
        let name = format!("{:04}.ppm", f.index);
        f.image.save_ppm(&dir.join(&name))?;
        indices[slot].push(IndexEntry {
            t: f.t,
            camera: f.camera,
            file: PathBuf::from(&name),
        });
        records.push(FrameRecord {
            index: f.index,
            t: f.t,
            camera: f.camera,
            split: f.split,
            file: Path::new("frames").join(sub).join(&name),
        });
    }
    for (sub, index) in ["train", "eval"].iter().zip(&indices) {
        let dir = out.join("frames").join(sub);
        create_dir(&dir)?;
        layout::write_json(&dir.join(layout::INDEX_FILE), index)?;
    }
    layout::write_json(
        &out.join(layout::DATASET_FILE),
        &DatasetMeta {
            n_train: data.n_train,
            t_split: data.t_split,
            split: e.split,
            frames: records,
        },
    )?;
    cfg.save(&out.join("config.json"))?;
    println!(
        "wrote {} Gaussians, {} train + {} eval frames to {}",
        spec.len(),
        data.n_train,
        data.frames.len() - data.n_train,
        out.display()
    );
    Ok(())
}

fn train_interp_cmd(cfg: &RunConfig, scene: &Path, out: &Path) -> anyhow::Result<()> {
    let dir = SceneDir::open(scene)?;
    let observed = dir.observed()?;
    let (model, report) = train_interp(&observed, cfg.experiment.interp.clone())?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    model.save(out)?;
    let mut log = String::from("epoch,mean_l1\n");
    for (i, l) in report.epoch_loss.iter().enumerate() {
        log.push_str(&format!("{},{}\n", i + 1, l));
    }
    std::fs::write(out.with_extension("log.csv"), log)?;
    println!(
        "trained interpolation model for {} epochs (final mean L1 {:.3e}); wrote {}",
        report.epochs_run,
        report.epoch_loss.last().copied().unwrap_or(f64::NAN),
        out.display()
    );
    Ok(())
}

fn load_interp(path: &Path) -> anyhow::Result<InterpModel> {
    let model = InterpModel::load(path)?;
    if !model.frozen {
        return Err(Error::Invalid(format!("{} holds an untrained interpolation model", path.display())).into());
    }
    Ok(model)
}

/// Trajectories the sampler reads: the interpolation model or the analytic
/// scene restricted to the same window.
fn with_source<R>(
    kind: SourceKind,
    interp: &InterpModel,
    spec: &SceneSpec,
    f: impl FnOnce(&dyn TrajectorySource) -> R,
) -> R {
    match kind {
        SourceKind::Interp => f(interp),
        SourceKind::Analytic => f(&Windowed {
            inner: spec,
            window: interp.window,
        }),
    }
}

fn train_forecast(cfg: &RunConfig, scene: &Path, interp_path: &Path, out: &Path) -> anyhow::Result<()> {
    let variant = cfg
        .variant
        .model()
        .ok_or_else(|| UsageError("the timestamp baseline has no forecaster to train".into()))?;
    let dir = SceneDir::open(scene)?;
    let interp = load_interp(interp_path)?;
    let e = &cfg.experiment;
    let samples = with_source(e.source, &interp, &dir.spec, |src| build_dataset(src, &e.sampler))?;
    let model_cfg = ForecasterConfig {
        variant,
        n_c: e.sampler.n_c,
        ..e.model.clone()
    };
    let mut model = Forecaster::<f64>::new(model_cfg, fit_normalizer(&samples))?;
    create_dir(out)?;
    let ckpt = out.join("forecaster.ckpt");
    let outputs = TrainOutputs {
        log_csv: Some(out.join("train_log.csv")),
        checkpoint: Some(ckpt.clone()),
    };
    let report = train(&mut model, &samples, &e.train, &outputs)?;
    model.save(&ckpt)?;
    cfg.save(&out.join("run.json"))?;
    println!(
        "trained {} forecaster on {} pairs for {} steps (final epoch L_e {:.4e}); wrote {}",
        cfg.variant.name(),
        samples.len(),
        report.steps,
        report.epoch_loss.last().copied().unwrap_or(f64::NAN),
        ckpt.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn extrapolate(
    common: &Common,
    scene: &Path,
    interp_path: &Path,
    forecaster: Option<&Path>,
    times: Vec<f64>,
    horizon: Option<usize>,
    variant: Option<CliVariant>,
    out: &Path,
) -> anyhow::Result<()> {
    // A forecaster directory carries the config it was trained with.
    let run_json = forecaster.and_then(|p| p.parent()).map(|d| d.join("run.json"));
    let mut cfg = match (&common.config, &run_json) {
        (None, Some(p)) if p.exists() => layout::read_json::<RunConfig>(p)?,
        _ => RunConfig::load(common.config.as_deref())?,
    };
    cfg.resolve_seed(common.seed)?;
    let dir = SceneDir::open(scene)?;
    let interp = load_interp(interp_path)?;
    let t_split = interp.window.1;
    let times = if times.is_empty() {
        let n = horizon.unwrap_or(cfg.experiment.horizon_steps).max(1);
        let span = dir.spec.t_max - t_split;
        (1..=n).map(|j| t_split + span * j as f64 / n as f64).collect()
    } else {
        times
    };
    if times.iter().any(|&t| !(t >= t_split)) || times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(UsageError(format!(
            "times must be strictly increasing and not before t = {t_split}"
        ))
        .into());
    }
    let variant = match (variant, forecaster) {
        (Some(v), _) => v,
        (None, Some(_)) => CliVariant::Deterministic,
        (None, None) => CliVariant::TimestampBaseline,
    };
    let per_time: Vec<Vec<StateVec>> = match variant.model() {
        None => times
            .iter()
            .map(|&t| interp.query_beyond_window(t))
            .collect::<splatode::Result<_>>()?,
        Some(v) => {
            let path = forecaster.ok_or_else(|| UsageError("--forecaster is required for this variant".into()))?;
            let model = Forecaster::<f64>::load(path)?;
            if model.config.variant != v {
                return Err(UsageError(format!(
                    "{} holds a {:?} forecaster, not {}",
                    path.display(),
                    model.config.variant,
                    variant.name()
                ))
                .into());
            }
            let e = &cfg.experiment;
            let contexts = with_source(e.source, &interp, &dir.spec, |src| final_context(src, &e.sampler))?.contexts;
            let rel: Vec<f64> = times.iter().map(|t| t - t_split).collect();
            let rows = model.predict(&contexts, &rel, 256)?;
            (0..times.len()).map(|j| rows.iter().map(|r| r[j]).collect()).collect()
        }
    };
    let mut set = TrajectorySet::new(interp.canonical.len(), times.clone());
    for (j, states) in per_time.iter().enumerate() {
        for (k, st) in states.iter().enumerate() {
            set.set(k, j, *st);
        }
    }
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    set.save(out)?;
    println!(
        "wrote {} predictions ({}) to {}",
        times.len(),
        variant.name(),
        out.display()
    );
    Ok(())
}

fn render_cmd(scene: &Path, traj_path: &Path, out: &Path, camera: Option<usize>, png: bool) -> anyhow::Result<()> {
    let dir = SceneDir::open(scene)?;
    let traj = TrajectorySet::load(traj_path)?;
    if traj.num_gaussians() != dir.spec.len() {
        return Err(Error::Invalid(format!(
            "trajectory has {} Gaussians but the scene has {}",
            traj.num_gaussians(),
            dir.spec.len()
        ))
        .into());
    }
    let records = dir.dataset().map(|m| m.frames).unwrap_or_default();
    create_dir(out)?;
    let mut index = Vec::with_capacity(traj.num_steps());
    for (j, &t) in traj.timestamps().iter().enumerate() {
        let cam = camera.unwrap_or_else(|| {
            records
                .iter()
                .find(|r| (r.t - t).abs() <= TIME_MATCH)
                .map_or(0, |r| r.camera)
        });
        let img = render_states(&dir.spec, &traj.frame(j), cam)?;
        let name = format!("{j:04}.ppm");
        img.save_ppm(&out.join(&name))?;
        if png {
            img.save_png(&out.join(format!("{j:04}.png")))?;
        }
        index.push(IndexEntry {
            t,
            camera: cam,
            file: name.into(),
        });
    }
    layout::write_json(&out.join(layout::INDEX_FILE), &index)?;
    println!("rendered {} frames to {}", index.len(), out.display());
    Ok(())
}

fn evaluate_cmd(scene: &Path, preds: &[String], freeze: bool, out: &Path, plot: &Path) -> anyhow::Result<()> {
    let dir = SceneDir::open(scene)?;
    let meta = dir.dataset()?;
    let eval: Vec<&FrameRecord> = meta.frames.iter().filter(|r| r.split == Split::Eval).collect();
    let truth: Vec<_> = eval.iter().map(|r| dir.image(r)).collect::<anyhow::Result<_>>()?;

    // Each prediction source yields one image per held-out frame.
    let mut sources: Vec<(String, Vec<raster::Image>)> = Vec::new();
    for spec in preds {
        let (name, path) = spec
            .split_once('=')
            .ok_or_else(|| UsageError(format!("--pred expects NAME=PATH, got {spec:?}")))?;
        let path = Path::new(path);
        let images = if path.is_dir() {
            let entries = layout::read_image_dir(path)?;
            eval.iter()
                .map(|r| {
                    entries
                        .iter()
                        .find(|(e, _)| (e.t - r.t).abs() <= TIME_MATCH)
                        .map(|(_, img)| img.clone())
                        .ok_or_else(|| Error::Invalid(format!("{} has no image at t = {}", path.display(), r.t)).into())
                })
                .collect::<anyhow::Result<Vec<_>>>()?
        } else {
            let traj = TrajectorySet::load(path)?;
            eval.iter()
                .map(|r| {
                    let j = traj
                        .timestamps()
                        .iter()
                        .position(|&t| (t - r.t).abs() <= TIME_MATCH)
                        .ok_or_else(|| Error::Invalid(format!("{} has no state at t = {}", path.display(), r.t)))?;
                    Ok(render_states(&dir.spec, &traj.frame(j), r.camera)?)
                })
                .collect::<anyhow::Result<Vec<_>>>()?
        };
        sources.push((name.to_string(), images));
    }
    if freeze {
        let last = meta
            .frames
            .iter()
            .rfind(|r| r.split == Split::Train)
            .ok_or_else(|| Error::Invalid("dataset has no observed frames".into()))?;
        let img = dir.image(last)?;
        sources.push(("freeze-last-frame".into(), vec![img; eval.len()]));
    }

    let mut rows = Vec::with_capacity(eval.len() * sources.len());
    for (i, r) in eval.iter().enumerate() {
        for (name, images) in &sources {
            rows.push(FrameMetric {
                frame_index: r.index,
                t: r.t,
                psnr: raster::psnr(&images[i], &truth[i])?,
                ssim: raster::ssim(&images[i], &truth[i])?,
                variant: name.clone(),
            });
        }
    }
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    std::fs::write(out, metrics_csv(&rows))?;
    plot_metrics(&rows, plot)?;
    for (name, _) in &sources {
        let (n, p, s) = rows
            .iter()
            .filter(|r| &r.variant == name)
            .fold((0.0, 0.0, 0.0), |(n, p, s), r| (n + 1.0, p + r.psnr, s + r.ssim));
        println!("{name}: mean PSNR {:.2} dB, mean SSIM {:.4}", p / n, s / n);
    }
    println!("wrote {} and {}", out.display(), plot.display());
    Ok(())
}

#[derive(Serialize)]
struct Summary {
    variant: String,
    mean_radius: f64,
    mean_forecast_position_l1: f64,
    mean_timestamp_position_l1: f64,
    forecast_psnr: f64,
    timestamp_psnr: f64,
    freeze_psnr: f64,
    forecast_ssim: f64,
    interp_epochs: usize,
    train_steps: usize,
}

fn experiment(cfg: &RunConfig, out: &Path, ablation: bool) -> anyhow::Result<()> {
    let variant = cfg
        .variant
        .model()
        .ok_or_else(|| UsageError("choose a forecaster variant for the experiment".into()))?;
    create_dir(out)?;
    cfg.save(&out.join("run.json"))?;
    let prep = pipeline::prepare(&cfg.experiment)?;
    prep.interp.save(&out.join("interp.ckpt"))?;
    let (model, report) = run_extrapolation::<f64>(&prep, variant, Some(out))?;
    if !report.frames.is_empty() {
        plot_metrics(&report.frames, &out.join("metrics.svg"))?;
    }
    let summary = Summary {
        variant: cfg.variant.name().into(),
        mean_radius: report.mean_radius,
        mean_forecast_position_l1: pipeline::ExtrapolationReport::mean(&report.forecast_l1),
        mean_timestamp_position_l1: pipeline::ExtrapolationReport::mean(&report.timestamp_l1),
        forecast_psnr: report.mean_psnr("forecast"),
        timestamp_psnr: report.mean_psnr("timestamp-baseline"),
        freeze_psnr: report.mean_psnr("freeze-last-frame"),
        forecast_ssim: report.mean_ssim("forecast"),
        interp_epochs: prep.interp_report.epochs_run,
        train_steps: report.train.steps,
    };
    layout::write_json(&out.join("summary.json"), &summary)?;
    println!(
        "position L1 over the horizon: forecast {:.4} ({:.1}% of radius), timestamp baseline {:.4}",
        summary.mean_forecast_position_l1,
        100.0 * summary.mean_forecast_position_l1 / summary.mean_radius,
        summary.mean_timestamp_position_l1
    );
    println!(
        "mean PSNR: forecast {:.2} dB, timestamp baseline {:.2} dB, freeze-last-frame {:.2} dB",
        summary.forecast_psnr, summary.timestamp_psnr, summary.freeze_psnr
    );
    if ablation {
        let mut rows = vec![ablation_row(&prep, &model, &report.train)?];
        for other in [splatode::forecaster::Variant::Autoregressive] {
            if other != variant {
                let (m, r) = train_variant::<f64>(&prep, other, &TrainOutputs::default())?;
                rows.push(ablation_row(&prep, &m, &r)?);
            }
        }
        std::fs::write(out.join("ablation.csv"), ablation_csv(&rows))?;
        for r in &rows {
            println!(
                "{:?}: mean position L1 {:.4}, horizon-end {:.4}",
                r.variant, r.mean_position_l1, r.horizon_end_position_l1
            );
        }
    }
    println!("wrote artifacts to {}", out.display());
    Ok(())
}
