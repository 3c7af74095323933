use std::path::Path;

use anyhow::{anyhow, Context};
use plotters::prelude::*;
use splatode::pipeline::{FrameMetric, METRICS_HEADER};

pub fn read_metrics(path: &Path) -> anyhow::Result<Vec<FrameMetric>> {
    if !path.exists() {
        return Err(splatode::Error::MissingArtifact(path.to_path_buf()).into());
    }
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(METRICS_HEADER) {
        return Err(splatode::Error::Format(format!("{}: expected header {METRICS_HEADER}", path.display())).into());
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(n, line)| {
            let bad = || splatode::Error::Format(format!("{}: malformed row {}", path.display(), n + 2));
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 5 {
                return Err(bad().into());
            }
            Ok(FrameMetric {
                frame_index: cols[0].parse().map_err(|_| bad())?,
                t: cols[1].parse().map_err(|_| bad())?,
                psnr: cols[2].parse().map_err(|_| bad())?,
                ssim: cols[3].parse().map_err(|_| bad())?,
                variant: cols[4].to_string(),
            })
        })
        .collect()
}

const PALETTE: [RGBColor; 6] = [
    RGBColor(31, 119, 180),
    RGBColor(214, 39, 40),
    RGBColor(44, 160, 44),
    RGBColor(255, 127, 14),
    RGBColor(148, 103, 189),
    RGBColor(127, 127, 127),
];

/// Variants in first-appearance order, each with its `(t, value)` series.
fn series(rows: &[FrameMetric], f: impl Fn(&FrameMetric) -> f64) -> Vec<(String, Vec<(f64, f64)>)> {
    let mut out: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
    for r in rows {
        let pos = match out.iter().position(|(n, _)| *n == r.variant) {
            Some(p) => p,
            None => {
                out.push((r.variant.clone(), Vec::new()));
                out.len() - 1
            }
        };
        out[pos].1.push((r.t, f(r)));
    }
    for (_, pts) in &mut out {
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    }
    out
}

fn padded_range(values: impl Iterator<Item = f64>) -> std::ops::Range<f64> {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return 0.0..1.0;
    }
    let pad = ((hi - lo) * 0.05).max(1e-3);
    (lo - pad)..(hi + pad)
}

/// PSNR and SSIM against time, one line per variant, as a two-panel SVG.
pub fn plot_metrics(rows: &[FrameMetric], out: &Path) -> anyhow::Result<()> {
    if rows.is_empty() {
        return Err(anyhow!("no metric rows to plot"));
    }
    let root = SVGBackend::new(out, (800, 640)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| anyhow!("{e}"))?;
    let panels = root.split_evenly((2, 1));
    let t_range = padded_range(rows.iter().map(|r| r.t));
    let metrics: [(&str, fn(&FrameMetric) -> f64); 2] = [("PSNR (dB)", |r| r.psnr), ("SSIM", |r| r.ssim)];
    for (area, (label, get)) in panels.iter().zip(metrics) {
        let lines = series(rows, get);
        let y_range = padded_range(lines.iter().flat_map(|(_, p)| p.iter().map(|v| v.1)));
        let mut chart = ChartBuilder::on(area)
            .caption(format!("{label} over time"), ("sans-serif", 18))
            .margin(12)
            .x_label_area_size(32)
            .y_label_area_size(56)
            .build_cartesian_2d(t_range.clone(), y_range)
            .map_err(|e| anyhow!("{e}"))?;
        chart
            .configure_mesh()
            .x_desc("t")
            .y_desc(label)
            .draw()
            .map_err(|e| anyhow!("{e}"))?;
        for (i, (name, pts)) in lines.into_iter().enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            chart
                .draw_series(LineSeries::new(pts, color.stroke_width(2)))
                .map_err(|e| anyhow!("{e}"))?
                .label(name)
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2)));
        }
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(|e| anyhow!("{e}"))?;
    }
    root.present().map_err(|e| anyhow!("{e}"))?;
    Ok(())
}
