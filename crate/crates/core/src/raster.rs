//! CPU splatting renderer and image-quality metrics.
//!
//! Pixel `(x, y)` is sampled at its center `(x + 0.5, y + 0.5)`. Each
//! Gaussian is projected with the EWA linearization, its 2D covariance is
//! floored by `0.3·I`, and splats are alpha-composited front to back over a
//! black background.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scene::{covariance, mat_mul, quat_normalize, transpose, Camera, CanonicalGaussian, Mat3, StateVec};

pub const NEAR_PLANE: f64 = 0.01;
pub const COV_FLOOR: f64 = 0.3;
/// Squared Mahalanobis radius beyond which a splat contributes nothing (3σ).
pub const CUTOFF_D2: f64 = 9.0;
pub const MIN_TRANSMITTANCE: f64 = 1e-4;
pub const PSNR_CAP: f64 = 99.0;

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// Row-major RGB, three values per pixel in `[0, 1]`.
    pub rgb: Vec<f32>,
}

impl Image {
    pub fn black(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            rgb: vec![0.0; width * height * 3],
        }
    }

    pub fn new(width: usize, height: usize, rgb: Vec<f32>) -> Result<Self> {
        if rgb.len() != width * height * 3 {
            return Err(Error::Invalid(format!(
                "{width}x{height} image needs {} values, got {}",
                width * height * 3,
                rgb.len()
            )));
        }
        if rgb.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Invalid("image values must lie in [0, 1]".into()));
        }
        Ok(Self { width, height, rgb })
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let o = (y * self.width + x) * 3;
        [self.rgb[o], self.rgb[o + 1], self.rgb[o + 2]]
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.rgb.iter().map(|&v| quantize(v)));
        out
    }

    pub fn from_ppm(bytes: &[u8]) -> Result<Self> {
        let bad = || Error::Format("not a binary PPM (P6, maxval 255)".into());
        let mut fields = Vec::new();
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad());
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad())?);
        }
        pos += 1;
        if fields[0] != "P6" || fields[3] != "255" {
            return Err(bad());
        }
        let w: usize = fields[1].parse().map_err(|_| bad())?;
        let h: usize = fields[2].parse().map_err(|_| bad())?;
        let body = bytes.get(pos..).ok_or_else(bad)?;
        if body.len() != w * h * 3 {
            return Err(bad());
        }
        Ok(Self {
            width: w,
            height: h,
            rgb: body.iter().map(|&b| b as f32 / 255.0).collect(),
        })
    }

    pub fn save_ppm(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_ppm())?;
        Ok(())
    }

    pub fn load_ppm(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        Self::from_ppm(&std::fs::read(path)?)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let buf: Vec<u8> = self.rgb.iter().map(|&v| quantize(v)).collect();
        image::save_buffer(
            path,
            &buf,
            self.width as u32,
            self.height as u32,
            image::ColorType::Rgb8,
        )?;
        Ok(())
    }

    /// Writes PNG for a `.png` extension and PPM otherwise.
    pub fn save(&self, path: &Path) -> Result<()> {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("png") => self.save_png(path),
            _ => self.save_ppm(path),
        }
    }
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splat2D {
    pub mean2d: [f64; 2],
    pub cov2d: [[f64; 2]; 2],
    pub depth: f64,
    pub color: [f64; 3],
    pub opacity: f64,
    /// Index of the source Gaussian; breaks depth ties.
    pub index: usize,
    conic: [f64; 3],
    bbox: [f64; 4],
}

impl Splat2D {
    /// Squared Mahalanobis distance of pixel point `p` from the mean.
    pub fn mahalanobis2(&self, p: [f64; 2]) -> f64 {
        let dx = p[0] - self.mean2d[0];
        let dy = p[1] - self.mean2d[1];
        self.conic[0] * dx * dx + 2.0 * self.conic[1] * dx * dy + self.conic[2] * dy * dy
    }

    /// Per-pixel opacity `opacity · exp(-d/2)`, zero outside the 3σ ellipse.
    pub fn alpha_at(&self, p: [f64; 2]) -> f64 {
        let d = self.mahalanobis2(p);
        if d > CUTOFF_D2 {
            0.0
        } else {
            self.opacity * (-0.5 * d).exp()
        }
    }
}

/// Projects one Gaussian; `None` when it lies on or behind the near plane.
pub fn project(g: &CanonicalGaussian, state: &StateVec, index: usize, cam: &Camera) -> Option<Splat2D> {
    let mu = [state[0], state[1], state[2]];
    let pc = cam.to_camera_space(mu);
    let z = pc[2];
    if !(z > NEAR_PLANE) {
        return None;
    }
    let q = quat_normalize([state[3], state[4], state[5], state[6]]).unwrap_or([1.0, 0.0, 0.0, 0.0]);
    let sigma = covariance(q, [state[7], state[8], state[9]]).ok()?;
    let w = &cam.rotation;
    let cov_cam: Mat3 = mat_mul(&mat_mul(w, &sigma), &transpose(w));
    let j = [
        [cam.fx / z, 0.0, -cam.fx * pc[0] / (z * z)],
        [0.0, cam.fy / z, -cam.fy * pc[1] / (z * z)],
    ];
    let mut cov2d = [[0.0; 2]; 2];
    for a in 0..2 {
        for b in 0..2 {
            let mut acc = 0.0;
            for k in 0..3 {
                for l in 0..3 {
                    acc += j[a][k] * cov_cam[k][l] * j[b][l];
                }
            }
            cov2d[a][b] = acc;
        }
    }
    cov2d[0][0] += COV_FLOOR;
    cov2d[1][1] += COV_FLOOR;
    let sym = 0.5 * (cov2d[0][1] + cov2d[1][0]);
    cov2d[0][1] = sym;
    cov2d[1][0] = sym;
    let det = cov2d[0][0] * cov2d[1][1] - sym * sym;
    if !(det > 0.0) || !det.is_finite() {
        return None;
    }
    let conic = [cov2d[1][1] / det, -sym / det, cov2d[0][0] / det];
    let mean2d = [cam.fx * pc[0] / z + cam.cx, cam.fy * pc[1] / z + cam.cy];
    let rx = 3.0 * cov2d[0][0].sqrt();
    let ry = 3.0 * cov2d[1][1].sqrt();
    Some(Splat2D {
        mean2d,
        cov2d,
        depth: z,
        color: [g.c[0], g.c[1], g.c[2]],
        opacity: g.opacity(),
        index,
        conic,
        bbox: [mean2d[0] - rx, mean2d[0] + rx, mean2d[1] - ry, mean2d[1] + ry],
    })
}

/// Projects and sorts front to back, ties broken by index.
pub fn prepare(gaussians: &[CanonicalGaussian], states: &[StateVec], cam: &Camera) -> Result<Vec<Splat2D>> {
    if gaussians.len() != states.len() {
        return Err(Error::Invalid(format!(
            "{} Gaussians but {} states",
            gaussians.len(),
            states.len()
        )));
    }
    let mut splats: Vec<Splat2D> = gaussians
        .iter()
        .zip(states)
        .enumerate()
        .filter_map(|(i, (g, s))| project(g, s, i, cam))
        .collect();
    splats.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.index.cmp(&b.index)));
    Ok(splats)
}

/// Composites sorted splats at one point; returns color and total blending weight.
pub fn composite(splats: &[&Splat2D], p: [f64; 2]) -> ([f64; 3], f64) {
    let mut color = [0.0; 3];
    let mut transmittance = 1.0;
    for s in splats {
        let a = s.alpha_at(p);
        if a <= 0.0 {
            continue;
        }
        let w = a * transmittance;
        for c in 0..3 {
            color[c] += s.color[c] * w;
        }
        transmittance *= 1.0 - a;
        if transmittance < MIN_TRANSMITTANCE {
            break;
        }
    }
    (color, 1.0 - transmittance)
}

/// Renders the scene and the per-pixel accumulated blending weight.
pub fn render_with_weights(
    gaussians: &[CanonicalGaussian],
    states: &[StateVec],
    cam: &Camera,
) -> Result<(Image, Vec<f64>)> {
    cam.validate()?;
    let splats = prepare(gaussians, states, cam)?;
    let (w, h) = (cam.width, cam.height);
    let mut rgb = vec![0f32; w * h * 3];
    let mut weight = vec![0f64; w * h];
    rgb.par_chunks_mut(w * 3)
        .zip(weight.par_chunks_mut(w))
        .enumerate()
        .for_each(|(y, (row, wrow))| {
            let py = y as f64 + 0.5;
            let active: Vec<&Splat2D> = splats.iter().filter(|s| s.bbox[2] <= py && py <= s.bbox[3]).collect();
            if active.is_empty() {
                return;
            }
            let mut local = Vec::with_capacity(active.len());
            for x in 0..w {
                let px = x as f64 + 0.5;
                local.clear();
                local.extend(active.iter().copied().filter(|s| s.bbox[0] <= px && px <= s.bbox[1]));
                if local.is_empty() {
                    continue;
                }
                let (c, acc) = composite(&local, [px, py]);
                for k in 0..3 {
                    row[x * 3 + k] = c[k].clamp(0.0, 1.0) as f32;
                }
                wrow[x] = acc;
            }
        });
    Ok((
        Image {
            width: w,
            height: h,
            rgb,
        },
        weight,
    ))
}

pub fn render(gaussians: &[CanonicalGaussian], states: &[StateVec], cam: &Camera) -> Result<Image> {
    Ok(render_with_weights(gaussians, states, cam)?.0)
}

fn check_dims(a: &Image, b: &Image) -> Result<()> {
    if a.width != b.width || a.height != b.height || a.rgb.len() != b.rgb.len() {
        return Err(Error::shape(
            "image metric",
            &[a.height, a.width, 3],
            &[b.height, b.width, 3],
        ));
    }
    Ok(())
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    check_dims(a, b)?;
    let n = a.rgb.len().max(1) as f64;
    Ok(a.rgb
        .iter()
        .zip(&b.rgb)
        .map(|(x, y)| (*x as f64 - *y as f64).powi(2))
        .sum::<f64>()
        / n)
}

pub fn l1(a: &Image, b: &Image) -> Result<f64> {
    check_dims(a, b)?;
    let n = a.rgb.len().max(1) as f64;
    Ok(a.rgb
        .iter()
        .zip(&b.rgb)
        .map(|(x, y)| (*x as f64 - *y as f64).abs())
        .sum::<f64>()
        / n)
}

/// Peak signal-to-noise ratio for unit-range images, capped at 99 dB.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let m = mse(a, b)?;
    if m < 1e-10 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / m).log10()).min(PSNR_CAP))
}

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size)
        .map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Mean SSIM over valid 11×11 Gaussian windows (σ = 1.5), averaged over channels.
/// Images smaller than the window use a window clamped to the image size.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_dims(a, b)?;
    let (w, h) = (a.width, a.height);
    if w == 0 || h == 0 {
        return Err(Error::Invalid("empty image".into()));
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let (kw, kh) = (11.min(w), 11.min(h));
    let gx = gaussian_window(kw, 1.5);
    let gy = gaussian_window(kh, 1.5);
    let (ow, oh) = (w - kw + 1, h - kh + 1);
    let mut total = 0.0;
    for ch in 0..3 {
        let get = |img: &Image, x: usize, y: usize| img.rgb[(y * w + x) * 3 + ch] as f64;
        let mut sum = 0.0;
        for oy in 0..oh {
            for ox in 0..ow {
                let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for j in 0..kh {
                    for i in 0..kw {
                        let g = gx[i] * gy[j];
                        let u = get(a, ox + i, oy + j);
                        let v = get(b, ox + i, oy + j);
                        mx += g * u;
                        my += g * v;
                        xx += g * u * u;
                        yy += g * v * v;
                        xy += g * u * v;
                    }
                }
                let vx = xx - mx * mx;
                let vy = yy - my * my;
                let cxy = xy - mx * my;
                sum += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            }
        }
        total += sum / (ow * oh) as f64;
    }
    Ok(total / 3.0)
}

pub const DEFAULT_SSIM_WEIGHT: f64 = 0.2;

/// `(1 − λ)·L1 + λ·(1 − SSIM)`.
pub fn combined_loss(a: &Image, b: &Image, lambda: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Invalid("λ must lie in [0, 1]".into()));
    }
    Ok((1.0 - lambda) * l1(a, b)? + lambda * (1.0 - ssim(a, b)?))
}
