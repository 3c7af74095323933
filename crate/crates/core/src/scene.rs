//! Gaussian parameterization, camera model and synthetic dynamic scenes with
//! closed-form ground-truth motion.
//!
//! A time-varying Gaussian state is the 10-vector `(mu[3], q[4], s[3])`:
//! position, rotation quaternion `(w, x, y, z)` and log-scale. Opacity is
//! stored pre-sigmoid and color coefficients are static per Gaussian.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{self, Image};
use crate::trajectory::TrajectorySet;

pub const STATE_DIM: usize = 10;

pub type Vec3 = [f64; 3];
pub type Quat = [f64; 4];
pub type Mat3 = [[f64; 3]; 3];
pub type StateVec = [f64; STATE_DIM];

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn quat_normalize(q: Quat) -> Result<Quat> {
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::Invalid("zero or non-finite quaternion".into()));
    }
    Ok([q[0] / n, q[1] / n, q[2] / n, q[3] / n])
}

/// Hamilton product `a ⊗ b`.
pub fn quat_mul(a: Quat, b: Quat) -> Quat {
    [
        a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
        a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
        a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
        a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0],
    ]
}

pub fn quat_from_axis_angle(axis: Vec3, angle: f64) -> Result<Quat> {
    let a = normalize3(axis)?;
    let (s, c) = (0.5 * angle).sin_cos();
    Ok([c, a[0] * s, a[1] * s, a[2] * s])
}

/// Rotation matrix of a unit quaternion.
pub fn quat_to_matrix(q: Quat) -> Mat3 {
    let [w, x, y, z] = q;
    [
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
        ],
        [
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
        ],
        [
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ]
}

pub fn normalize3(v: Vec3) -> Result<Vec3> {
    let n = norm3(v);
    if !(n > 0.0) {
        return Err(Error::Invalid("zero-length vector".into()));
    }
    Ok([v[0] / n, v[1] / n, v[2] / n])
}

pub fn norm3(v: Vec3) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn mat_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

pub fn transpose(m: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = m[j][i];
        }
    }
    out
}

/// `Σ = R S Sᵀ Rᵀ` with `R` from the (normalized) quaternion and `S = diag(exp(s))`.
pub fn covariance(q: Quat, log_scale: Vec3) -> Result<Mat3> {
    let r = quat_to_matrix(quat_normalize(q)?);
    let var = log_scale.map(|s| (2.0 * s).exp());
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| r[i][k] * var[k] * r[j][k]).sum();
        }
    }
    Ok(out)
}

/// Canonical Gaussian: time-varying part plus static opacity and color.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CanonicalGaussian {
    pub mu: Vec3,
    /// Unit quaternion `(w, x, y, z)`.
    pub q: Quat,
    /// Log of the per-axis scale.
    pub s: Vec3,
    /// Opacity before the sigmoid.
    pub alpha: f64,
    /// Color coefficients, `3 · d_sh` values; the first three are rendered as RGB.
    pub c: Vec<f64>,
}

impl CanonicalGaussian {
    pub fn new(mu: Vec3, q: Quat, s: Vec3, alpha: f64, c: Vec<f64>) -> Result<Self> {
        if c.len() < 3 || !c.len().is_multiple_of(3) {
            return Err(Error::Invalid("color block must hold 3·d_sh values".into()));
        }
        Ok(Self {
            mu,
            q: quat_normalize(q)?,
            s,
            alpha,
            c,
        })
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(self.alpha)
    }

    pub fn rgb(&self) -> Vec3 {
        [self.c[0], self.c[1], self.c[2]]
    }

    pub fn state(&self) -> StateVec {
        pack_state(self.mu, self.q, self.s)
    }
}

pub fn pack_state(mu: Vec3, q: Quat, s: Vec3) -> StateVec {
    [mu[0], mu[1], mu[2], q[0], q[1], q[2], q[3], s[0], s[1], s[2]]
}

/// Time-varying parameters of one Gaussian at time `t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianState {
    pub params: StateVec,
    pub t: f64,
}

impl GaussianState {
    pub fn mu(&self) -> Vec3 {
        [self.params[0], self.params[1], self.params[2]]
    }

    pub fn q(&self) -> Quat {
        [self.params[3], self.params[4], self.params[5], self.params[6]]
    }

    pub fn s(&self) -> Vec3 {
        [self.params[7], self.params[8], self.params[9]]
    }
}

/// Pinhole camera, world→camera rotation and translation (x right, y down, z forward).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub rotation: Mat3,
    pub translation: Vec3,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3, focal: f64, width: usize, height: usize) -> Result<Self> {
        let forward = normalize3([target[0] - eye[0], target[1] - eye[1], target[2] - eye[2]])?;
        let right = normalize3(cross(forward, up))?;
        let down = cross(forward, right);
        let rotation = [right, down, forward];
        let re = mat_vec(&rotation, eye);
        let cam = Self {
            rotation,
            translation: [-re[0], -re[1], -re[2]],
            fx: focal,
            fy: focal,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        let rrt = mat_mul(&self.rotation, &transpose(&self.rotation));
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                if (rrt[i][j] - want).abs() > 1e-9 {
                    return Err(Error::Invalid("camera rotation is not orthonormal".into()));
                }
            }
        }
        if det3(&self.rotation) <= 0.0 {
            return Err(Error::Invalid("camera rotation has negative determinant".into()));
        }
        if self.width == 0 || self.height == 0 || !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::Invalid("camera intrinsics must be positive".into()));
        }
        Ok(())
    }

    pub fn to_camera_space(&self, p: Vec3) -> Vec3 {
        let r = mat_vec(&self.rotation, p);
        [
            r[0] + self.translation[0],
            r[1] + self.translation[1],
            r[2] + self.translation[2],
        ]
    }
}

pub fn det3(m: &Mat3) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// Closed-form motion of one Gaussian.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Motion {
    Static,
    /// `mu(t) = mu0 + v t`.
    Linear {
        velocity: Vec3,
    },
    /// `mu(t) = center + R_axis(ω t + phase) (mu0 − center)`.
    Circular {
        center: Vec3,
        axis: Vec3,
        omega: f64,
        phase: f64,
    },
    /// `mu(t) = center + amplitude ⊙ sin(ω t + phase)`.
    Harmonic {
        center: Vec3,
        amplitude: Vec3,
        omega: f64,
        phase: f64,
    },
    /// `q(t) = q0 ⊗ exp(t ω / 2)` with `ω` in the Gaussian's own frame.
    Spin {
        angular_velocity: Vec3,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub gaussians: Vec<CanonicalGaussian>,
    pub motion: Vec<Motion>,
    pub cameras: Vec<Camera>,
    pub t_min: f64,
    pub t_max: f64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.t_min < self.t_max) {
            return Err(Error::Invalid(format!(
                "degenerate window [{}, {}]",
                self.t_min, self.t_max
            )));
        }
        if self.gaussians.is_empty() {
            return Err(Error::Invalid("scene has no Gaussians".into()));
        }
        if self.gaussians.len() != self.motion.len() {
            return Err(Error::Invalid("one motion descriptor per Gaussian required".into()));
        }
        if self.cameras.is_empty() {
            return Err(Error::Invalid("scene has no cameras".into()));
        }
        for cam in &self.cameras {
            cam.validate()?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: SceneSpec = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Ground-truth states of every Gaussian at `t`.
    pub fn states_at(&self, t: f64) -> Result<Vec<StateVec>> {
        (0..self.len())
            .map(|k| Ok(analytic_state(self, k, t)?.params))
            .collect()
    }

    /// Largest instantaneous speed of any Gaussian center.
    pub fn max_speed(&self) -> f64 {
        self.gaussians
            .iter()
            .zip(&self.motion)
            .map(|(g, m)| match m {
                Motion::Static | Motion::Spin { .. } => 0.0,
                Motion::Linear { velocity } => norm3(*velocity),
                Motion::Circular {
                    center, axis, omega, ..
                } => {
                    let a = normalize3(*axis).unwrap_or([0.0, 0.0, 1.0]);
                    let d = [g.mu[0] - center[0], g.mu[1] - center[1], g.mu[2] - center[2]];
                    omega.abs() * norm3(cross(a, d))
                }
                Motion::Harmonic { amplitude, omega, .. } => omega.abs() * norm3(*amplitude),
            })
            .fold(0.0, f64::max)
    }
}

/// Rodrigues rotation of `v` about unit `axis` by `angle`.
fn rotate_about(v: Vec3, axis: Vec3, angle: f64) -> Vec3 {
    let (s, c) = angle.sin_cos();
    let kxv = cross(axis, v);
    let kdv = axis[0] * v[0] + axis[1] * v[1] + axis[2] * v[2];
    [
        v[0] * c + kxv[0] * s + axis[0] * kdv * (1.0 - c),
        v[1] * c + kxv[1] * s + axis[1] * kdv * (1.0 - c),
        v[2] * c + kxv[2] * s + axis[2] * kdv * (1.0 - c),
    ]
}

/// Exact state of Gaussian `k` at time `t ≥ t_min`; any `t` past `t_max` is allowed.
pub fn analytic_state(spec: &SceneSpec, k: usize, t: f64) -> Result<GaussianState> {
    let g = spec
        .gaussians
        .get(k)
        .ok_or_else(|| Error::Invalid(format!("no Gaussian with index {k}")))?;
    let motion = spec
        .motion
        .get(k)
        .ok_or_else(|| Error::Invalid(format!("no motion for Gaussian {k}")))?;
    if !(t >= spec.t_min) {
        return Err(Error::Invalid(format!("t = {t} precedes t_min = {}", spec.t_min)));
    }
    let mut mu = g.mu;
    let mut q = g.q;
    match motion {
        Motion::Static => {}
        Motion::Linear { velocity } => {
            for i in 0..3 {
                mu[i] += velocity[i] * t;
            }
        }
        Motion::Circular {
            center,
            axis,
            omega,
            phase,
        } => {
            let a = normalize3(*axis)?;
            let d = [g.mu[0] - center[0], g.mu[1] - center[1], g.mu[2] - center[2]];
            let r = rotate_about(d, a, omega * t + phase);
            mu = [center[0] + r[0], center[1] + r[1], center[2] + r[2]];
        }
        Motion::Harmonic {
            center,
            amplitude,
            omega,
            phase,
        } => {
            let w = (omega * t + phase).sin();
            mu = [
                center[0] + amplitude[0] * w,
                center[1] + amplitude[1] * w,
                center[2] + amplitude[2] * w,
            ];
        }
        Motion::Spin { angular_velocity } => {
            let rate = norm3(*angular_velocity);
            if rate > 0.0 {
                q = quat_mul(g.q, quat_from_axis_angle(*angular_velocity, rate * t)?);
            }
        }
    }
    Ok(GaussianState {
        params: pack_state(mu, q, g.s),
        t,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Circular,
    Linear,
    Harmonic,
    Mixed,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "circular" => Ok(Preset::Circular),
            "linear" => Ok(Preset::Linear),
            "harmonic" => Ok(Preset::Harmonic),
            "mixed" => Ok(Preset::Mixed),
            other => Err(Error::Invalid(format!("unknown preset {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PresetConfig {
    /// Orbit period of the circular preset, in scene time.
    pub period: f64,
    pub radius: f64,
    pub image_size: usize,
    pub t_min: f64,
    pub t_max: f64,
}

impl Default for PresetConfig {
    fn default() -> Self {
        Self {
            period: 1.25,
            radius: 1.0,
            image_size: 64,
            t_min: 0.0,
            t_max: 1.0,
        }
    }
}

fn random_unit_quat(rng: &mut ChaCha8Rng) -> Quat {
    loop {
        let q: Quat = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let n2: f64 = q.iter().map(|v| v * v).sum();
        if n2 > 1e-3 && n2 <= 1.0 {
            return quat_normalize(q).unwrap();
        }
    }
}

/// Builds a synthetic desk-scale scene with `m` Gaussians.
pub fn preset_scene(preset: Preset, m: usize, seed: u64, cfg: &PresetConfig) -> Result<SceneSpec> {
    if m == 0 {
        return Err(Error::Invalid("a scene needs at least one Gaussian".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let omega = 2.0 * PI / cfg.period;
    let mut gaussians = Vec::with_capacity(m);
    let mut motion = Vec::with_capacity(m);
    for k in 0..m {
        let scale = cfg.radius * rng.random_range(0.05..0.09);
        let s = std::array::from_fn(|_| (scale * rng.random_range(0.7..1.3f64)).ln());
        let q = random_unit_quat(&mut rng);
        let alpha = rng.random_range(1.0..2.5);
        let c: Vec<f64> = (0..3).map(|_| rng.random_range(0.15..1.0)).collect();
        let kind = match preset {
            Preset::Mixed => k % 5,
            Preset::Circular => 0,
            Preset::Linear => 1,
            Preset::Harmonic => 2,
        };
        let (mu, mot) = match kind {
            0 => {
                // Ring about the z axis; the angle of mu0 fixes each phase.
                let angle = rng.random_range(0.0..2.0 * PI);
                let r = cfg.radius * rng.random_range(0.85..1.15);
                let z = cfg.radius * rng.random_range(-0.15..0.15);
                let mu = [r * angle.cos(), r * angle.sin(), z];
                (
                    mu,
                    Motion::Circular {
                        center: [0.0; 3],
                        axis: [0.0, 0.0, 1.0],
                        omega,
                        phase: 0.0,
                    },
                )
            }
            1 => {
                let mu = std::array::from_fn(|_| cfg.radius * rng.random_range(-0.8..0.8));
                let dir = normalize3(std::array::from_fn(|_| rng.random_range(-1.0..1.0))).unwrap_or([1.0, 0.0, 0.0]);
                let speed = cfg.radius * rng.random_range(0.3..0.6);
                (
                    mu,
                    Motion::Linear {
                        velocity: dir.map(|d| d * speed),
                    },
                )
            }
            2 => {
                let center = std::array::from_fn(|_| cfg.radius * rng.random_range(-0.8..0.8));
                let amplitude = std::array::from_fn(|_| cfg.radius * rng.random_range(-0.25..0.25));
                let phase = rng.random_range(0.0..2.0 * PI);
                let mu = std::array::from_fn(|i| center[i] + amplitude[i] * phase.sin());
                (
                    mu,
                    Motion::Harmonic {
                        center,
                        amplitude,
                        omega,
                        phase,
                    },
                )
            }
            3 => {
                let mu = std::array::from_fn(|_| cfg.radius * rng.random_range(-0.8..0.8));
                let w = std::array::from_fn(|_| rng.random_range(-3.0..3.0));
                (mu, Motion::Spin { angular_velocity: w })
            }
            _ => {
                let mu = std::array::from_fn(|_| cfg.radius * rng.random_range(-0.8..0.8));
                (mu, Motion::Static)
            }
        };
        gaussians.push(CanonicalGaussian::new(mu, q, s, alpha, c)?);
        motion.push(mot);
    }
    let size = cfg.image_size;
    let eye = [0.0, -2.6 * cfg.radius, 2.2 * cfg.radius];
    let camera = Camera::look_at(eye, [0.0; 3], [0.0, 0.0, 1.0], 0.85 * size as f64, size, size)?;
    let spec = SceneSpec {
        gaussians,
        motion,
        cameras: vec![camera],
        t_min: cfg.t_min,
        t_max: cfg.t_max,
    };
    spec.validate()?;
    Ok(spec)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

#[derive(Clone, Debug)]
pub struct Frame {
    pub index: usize,
    pub t: f64,
    pub camera: usize,
    pub split: Split,
    pub image: Image,
}

#[derive(Clone, Debug)]
pub struct SceneDataset {
    pub frames: Vec<Frame>,
    /// Ground truth at every frame timestamp.
    pub truth: TrajectorySet,
    pub n_train: usize,
    /// End of the observed window.
    pub t_split: f64,
}

/// Frame timestamps: `n_train` uniform on `[t_min, t_split]`, then the rest
/// uniform on `(t_split, t_max]`.
pub fn frame_times(t_min: f64, t_max: f64, n_frames: usize, split: f64) -> Result<(Vec<f64>, usize, f64)> {
    if n_frames < 2 {
        return Err(Error::Invalid("at least two frames are required".into()));
    }
    if !(split > 0.0 && split < 1.0) {
        return Err(Error::Invalid("split must lie in (0, 1)".into()));
    }
    if !(t_min < t_max) {
        return Err(Error::Invalid("degenerate time window".into()));
    }
    let n_train = ((n_frames as f64 * split).round() as usize).clamp(1, n_frames - 1);
    let n_eval = n_frames - n_train;
    let t_split = t_max * split + t_min * (1.0 - split);
    let mut times = Vec::with_capacity(n_frames);
    for i in 0..n_train {
        times.push(if n_train == 1 {
            t_min
        } else {
            t_min + (t_split - t_min) * i as f64 / (n_train - 1) as f64
        });
    }
    for j in 1..=n_eval {
        times.push(t_split + (t_max - t_split) * j as f64 / n_eval as f64);
    }
    Ok((times, n_train, t_split))
}

/// Renders every frame from analytic states and records the ground-truth trajectories.
pub fn generate_dataset(spec: &SceneSpec, n_frames: usize, split: f64) -> Result<SceneDataset> {
    spec.validate()?;
    let (times, n_train, t_split) = frame_times(spec.t_min, spec.t_max, n_frames, split)?;
    let mut truth = TrajectorySet::new(spec.len(), times.clone());
    let mut frames = Vec::with_capacity(times.len());
    for (i, &t) in times.iter().enumerate() {
        let states = spec.states_at(t)?;
        for (k, st) in states.iter().enumerate() {
            truth.set(k, i, *st);
        }
        let camera = i % spec.cameras.len();
        let image = raster::render(&spec.gaussians, &states, &spec.cameras[camera])?;
        frames.push(Frame {
            index: i,
            t,
            camera,
            split: if i < n_train { Split::Train } else { Split::Eval },
            image,
        });
    }
    Ok(SceneDataset {
        frames,
        truth,
        n_train,
        t_split,
    })
}
