//! Per-Gaussian time-indexed state sequences and their binary file format.
//!
//! ```text
//! magic "OGTJ" | version u32 (=1) | M u32 | T u32 | timestamps f64×T | params f32×(M·T·10)
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::scene::{SceneSpec, StateVec, STATE_DIM};

const MAGIC: &[u8; 4] = b"OGTJ";
const VERSION: u32 = 1;

/// Anything that can report the states of a fixed set of Gaussians at a time.
pub trait TrajectorySource {
    fn num_gaussians(&self) -> usize;
    /// Time span over which the source is trustworthy.
    fn window(&self) -> (f64, f64);
    fn states_at(&self, t: f64) -> Result<Vec<StateVec>>;
}

impl TrajectorySource for SceneSpec {
    fn num_gaussians(&self) -> usize {
        self.len()
    }

    fn window(&self) -> (f64, f64) {
        (self.t_min, self.t_max)
    }

    fn states_at(&self, t: f64) -> Result<Vec<StateVec>> {
        SceneSpec::states_at(self, t)
    }
}

/// `M` Gaussians sampled at `T` shared timestamps, stored `[M][T][10]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectorySet {
    m: usize,
    timestamps: Vec<f64>,
    data: Vec<f64>,
}

impl TrajectorySet {
    pub fn new(m: usize, timestamps: Vec<f64>) -> Self {
        let n = m * timestamps.len() * STATE_DIM;
        Self {
            m,
            timestamps,
            data: vec![0.0; n],
        }
    }

    /// Samples a source at the given times.
    pub fn from_source(src: &dyn TrajectorySource, timestamps: Vec<f64>) -> Result<Self> {
        let mut out = Self::new(src.num_gaussians(), timestamps);
        for i in 0..out.timestamps.len() {
            let states = src.states_at(out.timestamps[i])?;
            if states.len() != out.m {
                return Err(Error::Invalid("source returned the wrong number of Gaussians".into()));
            }
            for (k, st) in states.iter().enumerate() {
                out.set(k, i, *st);
            }
        }
        Ok(out)
    }

    pub fn num_gaussians(&self) -> usize {
        self.m
    }

    pub fn num_steps(&self) -> usize {
        self.timestamps.len()
    }

    pub fn timestamps(&self) -> &[f64] {
        &self.timestamps
    }

    fn offset(&self, k: usize, i: usize) -> usize {
        (k * self.timestamps.len() + i) * STATE_DIM
    }

    pub fn get(&self, k: usize, i: usize) -> StateVec {
        let o = self.offset(k, i);
        self.data[o..o + STATE_DIM].try_into().unwrap()
    }

    pub fn set(&mut self, k: usize, i: usize, st: StateVec) {
        let o = self.offset(k, i);
        self.data[o..o + STATE_DIM].copy_from_slice(&st);
    }

    /// All states of Gaussian `k`, `T × 10` row-major.
    pub fn sequence(&self, k: usize) -> &[f64] {
        let o = self.offset(k, 0);
        &self.data[o..o + self.timestamps.len() * STATE_DIM]
    }

    /// States of every Gaussian at step `i`.
    pub fn frame(&self, i: usize) -> Vec<StateVec> {
        (0..self.m).map(|k| self.get(k, i)).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.timestamps.len() * 8 + self.data.len() * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.m as u32).to_le_bytes());
        out.extend_from_slice(&(self.timestamps.len() as u32).to_le_bytes());
        for t in &self.timestamps {
            out.extend_from_slice(&t.to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Format(format!("trajectory file: {m}"));
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(bad("bad magic"));
        }
        let word = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
        if word(4) != VERSION as usize {
            return Err(bad("unsupported version"));
        }
        let (m, t) = (word(8), word(12));
        let expect = 16 + t * 8 + m * t * STATE_DIM * 4;
        if bytes.len() != expect {
            return Err(bad("length does not match header"));
        }
        let timestamps = bytes[16..16 + t * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let data = bytes[16 + t * 8..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Ok(Self { m, timestamps, data })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        Self::from_bytes(&std::fs::read(path)?)
    }
}

impl TrajectorySource for TrajectorySet {
    fn num_gaussians(&self) -> usize {
        self.m
    }

    fn window(&self) -> (f64, f64) {
        (
            self.timestamps.first().copied().unwrap_or(0.0),
            self.timestamps.last().copied().unwrap_or(0.0),
        )
    }

    /// Piecewise-linear interpolation between stored steps (clamped at the ends).
    fn states_at(&self, t: f64) -> Result<Vec<StateVec>> {
        let ts = &self.timestamps;
        if ts.is_empty() {
            return Err(Error::Invalid("empty trajectory set".into()));
        }
        let hi = ts.partition_point(|&x| x < t);
        if hi == 0 {
            return Ok(self.frame(0));
        }
        if hi == ts.len() {
            return Ok(self.frame(ts.len() - 1));
        }
        let lo = hi - 1;
        let w = (t - ts[lo]) / (ts[hi] - ts[lo]);
        Ok((0..self.m)
            .map(|k| {
                let (a, b) = (self.get(k, lo), self.get(k, hi));
                std::array::from_fn(|d| a[d] + w * (b[d] - a[d]))
            })
            .collect())
    }
}
