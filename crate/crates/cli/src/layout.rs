//! On-disk layout of a generated scene directory.
//!
//! ```text
//! DIR/scene.json          scene description (Gaussians, motions, cameras)
//! DIR/poses.json          camera list
//! DIR/dataset.json        split metadata and per-frame records
//! DIR/truth.traj          ground-truth trajectories at every frame time
//! DIR/frames/train/*.ppm  observed frames, with index.json
//! DIR/frames/eval/*.ppm   held-out frames, with index.json
//! ```
//!
//! Any directory of images carrying an `index.json` (as written by `render`)
//! can be compared against the held-out frames.

use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use splatode::raster::Image;
use splatode::scene::{SceneSpec, Split};
use splatode::trajectory::TrajectorySet;
use splatode::Error;

pub const SCENE_FILE: &str = "scene.json";
pub const POSES_FILE: &str = "poses.json";
pub const DATASET_FILE: &str = "dataset.json";
pub const TRUTH_FILE: &str = "truth.traj";
pub const INDEX_FILE: &str = "index.json";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FrameRecord {
    pub index: usize,
    pub t: f64,
    pub camera: usize,
    pub split: Split,
    /// Relative to the scene directory.
    pub file: PathBuf,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub n_train: usize,
    pub t_split: f64,
    pub split: f64,
    pub frames: Vec<FrameRecord>,
}

/// One image of a rendered directory.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IndexEntry {
    pub t: f64,
    pub camera: usize,
    /// Relative to the directory holding the index.
    pub file: PathBuf,
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()).into());
    }
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())).into())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

/// A scene directory resolved from the path of its `scene.json`.
pub struct SceneDir {
    pub root: PathBuf,
    pub spec: SceneSpec,
}

impl SceneDir {
    /// Accepts either the directory or the `scene.json` inside it.
    pub fn open(path: &Path) -> anyhow::Result<Self> {
        let (root, file) = if path.is_dir() {
            (path.to_path_buf(), path.join(SCENE_FILE))
        } else {
            (
                path.parent().map(Path::to_path_buf).unwrap_or_default(),
                path.to_path_buf(),
            )
        };
        let spec = SceneSpec::load(&file)?;
        Ok(Self { root, spec })
    }

    pub fn dataset(&self) -> anyhow::Result<DatasetMeta> {
        read_json(&self.root.join(DATASET_FILE))
    }

    pub fn truth(&self) -> anyhow::Result<TrajectorySet> {
        Ok(TrajectorySet::load(&self.root.join(TRUTH_FILE))?)
    }

    /// Ground truth restricted to the observed frames.
    pub fn observed(&self) -> anyhow::Result<TrajectorySet> {
        let meta = self.dataset()?;
        let truth = self.truth()?;
        if truth.num_steps() < meta.n_train {
            return Err(Error::Format("truth trajectories are shorter than the observed split".into()).into());
        }
        let mut observed = TrajectorySet::new(truth.num_gaussians(), truth.timestamps()[..meta.n_train].to_vec());
        for k in 0..truth.num_gaussians() {
            for i in 0..meta.n_train {
                observed.set(k, i, truth.get(k, i));
            }
        }
        Ok(observed)
    }

    pub fn image(&self, record: &FrameRecord) -> anyhow::Result<Image> {
        Ok(Image::load_ppm(&self.root.join(&record.file))?)
    }
}

/// Images of a directory with an index, in index order.
pub fn read_image_dir(dir: &Path) -> anyhow::Result<Vec<(IndexEntry, Image)>> {
    let index: Vec<IndexEntry> = read_json(&dir.join(INDEX_FILE))?;
    index
        .into_iter()
        .map(|e| {
            let img = Image::load_ppm(&dir.join(&e.file))?;
            Ok((e, img))
        })
        .collect()
}
