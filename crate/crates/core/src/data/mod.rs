//! Point clouds, labelings, neighborhoods, synthetic shapes and label noise.

pub mod cloud;
pub mod corrupt;
pub mod labels;
pub mod neighbors;
pub mod synth;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use cloud::{load_pointcloud, save_pointcloud, Normalization, Point, PointCloud};
pub use corrupt::{corrupt_mask, CorruptionSpec};
pub use labels::{load_labeling, save_labeling, BinaryMask, KWayLabeling};
pub use neighbors::{knn, neighborhood_table, radius_neighbors};
pub use synth::{synth_shape, Family, SynthSpec};

use crate::error::{Error, Result};

/// A set of shapes to co-segment, with optional ground truth for evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct ShapeSet {
    pub shapes: Vec<PointCloud>,
    pub ground_truth: Vec<Option<KWayLabeling>>,
}

impl ShapeSet {
    pub fn new(shapes: Vec<PointCloud>, ground_truth: Vec<Option<KWayLabeling>>) -> Result<Self> {
        if shapes.len() < 2 {
            return Err(Error::Invalid(format!("a shape set needs at least 2 shapes, got {}", shapes.len())));
        }
        if ground_truth.len() != shapes.len() {
            return Err(Error::shape("shape set", "one ground-truth slot per shape"));
        }
        for (s, gt) in shapes.iter().zip(&ground_truth) {
            if let Some(l) = gt {
                l.check_len(s)?;
            }
        }
        Ok(ShapeSet { shapes, ground_truth })
    }

    pub fn unlabeled(shapes: Vec<PointCloud>) -> Result<Self> {
        let n = shapes.len();
        ShapeSet::new(shapes, vec![None; n])
    }

    pub fn from_synth(specs: &[SynthSpec]) -> Result<Self> {
        let mut shapes = Vec::new();
        let mut gt = Vec::new();
        for s in specs {
            let (c, l) = synth_shape(s)?;
            shapes.push(c);
            gt.push(Some(l));
        }
        ShapeSet::new(shapes, gt)
    }

    pub fn len(&self) -> usize {
        self.shapes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shapes.is_empty()
    }
}

/// One entry of a shape-set manifest. Paths are relative to the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeEntry {
    pub id: String,
    pub cloud: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k_bound: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SetManifest {
    pub shapes: Vec<ShapeEntry>,
}

fn read_toml<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub(crate) fn write_toml<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = toml::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

impl SetManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        read_toml(path.as_ref())
    }
}

/// Load every cloud (and label file, when listed) named by a set manifest.
pub fn load_shape_set(path: impl AsRef<Path>) -> Result<ShapeSet> {
    let path = path.as_ref();
    let manifest = SetManifest::load(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut shapes = Vec::new();
    let mut gt = Vec::new();
    for entry in &manifest.shapes {
        let (cloud, _) = load_pointcloud(base.join(&entry.cloud))?;
        let cloud = cloud.with_id(entry.id.clone());
        let labels = match &entry.labels {
            Some(p) => {
                let l = load_labeling(base.join(p), entry.k_bound)?;
                l.check_len(&cloud)?;
                Some(l)
            }
            None => None,
        };
        shapes.push(cloud);
        gt.push(labels);
    }
    ShapeSet::new(shapes, gt)
}

/// Write clouds, labels and a `set.toml` manifest into `dir`.
pub fn write_shape_set(set: &ShapeSet, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = SetManifest::default();
    for (shape, gt) in set.shapes.iter().zip(&set.ground_truth) {
        let cloud = PathBuf::from(format!("{}.xyz", shape.id()));
        save_pointcloud(shape, dir.join(&cloud))?;
        let labels = match gt {
            Some(l) => {
                let p = PathBuf::from(format!("{}.labels", shape.id()));
                save_labeling(l, dir.join(&p))?;
                Some(p)
            }
            None => None,
        };
        manifest.shapes.push(ShapeEntry {
            id: shape.id().to_string(),
            cloud,
            labels,
            k_bound: gt.as_ref().map(KWayLabeling::k_bound),
        });
    }
    let path = dir.join("set.toml");
    write_toml(&manifest, &path)?;
    Ok(path)
}

/// A synthesis manifest entry: `count` shapes with seeds `seed..seed+count`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthEntry {
    #[serde(flatten)]
    pub spec: SynthSpec,
    #[serde(default = "one")]
    pub count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id_prefix: Option<String>,
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SynthManifest {
    pub shapes: Vec<SynthEntry>,
}

impl SynthManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        read_toml(path.as_ref())
    }

    /// Expand entries into concrete specs with their shape ids.
    pub fn expand(&self) -> Result<Vec<(String, SynthSpec)>> {
        let mut out = Vec::new();
        for e in &self.shapes {
            e.spec.validate()?;
            for i in 0..e.count {
                let spec = SynthSpec {
                    seed: e.spec.seed + i as u64,
                    ..e.spec.clone()
                };
                let id = match &e.id_prefix {
                    Some(p) => format!("{p}_{i:03}"),
                    None => spec.default_id(),
                };
                out.push((id, spec));
            }
        }
        let mut ids: Vec<&String> = out.iter().map(|(id, _)| id).collect();
        ids.sort();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Invalid("synthesis manifest produces duplicate shape ids".into()));
        }
        Ok(out)
    }

    pub fn generate(&self) -> Result<ShapeSet> {
        let mut shapes = Vec::new();
        let mut gt = Vec::new();
        for (id, spec) in self.expand()? {
            let (c, l) = synth_shape(&spec)?;
            shapes.push(c.with_id(id));
            gt.push(Some(l));
        }
        ShapeSet::new(shapes, gt)
    }
}
