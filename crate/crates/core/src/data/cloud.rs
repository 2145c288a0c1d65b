use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point = [f64; 3];

pub const MIN_POINTS: usize = 8;

/// Affine map applied on ingestion: `normalized = (raw - center) / scale`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub center: Point,
    pub scale: f64,
}

impl Normalization {
    pub fn apply(&self, p: Point) -> Point {
        [
            (p[0] - self.center[0]) / self.scale,
            (p[1] - self.center[1]) / self.scale,
            (p[2] - self.center[2]) / self.scale,
        ]
    }

    pub fn invert(&self, p: Point) -> Point {
        [
            p[0] * self.scale + self.center[0],
            p[1] * self.scale + self.center[1],
            p[2] * self.scale + self.center[2],
        ]
    }
}

/// An ordered point set centred at the origin and scaled into the unit ball.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    id: String,
    points: Vec<Point>,
}

impl PointCloud {
    /// Normalize `raw` (centroid to origin, farthest point at radius 1).
    pub fn new(id: impl Into<String>, raw: Vec<Point>) -> Result<(Self, Normalization)> {
        if raw.len() < MIN_POINTS {
            return Err(Error::Invalid(format!(
                "point cloud needs at least {MIN_POINTS} points, got {}",
                raw.len()
            )));
        }
        if raw.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("point coordinates"));
        }
        let n = raw.len() as f64;
        let mut center = [0.0; 3];
        for p in &raw {
            for a in 0..3 {
                center[a] += p[a];
            }
        }
        center.iter_mut().for_each(|c| *c /= n);
        let radius = raw
            .iter()
            .map(|p| dist2(p, &center).sqrt())
            .fold(0.0, f64::max);
        if radius <= 0.0 {
            return Err(Error::Invalid("all points coincide".into()));
        }
        let norm = Normalization {
            center,
            scale: radius,
        };
        let points = raw.into_iter().map(|p| norm.apply(p)).collect();
        Ok((
            PointCloud {
                id: id.into(),
                points,
            },
            norm,
        ))
    }

    /// Wrap points that are already normalized, checking the invariants.
    pub fn from_normalized(id: impl Into<String>, points: Vec<Point>) -> Result<Self> {
        if points.len() < MIN_POINTS {
            return Err(Error::Invalid(format!("need at least {MIN_POINTS} points")));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("point coordinates"));
        }
        let n = points.len() as f64;
        let mut c = [0.0; 3];
        for p in &points {
            for a in 0..3 {
                c[a] += p[a] / n;
            }
        }
        let max_r = points.iter().map(|p| norm3(p)).fold(0.0, f64::max);
        if norm3(&c) > 1e-6 || max_r > 1.0 + 1e-6 {
            return Err(Error::Invalid(format!(
                "cloud is not normalized (centroid offset {:.3e}, radius {max_r})",
                norm3(&c)
            )));
        }
        Ok(PointCloud {
            id: id.into(),
            points,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Reorder points so that new point `i` is old point `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.len() {
            return Err(Error::shape("permuted", "permutation length"));
        }
        let mut seen = vec![false; perm.len()];
        for &p in perm {
            if p >= perm.len() || std::mem::replace(&mut seen[p], true) {
                return Err(Error::Invalid("not a permutation".into()));
            }
        }
        Ok(PointCloud {
            id: self.id.clone(),
            points: perm.iter().map(|&i| self.points[i]).collect(),
        })
    }

    /// Flattened `n×3` coordinates.
    pub fn coords(&self) -> Vec<f64> {
        self.points.iter().flatten().copied().collect()
    }
}

pub fn dist2(a: &Point, b: &Point) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

fn norm3(p: &Point) -> f64 {
    (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt()
}

/// Parse whitespace-separated XYZ text (blank lines and `#` comments skipped).
pub fn parse_xyz(text: &str, path: &Path) -> Result<Vec<Point>> {
    let mut pts = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        if fields.len() != 3 {
            return Err(parse_err(format!("expected 3 fields, found {}", fields.len())));
        }
        let mut p = [0.0; 3];
        for (slot, f) in p.iter_mut().zip(&fields) {
            *slot = f
                .parse::<f64>()
                .map_err(|e| parse_err(format!("{f:?}: {e}")))?;
            if !slot.is_finite() {
                return Err(parse_err(format!("non-finite coordinate {f:?}")));
            }
        }
        pts.push(p);
    }
    Ok(pts)
}

/// Load an XYZ file and normalize it. The returned transform maps raw file
/// coordinates to the stored ones; point order is preserved.
pub fn load_pointcloud(path: impl AsRef<Path>) -> Result<(PointCloud, Normalization)> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let pts = parse_xyz(&text, path)?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    PointCloud::new(id, pts)
}

pub fn format_xyz(cloud: &PointCloud) -> String {
    let mut out = String::with_capacity(cloud.len() * 64);
    for p in cloud.points() {
        let _ = writeln!(out, "{:?} {:?} {:?}", p[0], p[1], p[2]);
    }
    out
}

pub fn save_pointcloud(cloud: &PointCloud, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_xyz(cloud)).map_err(|e| Error::io(path, e))
}
