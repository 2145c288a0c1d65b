use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::data::PointCloud;
use crate::error::{Error, Result};

/// Per-point foreground flags.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    flags: Vec<bool>,
}

impl BinaryMask {
    pub fn new(flags: Vec<bool>) -> Self {
        BinaryMask { flags }
    }

    pub fn from_indices(n: usize, foreground: &[usize]) -> Self {
        let mut flags = vec![false; n];
        for &i in foreground {
            flags[i] = true;
        }
        BinaryMask { flags }
    }

    pub fn flags(&self) -> &[bool] {
        &self.flags
    }

    pub fn len(&self) -> usize {
        self.flags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flags.is_empty()
    }

    pub fn foreground(&self) -> Vec<usize> {
        (0..self.flags.len()).filter(|&i| self.flags[i]).collect()
    }

    pub fn background(&self) -> Vec<usize> {
        (0..self.flags.len()).filter(|&i| !self.flags[i]).collect()
    }

    pub fn foreground_count(&self) -> usize {
        self.flags.iter().filter(|f| **f).count()
    }

    /// Class targets for a 2-way classifier: 1 = foreground.
    pub fn targets(&self) -> Vec<usize> {
        self.flags.iter().map(|&f| usize::from(f)).collect()
    }

    pub fn check_len(&self, cloud: &PointCloud) -> Result<()> {
        if self.len() != cloud.len() {
            return Err(Error::shape(
                "mask",
                format!("{} flags for {} points", self.len(), cloud.len()),
            ));
        }
        Ok(())
    }
}

/// Per-point labels in `[0, k_bound)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KWayLabeling {
    labels: Vec<usize>,
    k_bound: usize,
}

impl KWayLabeling {
    pub fn new(labels: Vec<usize>, k_bound: usize) -> Result<Self> {
        if k_bound == 0 {
            return Err(Error::Invalid("k_bound must be positive".into()));
        }
        if let Some(l) = labels.iter().find(|&&l| l >= k_bound) {
            return Err(Error::Invalid(format!("label {l} outside [0, {k_bound})")));
        }
        Ok(KWayLabeling { labels, k_bound })
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn k_bound(&self) -> usize {
        self.k_bound
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn used(&self) -> BTreeSet<usize> {
        self.labels.iter().copied().collect()
    }

    pub fn mask(&self, label: usize) -> BinaryMask {
        BinaryMask::new(self.labels.iter().map(|&l| l == label).collect())
    }

    pub fn counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.k_bound];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }

    /// Labels reindexed by `perm` (`new = perm[old]`).
    pub fn permuted_labels(&self, perm: &[usize]) -> Result<Self> {
        KWayLabeling::new(self.labels.iter().map(|&l| perm[l]).collect(), self.k_bound)
    }

    pub fn check_len(&self, cloud: &PointCloud) -> Result<()> {
        if self.len() != cloud.len() {
            return Err(Error::shape(
                "labeling",
                format!("{} labels for {} points in {}", self.len(), cloud.len(), cloud.id()),
            ));
        }
        Ok(())
    }
}

pub fn format_labeling(labeling: &KWayLabeling) -> String {
    let mut out = String::with_capacity(labeling.len() * 2);
    for l in labeling.labels() {
        let _ = writeln!(out, "{l}");
    }
    out
}

pub fn parse_labels(text: &str, path: &Path) -> Result<Vec<usize>> {
    let mut labels = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let v: i64 = line.parse().map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: format!("{line:?}: {e}"),
        })?;
        if v < 0 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: format!("negative label {v}"),
            });
        }
        labels.push(v as usize);
    }
    Ok(labels)
}

pub fn save_labeling(labeling: &KWayLabeling, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_labeling(labeling)).map_err(|e| Error::io(path, e))
}

/// Read a label file. Without `k_bound` the bound is one past the largest label.
pub fn load_labeling(path: impl AsRef<Path>, k_bound: Option<usize>) -> Result<KWayLabeling> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let labels = parse_labels(&text, path)?;
    let k = k_bound.unwrap_or_else(|| labels.iter().max().map_or(1, |m| m + 1));
    KWayLabeling::new(labels, k)
}
