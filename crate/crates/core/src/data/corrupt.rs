//! Label noise for training the part prior.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::cloud::PointCloud;
use super::labels::BinaryMask;
use crate::error::{Error, Result};

/// Background points within this distance of the foreground's bounding box
/// are preferred for insertion.
pub const VICINITY: f64 = 0.15;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub insert_rate: f64,
    pub delete_rate: f64,
    pub seed: u64,
}

impl CorruptionSpec {
    pub fn new(insert_rate: f64, delete_rate: f64, seed: u64) -> Self {
        CorruptionSpec {
            insert_rate,
            delete_rate,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, r) in [("insert_rate", self.insert_rate), ("delete_rate", self.delete_rate)] {
            if !(0.0..=0.5).contains(&r) {
                return Err(Error::Invalid(format!("{name} must lie in [0, 0.5], got {r}")));
            }
        }
        Ok(())
    }
}

fn box_distance(p: &[f64; 3], lo: &[f64; 3], hi: &[f64; 3]) -> f64 {
    (0..3)
        .map(|k| (lo[k] - p[k]).max(0.0).max(p[k] - hi[k]))
        .map(|d| d * d)
        .sum::<f64>()
        .sqrt()
}

/// Flip `⌊delete_rate·|F|⌋` foreground points off and `⌊insert_rate·|B|⌋`
/// background points on, drawing insertions from the foreground's vicinity
/// first.
pub fn corrupt_mask(cloud: &PointCloud, mask: &BinaryMask, spec: &CorruptionSpec) -> Result<BinaryMask> {
    spec.validate()?;
    mask.check_len(cloud)?;
    let fg = mask.foreground();
    let bg = mask.background();
    if fg.is_empty() {
        return Err(Error::EmptyForeground);
    }
    if bg.is_empty() {
        return Err(Error::Invalid("mask has an empty background".into()));
    }
    let n_delete = (spec.delete_rate * fg.len() as f64).floor() as usize;
    let n_insert = (spec.insert_rate * bg.len() as f64).floor() as usize;
    if n_delete >= fg.len() && n_insert == 0 {
        return Err(Error::Invalid("corruption would empty the foreground".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut flags = mask.flags().to_vec();

    let mut del = fg.clone();
    del.shuffle(&mut rng);
    for &i in &del[..n_delete] {
        flags[i] = false;
    }

    let pts = cloud.points();
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for &i in &fg {
        for k in 0..3 {
            lo[k] = lo[k].min(pts[i][k]);
            hi[k] = hi[k].max(pts[i][k]);
        }
    }
    let (mut near, mut far): (Vec<usize>, Vec<usize>) =
        bg.iter().partition(|&&i| box_distance(&pts[i], &lo, &hi) <= VICINITY);
    near.shuffle(&mut rng);
    far.shuffle(&mut rng);
    for &i in near.iter().chain(&far).take(n_insert) {
        flags[i] = true;
    }
    Ok(BinaryMask::new(flags))
}
