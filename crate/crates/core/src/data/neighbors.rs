//! Radius and k-nearest-neighbor queries by sorted brute force.
//!
//! Clouds here hold at most a few thousand points, so a linear scan per
//! query is cheap and trivially exact.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::cloud::{dist2, PointCloud};
use crate::par;
use crate::tensor::NeighborLists;

fn sorted_by_distance(cloud: &PointCloud, center: usize, keep: impl Fn(f64) -> bool) -> Vec<(f64, usize)> {
    let c = cloud.points()[center];
    let mut hits: Vec<(f64, usize)> = cloud
        .points()
        .iter()
        .enumerate()
        .map(|(i, p)| (dist2(p, &c), i))
        .filter(|(d, _)| keep(*d))
        .collect();
    hits.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    hits
}

/// All indices within `radius` (inclusive) of point `center`, nearest first,
/// ties by index. The center is always included.
pub fn radius_neighbors(cloud: &PointCloud, center: usize, radius: f64) -> Vec<usize> {
    let r2 = radius * radius;
    sorted_by_distance(cloud, center, |d| d <= r2)
        .into_iter()
        .map(|(_, i)| i)
        .collect()
}

/// The `k` nearest indices to point `center` (itself first), ties by index.
/// `k` is clamped to `[1, n]`.
pub fn knn(cloud: &PointCloud, center: usize, k: usize) -> Vec<usize> {
    let k = k.clamp(1, cloud.len());
    let mut all = sorted_by_distance(cloud, center, |_| true);
    all.truncate(k);
    all.into_iter().map(|(_, i)| i).collect()
}

/// Radius neighborhoods for every point, optionally capped.
///
/// With a cap, oversized neighborhoods keep the center plus a seeded
/// uniform sample of the rest; the sample depends on `(seed, point index)`.
pub fn neighborhood_table(cloud: &PointCloud, radius: f64, cap: Option<usize>, seed: u64) -> NeighborLists {
    let lists = par::map_range(cloud.len(), |q| {
        let mut list = radius_neighbors(cloud, q, radius);
        if let Some(cap) = cap {
            if list.len() > cap.max(1) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (q as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
                let mut rest: Vec<usize> = list[1..].to_vec();
                rest.shuffle(&mut rng);
                rest.truncate(cap.max(1) - 1);
                rest.sort_unstable();
                list.truncate(1);
                list.extend(rest);
            }
        }
        list.into_iter().map(|i| i as u32).collect()
    });
    Arc::new(lists)
}
