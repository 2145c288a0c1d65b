//! Rand Index, best label mapping and the rank-discriminativeness probe.

use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{second_singular_value, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RandIndexReport {
    /// `1 − agreeing / C(n, 2)`; lower is better.
    pub score: f64,
    pub n_points: usize,
    pub pairs_agreeing: u64,
}

fn pairs(c: u64) -> u64 {
    c * c.saturating_sub(1) / 2
}

fn compress(labels: &[usize]) -> (Vec<usize>, usize) {
    let mut ids = HashMap::new();
    let out = labels
        .iter()
        .map(|l| {
            let next = ids.len();
            *ids.entry(*l).or_insert(next)
        })
        .collect();
    (out, ids.len())
}

/// Rand Index from label-pair contingency counts.
pub fn rand_index(pred: &[usize], gt: &[usize]) -> Result<RandIndexReport> {
    if pred.len() != gt.len() {
        return Err(Error::shape("rand_index", format!("{} vs {} points", pred.len(), gt.len())));
    }
    let n = pred.len();
    if n < 2 {
        return Err(Error::Invalid("rand index needs at least 2 points".into()));
    }
    let (p, lp) = compress(pred);
    let (g, lg) = compress(gt);
    let mut table = vec![0u64; lp * lg];
    let mut rows = vec![0u64; lp];
    let mut cols = vec![0u64; lg];
    for (&a, &b) in p.iter().zip(&g) {
        table[a * lg + b] += 1;
        rows[a] += 1;
        cols[b] += 1;
    }
    let both: u64 = table.iter().map(|&c| pairs(c)).sum();
    let same_pred: u64 = rows.iter().map(|&c| pairs(c)).sum();
    let same_gt: u64 = cols.iter().map(|&c| pairs(c)).sum();
    let total = pairs(n as u64);
    let agreeing = total + 2 * both - same_pred - same_gt;
    Ok(RandIndexReport {
        score: 1.0 - agreeing as f64 / total as f64,
        n_points: n,
        pairs_agreeing: agreeing,
    })
}

/// Minimum-cost assignment of rows to columns for a square cost matrix
/// (`cost[i][j]`). Returns the column assigned to each row.
pub fn hungarian(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    // Potentials formulation with 1-based sentinels.
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        if owner[j] > 0 {
            assignment[owner[j] - 1] = j - 1;
        }
    }
    assignment
}

/// Map each predicted label to a ground-truth label so that total overlap is
/// maximal (one-to-one; labels left over map to `None`).
pub fn best_label_mapping(pred: &[usize], gt: &[usize]) -> Result<BTreeMap<usize, Option<usize>>> {
    if pred.len() != gt.len() {
        return Err(Error::shape("label mapping", "lengths differ"));
    }
    let pl: Vec<usize> = pred.iter().copied().collect::<std::collections::BTreeSet<_>>().into_iter().collect();
    let gl: Vec<usize> = gt.iter().copied().collect::<std::collections::BTreeSet<_>>().into_iter().collect();
    let size = pl.len().max(gl.len());
    let mut overlap = vec![vec![0.0; size]; size];
    for (a, b) in pred.iter().zip(gt) {
        let i = pl.binary_search(a).expect("present");
        let j = gl.binary_search(b).expect("present");
        overlap[i][j] += 1.0;
    }
    let cost: Vec<Vec<f64>> = overlap.iter().map(|r| r.iter().map(|v| -v).collect()).collect();
    let assign = hungarian(&cost);
    Ok(pl
        .iter()
        .enumerate()
        .map(|(i, &p)| (p, gl.get(assign[i]).copied()))
        .collect())
}

/// Fraction of points whose mapped predicted label equals the ground truth.
pub fn mapped_accuracy(pred: &[usize], gt: &[usize]) -> Result<f64> {
    let map = best_label_mapping(pred, gt)?;
    let hits = pred.iter().zip(gt).filter(|(p, g)| map[p] == Some(**g)).count();
    Ok(hits as f64 / pred.len().max(1) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub label_count: usize,
    pub labels: Vec<usize>,
    pub sample: usize,
    pub sigma2: f64,
    /// Mean squared distance of the collection's rows to their mean.
    pub mse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeSummary {
    pub label_count: usize,
    pub sigma2_min: f64,
    pub sigma2_max: f64,
    pub mse_min: f64,
    pub mse_max: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RankProbeReport {
    pub rows: Vec<ProbeRow>,
    pub summary: Vec<ProbeSummary>,
    pub notes: Vec<String>,
}

impl RankProbeReport {
    pub fn summary_for(&self, label_count: usize) -> Option<&ProbeSummary> {
        self.summary.iter().find(|s| s.label_count == label_count)
    }

    /// Whether `metric` (min, max) orders the label counts strictly: the max
    /// at the smallest count lies below the next min, and mins increase.
    pub fn strictly_ordered(&self, metric: impl Fn(&ProbeSummary) -> (f64, f64)) -> bool {
        let Some(first) = self.summary.first() else {
            return false;
        };
        let mut bound = metric(first).1;
        for s in &self.summary[1..] {
            let (lo, _) = metric(s);
            if !(bound < lo) {
                return false;
            }
            bound = lo;
        }
        true
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("label_count,labels,sample,sigma2,mse\n");
        for r in &self.rows {
            let labels: Vec<String> = r.labels.iter().map(|l| l.to_string()).collect();
            s.push_str(&format!("{},{},{},{:?},{:?}\n", r.label_count, labels.join(" "), r.sample, r.sigma2, r.mse));
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankProbeConfig {
    pub subset_sizes: Vec<usize>,
    /// Collections sampled per subset size.
    pub samples: usize,
    /// Descriptors drawn per label of the sampled subset.
    pub collection_size: usize,
    pub seed: u64,
}

impl Default for RankProbeConfig {
    fn default() -> Self {
        RankProbeConfig {
            subset_sizes: vec![1, 2, 3],
            samples: 50,
            collection_size: 20,
            seed: 0,
        }
    }
}

fn subsets_of_size(labels: &[usize], size: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let m = labels.len();
    if size == 0 || size > m {
        return out;
    }
    for bits in 0u64..(1u64 << m) {
        if bits.count_ones() as usize == size {
            out.push((0..m).filter(|i| bits >> i & 1 == 1).map(|i| labels[i]).collect());
        }
    }
    out
}

/// Mean squared distance of rows to their centroid.
pub fn mse_spread(rows: &[&[f64]]) -> f64 {
    let d = rows.first().map_or(0, |r| r.len());
    let mut mean = vec![0.0; d];
    for r in rows {
        mean.iter_mut().zip(r.iter()).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= rows.len() as f64);
    rows.iter()
        .map(|r| r.iter().zip(&mean).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
        .sum::<f64>()
        / rows.len() as f64
}

/// Sample labeled descriptor collections and score each by σ₂ of the
/// stacked rows (and by MSE spread for comparison). Every collection with
/// `c` labels contains at least one descriptor of each of its labels.
pub fn rank_probe(parts: &[(Vec<f64>, usize)], config: &RankProbeConfig) -> Result<RankProbeReport> {
    if config.collection_size == 0 || config.samples == 0 {
        return Err(Error::Invalid("rank probe needs positive samples and collection size".into()));
    }
    let d = parts.first().map_or(0, |p| p.0.len());
    if d == 0 || parts.iter().any(|p| p.0.len() != d || p.0.iter().any(|v| !v.is_finite())) {
        return Err(Error::Invalid("descriptors must be non-empty, finite and equally sized".into()));
    }
    let mut by_label: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, (_, l)) in parts.iter().enumerate() {
        by_label.entry(*l).or_default().push(i);
    }
    let labels: Vec<usize> = by_label.keys().copied().collect();
    if labels.len() < 3 {
        return Err(Error::Invalid(format!("rank probe needs at least 3 labels, got {}", labels.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut report = RankProbeReport::default();
    let mut sizes = config.subset_sizes.clone();
    sizes.sort_unstable();
    sizes.dedup();
    for &size in &sizes {
        let subsets = subsets_of_size(&labels, size);
        if subsets.is_empty() {
            report.notes.push(format!("skipped subset size {size}: only {} labels present", labels.len()));
            continue;
        }
        for sample in 0..config.samples {
            let subset = subsets[rng.gen_range(0..subsets.len())].clone();
            let chosen: Vec<usize> = subset
                .iter()
                .flat_map(|l| (0..config.collection_size).map(|_| *by_label[l].choose(&mut rng).expect("non-empty")).collect::<Vec<_>>())
                .collect();
            let rows: Vec<&[f64]> = chosen.iter().map(|&i| parts[i].0.as_slice()).collect();
            let m = Tensor::new(vec![rows.len(), d], rows.concat())?;
            let (sigma2, _) = second_singular_value(&m)?;
            report.rows.push(ProbeRow {
                label_count: size,
                labels: subset,
                sample,
                sigma2,
                mse: mse_spread(&rows),
            });
        }
    }
    for &size in &sizes {
        let rows: Vec<&ProbeRow> = report.rows.iter().filter(|r| r.label_count == size).collect();
        if rows.is_empty() {
            continue;
        }
        let fold = |f: &dyn Fn(&ProbeRow) -> f64| {
            rows.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| (lo.min(f(r)), hi.max(f(r))))
        };
        let (sigma2_min, sigma2_max) = fold(&|r| r.sigma2);
        let (mse_min, mse_max) = fold(&|r| r.mse);
        report.summary.push(ProbeSummary {
            label_count: size,
            sigma2_min,
            sigma2_max,
            mse_min,
            mse_max,
        });
    }
    Ok(report)
}

/// Unit vectors scattered around each center with angular deviation at most
/// `max_angle` radians. Returns `(descriptor, cluster index)` pairs.
pub fn descriptor_clusters(centers: &[Vec<f64>], per_cluster: usize, max_angle: f64, seed: u64) -> Result<Vec<(Vec<f64>, usize)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(centers.len() * per_cluster);
    for (label, c) in centers.iter().enumerate() {
        let norm = c.iter().map(|v| v * v).sum::<f64>().sqrt();
        if c.len() < 2 || !(norm > 0.0) {
            return Err(Error::Invalid("cluster centers must be non-zero vectors of dimension ≥ 2".into()));
        }
        let c: Vec<f64> = c.iter().map(|v| v / norm).collect();
        for _ in 0..per_cluster {
            let mut dir: Vec<f64> = (0..c.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
            let along: f64 = dir.iter().zip(&c).map(|(a, b)| a * b).sum();
            dir.iter_mut().zip(&c).for_each(|(a, b)| *a -= along * b);
            let dn = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
            let theta = rng.gen_range(0.0..=max_angle);
            let v = c.iter().zip(&dir).map(|(a, b)| theta.cos() * a + theta.sin() * b / dn).collect();
            out.push((v, label));
        }
    }
    Ok(out)
}
