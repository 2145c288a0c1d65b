//! Procedural shape families built from axis-aligned boxes.
//!
//! Each box belongs to a primitive group; the group index is the ground-truth
//! label of every point sampled from it. Points are drawn uniformly over box
//! surfaces, with per-group counts proportional to surface area.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::cloud::{Point, PointCloud};
use super::labels::KWayLabeling;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    TwoBox,
    ChairLike,
    TableLike,
    LampLike,
}

impl Family {
    /// Number of label slots (the ground truth `k_bound`).
    pub fn label_count(self) -> usize {
        match self {
            Family::TwoBox => 2,
            Family::ChairLike => 4,
            Family::TableLike => 3,
            Family::LampLike => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Family::TwoBox => "two_box",
            Family::ChairLike => "chair_like",
            Family::TableLike => "table_like",
            Family::LampLike => "lamp_like",
        }
    }
}

pub mod chair {
    pub const BACK: usize = 0;
    pub const SEAT: usize = 1;
    pub const LEGS: usize = 2;
    pub const ARMS: usize = 3;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub family: Family,
    pub n_points: usize,
    #[serde(default)]
    pub with_arms: bool,
    #[serde(default)]
    pub jitter: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn new(family: Family, n_points: usize, seed: u64) -> Self {
        SynthSpec {
            family,
            n_points,
            with_arms: false,
            jitter: 0.0,
            seed,
        }
    }

    pub fn arms(mut self, on: bool) -> Self {
        self.with_arms = on;
        self
    }

    pub fn jitter(mut self, std: f64) -> Self {
        self.jitter = std;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_points < 64 {
            return Err(Error::Invalid(format!("n_points must be >= 64, got {}", self.n_points)));
        }
        if !(self.jitter >= 0.0 && self.jitter.is_finite()) {
            return Err(Error::Invalid(format!("jitter must be >= 0, got {}", self.jitter)));
        }
        Ok(())
    }

    pub fn default_id(&self) -> String {
        let arms = if self.family == Family::ChairLike && self.with_arms { "_arms" } else { "" };
        format!("{}{}_{}", self.family.name(), arms, self.seed)
    }
}

#[derive(Clone, Copy, Debug)]
struct Cuboid {
    center: Point,
    half: Point,
    group: usize,
}

impl Cuboid {
    fn new(min: Point, max: Point, group: usize) -> Self {
        Cuboid {
            center: [(min[0] + max[0]) / 2.0, (min[1] + max[1]) / 2.0, (min[2] + max[2]) / 2.0],
            half: [(max[0] - min[0]) / 2.0, (max[1] - min[1]) / 2.0, (max[2] - min[2]) / 2.0],
            group,
        }
    }

    /// Areas of the face pairs orthogonal to x, y, z (each pair counted once per face).
    fn face_areas(&self) -> [f64; 3] {
        let [a, b, c] = self.half;
        [4.0 * b * c, 4.0 * a * c, 4.0 * a * b]
    }

    fn area(&self) -> f64 {
        2.0 * self.face_areas().iter().sum::<f64>()
    }

    fn sample(&self, rng: &mut impl Rng) -> Point {
        let areas = self.face_areas();
        let total: f64 = areas.iter().sum();
        let mut pick = rng.gen::<f64>() * total;
        let mut axis = 2;
        for (i, a) in areas.iter().enumerate() {
            if pick < *a {
                axis = i;
                break;
            }
            pick -= a;
        }
        let side = if rng.gen::<bool>() { 1.0 } else { -1.0 };
        let mut p = [0.0; 3];
        for k in 0..3 {
            p[k] = if k == axis {
                self.center[k] + side * self.half[k]
            } else {
                self.center[k] + rng.gen_range(-1.0..=1.0) * self.half[k]
            };
        }
        p
    }
}

fn chair(spec: &SynthSpec, rng: &mut impl Rng) -> Vec<Cuboid> {
    let w = rng.gen_range(0.8..1.1);
    let d = rng.gen_range(0.7..0.95);
    let h = rng.gen_range(0.75..0.95);
    let t = rng.gen_range(0.07..0.1);
    let back_h = rng.gen_range(0.8..1.1);
    let lt = rng.gen_range(0.06..0.09);
    let (hw, hd) = (w / 2.0, d / 2.0);
    let mut parts = vec![
        Cuboid::new([-hw, h + t, -hd], [hw, h + t + back_h, -hd + t], chair::BACK),
        Cuboid::new([-hw, h, -hd], [hw, h + t, hd], chair::SEAT),
    ];
    for (sx, sz) in [(-1.0, -1.0), (1.0, -1.0), (-1.0, 1.0), (1.0, 1.0)] {
        let x0 = if sx < 0.0 { -hw } else { hw - lt };
        let z0 = if sz < 0.0 { -hd } else { hd - lt };
        parts.push(Cuboid::new([x0, 0.0, z0], [x0 + lt, h, z0 + lt], chair::LEGS));
    }
    if spec.with_arms {
        let arm_h = rng.gen_range(0.25..0.35);
        let at = 0.07;
        for sx in [-1.0, 1.0] {
            let x0 = if sx < 0.0 { -hw - at } else { hw };
            parts.push(Cuboid::new(
                [x0, h + t + arm_h - at, -hd + t],
                [x0 + at, h + t + arm_h, hd],
                chair::ARMS,
            ));
            parts.push(Cuboid::new(
                [x0, h + t, hd - at],
                [x0 + at, h + t + arm_h - at, hd],
                chair::ARMS,
            ));
        }
    }
    parts
}

fn table(rng: &mut impl Rng) -> Vec<Cuboid> {
    let w = rng.gen_range(1.2..1.7);
    let d = rng.gen_range(0.7..1.0);
    let h = rng.gen_range(0.7..0.9);
    let t = rng.gen_range(0.05..0.08);
    let lt = rng.gen_range(0.06..0.1);
    let (hw, hd) = (w / 2.0, d / 2.0);
    let mut parts = vec![Cuboid::new([-hw, h - t, -hd], [hw, h, hd], 0)];
    for (sx, sz) in [(-1.0, -1.0), (1.0, -1.0), (-1.0, 1.0), (1.0, 1.0)] {
        let x0 = if sx < 0.0 { -hw } else { hw - lt };
        let z0 = if sz < 0.0 { -hd } else { hd - lt };
        parts.push(Cuboid::new([x0, 0.0, z0], [x0 + lt, h - t, z0 + lt], 1));
    }
    if rng.gen::<bool>() {
        let sh = rng.gen_range(0.2..0.35);
        parts.push(Cuboid::new([-hw + lt, sh, -hd + lt], [hw - lt, sh + 0.04, hd - lt], 2));
    }
    parts
}

fn lamp(rng: &mut impl Rng) -> Vec<Cuboid> {
    let base = rng.gen_range(0.4..0.6) / 2.0;
    let base_t = rng.gen_range(0.05..0.08);
    let pole_h = rng.gen_range(1.0..1.4);
    let pole = 0.04;
    let shade = rng.gen_range(0.45..0.65) / 2.0;
    let shade_h = rng.gen_range(0.3..0.45);
    vec![
        Cuboid::new([-base, 0.0, -base], [base, base_t, base], 0),
        Cuboid::new([-pole, base_t, -pole], [pole, base_t + pole_h, pole], 1),
        Cuboid::new(
            [-shade, base_t + pole_h - shade_h * 0.3, -shade],
            [shade, base_t + pole_h + shade_h * 0.7, shade],
            2,
        ),
    ]
}

fn two_box(rng: &mut impl Rng) -> Vec<Cuboid> {
    let a = [rng.gen_range(0.6..1.0), rng.gen_range(0.3..0.6), rng.gen_range(0.6..1.0)];
    let b = [rng.gen_range(0.2..0.5), rng.gen_range(0.5..0.9), rng.gen_range(0.2..0.5)];
    let off = rng.gen_range(-0.2..0.2);
    vec![
        Cuboid::new([-a[0] / 2.0, 0.0, -a[2] / 2.0], [a[0] / 2.0, a[1], a[2] / 2.0], 0),
        Cuboid::new(
            [off - b[0] / 2.0, a[1], -b[2] / 2.0],
            [off + b[0] / 2.0, a[1] + b[1], b[2] / 2.0],
            1,
        ),
    ]
}

/// Split `n` points across groups proportionally to area (largest remainder),
/// giving every group at least one point.
fn allocate(areas: &[f64], n: usize) -> Vec<usize> {
    let total: f64 = areas.iter().sum();
    let raw: Vec<f64> = areas.iter().map(|a| a / total * n as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| (r.floor() as usize).max(1)).collect();
    let mut order: Vec<usize> = (0..areas.len()).collect();
    order.sort_by(|&i, &j| (raw[j] - raw[j].floor()).total_cmp(&(raw[i] - raw[i].floor())).then(i.cmp(&j)));
    let mut assigned: usize = counts.iter().sum();
    let mut k = 0;
    while assigned < n {
        counts[order[k % order.len()]] += 1;
        assigned += 1;
        k += 1;
    }
    while assigned > n {
        let i = (0..counts.len()).max_by_key(|&i| (counts[i], usize::MAX - i)).expect("non-empty");
        counts[i] -= 1;
        assigned -= 1;
    }
    counts
}

/// Generate a normalized cloud and its ground-truth labeling.
pub fn synth_shape(spec: &SynthSpec) -> Result<(PointCloud, KWayLabeling)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let parts = match spec.family {
        Family::TwoBox => two_box(&mut rng),
        Family::ChairLike => chair(spec, &mut rng),
        Family::TableLike => table(&mut rng),
        Family::LampLike => lamp(&mut rng),
    };
    let mut groups: Vec<usize> = parts.iter().map(|c| c.group).collect();
    groups.sort_unstable();
    groups.dedup();
    let group_area: Vec<f64> = groups
        .iter()
        .map(|g| parts.iter().filter(|c| c.group == *g).map(Cuboid::area).sum())
        .collect();
    let counts = allocate(&group_area, spec.n_points);

    let noise = Normal::new(0.0, spec.jitter.max(0.0)).map_err(|e| Error::Invalid(e.to_string()))?;
    let mut points = Vec::with_capacity(spec.n_points);
    let mut labels = Vec::with_capacity(spec.n_points);
    for (g, &count) in groups.iter().zip(&counts) {
        let members: Vec<&Cuboid> = parts.iter().filter(|c| c.group == *g).collect();
        let areas: Vec<f64> = members.iter().map(|c| c.area()).collect();
        let total: f64 = areas.iter().sum();
        for _ in 0..count {
            let mut pick = rng.gen::<f64>() * total;
            let mut chosen = members[members.len() - 1];
            for (c, a) in members.iter().zip(&areas) {
                if pick < *a {
                    chosen = c;
                    break;
                }
                pick -= a;
            }
            let mut p = chosen.sample(&mut rng);
            if spec.jitter > 0.0 {
                p.iter_mut().for_each(|v| *v += noise.sample(&mut rng));
            }
            points.push(p);
            labels.push(*g);
        }
    }
    // Interleave groups so point order carries no label information.
    let mut order: Vec<usize> = (0..points.len()).collect();
    use rand::seq::SliceRandom;
    order.shuffle(&mut rng);
    let points: Vec<Point> = order.iter().map(|&i| points[i]).collect();
    let labels: Vec<usize> = order.iter().map(|&i| labels[i]).collect();

    let (cloud, _) = PointCloud::new(spec.default_id(), points)?;
    let labeling = KWayLabeling::new(labels, spec.family.label_count())?;
    Ok((cloud, labeling))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_box_has_two_labels() {
        let (c, l) = synth_shape(&SynthSpec::new(Family::TwoBox, 512, 1)).unwrap();
        assert_eq!(c.len(), 512);
        assert_eq!(l.used().len(), 2);
    }

    #[test]
    fn armless_chair_has_no_arm_label() {
        for seed in 0..5 {
            let (_, l) = synth_shape(&SynthSpec::new(Family::ChairLike, 256, seed)).unwrap();
            assert!(!l.used().contains(&chair::ARMS));
            assert_eq!(l.used().len(), 3);
            let (_, l) = synth_shape(&SynthSpec::new(Family::ChairLike, 256, seed).arms(true)).unwrap();
            assert!(l.used().contains(&chair::ARMS));
        }
    }

    #[test]
    fn deterministic() {
        let s = SynthSpec::new(Family::LampLike, 300, 9).jitter(0.01);
        assert_eq!(synth_shape(&s).unwrap(), synth_shape(&s).unwrap());
    }

    #[test]
    fn every_family_labels_within_bound() {
        for f in [Family::TwoBox, Family::ChairLike, Family::TableLike, Family::LampLike] {
            for seed in 0..4 {
                let (_, l) = synth_shape(&SynthSpec::new(f, 128, seed).arms(true)).unwrap();
                assert!(l.used().len() <= f.label_count());
                assert!(l.counts().iter().enumerate().all(|(g, &c)| c > 0 || !l.used().contains(&g)));
            }
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(synth_shape(&SynthSpec::new(Family::TwoBox, 63, 0)).is_err());
        assert!(synth_shape(&SynthSpec::new(Family::TwoBox, 64, 0).jitter(-1.0)).is_err());
    }

    #[test]
    fn allocation_sums() {
        let c = allocate(&[1.0, 100.0, 3.0], 64);
        assert_eq!(c.iter().sum::<usize>(), 64);
        assert!(c.iter().all(|&x| x >= 1));
    }
}
