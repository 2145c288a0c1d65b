mod common;

use coseg::coseg::{completeness_loss, group_consistency_loss, part_descriptor};
use coseg::data::{
    corrupt_mask, knn, neighborhood_table, radius_neighbors, synth_shape, BinaryMask, CorruptionSpec, Family,
    KWayLabeling, PointCloud, SynthSpec,
};
use coseg::eval::rand_index;
use coseg::tensor::{second_singular_value, svd, Tensor};
use proptest::prelude::*;

fn brute_rand_index(a: &[usize], b: &[usize]) -> f64 {
    let n = a.len();
    let mut agree = 0u64;
    for i in 0..n {
        for j in i + 1..n {
            if (a[i] == a[j]) == (b[i] == b[j]) {
                agree += 1;
            }
        }
    }
    1.0 - agree as f64 / (n * (n - 1) / 2) as f64
}

fn labelings() -> impl Strategy<Value = (Vec<usize>, Vec<usize>)> {
    (2usize..50, 1usize..6, 1usize..6).prop_flat_map(|(n, ka, kb)| {
        (prop::collection::vec(0..ka, n), prop::collection::vec(0..kb, n))
    })
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-2.0f64..2.0, rows * cols).prop_map(move |v| Tensor::new(vec![rows, cols], v).unwrap())
}

fn cloud_from(points: Vec<[f64; 3]>) -> PointCloud {
    PointCloud::new("p", points).unwrap().0
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rand_index_matches_pair_enumeration((a, b) in labelings()) {
        let fast = rand_index(&a, &b).unwrap().score;
        prop_assert_eq!(fast, brute_rand_index(&a, &b));
    }

    #[test]
    fn rand_index_symmetric_and_permutation_free((a, b) in labelings(), shift in 1usize..7) {
        let ab = rand_index(&a, &b).unwrap().score;
        prop_assert_eq!(ab, rand_index(&b, &a).unwrap().score);
        let relabeled: Vec<usize> = a.iter().map(|l| (l * 3 + shift) % 17).collect();
        prop_assert_eq!(ab, rand_index(&relabeled, &b).unwrap().score);
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(rand_index(&a, &a).unwrap().score, 0.0);
    }

    #[test]
    fn radius_query_matches_filter(points in prop::collection::vec(prop::array::uniform3(-1.0f64..1.0), 8..60), r in 0.05f64..1.5, q in 0usize..8) {
        let c = cloud_from(points);
        let got = radius_neighbors(&c, q, r);
        let p = c.points();
        let mut want: Vec<usize> = (0..c.len())
            .filter(|&j| (0..3).map(|k| (p[j][k] - p[q][k]).powi(2)).sum::<f64>() <= r * r)
            .collect();
        let mut sorted = got.clone();
        sorted.sort_unstable();
        want.sort_unstable();
        prop_assert_eq!(sorted, want);
        prop_assert_eq!(got[0], q);
        let k = knn(&c, q, 5);
        prop_assert_eq!(k.len(), 5.min(c.len()));
        prop_assert_eq!(k[0], q);
    }

    #[test]
    fn capped_tables_are_subsets(points in prop::collection::vec(prop::array::uniform3(-1.0f64..1.0), 8..80), cap in 1usize..10, seed in any::<u64>()) {
        let c = cloud_from(points);
        let full = neighborhood_table(&c, 0.8, None, 0);
        let capped = neighborhood_table(&c, 0.8, Some(cap), seed);
        for (q, (f, s)) in full.iter().zip(capped.iter()).enumerate() {
            prop_assert!(s.len() <= cap.max(1) && s.len() == f.len().min(cap.max(1)));
            prop_assert_eq!(s[0] as usize, q);
            prop_assert!(s.iter().all(|j| f.contains(j)));
        }
        prop_assert_eq!(capped, neighborhood_table(&c, 0.8, Some(cap), seed));
    }

    #[test]
    fn sigma2_invariances(m in matrix(5, 4), scale in 0.1f64..5.0, angle in 0.0f64..6.28) {
        let (s, _) = second_singular_value(&m).unwrap();
        let (st, _) = second_singular_value(&m.transpose()).unwrap();
        prop_assert!((s - st).abs() <= 1e-9 * (1.0 + s));
        let scaled = Tensor::new(vec![5, 4], m.values().iter().map(|v| v * scale).collect()).unwrap();
        let (ss, _) = second_singular_value(&scaled).unwrap();
        prop_assert!((ss - scale * s).abs() <= 1e-9 * (1.0 + ss));
        let mut rows: Vec<Vec<f64>> = (0..5).map(|r| m.row(r).to_vec()).collect();
        rows.reverse();
        let (sp, _) = second_singular_value(&Tensor::from_rows(&rows).unwrap()).unwrap();
        prop_assert!((sp - s).abs() <= 1e-9 * (1.0 + s));
        let (c, si) = (angle.cos(), angle.sin());
        let rotated: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| vec![c * r[0] - si * r[1], si * r[0] + c * r[1], r[2], r[3]])
            .collect();
        let (sr, _) = second_singular_value(&Tensor::from_rows(&rotated).unwrap()).unwrap();
        prop_assert!((sr - s).abs() <= 1e-9 * (1.0 + s));
    }

    #[test]
    fn svd_reconstructs(m in matrix(6, 3)) {
        let d = svd(&m).unwrap();
        let (u, v) = (&d.u, &d.v);
        for r in 0..6 {
            for c in 0..3 {
                let x: f64 = (0..d.s.len()).map(|k| u.at(r, k) * d.s[k] * v.at(c, k)).sum();
                prop_assert!((x - m.at(r, c)).abs() <= 1e-8 * (1.0 + d.s[0]));
            }
        }
        prop_assert!(d.s.windows(2).all(|w| w[0] >= w[1]) && d.s.iter().all(|s| *s >= 0.0));
    }

    #[test]
    fn group_loss_invariances(a in matrix(3, 4), b in matrix(4, 4), c in matrix(2, 4), scale in 0.2f64..5.0) {
        let base = group_consistency_loss(&[a.clone(), b.clone(), c.clone()], true).unwrap().value;
        let relabeled = group_consistency_loss(&[c.clone(), a.clone(), b.clone()], true).unwrap().value;
        prop_assert!((base - relabeled).abs() < 1e-9);
        let mut rows: Vec<Vec<f64>> = (0..4).map(|r| b.row(r).to_vec()).collect();
        rows.rotate_left(1);
        let shuffled = group_consistency_loss(&[a.clone(), Tensor::from_rows(&rows).unwrap(), c.clone()], true).unwrap().value;
        prop_assert!((base - shuffled).abs() < 1e-9);
        let big = |t: &Tensor| Tensor::new(t.shape().to_vec(), t.values().iter().map(|v| v * scale).collect()).unwrap();
        let normalized = group_consistency_loss(&[big(&a), big(&b), big(&c)], true).unwrap().value;
        prop_assert!((base - normalized).abs() < 1e-9);
        let raw = group_consistency_loss(&[a.clone(), b.clone(), c.clone()], false).unwrap();
        let raw_scaled = group_consistency_loss(&[big(&a), big(&b), big(&c)], false).unwrap();
        prop_assert!((raw_scaled.rank - scale * raw.rank).abs() < 1e-8 * (1.0 + raw_scaled.rank));
    }

    #[test]
    fn completeness_decreases_toward_one_hot(t in 0.0f64..0.99, k in 2usize..6) {
        let row = |s: f64| -> Vec<f64> {
            (0..k).map(|i| (1.0 - s) / k as f64 + if i == 0 { s } else { 0.0 }).collect()
        };
        let at = |s: f64| completeness_loss(&[Tensor::new(vec![1, k], row(s)).unwrap()]);
        prop_assert!(at(t + 0.01) < at(t));
        prop_assert!((at(0.0) - (1.0 - 1.0 / k as f64)).abs() < 1e-12);
    }

    #[test]
    fn descriptor_ignores_zero_weight_points(f in prop::collection::vec(0.0f64..3.0, 24), extra in prop::collection::vec(0.0f64..3.0, 8)) {
        let feats = Tensor::new(vec![6, 4], f.clone()).unwrap();
        let w = [1.0, 0.5, 0.8, 0.2, 0.9, 0.3];
        let d = part_descriptor(&feats, &w, 1).unwrap().unwrap();
        let mut more = f.clone();
        more.extend(&extra);
        let feats2 = Tensor::new(vec![8, 4], more).unwrap();
        let mut w2 = w.to_vec();
        w2.extend([0.0, 0.0]);
        let d2 = part_descriptor(&feats2, &w2, 1).unwrap().unwrap();
        prop_assert_eq!(d.values(), d2.values());
        let max_pool: Vec<f64> = (0..4).map(|c| (0..6).map(|r| w[r] * feats.at(r, c)).fold(0.0, f64::max)).collect();
        let norm = max_pool.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-9 {
            for c in 0..4 {
                prop_assert!((d.values()[c] - max_pool[c] / norm).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn corruption_flip_counts(seed in any::<u64>(), ins in 0.0f64..0.5, del in 0.0f64..0.5, label in 0usize..2) {
        let (c, l) = synth_shape(&SynthSpec::new(Family::TwoBox, 128, seed % 50)).unwrap();
        let m = l.mask(label);
        let out = corrupt_mask(&c, &m, &CorruptionSpec::new(ins, del, seed)).unwrap();
        let (f, b) = (m.foreground_count(), c.len() - m.foreground_count());
        let removed = m.flags().iter().zip(out.flags()).filter(|(a, o)| **a && !**o).count();
        let added = m.flags().iter().zip(out.flags()).filter(|(a, o)| !**a && **o).count();
        prop_assert_eq!(removed, (del * f as f64).floor() as usize);
        prop_assert_eq!(added, (ins * b as f64).floor() as usize);
        prop_assert!(out.foreground_count() > 0);
    }

    #[test]
    fn label_file_round_trip(labels in prop::collection::vec(0usize..6, 1..80)) {
        let dir = tempfile::tempdir().unwrap();
        let l = KWayLabeling::new(labels.clone(), 6).unwrap();
        let p = dir.path().join("x.labels");
        coseg::data::save_labeling(&l, &p).unwrap();
        prop_assert_eq!(coseg::data::load_labeling(&p, Some(6)).unwrap(), l);
    }

    #[test]
    fn point_file_round_trip(points in prop::collection::vec(prop::array::uniform3(-10.0f64..10.0), 8..40)) {
        let dir = tempfile::tempdir().unwrap();
        let c = cloud_from(points);
        let p = dir.path().join("x.xyz");
        coseg::data::save_pointcloud(&c, &p).unwrap();
        let (back, norm) = coseg::data::load_pointcloud(&p).unwrap();
        for (a, b) in back.points().iter().zip(c.points()) {
            for k in 0..3 {
                prop_assert!((a[k] - b[k]).abs() < 1e-12);
            }
        }
        prop_assert!(norm.center.iter().all(|v| v.abs() < 1e-9));
    }
}

#[test]
fn masks_from_labelings() {
    let l = KWayLabeling::new(vec![0, 2, 2, 1], 3).unwrap();
    assert_eq!(l.mask(2), BinaryMask::from_indices(4, &[1, 2]));
    assert_eq!(l.counts(), vec![1, 1, 2]);
}
