//! End-to-end acceptance checks. Each test prints one `PASS`/`FAIL` line.
//!
//! Run with `cargo test --test acceptance -- --nocapture --test-threads 1`
//! to see timings in order; the result lines are printed either way.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use coseg::checkpoint::save_prior;
use coseg::coseg::{cosegment_prepared, prepare_set, Ablation, ClassifierInput, CosegConfig, CosegResult, ShapeFeatures};
use coseg::data::{synth_shape, Family, KWayLabeling, PointCloud, ShapeSet, SynthSpec};
use coseg::encoders::EncoderConfig;
use coseg::eval::{descriptor_clusters, mse_spread, rand_index, rank_probe, RankProbeConfig};
use coseg::experiment::run_experiment;
use coseg::prior::{denoise_accuracy, train_prior, validation_examples, PriorDataset, PriorTrainConfig, PriorWeights};
use coseg::tensor::{second_singular_value, svd, Tensor};

fn report(id: u32, name: &str, pass: bool, detail: &str, elapsed: Duration) {
    let line = format!(
        "acceptance {id} {name}: {} ({detail}; {:.1}s)\n",
        if pass { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64()
    );
    // Written to the raw handle so the line shows without --nocapture.
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
}

fn minutes(m: u64) -> Duration {
    Duration::from_secs(60 * m)
}

// ---------------------------------------------------------------------------
// shared prior

struct TrainedPrior {
    weights: PriorWeights,
    elapsed: Duration,
}

fn prior_shapes(first_seed: u64, count: u64) -> Vec<(PointCloud, KWayLabeling)> {
    let mut out = Vec::new();
    for s in first_seed..first_seed + count {
        out.push(synth_shape(&SynthSpec::new(Family::TwoBox, 512, s)).unwrap());
        out.push(synth_shape(&SynthSpec::new(Family::ChairLike, 512, s).arms(s % 2 == 0)).unwrap());
    }
    out
}

fn prior() -> &'static TrainedPrior {
    static PRIOR: OnceLock<TrainedPrior> = OnceLock::new();
    PRIOR.get_or_init(|| {
        let encoder = EncoderConfig::default();
        let start = Instant::now();
        let data = PriorDataset::from_labelings(&prior_shapes(0, 32), &encoder).unwrap();
        let config = PriorTrainConfig {
            seed: 1,
            log_every: 0,
            ..Default::default()
        };
        let (weights, _) = train_prior(&data, &encoder, &config).unwrap();
        TrainedPrior {
            weights,
            elapsed: start.elapsed(),
        }
    })
}

// ---------------------------------------------------------------------------
// shared co-segmentation setup

fn armless_chairs() -> ShapeSet {
    let specs: Vec<SynthSpec> = (0..8).map(|s| SynthSpec::new(Family::ChairLike, 512, 500 + s)).collect();
    ShapeSet::from_synth(&specs).unwrap()
}

fn armless_features() -> &'static (ShapeSet, Vec<ShapeFeatures>) {
    static FEATS: OnceLock<(ShapeSet, Vec<ShapeFeatures>)> = OnceLock::new();
    FEATS.get_or_init(|| {
        let set = armless_chairs();
        let feats = prepare_set(&set, &prior().weights, ClassifierInput::Mrg).unwrap();
        (set, feats)
    })
}

fn mean_rand_index(result: &CosegResult, set: &ShapeSet) -> f64 {
    let scores: Vec<f64> = result
        .labelings
        .iter()
        .zip(&set.ground_truth)
        .map(|(p, g)| rand_index(p.labels(), g.as_ref().unwrap().labels()).unwrap().score)
        .collect();
    scores.iter().sum::<f64>() / scores.len() as f64
}

/// Full-pipeline run on the armless chairs with K = 3; reused by later checks.
fn full_run() -> &'static (CosegResult, Duration) {
    static RUN: OnceLock<(CosegResult, Duration)> = OnceLock::new();
    RUN.get_or_init(|| {
        let (_, feats) = armless_features();
        let start = Instant::now();
        let r = cosegment_prepared(feats, &prior().weights, &CosegConfig::default()).unwrap();
        (r, start.elapsed())
    })
}

// ---------------------------------------------------------------------------
// 1. second singular value gradient

fn sigma2(m: &Tensor) -> f64 {
    second_singular_value(m).unwrap().0
}

#[test]
fn c1_sigma2_gradient_matches_finite_differences() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (rows, cols, step) = (8, 5, 1e-5);
    let mut worst = 0.0f64;
    let mut matrices = 0;
    while matrices < 50 {
        let m = Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let s = svd(&m).unwrap().s;
        if s[0] - s[1] < 0.1 || s[1] - s[2] < 0.1 {
            continue;
        }
        matrices += 1;
        let (_, analytic) = second_singular_value(&m).unwrap();
        let mut num = vec![0.0; rows * cols];
        for (i, slot) in num.iter_mut().enumerate() {
            let mut plus = m.values().to_vec();
            let mut minus = m.values().to_vec();
            plus[i] += step;
            minus[i] -= step;
            let p = sigma2(&Tensor::new(vec![rows, cols], plus).unwrap());
            let q = sigma2(&Tensor::new(vec![rows, cols], minus).unwrap());
            *slot = (p - q) / (2.0 * step);
        }
        let diff: f64 = analytic.values().iter().zip(&num).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let na: f64 = analytic.values().iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn: f64 = num.iter().map(|n| n * n).sum::<f64>().sqrt();
        worst = worst.max(diff / na.max(nn));
    }
    let elapsed = start.elapsed();
    let pass = worst <= 1e-4 && elapsed < Duration::from_secs(10);
    report(1, "sigma2 gradient", pass, &format!("max relative error {worst:.2e} over 50 matrices"), elapsed);
    assert!(pass);
}

// ---------------------------------------------------------------------------
// 2. Rand index

fn pair_count_rand_index(a: &[usize], b: &[usize]) -> f64 {
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

#[test]
fn c2_rand_index_matches_pair_enumeration() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut mismatches = 0;
    for _ in 0..100 {
        let n = rng.gen_range(2..=50);
        let (ka, kb) = (rng.gen_range(1..=5), rng.gen_range(1..=5));
        let a: Vec<usize> = (0..n).map(|_| rng.gen_range(0..ka)).collect();
        let b: Vec<usize> = (0..n).map(|_| rng.gen_range(0..kb)).collect();
        if rand_index(&a, &b).unwrap().score != pair_count_rand_index(&a, &b) {
            mismatches += 1;
        }
    }
    let example = rand_index(&[0, 0, 1, 1], &[0, 1, 0, 1]).unwrap().score;
    let elapsed = start.elapsed();
    let pass = mismatches == 0 && (example - 2.0 / 3.0).abs() < 1e-15 && elapsed < Duration::from_secs(5);
    report(
        2,
        "rand index",
        pass,
        &format!("{mismatches} mismatches in 100 labelings, [0,0,1,1] vs [0,1,0,1] = {example:.6}"),
        elapsed,
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// 3. rank ordering on synthetic descriptors

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn axis(d: usize, i: usize) -> Vec<f64> {
    let mut v = vec![0.0; d];
    v[i] = 1.0;
    v
}

/// `per_label` descriptors from each of the first `labels` clusters.
fn collection<'a>(parts: &'a [(Vec<f64>, usize)], labels: usize, per_label: usize, rng: &mut ChaCha8Rng) -> Vec<&'a [f64]> {
    let mut rows = Vec::new();
    for l in 0..labels {
        let pool: Vec<&(Vec<f64>, usize)> = parts.iter().filter(|p| p.1 == l).collect();
        for _ in 0..per_label {
            rows.push(pool[rng.gen_range(0..pool.len())].0.as_slice());
        }
    }
    rows
}

#[test]
fn c3_rank_orders_label_counts() {
    let start = Instant::now();
    let d = 16;
    let spread = 5f64.to_radians();
    let centers = vec![axis(d, 0), unit(vec![-0.5, 1.0, 0.0].into_iter().chain(vec![0.0; d - 3]).collect()), axis(d, 2)];
    for i in 0..3 {
        for j in i + 1..3 {
            let c: f64 = centers[i].iter().zip(&centers[j]).map(|(a, b)| a * b).sum();
            assert!(c.acos() >= 60f64.to_radians());
        }
    }
    let parts = descriptor_clusters(&centers, 40, spread, 3).unwrap();
    let probe = rank_probe(&parts, &RankProbeConfig { seed: 3, ..Default::default() }).unwrap();
    let ordered = probe.strictly_ordered(|s| (s.sigma2_min, s.sigma2_max));

    // Two orthogonal clusters against three clusters 20° apart.
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let distant = descriptor_clusters(&[axis(d, 0), axis(d, 1)], 40, spread, 5).unwrap();
    let near_centers: Vec<Vec<f64>> = [0.0f64, 20.0, 40.0]
        .iter()
        .map(|a| {
            let r = a.to_radians();
            unit(vec![r.cos(), r.sin()].into_iter().chain(vec![0.0; d - 2]).collect())
        })
        .collect();
    let near = descriptor_clusters(&near_centers, 40, spread, 6).unwrap();
    let (mut two_mse, mut three_mse) = (f64::INFINITY, f64::NEG_INFINITY);
    for _ in 0..50 {
        let a = collection(&distant, 2, 20, &mut rng);
        let b = collection(&near, 3, 20, &mut rng);
        two_mse = two_mse.min(mse_spread(&a));
        three_mse = three_mse.max(mse_spread(&b));
    }
    let mse_violates = two_mse > three_mse;
    let elapsed = start.elapsed();
    let s = |c| probe.summary_for(c).unwrap();
    let pass = ordered && mse_violates && elapsed < Duration::from_secs(30);
    report(
        3,
        "rank probe ordering",
        pass,
        &format!(
            "sigma2 1-label max {:.6} < 2-label min {:.6} < 3-label min {:.6}; counterexample mse 2-label min {two_mse:.4} > 3-label max {three_mse:.4}",
            s(1).sigma2_max,
            s(2).sigma2_min,
            s(3).sigma2_min
        ),
        elapsed,
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// 4. prior denoising

#[test]
fn c4_prior_denoises_held_out_masks() {
    let p = prior();
    let held = PriorDataset::from_labelings(&prior_shapes(1000, 8), &EncoderConfig::default()).unwrap();
    let examples = validation_examples(&held, 50, 77, 0.2, 0.3).unwrap();
    let accuracy = denoise_accuracy(&p.weights, &held, &examples).unwrap();
    let pass = accuracy >= 0.95 && p.elapsed <= minutes(10);
    report(
        4,
        "prior denoising",
        pass,
        &format!("held-out per-point accuracy {accuracy:.4} over 50 masks, training time"),
        p.elapsed,
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// 5. co-segmentation quality

#[test]
fn c5_cosegmentation_quality() {
    let (set, _) = armless_features();
    let (r, elapsed) = full_run();
    let ri = mean_rand_index(r, set);
    let pass = ri <= 0.15 && r.final_energy < r.initial_energy && *elapsed <= minutes(10);
    report(
        5,
        "co-segmentation quality",
        pass,
        &format!(
            "mean RI {ri:.4}, energy {:.4} -> {:.4}, restarts {}",
            r.initial_energy, r.final_energy, r.restarts
        ),
        *elapsed,
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// 6. granularity via K

#[test]
fn c6_label_count_follows_k() {
    let start = Instant::now();
    let (_, feats) = armless_features();
    let run = |k| cosegment_prepared(feats, &prior().weights, &CosegConfig { k, ..Default::default() }).unwrap();
    let five = run(5);
    let per_shape: Vec<usize> = five.labelings.iter().map(|l| l.used().len()).collect();
    let five_ok = per_shape.iter().all(|&c| c <= 5) && per_shape.iter().any(|&c| c < 5);
    let (two, four) = (run(2).labels_used.len(), run(4).labels_used.len());
    let pass = five_ok && four > two;
    report(
        6,
        "granularity",
        pass,
        &format!("K=5 labels per shape {per_shape:?}; distinct labels K=4 {four} vs K=2 {two}"),
        start.elapsed(),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// 7. set context changes the labeling of a shared shape

#[test]
fn c7_shared_shape_depends_on_set() {
    let start = Instant::now();
    let shared = SynthSpec::new(Family::ChairLike, 512, 700);
    let build = |arms: bool, first: u64| {
        let mut specs: Vec<SynthSpec> = (0..7).map(|s| SynthSpec::new(Family::ChairLike, 512, first + s).arms(arms)).collect();
        specs.push(shared.clone());
        ShapeSet::from_synth(&specs).unwrap()
    };
    let cfg = CosegConfig { k: 4, ..Default::default() };
    let run = |set: &ShapeSet| {
        let feats = prepare_set(set, &prior().weights, ClassifierInput::Mrg).unwrap();
        cosegment_prepared(&feats, &prior().weights, &cfg).unwrap()
    };
    let (armed, armless) = (build(true, 600), build(false, 650));
    let (ra, rb) = (run(&armed), run(&armless));
    let (ria, rib) = (mean_rand_index(&ra, &armed), mean_rand_index(&rb, &armless));
    let used_a: BTreeSet<usize> = ra.labelings[7].used();
    let used_b: BTreeSet<usize> = rb.labelings[7].used();
    let pass = used_a != used_b && ria <= 0.2 && rib <= 0.2;
    report(
        7,
        "set context",
        pass,
        &format!("shared shape labels {used_a:?} (armed set) vs {used_b:?} (armless set); mean RI {ria:.4} / {rib:.4}"),
        start.elapsed(),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// 8. ablations

#[test]
fn c8_ablations_degrade() {
    let start = Instant::now();
    let (set, feats) = armless_features();
    let (full, _) = full_run();
    let full_group = full.trace.last().unwrap().group();
    let ablated = |a| {
        cosegment_prepared(feats, &prior().weights, &CosegConfig { ablate: Some(a), ..Default::default() }).unwrap()
    };
    let nc = ablated(Ablation::NoContrastive);
    let nc_min = nc.trace.iter().map(|t| t.group()).fold(f64::INFINITY, f64::min);
    let np = ablated(Ablation::NoPrior);
    let (ri_full, ri_np) = (mean_rand_index(full, set), mean_rand_index(&np, set));
    let pass = nc_min >= full_group && ri_np > ri_full;
    report(
        8,
        "ablations",
        pass,
        &format!(
            "no-contrastive group term min {nc_min:.4} vs full final {full_group:.4}; no-prior RI {ri_np:.4} vs full {ri_full:.4}"
        ),
        start.elapsed(),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// 9. reproducible outputs

fn label_bytes(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = fs::read_dir(dir.join("labels"))
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect();
    out.sort();
    out
}

#[test]
fn c9_rerun_is_byte_identical() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    save_prior(&prior().weights, dir.path().join("prior.json")).unwrap();
    let manifest = dir.path().join("experiment.toml");
    fs::write(
        &manifest,
        r#"name = "rerun"
out = "out"

[[set.shapes]]
family = "chair_like"
n_points = 256
seed = 900
count = 4

[prior]
checkpoint = "prior.json"

[coseg]
k = 3
max_iters = 40
"#,
    )
    .unwrap();
    run_experiment(&manifest).unwrap();
    let first = label_bytes(&dir.path().join("out"));
    run_experiment(&manifest).unwrap();
    let second = label_bytes(&dir.path().join("out"));
    let pass = !first.is_empty() && first == second;
    report(
        9,
        "reproducibility",
        pass,
        &format!("{} label files compared byte for byte", first.len()),
        start.elapsed(),
    );
    assert!(pass);
}
