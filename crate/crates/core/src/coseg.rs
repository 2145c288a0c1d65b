//! Per-set co-segmentation: a point-wise K-way classifier optimized against
//! the rank-based group consistency energy plus a completeness term.

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{KWayLabeling, ShapeSet};
use crate::encoders::{EncoderConfig, PreparedCloud};
use crate::error::{Error, Result};
use crate::par;
use crate::prior::{PriorFeatures, PriorWeights};
use crate::tensor::{softmax_rows, Activation, AdamConfig, Mlp, Optimizer, Params, Tape, Tensor, Var};

/// Constant logit given to labels whose mask is empty, so they stay empty.
pub const EMPTY_LOGIT: f64 = -1e3;

#[derive(Clone, Debug, PartialEq)]
pub struct CosegWeights<T = Tensor> {
    pub classifier: Mlp<T>,
}

impl CosegWeights<Tensor> {
    pub fn init(input: usize, hidden: usize, k: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        CosegWeights {
            classifier: Mlp::init(&[input, hidden, k], Activation::Identity, &mut rng),
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> CosegWeights<Var> {
        CosegWeights {
            classifier: self.classifier.bind(tape),
        }
    }

    pub fn k(&self) -> usize {
        self.classifier.output_width()
    }
}

impl<T> Params<T> for CosegWeights<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        self.classifier.visit(&format!("{prefix}classifier."), f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut T)) {
        self.classifier.visit_mut(f);
    }
}

/// What the K-way classifier sees at each point.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierInput {
    Mrg,
    Coords,
}

/// How a label's soft weight becomes the hard mask handed to the prior.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskRule {
    /// Points whose soft weight is at least 0.5.
    Threshold,
    /// Points whose most probable label is this one.
    Argmax,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    NoPrior,
    NoContrastive,
    NoCompleteness,
    MrgParts,
}

impl Ablation {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "no-prior" => Ok(Ablation::NoPrior),
            "no-contrastive" => Ok(Ablation::NoContrastive),
            "no-completeness" => Ok(Ablation::NoCompleteness),
            "mrg-parts" => Ok(Ablation::MrgParts),
            other => Err(Error::Invalid(format!(
                "unknown ablation {other:?} (expected no-prior, no-contrastive, no-completeness or mrg-parts)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Ablation::NoPrior => "no-prior",
            Ablation::NoContrastive => "no-contrastive",
            Ablation::NoCompleteness => "no-completeness",
            Ablation::MrgParts => "mrg-parts",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RecomposeConfig {
    pub mask_rule: MaskRule,
    /// Weight of the prior's score when added to the label logits.
    pub prior_gain: f64,
}

impl Default for RecomposeConfig {
    fn default() -> Self {
        RecomposeConfig {
            mask_rule: MaskRule::Argmax,
            prior_gain: 8.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CosegConfig {
    pub k: usize,
    pub lambda: f64,
    pub max_iters: usize,
    pub tolerance: f64,
    pub window: usize,
    pub batch_size: usize,
    pub batch_stride: usize,
    pub min_part_points: usize,
    pub hidden: usize,
    pub input: ClassifierInput,
    pub recompose: RecomposeConfig,
    pub adam: AdamConfig,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ablate: Option<Ablation>,
}

impl Default for CosegConfig {
    fn default() -> Self {
        CosegConfig {
            k: 3,
            lambda: 1.0,
            max_iters: 300,
            tolerance: 1e-4,
            window: 20,
            batch_size: 8,
            batch_stride: 4,
            min_part_points: 5,
            hidden: 64,
            input: ClassifierInput::Mrg,
            recompose: RecomposeConfig::default(),
            adam: AdamConfig {
                learning_rate: 3e-3,
                ..AdamConfig::default()
            },
            seed: 0,
            ablate: None,
        }
    }
}

impl CosegConfig {
    pub fn validate(&self) -> Result<()> {
        self.adam.validate()?;
        if self.k < 2 {
            return Err(Error::Invalid(format!("K must be at least 2, got {}", self.k)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Invalid(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        if self.batch_size < 2 || self.batch_stride == 0 || self.window == 0 || self.hidden == 0 {
            return Err(Error::Invalid("batch size ≥ 2, stride, window and hidden width must be positive".into()));
        }
        if self.min_part_points == 0 {
            return Err(Error::Invalid("min_part_points must be positive".into()));
        }
        if !self.recompose.prior_gain.is_finite() {
            return Err(Error::Invalid("prior_gain must be finite".into()));
        }
        Ok(())
    }

    fn effective_lambda(&self) -> f64 {
        if self.ablate == Some(Ablation::NoCompleteness) {
            0.0
        } else {
            self.lambda
        }
    }

    fn contrastive(&self) -> bool {
        self.ablate != Some(Ablation::NoContrastive)
    }
}

/// Frozen per-shape inputs for co-segmentation.
#[derive(Clone, Debug)]
pub struct ShapeFeatures {
    pub id: String,
    pub prior: PriorFeatures,
    /// Classifier input, `n×d`.
    pub input: Tensor,
}

impl ShapeFeatures {
    pub fn new(prep: &PreparedCloud, prior: &PriorWeights, input: ClassifierInput) -> Result<Self> {
        let feats = PriorFeatures::compute(prep, prior)?;
        let input = match input {
            ClassifierInput::Mrg => feats.mrg.clone(),
            ClassifierInput::Coords => prep.coords.clone(),
        };
        Ok(ShapeFeatures {
            id: prep.cloud.id().to_string(),
            prior: feats,
            input,
        })
    }

    pub fn len(&self) -> usize {
        self.input.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.input.rows() == 0
    }
}

/// Per-point K-way logits.
pub fn classify_kway(features: &ShapeFeatures, weights: &CosegWeights) -> Result<Tensor> {
    crate::tensor::mlp_forward(&features.input, &weights.classifier)
}

fn argmax_rows(t: &Tensor) -> Vec<usize> {
    let k = t.cols();
    t.values()
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect()
}

/// Hard foreground index lists, one per label, from soft label weights.
fn hard_masks(soft: &Tensor, rule: MaskRule) -> Vec<Vec<usize>> {
    let k = soft.cols();
    let mut masks = vec![Vec::new(); k];
    match rule {
        MaskRule::Threshold => {
            for (q, row) in soft.values().chunks(k).enumerate() {
                for (i, &p) in row.iter().enumerate() {
                    if p >= 0.5 {
                        masks[i].push(q);
                    }
                }
            }
        }
        MaskRule::Argmax => {
            for (q, i) in argmax_rows(soft).into_iter().enumerate() {
                masks[i].push(q);
            }
        }
    }
    masks
}

/// Refine each label's hard foreground with the prior and resolve overlaps
/// with a per-point softmax over the stacked, gain-scaled scores. Labels with
/// an empty foreground get a constant [`EMPTY_LOGIT`] column.
fn recompose_on(tape: &mut Tape, features: &ShapeFeatures, logits: Var, prior: &PriorWeights, cfg: &RecomposeConfig) -> Result<Var> {
    let soft = tape.softmax_rows(logits)?;
    let (n, k) = (tape.value(soft).rows(), tape.value(soft).cols());
    let masks = hard_masks(tape.value(soft), cfg.mask_rule);
    let mut cols = Vec::with_capacity(k);
    for (i, fg) in masks.iter().enumerate() {
        if fg.is_empty() {
            cols.push(tape.constant(Tensor::from_parts(vec![n, 1], vec![EMPTY_LOGIT; n])));
            continue;
        }
        let w = tape.select_col(soft, i)?;
        let score = features.prior.denoise_on(tape, prior, w, fg)?;
        cols.push(tape.scale(score, cfg.prior_gain));
    }
    let z = tape.concat_cols(&cols)?;
    tape.softmax_rows(z)
}

/// Refine each label's part with the prior and resolve overlaps with a
/// per-point softmax. Rows of the result sum to one.
pub fn refine_and_recompose(features: &ShapeFeatures, logits: &Tensor, prior: &PriorWeights, cfg: &RecomposeConfig) -> Result<Tensor> {
    if logits.values().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("logits"));
    }
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let z = recompose_on(&mut tape, features, l, prior, cfg)?;
    Ok(tape.value(z).clone())
}

/// Soft max-pooled, L2-normalized part descriptor; `None` when fewer than
/// `min_points` points carry non-zero weight.
pub fn part_descriptor(features: &Tensor, soft_mask: &[f64], min_points: usize) -> Result<Option<Tensor>> {
    if soft_mask.len() != features.rows() {
        return Err(Error::shape("part_descriptor", "one mask weight per point"));
    }
    if soft_mask.iter().any(|w| !(0.0..=1.0).contains(w)) {
        return Err(Error::Invalid("soft mask weights must lie in [0, 1]".into()));
    }
    if soft_mask.iter().filter(|w| **w > 0.0).count() < min_points.max(1) {
        return Ok(None);
    }
    let mut tape = Tape::new();
    let w = tape.constant(Tensor::from_parts(vec![soft_mask.len(), 1], soft_mask.to_vec()));
    let f = tape.constant(features.clone());
    let pooled = tape.weighted_max_pool(w, f)?;
    let d = tape.l2_normalize(pooled);
    Ok(Some(tape.value(d).clone()))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupLoss {
    pub value: f64,
    /// Largest within-label σ₂.
    pub rank: f64,
    /// Smallest σ₂ over pairs of labels; zero when fewer than two labels
    /// are populated.
    pub contrastive: f64,
    pub degenerate: bool,
}

/// Nodes of the group consistency energy recorded on a tape.
pub struct GroupNodes {
    pub value: Var,
    pub rank: Var,
    pub contrastive: Option<Var>,
    pub populated: usize,
}

/// `1 + max_i σ₂(M_i) − min_{i<j} σ₂([M_i; M_j])` over labels with at least
/// one row. `rows[i]` holds the descriptor nodes of label `i`.
pub fn group_consistency_on(tape: &mut Tape, rows: &[Vec<Var>], contrastive: bool) -> Result<GroupNodes> {
    let mut mats = Vec::new();
    for r in rows.iter().filter(|r| !r.is_empty()) {
        mats.push(tape.concat_rows(r)?);
    }
    if mats.is_empty() {
        let zero = tape.constant(Tensor::scalar(0.0));
        return Ok(GroupNodes {
            value: tape.add_scalar(zero, 1.0),
            rank: zero,
            contrastive: None,
            populated: 0,
        });
    }
    let mut within = Vec::with_capacity(mats.len());
    for &m in &mats {
        within.push(tape.sigma2(m)?);
    }
    let rank = tape.max_of(&within)?;
    let mut value = tape.add_scalar(rank, 1.0);
    let mut pair_term = None;
    if contrastive && mats.len() >= 2 {
        let mut pairs = Vec::new();
        for i in 0..mats.len() {
            for j in i + 1..mats.len() {
                let c = tape.concat_rows(&[mats[i], mats[j]])?;
                pairs.push(tape.sigma2(c)?);
            }
        }
        let m = tape.min_of(&pairs)?;
        value = tape.sub(value, m)?;
        pair_term = Some(m);
    }
    Ok(GroupNodes {
        value,
        rank,
        contrastive: pair_term,
        populated: mats.len(),
    })
}

/// Group consistency energy of label matrices (empty matrices are labels
/// with no parts). With `normalize_rows`, every row is scaled to unit norm
/// first.
pub fn group_consistency_loss(matrices: &[Tensor], normalize_rows: bool) -> Result<GroupLoss> {
    let mut tape = Tape::new();
    let mut rows = Vec::with_capacity(matrices.len());
    for m in matrices {
        let mut label = Vec::new();
        if !m.is_empty() {
            let v = tape.constant(m.clone());
            for r in 0..m.rows() {
                let row = tape.slice_rows(v, r, r + 1)?;
                label.push(if normalize_rows { tape.l2_normalize(row) } else { row });
            }
        }
        rows.push(label);
    }
    let nodes = group_consistency_on(&mut tape, &rows, true)?;
    Ok(GroupLoss {
        value: tape.value(nodes.value).item(),
        rank: tape.value(nodes.rank).item(),
        contrastive: nodes.contrastive.map_or(0.0, |c| tape.value(c).item()),
        degenerate: nodes.populated < 2,
    })
}

/// Mean over all points of `1 − max_k p[q, k]`.
pub fn completeness_loss(maps: &[Tensor]) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for m in maps {
        let k = m.cols().max(1);
        for row in m.values().chunks(k) {
            total += 1.0 - row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub rank: f64,
    pub contrastive: f64,
    pub completeness: f64,
    pub total: f64,
    pub labels_used: usize,
}

impl TraceRow {
    /// The group consistency part of the energy, `1 + rank − contrastive`
    /// (the contrastive term is zero when ablated).
    pub fn group(&self) -> f64 {
        1.0 + self.rank - self.contrastive
    }
}

pub fn trace_csv(trace: &[TraceRow]) -> String {
    let mut s = String::from("iteration,rank,contrastive,completeness,total,labels_used\n");
    for r in trace {
        s.push_str(&format!(
            "{},{:?},{:?},{:?},{:?},{}\n",
            r.iteration, r.rank, r.contrastive, r.completeness, r.total, r.labels_used
        ));
    }
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct CosegResult {
    pub shape_ids: Vec<String>,
    pub labelings: Vec<KWayLabeling>,
    pub initial_energy: f64,
    pub final_energy: f64,
    pub trace: Vec<TraceRow>,
    pub labels_used: BTreeSet<usize>,
    pub restarts: usize,
    pub degenerate: bool,
    pub weights: CosegWeights,
}

/// Overlapping windows of `size` with `stride` when `n > 2·size`, else the
/// whole set. The final window is aligned to the end of the set.
pub fn batch_schedule(n: usize, size: usize, stride: usize) -> Vec<Vec<usize>> {
    if n <= 2 * size {
        return vec![(0..n).collect()];
    }
    let mut out = Vec::new();
    let mut start = 0;
    loop {
        let end = (start + size).min(n);
        out.push((end.saturating_sub(size)..end).collect());
        if end == n {
            break;
        }
        start += stride;
    }
    out
}

struct ShapePass {
    tape: Tape,
    weights: CosegWeights<Var>,
    descriptors: Vec<Option<Var>>,
    confidence: Var,
    labels: Vec<usize>,
}

fn shape_forward(feat: &ShapeFeatures, part_features: &Tensor, weights: &CosegWeights, prior: &PriorWeights, cfg: &CosegConfig) -> Result<ShapePass> {
    let mut tape = Tape::new();
    let w = weights.bind(&mut tape);
    let x = tape.constant(feat.input.clone());
    let logits = w.classifier.forward(&mut tape, x)?;
    let probs = if cfg.ablate == Some(Ablation::NoPrior) {
        tape.softmax_rows(logits)?
    } else {
        recompose_on(&mut tape, feat, logits, prior, &cfg.recompose)?
    };
    let labels = argmax_rows(tape.value(probs));
    let mut counts = vec![0usize; cfg.k];
    labels.iter().for_each(|&l| counts[l] += 1);
    let f = tape.constant(part_features.clone());
    let mut descriptors = Vec::with_capacity(cfg.k);
    for (i, &c) in counts.iter().enumerate() {
        if c < cfg.min_part_points {
            descriptors.push(None);
            continue;
        }
        let col = tape.select_col(probs, i)?;
        let pooled = tape.weighted_max_pool(col, f)?;
        descriptors.push(Some(tape.l2_normalize(pooled)));
    }
    let best = tape.row_max(probs);
    let confidence = tape.sum(best);
    Ok(ShapePass {
        tape,
        weights: w,
        descriptors,
        confidence,
        labels,
    })
}

struct BatchEval {
    row: TraceRow,
    passes: Vec<ShapePass>,
    /// Gradient of the total energy with respect to each pass's descriptors
    /// and confidence sum.
    seeds: Vec<Vec<(Var, Vec<f64>)>>,
    populated: usize,
}

fn evaluate_batch(
    feats: &[ShapeFeatures],
    part_feats: &[&Tensor],
    batch: &[usize],
    weights: &CosegWeights,
    prior: &PriorWeights,
    cfg: &CosegConfig,
    iteration: usize,
) -> Result<BatchEval> {
    let passes = par::map(batch, |&s| shape_forward(&feats[s], part_feats[s], weights, prior, cfg))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;

    let mut head = Tape::new();
    let mut rows: Vec<Vec<Var>> = vec![Vec::new(); cfg.k];
    let mut owners: Vec<(usize, Var, Var)> = Vec::new();
    for (p, pass) in passes.iter().enumerate() {
        for (i, d) in pass.descriptors.iter().enumerate() {
            if let Some(d) = d {
                let leaf = head.leaf_owned(pass.tape.value(*d).clone().with_requires_grad(true));
                rows[i].push(leaf);
                owners.push((p, *d, leaf));
            }
        }
    }
    let group = group_consistency_on(&mut head, &rows, cfg.contrastive())?;
    let total_points: usize = batch.iter().map(|&s| feats[s].len()).sum();
    let confident: f64 = passes.iter().map(|p| p.tape.value(p.confidence).item()).sum();
    let completeness = 1.0 - confident / total_points as f64;
    let lambda = cfg.effective_lambda();
    let group_value = head.value(group.value).item();
    let used: BTreeSet<usize> = passes.iter().flat_map(|p| p.labels.iter().copied()).collect();
    let row = TraceRow {
        iteration,
        rank: head.value(group.rank).item(),
        contrastive: group.contrastive.map_or(0.0, |c| head.value(c).item()),
        completeness,
        total: group_value + lambda * completeness,
        labels_used: used.len(),
    };

    let mut seeds: Vec<Vec<(Var, Vec<f64>)>> = passes
        .iter()
        .map(|p| vec![(p.confidence, vec![-lambda / total_points as f64])])
        .collect();
    if head.needs_grad(group.value) {
        let g = head.backward(group.value)?;
        for (p, d, leaf) in owners {
            if let Some(gd) = g.get(leaf) {
                seeds[p].push((d, gd.to_vec()));
            }
        }
    }
    Ok(BatchEval {
        row,
        passes,
        seeds,
        populated: group.populated,
    })
}

fn accumulate(weights: &mut CosegWeights, eval: &BatchEval) -> Result<()> {
    let per = par::map_range(eval.passes.len(), |p| -> Result<Vec<Vec<f64>>> {
        let pass = &eval.passes[p];
        let g = pass.tape.backward_seeded(&eval.seeds[p])?;
        let mut out = Vec::new();
        pass.weights.visit("", &mut |_, v| out.push(g.get_or_zero(*v, pass.tape.value(*v).len())));
        Ok(out)
    });
    let mut summed: Option<Vec<Vec<f64>>> = None;
    for r in per {
        let g = r?;
        match &mut summed {
            None => summed = Some(g),
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(&g) {
                    a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                }
            }
        }
    }
    let Some(summed) = summed else { return Ok(()) };
    let mut it = summed.into_iter();
    let mut err = None;
    weights.visit_mut(&mut |t| {
        if let Err(e) = t.accumulate_grad(&it.next().expect("same layout")) {
            err.get_or_insert(e);
        }
    });
    err.map_or(Ok(()), Err)
}

fn converged(trace: &[TraceRow], window: usize, tolerance: f64) -> bool {
    if trace.len() <= window {
        return false;
    }
    let now = trace[trace.len() - 1].total;
    let then = trace[trace.len() - 1 - window].total;
    (now - then).abs() <= tolerance * then.abs().max(1e-12)
}

/// Precompute the frozen features of every shape in a set.
pub fn prepare_set(set: &ShapeSet, prior: &PriorWeights, input: ClassifierInput) -> Result<Vec<ShapeFeatures>> {
    let config: &EncoderConfig = prior.encoder_config();
    par::map(&set.shapes, |c| {
        let prep = PreparedCloud::new(c, config)?;
        ShapeFeatures::new(&prep, prior, input)
    })
    .into_iter()
    .collect()
}

struct Attempt {
    weights: CosegWeights,
    trace: Vec<TraceRow>,
    collapsed: bool,
}

fn run_attempt(feats: &[ShapeFeatures], prior: &PriorWeights, cfg: &CosegConfig, seed: u64) -> Result<Attempt> {
    let part_feats: Vec<&Tensor> = feats
        .iter()
        .map(|f| if cfg.ablate == Some(Ablation::MrgParts) { &f.prior.mrg } else { &f.prior.msg })
        .collect();
    let batches = batch_schedule(feats.len(), cfg.batch_size, cfg.batch_stride);
    let input_width = feats[0].input.cols();
    let mut weights = CosegWeights::init(input_width, cfg.hidden, cfg.k, seed);
    let mut opt = Optimizer::new(&weights, cfg.adam)?;
    let mut trace = Vec::new();
    let mut thin_run = 0usize;
    for it in 0..cfg.max_iters {
        let batch = &batches[it % batches.len()];
        let eval = evaluate_batch(feats, &part_feats, batch, &weights, prior, cfg, it)?;
        if eval.row.total.is_nan() {
            return Err(Error::NonFinite("co-segmentation energy"));
        }
        thin_run = if eval.populated < 2 { thin_run + 1 } else { 0 };
        trace.push(eval.row.clone());
        if cfg.contrastive() && thin_run >= cfg.window {
            log::warn!("co-segmentation collapsed to {} label(s) at iteration {it}", eval.populated);
            return Ok(Attempt {
                weights,
                trace,
                collapsed: true,
            });
        }
        accumulate(&mut weights, &eval)?;
        opt.step(&mut weights)?;
        if converged(&trace, cfg.window, cfg.tolerance) {
            log::info!("co-segmentation converged after {} iterations", it + 1);
            break;
        }
    }
    Ok(Attempt {
        weights,
        trace,
        collapsed: false,
    })
}

/// Hard labels and recomposed maps of every shape under `weights`.
pub fn label_set(feats: &[ShapeFeatures], weights: &CosegWeights, prior: &PriorWeights, cfg: &CosegConfig) -> Result<Vec<(KWayLabeling, Tensor)>> {
    par::map(feats, |f| {
        let logits = classify_kway(f, weights)?;
        let probs = if cfg.ablate == Some(Ablation::NoPrior) {
            softmax_rows(&logits)?
        } else {
            refine_and_recompose(f, &logits, prior, &cfg.recompose)?
        };
        Ok((KWayLabeling::new(argmax_rows(&probs), cfg.k)?, probs))
    })
    .into_iter()
    .collect()
}

/// Energy of the whole set under `weights`, averaged over the batch schedule.
pub fn set_energy(feats: &[ShapeFeatures], weights: &CosegWeights, prior: &PriorWeights, cfg: &CosegConfig, iteration: usize) -> Result<TraceRow> {
    let part_feats: Vec<&Tensor> = feats
        .iter()
        .map(|f| if cfg.ablate == Some(Ablation::MrgParts) { &f.prior.mrg } else { &f.prior.msg })
        .collect();
    let batches = batch_schedule(feats.len(), cfg.batch_size, cfg.batch_stride);
    let mut acc = TraceRow {
        iteration,
        rank: 0.0,
        contrastive: 0.0,
        completeness: 0.0,
        total: 0.0,
        labels_used: 0,
    };
    for b in &batches {
        let e = evaluate_batch(feats, &part_feats, b, weights, prior, cfg, iteration)?.row;
        acc.rank += e.rank;
        acc.contrastive += e.contrastive;
        acc.completeness += e.completeness;
        acc.total += e.total;
        acc.labels_used = acc.labels_used.max(e.labels_used);
    }
    let m = batches.len() as f64;
    acc.rank /= m;
    acc.contrastive /= m;
    acc.completeness /= m;
    acc.total /= m;
    Ok(acc)
}

/// Co-segment a set. On collapse the run restarts once with a new seed;
/// a second collapse is an error.
pub fn cosegment(set: &ShapeSet, prior: &PriorWeights, cfg: &CosegConfig) -> Result<CosegResult> {
    cfg.validate()?;
    prior.validate()?;
    let feats = prepare_set(set, prior, cfg.input)?;
    cosegment_prepared(&feats, prior, cfg)
}

pub fn cosegment_prepared(feats: &[ShapeFeatures], prior: &PriorWeights, cfg: &CosegConfig) -> Result<CosegResult> {
    cfg.validate()?;
    if feats.len() < 2 {
        return Err(Error::Invalid("co-segmentation needs at least 2 shapes".into()));
    }
    let seeds = [cfg.seed, cfg.seed ^ 0x9E37_79B9_7F4A_7C15];
    let mut chosen = None;
    for (r, &seed) in seeds.iter().enumerate() {
        let a = run_attempt(feats, prior, cfg, seed)?;
        if !a.collapsed {
            chosen = Some((r, seed, a));
            break;
        }
        if r + 1 == seeds.len() {
            let last = a.trace.last().map(|l| l.total);
            return Err(Error::Collapse(format!(
                "fewer than 2 labels populated for {} consecutive iterations after {r} restart(s); last energy {last:?}",
                cfg.window
            )));
        }
        log::warn!("restarting co-segmentation with a new seed");
    }
    let (restarts, seed, Attempt { weights, mut trace, .. }) = chosen.expect("an attempt succeeded");
    let initial = CosegWeights::init(feats[0].input.cols(), cfg.hidden, cfg.k, seed);
    let initial_energy = set_energy(feats, &initial, prior, cfg, 0)?.total;
    let final_row = set_energy(feats, &weights, prior, cfg, trace.len())?;
    let final_energy = final_row.total;
    trace.push(final_row);
    let labeled = label_set(feats, &weights, prior, cfg)?;
    let labelings: Vec<KWayLabeling> = labeled.into_iter().map(|(l, _)| l).collect();
    let labels_used: BTreeSet<usize> = labelings.iter().flat_map(|l| l.used()).collect();
    Ok(CosegResult {
        shape_ids: feats.iter().map(|f| f.id.clone()).collect(),
        degenerate: labels_used.len() < 2,
        labelings,
        initial_energy,
        final_energy,
        trace,
        labels_used,
        restarts,
        weights,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn orthogonal_pair_example() {
        let m1 = Tensor::matrix(2, 2, vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let m2 = Tensor::matrix(2, 2, vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let l = group_consistency_loss(&[m1, m2], true).unwrap();
        assert!((l.value - (1.0 - 2f64.sqrt())).abs() < 1e-12);
        assert!(!l.degenerate);
    }

    #[test]
    fn identical_rows_give_one() {
        let m = Tensor::matrix(1, 3, vec![0.3, 0.4, 0.5]).unwrap();
        let l = group_consistency_loss(&[m.clone(), m.clone(), m], true).unwrap();
        assert!((l.value - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_label_is_degenerate() {
        let m = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let l = group_consistency_loss(&[m, Tensor::zeros(vec![0, 2])], true).unwrap();
        assert!(l.degenerate);
        assert!((l.value - 2.0).abs() < 1e-12);
    }

    #[test]
    fn completeness_examples() {
        let onehot = Tensor::matrix(2, 3, vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(completeness_loss(&[onehot]), 0.0);
        let uniform = Tensor::matrix(3, 4, vec![0.25; 12]).unwrap();
        assert!((completeness_loss(&[uniform]) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn descriptor_needs_support() {
        let f = Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 0.0, 0.5, 0.5]).unwrap();
        assert!(part_descriptor(&f, &[1.0, 0.0, 0.0], 2).unwrap().is_none());
        let d = part_descriptor(&f, &[0.0, 1.0, 0.0], 1).unwrap().unwrap();
        assert_eq!(d.values(), &[1.0, 0.0]);
    }

    #[test]
    fn schedule_shapes() {
        assert_eq!(batch_schedule(8, 8, 4), vec![(0..8).collect::<Vec<_>>()]);
        assert_eq!(batch_schedule(16, 8, 4).len(), 1);
        let b = batch_schedule(20, 8, 4);
        assert_eq!(b.first().unwrap(), &(0..8).collect::<Vec<_>>());
        assert_eq!(b.last().unwrap(), &(12..20).collect::<Vec<_>>());
        assert!(b.iter().all(|w| w.len() == 8));
    }

    #[test]
    fn ablation_names_round_trip() {
        for a in [Ablation::NoPrior, Ablation::NoContrastive, Ablation::NoCompleteness, Ablation::MrgParts] {
            assert_eq!(Ablation::parse(a.name()).unwrap(), a);
        }
        assert!(Ablation::parse("nothing").is_err());
    }
}
