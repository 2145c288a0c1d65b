//! The part prior: a denoiser that maps a shape plus a noisy part mask to a
//! per-point probability of belonging to the clean part.
//!
//! Classifier input for point `q` is `[f_MRG(q), f_fg]` where `f_fg` is the
//! mean MSG feature over the (noisy) foreground.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{corrupt_mask, BinaryMask, CorruptionSpec, KWayLabeling, PointCloud};
use crate::encoders::{encode_on, EncoderConfig, EncoderWeights, FeatureKind, PreparedCloud, FEATURE_WIDTH};
use crate::error::{Error, Result};
use crate::par;
use crate::tensor::tape::softmax_in_place;
use crate::tensor::{matmul, Activation, AdamConfig, Mlp, Optimizer, Params, Tape, Tensor, Var};

pub const CLASSIFIER_HIDDEN: [usize; 2] = [128, 128];

#[derive(Clone, Debug, PartialEq)]
pub struct PriorWeights<T = Tensor> {
    pub msg: EncoderWeights<T>,
    pub mrg: EncoderWeights<T>,
    /// `256 → 128 → 128 → 2`; the first 128 input rows act on `f_MRG(q)`,
    /// the last 128 on `f_fg`.
    pub classifier: Mlp<T>,
}

impl PriorWeights<Tensor> {
    pub fn init(config: &EncoderConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let msg = EncoderWeights::init(FeatureKind::Msg, config.clone(), &mut rng)?;
        let mrg = EncoderWeights::init(FeatureKind::Mrg, config.clone(), &mut rng)?;
        let classifier = Mlp::init(
            &[2 * FEATURE_WIDTH, CLASSIFIER_HIDDEN[0], CLASSIFIER_HIDDEN[1], 2],
            Activation::Identity,
            &mut rng,
        );
        Ok(PriorWeights { msg, mrg, classifier })
    }

    pub fn bind(&self, tape: &mut Tape) -> PriorWeights<Var> {
        PriorWeights {
            msg: self.msg.bind(tape),
            mrg: self.mrg.bind(tape),
            classifier: self.classifier.bind(tape),
        }
    }

    pub fn encoder_config(&self) -> &EncoderConfig {
        &self.msg.config
    }

    pub fn set_trainable(&mut self, on: bool) {
        self.visit_mut(&mut |t| t.set_requires_grad(on));
    }

    pub fn validate(&self) -> Result<()> {
        self.msg.validate()?;
        self.mrg.validate()?;
        if self.msg.kind != FeatureKind::Msg || self.mrg.kind != FeatureKind::Mrg {
            return Err(Error::Invalid("prior encoders have the wrong kinds".into()));
        }
        self.classifier.check_dims(2 * FEATURE_WIDTH)?;
        if self.classifier.output_width() != 2 {
            return Err(Error::shape("prior", "classifier must emit 2 logits"));
        }
        Ok(())
    }
}

impl<T> Params<T> for PriorWeights<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        self.msg.visit(&format!("{prefix}msg."), f);
        self.mrg.visit(&format!("{prefix}mrg."), f);
        self.classifier.visit(&format!("{prefix}classifier."), f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut T)) {
        self.msg.visit_mut(f);
        self.mrg.visit_mut(f);
        self.classifier.visit_mut(f);
    }
}

/// Mean MSG feature over a part's foreground.
#[derive(Clone, Debug, PartialEq)]
pub struct ForegroundDescriptor {
    pub vector: Tensor,
}

/// Nodes produced by [`denoise_on`].
pub struct DenoiseNodes {
    pub msg: Var,
    pub mrg: Var,
    pub foreground: Var,
    /// `n×2` class probabilities; column 1 is foreground.
    pub probs: Var,
}

/// Record the prior on `tape` for one shape and one foreground.
pub fn denoise_on(
    tape: &mut Tape,
    prep: &PreparedCloud,
    w: &PriorWeights<Var>,
    foreground: &[usize],
) -> Result<DenoiseNodes> {
    if foreground.is_empty() {
        return Err(Error::EmptyForeground);
    }
    let n = prep.len();
    let coords = tape.constant(prep.coords.clone());
    let msg = encode_on(tape, prep, coords, &w.msg)?;
    let f_fg = tape.mean_rows(msg, foreground)?;
    let mrg = encode_on(tape, prep, coords, &w.mrg)?;

    let first = &w.classifier.layers[0];
    let w_point = tape.slice_rows(first.w, 0, FEATURE_WIDTH)?;
    let w_part = tape.slice_rows(first.w, FEATURE_WIDTH, 2 * FEATURE_WIDTH)?;
    let per_point = tape.matmul(mrg, w_point)?;
    let shared = tape.matmul(f_fg, w_part)?;
    let shared = tape.repeat_rows(shared, n)?;
    let h = tape.add(per_point, shared)?;
    let h = tape.add_bias(h, first.b)?;
    let mut h = tape.relu(h);
    for (layer, act) in w.classifier.layers.iter().zip(&w.classifier.activations).skip(1) {
        h = layer.forward(tape, h)?;
        if *act == Activation::Relu {
            h = tape.relu(h);
        }
    }
    let probs = tape.softmax_rows(h)?;
    Ok(DenoiseNodes {
        msg,
        mrg,
        foreground: f_fg,
        probs,
    })
}

fn frozen_tape(weights: &PriorWeights) -> (Tape, PriorWeights<Var>) {
    let mut frozen = weights.clone();
    frozen.set_trainable(false);
    let mut tape = Tape::new();
    let w = frozen.bind(&mut tape);
    (tape, w)
}

pub fn foreground_descriptor(prep: &PreparedCloud, mask: &BinaryMask, weights: &PriorWeights) -> Result<ForegroundDescriptor> {
    mask.check_len(&prep.cloud)?;
    let fg = mask.foreground();
    if fg.is_empty() {
        return Err(Error::EmptyForeground);
    }
    let (mut tape, w) = frozen_tape(weights);
    let coords = tape.constant(prep.coords.clone());
    let msg = encode_on(&mut tape, prep, coords, &w.msg)?;
    let v = tape.mean_rows(msg, &fg)?;
    Ok(ForegroundDescriptor {
        vector: tape.value(v).clone(),
    })
}

/// Per-point foreground probability. An empty foreground yields all zeros.
pub fn denoise(prep: &PreparedCloud, noisy_mask: &BinaryMask, weights: &PriorWeights) -> Result<Vec<f64>> {
    noisy_mask.check_len(&prep.cloud)?;
    let fg = noisy_mask.foreground();
    if fg.is_empty() {
        log::warn!("denoise called with an empty foreground on {}; part vanishes", prep.cloud.id());
        return Ok(vec![0.0; prep.len()]);
    }
    let (mut tape, w) = frozen_tape(weights);
    let nodes = denoise_on(&mut tape, prep, &w, &fg)?;
    let probs = tape.value(nodes.probs);
    Ok((0..prep.len()).map(|i| probs.at(i, 1)).collect())
}

/// Encoder outputs of a frozen prior for one shape, cached so that repeated
/// denoising only runs the classifier head.
#[derive(Clone, Debug)]
pub struct PriorFeatures {
    pub msg: Tensor,
    pub mrg: Tensor,
    /// `f_MRG · W_point + b` for the classifier's first layer.
    point_term: Tensor,
}

impl PriorFeatures {
    pub fn compute(prep: &PreparedCloud, weights: &PriorWeights) -> Result<Self> {
        let (mut tape, w) = frozen_tape(weights);
        let coords = tape.constant(prep.coords.clone());
        let msg = encode_on(&mut tape, prep, coords, &w.msg)?;
        let mrg = encode_on(&mut tape, prep, coords, &w.mrg)?;
        let msg = tape.value(msg).clone();
        let mrg = tape.value(mrg).clone();
        let first = &weights.classifier.layers[0];
        let hidden = first.outputs();
        let n = prep.len();
        let mut point_term = matmul(
            mrg.values(),
            &first.w.values()[..FEATURE_WIDTH * hidden],
            n,
            FEATURE_WIDTH,
            hidden,
        );
        for row in point_term.chunks_mut(hidden) {
            row.iter_mut().zip(first.b.values()).for_each(|(v, b)| *v += b);
        }
        Ok(PriorFeatures {
            msg,
            mrg,
            point_term: Tensor::from_parts(vec![n, hidden], point_term),
        })
    }

    pub fn len(&self) -> usize {
        self.msg.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.msg.rows() == 0
    }

    /// Foreground probabilities (`n×1`) on `tape` with frozen weights. The
    /// foreground descriptor is the mean over `foreground`, with gradients
    /// passed straight through to the soft weights `soft` (`n×1`).
    pub fn denoise_on(&self, tape: &mut Tape, weights: &PriorWeights, soft: Var, foreground: &[usize]) -> Result<Var> {
        let d = FEATURE_WIDTH;
        let n = self.len();
        let first = &weights.classifier.layers[0];
        let hidden = first.outputs();
        let msg = tape.constant(self.msg.clone());
        let f_fg = tape.straight_through_mean(soft, msg, foreground)?;
        let w_part = tape.constant(Tensor::from_parts(vec![d, hidden], first.w.values()[d * hidden..].to_vec()));
        let shared = tape.matmul(f_fg, w_part)?;
        let shared = tape.repeat_rows(shared, n)?;
        let point = tape.constant(self.point_term.clone());
        let h = tape.add(point, shared)?;
        let mut h = tape.relu(h);
        for (layer, act) in weights.classifier.layers.iter().zip(&weights.classifier.activations).skip(1) {
            let w = tape.constant(layer.w.clone());
            let b = tape.constant(layer.b.clone());
            h = tape.matmul(h, w)?;
            h = tape.add_bias(h, b)?;
            if *act == Activation::Relu {
                h = tape.relu(h);
            }
        }
        let probs = tape.softmax_rows(h)?;
        tape.select_col(probs, 1)
    }

    /// Same result as [`denoise`] for a foreground given by row indices.
    pub fn denoise(&self, weights: &PriorWeights, foreground: &[usize]) -> Vec<f64> {
        let n = self.len();
        if foreground.is_empty() {
            return vec![0.0; n];
        }
        let d = FEATURE_WIDTH;
        let mut f_fg = vec![0.0; d];
        for &r in foreground {
            f_fg.iter_mut().zip(self.msg.row(r)).for_each(|(a, b)| *a += b);
        }
        let inv = 1.0 / foreground.len() as f64;
        f_fg.iter_mut().for_each(|v| *v *= inv);

        let first = &weights.classifier.layers[0];
        let hidden = first.outputs();
        let shared = matmul(&f_fg, &first.w.values()[d * hidden..], 1, d, hidden);
        let mut h: Vec<f64> = self.point_term.values().to_vec();
        for row in h.chunks_mut(hidden) {
            row.iter_mut().zip(&shared).for_each(|(v, s)| *v = (*v + s).max(0.0));
        }
        let mut width = hidden;
        for (layer, act) in weights.classifier.layers.iter().zip(&weights.classifier.activations).skip(1) {
            let out = layer.outputs();
            let mut next = matmul(&h, layer.w.values(), n, width, out);
            for row in next.chunks_mut(out) {
                for (v, b) in row.iter_mut().zip(layer.b.values()) {
                    *v += b;
                    if *act == Activation::Relu {
                        *v = v.max(0.0);
                    }
                }
            }
            h = next;
            width = out;
        }
        h.chunks_mut(2)
            .map(|row| {
                softmax_in_place(row);
                row[1]
            })
            .collect()
    }
}

/// Shapes and clean part masks for prior training.
#[derive(Clone, Debug)]
pub struct PriorDataset {
    pub clouds: Vec<PreparedCloud>,
    /// `(cloud index, clean mask)`.
    pub masks: Vec<(usize, BinaryMask)>,
}

impl PriorDataset {
    /// One mask per non-empty label of each labeling. Only masks are kept;
    /// label identities are discarded.
    pub fn from_labelings(shapes: &[(PointCloud, KWayLabeling)], config: &EncoderConfig) -> Result<Self> {
        let clouds = par::map(shapes, |(c, _)| PreparedCloud::new(c, config))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        let mut masks = Vec::new();
        for (i, (cloud, labeling)) in shapes.iter().enumerate() {
            labeling.check_len(cloud)?;
            for l in labeling.used() {
                let m = labeling.mask(l);
                if m.foreground_count() < cloud.len() {
                    masks.push((i, m));
                }
            }
        }
        PriorDataset::new(clouds, masks)
    }

    pub fn new(clouds: Vec<PreparedCloud>, masks: Vec<(usize, BinaryMask)>) -> Result<Self> {
        if masks.is_empty() {
            return Err(Error::Invalid("prior training needs at least one mask".into()));
        }
        for (i, m) in &masks {
            let cloud = clouds
                .get(*i)
                .ok_or_else(|| Error::Invalid(format!("mask refers to missing cloud {i}")))?;
            m.check_len(&cloud.cloud)?;
            if m.foreground_count() == 0 {
                return Err(Error::EmptyForeground);
            }
        }
        Ok(PriorDataset { clouds, masks })
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }
}

/// Corruption rates are drawn uniformly from `[min_rate, max_rate]` per
/// example, independently for insertion and deletion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PriorTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub min_rate: f64,
    pub max_rate: f64,
    pub validation_masks: usize,
    pub log_every: usize,
}

impl Default for PriorTrainConfig {
    fn default() -> Self {
        PriorTrainConfig {
            steps: 5000,
            batch: 4,
            adam: AdamConfig {
                learning_rate: 2e-3,
                ..AdamConfig::default()
            },
            seed: 0,
            min_rate: 0.20,
            max_rate: 0.30,
            validation_masks: 16,
            log_every: 100,
        }
    }
}

impl PriorTrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.adam.validate()?;
        if self.batch == 0 {
            return Err(Error::Invalid("batch must be positive".into()));
        }
        if !(0.0 <= self.min_rate && self.min_rate <= self.max_rate && self.max_rate <= 0.5) {
            return Err(Error::Invalid(format!(
                "corruption range [{}, {}] must lie within [0, 0.5]",
                self.min_rate, self.max_rate
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogEntry {
    pub step: usize,
    pub train_loss: f64,
    pub validation_loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub entries: Vec<TrainLogEntry>,
}

/// A corrupted training or evaluation example.
#[derive(Clone, Debug)]
pub struct NoisyExample {
    pub cloud: usize,
    pub clean: BinaryMask,
    pub noisy: BinaryMask,
}

/// Draw one corrupted example with rates from `[min_rate, max_rate]`.
pub fn sample_example(data: &PriorDataset, rng: &mut impl Rng, min_rate: f64, max_rate: f64) -> Result<NoisyExample> {
    let (cloud, clean) = &data.masks[rng.gen_range(0..data.masks.len())];
    let mut rate = || {
        if max_rate > min_rate {
            rng.gen_range(min_rate..=max_rate)
        } else {
            min_rate
        }
    };
    let spec = CorruptionSpec::new(rate(), rate(), rng.gen());
    let noisy = corrupt_mask(&data.clouds[*cloud].cloud, clean, &spec)?;
    Ok(NoisyExample {
        cloud: *cloud,
        clean: clean.clone(),
        noisy,
    })
}

/// Loss and flattened gradients (in parameter visit order) for one example.
fn example_gradient(weights: &PriorWeights, data: &PriorDataset, ex: &NoisyExample) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut tape = Tape::new();
    let w = weights.bind(&mut tape);
    let prep = &data.clouds[ex.cloud];
    let nodes = denoise_on(&mut tape, prep, &w, &ex.noisy.foreground())?;
    let loss = tape.nll(nodes.probs, &ex.clean.targets())?;
    let grads = tape.backward(loss)?;
    let mut out = Vec::new();
    w.visit("", &mut |_, v| {
        out.push(grads.get_or_zero(*v, tape.value(*v).len()));
    });
    Ok((tape.value(loss).item(), out))
}

fn example_loss(weights: &PriorWeights, data: &PriorDataset, ex: &NoisyExample) -> Result<f64> {
    let (mut tape, w) = frozen_tape(weights);
    let nodes = denoise_on(&mut tape, &data.clouds[ex.cloud], &w, &ex.noisy.foreground())?;
    let loss = tape.nll(nodes.probs, &ex.clean.targets())?;
    Ok(tape.value(loss).item())
}

/// Fixed examples for tracking validation loss, independent of the training stream.
pub fn validation_examples(data: &PriorDataset, count: usize, seed: u64, min_rate: f64, max_rate: f64) -> Result<Vec<NoisyExample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_0F_7A11);
    (0..count).map(|_| sample_example(data, &mut rng, min_rate, max_rate)).collect()
}

pub fn mean_loss(weights: &PriorWeights, data: &PriorDataset, examples: &[NoisyExample]) -> Result<f64> {
    let losses = par::map(examples, |ex| example_loss(weights, data, ex));
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    Ok(total / examples.len().max(1) as f64)
}

/// Per-point accuracy of thresholding the denoised probability at 0.5
/// against the clean mask, averaged over all points of all examples.
pub fn denoise_accuracy(weights: &PriorWeights, data: &PriorDataset, examples: &[NoisyExample]) -> Result<f64> {
    let per = par::map(examples, |ex| -> Result<(usize, usize)> {
        let p = denoise(&data.clouds[ex.cloud], &ex.noisy, weights)?;
        let correct = p
            .iter()
            .zip(ex.clean.flags())
            .filter(|(prob, &flag)| (**prob >= 0.5) == flag)
            .count();
        Ok((correct, p.len()))
    });
    let (mut correct, mut total) = (0, 0);
    for r in per {
        let (c, t) = r?;
        correct += c;
        total += t;
    }
    Ok(correct as f64 / total.max(1) as f64)
}

/// Train the prior from scratch. Deterministic for a fixed dataset and config.
pub fn train_prior(data: &PriorDataset, encoder: &EncoderConfig, config: &PriorTrainConfig) -> Result<(PriorWeights, TrainingLog)> {
    config.validate()?;
    let mut weights = PriorWeights::init(encoder, config.seed)?;
    weights.set_trainable(true);
    let mut opt = Optimizer::new(&weights, config.adam)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let validation = validation_examples(data, config.validation_masks.max(1), config.seed, config.min_rate, config.max_rate)?;
    let mut log = TrainingLog::default();
    let initial = mean_loss(&weights, data, &validation)?;
    log.entries.push(TrainLogEntry {
        step: 0,
        train_loss: initial,
        validation_loss: initial,
    });

    let mut running = 0.0;
    let mut running_n = 0usize;
    for step in 1..=config.steps {
        let batch = (0..config.batch)
            .map(|_| sample_example(data, &mut rng, config.min_rate, config.max_rate))
            .collect::<Result<Vec<_>>>()?;
        let results = par::map(&batch, |ex| example_gradient(&weights, data, ex));
        let scale = 1.0 / batch.len() as f64;
        let mut summed: Option<Vec<Vec<f64>>> = None;
        for r in results {
            let (loss, grads) = r?;
            running += loss;
            running_n += 1;
            match &mut summed {
                None => summed = Some(grads),
                Some(acc) => {
                    for (a, g) in acc.iter_mut().zip(&grads) {
                        a.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                }
            }
        }
        let summed = summed.expect("batch is non-empty");
        let mut it = summed.into_iter();
        let mut err = None;
        weights.visit_mut(&mut |t| {
            let g: Vec<f64> = it.next().expect("same layout").iter().map(|v| v * scale).collect();
            if let Err(e) = t.accumulate_grad(&g) {
                err.get_or_insert(e);
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        opt.step(&mut weights)?;

        if config.log_every > 0 && (step % config.log_every == 0 || step == config.steps) {
            let validation_loss = mean_loss(&weights, data, &validation)?;
            log.entries.push(TrainLogEntry {
                step,
                train_loss: running / running_n.max(1) as f64,
                validation_loss,
            });
            log::info!("prior step {step}: train {:.4} val {validation_loss:.4}", running / running_n.max(1) as f64);
            running = 0.0;
            running_n = 0;
        }
    }
    weights.set_trainable(false);
    Ok((weights, log))
}
