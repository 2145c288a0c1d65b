//! Per-point multi-scale (MSG) and multi-resolution (MRG) feature encoders.
//!
//! Every point is a grouping centroid; there is no downsampling. A scale
//! block maps neighbor offsets `p_j - q` through a shared affine layer,
//! max-pools over the radius neighborhood, applies ReLU and a per-point
//! output layer:
//!
//! ```text
//! h(q)   = relu(max_j (W p_j) - W q + b)      j in N_r(q)
//! out(q) = relu(h(q) · V + c)
//! ```
//!
//! The first line equals `max_j relu(W (p_j - q) + b)`, so the pair layer is
//! evaluated once per point rather than once per pair.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{neighborhood_table, PointCloud};
use crate::error::{Error, Result};
use crate::tensor::{Linear, NeighborLists, Params, Tape, Tensor, Var};

pub const FEATURE_WIDTH: usize = 128;
pub const MSG_WIDTHS: [usize; 3] = [32, 32, 64];
pub const MRG_HALF: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Msg,
    Mrg,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub radii: [f64; 3],
    pub hidden: usize,
    /// Maximum neighbors per radius query; `None` keeps every neighbor.
    pub cap: Option<usize>,
    pub cap_seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            radii: [0.2, 0.4, 0.8],
            hidden: 32,
            cap: Some(64),
            cap_seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn uncapped(mut self) -> Self {
        self.cap = None;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.radii;
        if !(r[0] > 0.0 && r[0] < r[1] && r[1] < r[2] && r[2] <= 2.0) {
            return Err(Error::Invalid(format!("radii must increase within (0, 2], got {r:?}")));
        }
        if self.hidden == 0 {
            return Err(Error::Invalid("hidden width must be positive".into()));
        }
        if self.cap == Some(0) {
            return Err(Error::Invalid("neighbor cap must be positive".into()));
        }
        Ok(())
    }
}

/// One grouping scale: shared pair layer, then a per-point output layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleBlock<T = Tensor> {
    pub pair: Linear<T>,
    pub post: Linear<T>,
}

impl ScaleBlock<Tensor> {
    fn init(hidden: usize, out: usize, rng: &mut impl Rng) -> Self {
        ScaleBlock {
            pair: Linear::init(3, hidden, rng),
            post: Linear::init(hidden, out, rng),
        }
    }

    fn bind(&self, tape: &mut Tape) -> ScaleBlock<Var> {
        ScaleBlock {
            pair: self.pair.bind(tape),
            post: self.post.bind(tape),
        }
    }
}

impl<T> Params<T> for ScaleBlock<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        self.pair.visit(&format!("{prefix}pair."), f);
        self.post.visit(&format!("{prefix}post."), f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut T)) {
        self.pair.visit_mut(f);
        self.post.visit_mut(f);
    }
}

/// MSG: three blocks at `radii[0..3]` (widths 32/32/64).
/// MRG: a level-1 block at `radii[0]` and a direct block at `radii[2]`
/// (64 each); the level-1 output is max-pooled again over `radii[2]`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderWeights<T = Tensor> {
    pub kind: FeatureKind,
    pub config: EncoderConfig,
    pub blocks: Vec<ScaleBlock<T>>,
}

impl EncoderWeights<Tensor> {
    pub fn init(kind: FeatureKind, config: EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let widths: &[usize] = match kind {
            FeatureKind::Msg => &MSG_WIDTHS,
            FeatureKind::Mrg => &[MRG_HALF, MRG_HALF],
        };
        let blocks = widths.iter().map(|&w| ScaleBlock::init(config.hidden, w, rng)).collect();
        Ok(EncoderWeights { kind, config, blocks })
    }

    /// Same layout with every parameter zero.
    pub fn zeroed(&self) -> Self {
        let mut z = self.clone();
        z.visit_mut(&mut |t| *t = Tensor::zeros(t.shape().to_vec()).with_requires_grad(t.requires_grad()));
        z
    }

    pub fn bind(&self, tape: &mut Tape) -> EncoderWeights<Var> {
        EncoderWeights {
            kind: self.kind,
            config: self.config.clone(),
            blocks: self.blocks.iter().map(|b| b.bind(tape)).collect(),
        }
    }

    pub fn set_trainable(&mut self, on: bool) {
        self.visit_mut(&mut |t| t.set_requires_grad(on));
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let want: Vec<usize> = match self.kind {
            FeatureKind::Msg => MSG_WIDTHS.to_vec(),
            FeatureKind::Mrg => vec![MRG_HALF, MRG_HALF],
        };
        let got: Vec<usize> = self.blocks.iter().map(|b| b.post.outputs()).collect();
        if got != want {
            return Err(Error::shape("encoder", format!("block widths {got:?}, expected {want:?}")));
        }
        for b in &self.blocks {
            if b.pair.inputs() != 3 || b.pair.outputs() != b.post.inputs() {
                return Err(Error::shape("encoder", "scale block layers do not chain"));
            }
        }
        Ok(())
    }
}

impl<T> Params<T> for EncoderWeights<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("{prefix}block{i}."), f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut T)) {
        self.blocks.iter_mut().for_each(|b| b.visit_mut(f));
    }
}

/// A cloud with its neighborhood tables precomputed for one configuration.
#[derive(Clone, Debug)]
pub struct PreparedCloud {
    pub cloud: PointCloud,
    pub coords: Tensor,
    pub tables: [NeighborLists; 3],
}

impl PreparedCloud {
    pub fn new(cloud: &PointCloud, config: &EncoderConfig) -> Result<Self> {
        config.validate()?;
        let coords = Tensor::new(vec![cloud.len(), 3], cloud.coords())?;
        let tables = config
            .radii
            .map(|r| neighborhood_table(cloud, r, config.cap, config.cap_seed));
        Ok(PreparedCloud {
            cloud: cloud.clone(),
            coords,
            tables,
        })
    }

    pub fn len(&self) -> usize {
        self.cloud.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cloud.is_empty()
    }
}

/// Per-point features of one shape.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureField {
    pub features: Tensor,
    pub kind: FeatureKind,
    pub source_shape_id: String,
}

fn block_forward(tape: &mut Tape, coords: Var, table: &NeighborLists, block: &ScaleBlock<Var>) -> Result<Var> {
    let a = tape.matmul(coords, block.pair.w)?;
    let pooled = tape.neighbor_max(a, table)?;
    let rel = tape.sub(pooled, a)?;
    let rel = tape.add_bias(rel, block.pair.b)?;
    let h = tape.relu(rel);
    let out = block.post.forward(tape, h)?;
    Ok(tape.relu(out))
}

/// Record the encoder on `tape`; returns the `n×128` feature node.
pub fn encode_on(tape: &mut Tape, prep: &PreparedCloud, coords: Var, w: &EncoderWeights<Var>) -> Result<Var> {
    match w.kind {
        FeatureKind::Msg => {
            let mut parts = Vec::with_capacity(3);
            for (block, table) in w.blocks.iter().zip(&prep.tables) {
                parts.push(block_forward(tape, coords, table, block)?);
            }
            tape.concat_cols(&parts)
        }
        FeatureKind::Mrg => {
            let level1 = block_forward(tape, coords, &prep.tables[0], &w.blocks[0])?;
            let recursive = tape.neighbor_max(level1, &prep.tables[2])?;
            let direct = block_forward(tape, coords, &prep.tables[2], &w.blocks[1])?;
            tape.concat_cols(&[recursive, direct])
        }
    }
}

fn encode(prep: &PreparedCloud, weights: &EncoderWeights, kind: FeatureKind) -> Result<FeatureField> {
    if weights.kind != kind {
        return Err(Error::Invalid(format!("expected {kind:?} weights, got {:?}", weights.kind)));
    }
    weights.validate()?;
    let mut tape = Tape::new();
    let coords = tape.constant(prep.coords.clone());
    let mut frozen = weights.clone();
    frozen.set_trainable(false);
    let w = frozen.bind(&mut tape);
    let out = encode_on(&mut tape, prep, coords, &w)?;
    Ok(FeatureField {
        features: tape.value(out).clone(),
        kind,
        source_shape_id: prep.cloud.id().to_string(),
    })
}

pub fn msg_encode(prep: &PreparedCloud, weights: &EncoderWeights) -> Result<FeatureField> {
    encode(prep, weights, FeatureKind::Msg)
}

pub fn mrg_encode(prep: &PreparedCloud, weights: &EncoderWeights) -> Result<FeatureField> {
    encode(prep, weights, FeatureKind::Mrg)
}
