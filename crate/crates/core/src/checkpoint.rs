//! Versioned JSON checkpoints of named tensors plus their configuration.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoders::{EncoderConfig, EncoderWeights, FeatureKind};
use crate::error::{Error, Result};
use crate::prior::PriorWeights;
use crate::tensor::{Params, Tensor};

pub const FORMAT: &str = "coseg-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub kind: String,
    pub encoder: EncoderConfig,
    pub tensors: Vec<NamedTensor>,
}

fn named<P: Params<Tensor>>(p: &P) -> Vec<NamedTensor> {
    let mut out = Vec::new();
    p.visit("", &mut |name, t| {
        out.push(NamedTensor {
            name,
            shape: t.shape().to_vec(),
            values: t.values().to_vec(),
        })
    });
    out
}

/// Overwrite every tensor of `target` from `tensors`, matching names, order
/// and shapes exactly.
fn restore<P: Params<Tensor>>(target: &mut P, tensors: &[NamedTensor]) -> Result<()> {
    let mut names = Vec::new();
    target.visit("", &mut |name, t| names.push((name, t.shape().to_vec())));
    if names.len() != tensors.len() {
        return Err(Error::Format(format!("checkpoint has {} tensors, expected {}", tensors.len(), names.len())));
    }
    for ((name, shape), t) in names.iter().zip(tensors) {
        if *name != t.name || *shape != t.shape {
            return Err(Error::Format(format!(
                "checkpoint tensor {} {:?} does not match expected {name} {shape:?}",
                t.name, t.shape
            )));
        }
    }
    let mut it = tensors.iter();
    let mut err = None;
    target.visit_mut(&mut |slot| {
        let t = it.next().expect("counted above");
        match Tensor::new(t.shape.clone(), t.values.clone()) {
            Ok(v) => *slot = v,
            Err(e) => {
                err.get_or_insert(e);
            }
        }
    });
    err.map_or(Ok(()), Err)
}

impl Checkpoint {
    pub fn from_prior(w: &PriorWeights) -> Self {
        Checkpoint {
            format: FORMAT.into(),
            version: VERSION,
            kind: "prior".into(),
            encoder: w.encoder_config().clone(),
            tensors: named(w),
        }
    }

    pub fn from_encoder(w: &EncoderWeights) -> Self {
        Checkpoint {
            format: FORMAT.into(),
            version: VERSION,
            kind: match w.kind {
                FeatureKind::Msg => "msg".into(),
                FeatureKind::Mrg => "mrg".into(),
            },
            encoder: w.config.clone(),
            tensors: named(w),
        }
    }

    fn check(&self, kind: &str) -> Result<()> {
        if self.format != FORMAT {
            return Err(Error::Format(format!("not a checkpoint file (format {:?})", self.format)));
        }
        if self.version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {}", self.version)));
        }
        if self.kind != kind {
            return Err(Error::Format(format!("expected a {kind} checkpoint, found {}", self.kind)));
        }
        Ok(())
    }

    pub fn into_prior(self) -> Result<PriorWeights> {
        self.check("prior")?;
        let mut w = PriorWeights::init(&self.encoder, 0)?;
        restore(&mut w, &self.tensors)?;
        w.set_trainable(false);
        w.validate()?;
        Ok(w)
    }

    pub fn into_encoder(self) -> Result<EncoderWeights> {
        let kind = match self.kind.as_str() {
            "msg" => FeatureKind::Msg,
            "mrg" => FeatureKind::Mrg,
            other => return Err(Error::Format(format!("expected an encoder checkpoint, found {other}"))),
        };
        self.check(&self.kind)?;
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut w = EncoderWeights::init(kind, self.encoder.clone(), &mut rng)?;
        restore(&mut w, &self.tensors)?;
        w.set_trainable(false);
        w.validate()?;
        Ok(w)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format(format!("malformed checkpoint: {e}")))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_json(&text)
    }
}

pub fn save_prior(w: &PriorWeights, path: impl AsRef<Path>) -> Result<()> {
    Checkpoint::from_prior(w).save(path)
}

pub fn load_prior(path: impl AsRef<Path>) -> Result<PriorWeights> {
    Checkpoint::load(path)?.into_prior()
}
