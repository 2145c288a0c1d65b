//! End-to-end runs described by a TOML manifest:
//! synth → train-prior → coseg → eval.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_prior, save_prior};
use crate::coseg::{cosegment, trace_csv, CosegConfig, CosegResult};
use crate::data::{load_shape_set, save_labeling, write_shape_set, write_toml, ShapeSet, SynthEntry, SynthManifest};
use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::eval::rand_index;
use crate::prior::{train_prior, PriorDataset, PriorTrainConfig, PriorWeights, TrainingLog};

pub const INCOMPLETE_MARKER: &str = "INCOMPLETE";

/// Shapes to co-segment: synthesized from entries or loaded from a set manifest.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SetSource {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub shapes: Vec<SynthEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
}

/// Either a checkpoint to load or training data for a fresh prior.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PriorStage {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub shapes: Vec<SynthEntry>,
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub train: PriorTrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub name: String,
    /// Output directory, relative to the manifest's directory.
    pub out: PathBuf,
    pub set: SetSource,
    pub prior: PriorStage,
    #[serde(default)]
    pub coseg: CosegConfig,
}

impl ExperimentManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }

    /// Check everything that can be checked without running a stage.
    pub fn validate(&self, base: &Path) -> Result<()> {
        if self.name.trim().is_empty() {
            return Err(Error::Invalid("experiment name must not be empty".into()));
        }
        match (&self.set.manifest, self.set.shapes.is_empty()) {
            (Some(_), false) => return Err(Error::Invalid("set: give either shapes or manifest, not both".into())),
            (None, true) => return Err(Error::Invalid("set: no shapes and no manifest".into())),
            (Some(m), true) => {
                if !base.join(m).is_file() {
                    return Err(Error::Invalid(format!("set manifest {} not found", base.join(m).display())));
                }
            }
            (None, false) => {
                SynthManifest { shapes: self.set.shapes.clone() }.expand()?;
            }
        }
        match (&self.prior.checkpoint, self.prior.shapes.is_empty()) {
            (Some(_), false) => return Err(Error::Invalid("prior: give either checkpoint or shapes, not both".into())),
            (None, true) => return Err(Error::Invalid("prior: no checkpoint and no training shapes".into())),
            (Some(c), true) => {
                if !base.join(c).is_file() {
                    return Err(Error::Invalid(format!("prior checkpoint {} not found", base.join(c).display())));
                }
            }
            (None, false) => {
                SynthManifest { shapes: self.prior.shapes.clone() }.expand()?;
                self.prior.encoder.validate()?;
                self.prior.train.validate()?;
            }
        }
        self.coseg.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentReport {
    pub out: PathBuf,
    pub result: CosegResult,
    pub rand_index: Vec<(String, f64)>,
    pub mean_rand_index: Option<f64>,
    pub timings: Vec<StageTiming>,
    pub prior_log: Option<TrainingLog>,
}

fn stage<T>(name: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    f().map_err(|e| Error::Stage {
        stage: name.into(),
        source: Box::new(e),
    })
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn training_set(entries: &[SynthEntry]) -> Result<Vec<(crate::data::PointCloud, crate::data::KWayLabeling)>> {
    let set = SynthManifest { shapes: entries.to_vec() }.generate()?;
    Ok(set
        .shapes
        .into_iter()
        .zip(set.ground_truth)
        .map(|(c, g)| (c, g.expect("synthesized shapes carry labels")))
        .collect())
}

pub fn train_prior_from_entries(entries: &[SynthEntry], encoder: &EncoderConfig, config: &PriorTrainConfig) -> Result<(PriorWeights, TrainingLog)> {
    let data = PriorDataset::from_labelings(&training_set(entries)?, encoder)?;
    train_prior(&data, encoder, config)
}

pub fn training_curve_csv(log: &TrainingLog) -> String {
    let mut s = String::from("step,train_loss,validation_loss\n");
    for e in &log.entries {
        s.push_str(&format!("{},{:?},{:?}\n", e.step, e.train_loss, e.validation_loss));
    }
    s
}

/// Write per-shape label files, the energy trace and a config echo.
pub fn write_coseg_outputs(dir: &Path, result: &CosegResult, config: &CosegConfig, extra: &[(&str, String)]) -> Result<()> {
    let labels = dir.join("labels");
    fs::create_dir_all(&labels).map_err(|e| Error::io(&labels, e))?;
    for (id, l) in result.shape_ids.iter().zip(&result.labelings) {
        save_labeling(l, labels.join(format!("{id}.labels")))?;
    }
    write(&dir.join("trace.csv"), &trace_csv(&result.trace))?;
    #[derive(Serialize)]
    struct RunEcho<'a> {
        coseg: &'a CosegConfig,
        initial_energy: f64,
        final_energy: f64,
        restarts: usize,
        labels_used: Vec<usize>,
        inputs: toml::Table,
    }
    let mut inputs = toml::Table::new();
    for (k, v) in extra {
        inputs.insert((*k).into(), toml::Value::String(v.clone()));
    }
    write_toml(
        &RunEcho {
            coseg: config,
            initial_energy: result.initial_energy,
            final_energy: result.final_energy,
            restarts: result.restarts,
            labels_used: result.labels_used.iter().copied().collect(),
            inputs,
        },
        &dir.join("run.toml"),
    )
}

/// Run every stage of a manifest. Outputs other than `summary.txt` (which
/// records wall-clock times) are identical across reruns.
pub fn run_experiment(manifest_path: impl AsRef<Path>) -> Result<ExperimentReport> {
    let manifest_path = manifest_path.as_ref();
    let manifest = ExperimentManifest::load(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new(".")).to_path_buf();
    manifest.validate(&base)?;
    let out = base.join(&manifest.out);
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let marker = out.join(INCOMPLETE_MARKER);
    write(&marker, "run did not finish\n")?;
    let mut timings = Vec::new();
    let mut timed = |name: &str, t: Instant| {
        timings.push(StageTiming {
            stage: name.into(),
            seconds: t.elapsed().as_secs_f64(),
        })
    };

    let t = Instant::now();
    let set: ShapeSet = stage("synth", || match &manifest.set.manifest {
        Some(m) => load_shape_set(base.join(m)),
        None => {
            let set = SynthManifest { shapes: manifest.set.shapes.clone() }.generate()?;
            write_shape_set(&set, out.join("set"))?;
            Ok(set)
        }
    })?;
    timed("synth", t);

    let t = Instant::now();
    let (prior, prior_log) = stage("train-prior", || match &manifest.prior.checkpoint {
        Some(c) => Ok((load_prior(base.join(c))?, None)),
        None => {
            let (w, log) = train_prior_from_entries(&manifest.prior.shapes, &manifest.prior.encoder, &manifest.prior.train)?;
            save_prior(&w, out.join("prior.json"))?;
            write(&out.join("prior_curve.csv"), &training_curve_csv(&log))?;
            Ok((w, Some(log)))
        }
    })?;
    timed("train-prior", t);

    let t = Instant::now();
    let result = stage("coseg", || {
        let r = cosegment(&set, &prior, &manifest.coseg)?;
        write_coseg_outputs(&out, &r, &manifest.coseg, &[("experiment", manifest.name.clone())])?;
        Ok(r)
    })?;
    timed("coseg", t);

    let t = Instant::now();
    let (ris, mean) = stage("eval", || {
        let mut ris = Vec::new();
        let mut csv = String::from("shape,rand_index\n");
        for ((id, pred), gt) in result.shape_ids.iter().zip(&result.labelings).zip(&set.ground_truth) {
            if let Some(gt) = gt {
                let r = rand_index(pred.labels(), gt.labels())?.score;
                csv.push_str(&format!("{id},{r:?}\n"));
                ris.push((id.clone(), r));
            }
        }
        let mean = if ris.is_empty() {
            None
        } else {
            Some(ris.iter().map(|r| r.1).sum::<f64>() / ris.len() as f64)
        };
        if let Some(m) = mean {
            csv.push_str(&format!("mean,{m:?}\n"));
        }
        write(&out.join("rand_index.csv"), &csv)?;
        Ok((ris, mean))
    })?;
    timed("eval", t);

    let mut summary = format!("experiment {}\nshapes {}\nK {}\n", manifest.name, set.len(), manifest.coseg.k);
    summary.push_str(&format!(
        "energy {:.6} -> {:.6}\nlabels used {:?}\nrestarts {}\n",
        result.initial_energy, result.final_energy, result.labels_used, result.restarts
    ));
    if let Some(m) = mean {
        summary.push_str(&format!("mean rand index {m:.4}\n"));
    }
    for s in &timings {
        summary.push_str(&format!("stage {} {:.2}s\n", s.stage, s.seconds));
    }
    write(&out.join("summary.txt"), &summary)?;
    fs::remove_file(&marker).map_err(|e| Error::io(&marker, e))?;
    Ok(ExperimentReport {
        out,
        result,
        rand_index: ris,
        mean_rand_index: mean,
        timings,
        prior_log,
    })
}
