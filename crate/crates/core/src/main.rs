use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use coseg::checkpoint::{load_prior, save_prior};
use coseg::coseg::{cosegment, part_descriptor, prepare_set, Ablation, ClassifierInput, CosegConfig};
use coseg::data::{load_labeling, load_shape_set, write_shape_set, Family, SynthEntry, SynthManifest, SynthSpec};
use coseg::eval::{descriptor_clusters, mapped_accuracy, rand_index, rank_probe, RankProbeConfig};
use coseg::experiment::{run_experiment, training_curve_csv, write_coseg_outputs};
use coseg::plot::{parse_csv, render, Series, Style};
use coseg::prior::{train_prior, PriorDataset, PriorTrainConfig};
use coseg::{Error, Result};

#[derive(Parser)]
#[command(name = "coseg", version, about = "Adaptive point-cloud co-segmentation")]
struct Cli {
    /// Run data-parallel loops sequentially.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic shapes with ground-truth labels.
    Synth {
        /// Synthesis manifest (TOML); overrides the inline options.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, default_value = "chair_like")]
        family: String,
        #[arg(long, default_value_t = 512)]
        points: usize,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        arms: bool,
        #[arg(long, default_value_t = 0.0)]
        jitter: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the part prior on the labeled parts of a shape set.
    TrainPrior {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5000)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 2e-3)]
        lr: f64,
        #[arg(long, default_value_t = 4)]
        batch: usize,
        /// Where to write the training curve CSV.
        #[arg(long)]
        curve: Option<PathBuf>,
    },
    /// Co-segment a shape set.
    Coseg {
        #[arg(long)]
        set: PathBuf,
        #[arg(long)]
        k: usize,
        #[arg(long)]
        prior: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        ablate: Option<String>,
        /// Classifier input: mrg or coords.
        #[arg(long)]
        input: Option<String>,
    },
    /// Rand Index of predicted label files against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
    },
    /// Score labeled descriptor collections by their second singular value.
    RankProbe {
        /// Labeled set manifest; descriptors come from the prior's encoder.
        #[arg(long)]
        set: Option<PathBuf>,
        #[arg(long)]
        prior: Option<PathBuf>,
        /// Use synthetic unit-norm descriptor clusters instead of a set.
        #[arg(long)]
        synthetic: bool,
        #[arg(long, default_value_t = 50)]
        samples: usize,
        /// Descriptors drawn per label of each collection
        #[arg(long, default_value_t = 20)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a full experiment manifest.
    Run {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Render an energy trace, training curve or rank-probe CSV as SVG.
    Plot {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_family(s: &str) -> Result<Family> {
    match s {
        "two_box" => Ok(Family::TwoBox),
        "chair_like" => Ok(Family::ChairLike),
        "table_like" => Ok(Family::TableLike),
        "lamp_like" => Ok(Family::LampLike),
        other => Err(Error::Invalid(format!("unknown family {other:?}"))),
    }
}

fn require_file(p: &Path) -> Result<()> {
    if p.is_file() {
        Ok(())
    } else {
        Err(Error::Invalid(format!("{} is not a file", p.display())))
    }
}

fn require_dir(p: &Path) -> Result<()> {
    if p.is_dir() {
        Ok(())
    } else {
        Err(Error::Invalid(format!("{} is not a directory", p.display())))
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// `<stem>.labels` files in a directory, keyed by stem.
fn label_files(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.extension().is_some_and(|e| e == "labels") {
            if let Some(stem) = p.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), p);
            }
        }
    }
    Ok(out)
}

fn run(cli: Cli) -> Result<()> {
    coseg::par::set_sequential(cli.sequential);
    match cli.command {
        Command::Synth {
            manifest,
            family,
            points,
            count,
            seed,
            arms,
            jitter,
            out,
        } => {
            let m = match manifest {
                Some(p) => SynthManifest::load(p)?,
                None => SynthManifest {
                    shapes: vec![SynthEntry {
                        spec: SynthSpec::new(parse_family(&family)?, points, seed).arms(arms).jitter(jitter),
                        count,
                        id_prefix: None,
                    }],
                },
            };
            let set = m.generate()?;
            let path = write_shape_set(&set, &out)?;
            println!("wrote {} shapes to {}", set.len(), path.display());
        }
        Command::TrainPrior {
            data,
            out,
            steps,
            seed,
            lr,
            batch,
            curve,
        } => {
            require_file(&data)?;
            let mut config = PriorTrainConfig {
                steps,
                seed,
                batch,
                ..Default::default()
            };
            config.adam.learning_rate = lr;
            config.validate()?;
            let set = load_shape_set(&data)?;
            let labeled: Vec<_> = set
                .shapes
                .into_iter()
                .zip(set.ground_truth)
                .filter_map(|(c, g)| g.map(|g| (c, g)))
                .collect();
            if labeled.is_empty() {
                return Err(Error::Invalid("training data has no labeled shapes".into()));
            }
            let encoder = Default::default();
            let dataset = PriorDataset::from_labelings(&labeled, &encoder)?;
            let (w, log) = train_prior(&dataset, &encoder, &config)?;
            save_prior(&w, &out)?;
            if let Some(c) = curve {
                write(&c, &training_curve_csv(&log))?;
            }
            if let Some(last) = log.entries.last() {
                println!("step {} validation loss {:.4}", last.step, last.validation_loss);
            }
            println!("wrote {}", out.display());
        }
        Command::Coseg {
            set,
            k,
            prior,
            out,
            lambda,
            iters,
            seed,
            ablate,
            input,
        } => {
            require_file(&set)?;
            require_file(&prior)?;
            let mut config = CosegConfig {
                k,
                seed,
                ablate: ablate.as_deref().map(Ablation::parse).transpose()?,
                ..Default::default()
            };
            if let Some(l) = lambda {
                config.lambda = l;
            }
            if let Some(i) = iters {
                config.max_iters = i;
            }
            match input.as_deref() {
                None | Some("mrg") => {}
                Some("coords") => config.input = ClassifierInput::Coords,
                Some(other) => return Err(Error::Invalid(format!("unknown classifier input {other:?}"))),
            }
            config.validate()?;
            let shapes = load_shape_set(&set)?;
            let weights = load_prior(&prior)?;
            let result = cosegment(&shapes, &weights, &config)?;
            fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            write_coseg_outputs(
                &out,
                &result,
                &config,
                &[
                    ("set", set.display().to_string()),
                    ("prior", prior.display().to_string()),
                ],
            )?;
            println!(
                "energy {:.6} -> {:.6}, labels used {:?}, restarts {}",
                result.initial_energy, result.final_energy, result.labels_used, result.restarts
            );
        }
        Command::Eval { pred, gt } => {
            require_dir(&pred)?;
            require_dir(&gt)?;
            let preds = label_files(&pred)?;
            let gts = label_files(&gt)?;
            let matched: Vec<_> = preds.iter().filter_map(|(id, p)| gts.get(id).map(|g| (id, p, g))).collect();
            if matched.is_empty() {
                return Err(Error::Invalid("no label files with matching names".into()));
            }
            println!("shape,rand_index,mapped_accuracy");
            let mut total = 0.0;
            for (id, p, g) in &matched {
                let p = load_labeling(p, None)?;
                let g = load_labeling(g, None)?;
                let ri = rand_index(p.labels(), g.labels())?.score;
                let acc = mapped_accuracy(p.labels(), g.labels())?;
                println!("{id},{ri:.6},{acc:.6}");
                total += ri;
            }
            println!("mean,{:.6},", total / matched.len() as f64);
        }
        Command::RankProbe {
            set,
            prior,
            synthetic,
            samples,
            size,
            seed,
            out,
        } => {
            let config = RankProbeConfig {
                samples,
                collection_size: size,
                seed,
                ..Default::default()
            };
            let parts = if synthetic {
                let centers = vec![vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0, 0.0]];
                descriptor_clusters(&centers, 40, 5f64.to_radians(), seed)?
            } else {
                let (Some(set), Some(prior)) = (set, prior) else {
                    return Err(Error::Invalid("rank-probe needs --set and --prior, or --synthetic".into()));
                };
                require_file(&set)?;
                require_file(&prior)?;
                let shapes = load_shape_set(&set)?;
                let weights = load_prior(&prior)?;
                let feats = prepare_set(&shapes, &weights, ClassifierInput::Mrg)?;
                let mut parts = Vec::new();
                for (f, gt) in feats.iter().zip(&shapes.ground_truth) {
                    let Some(gt) = gt else { continue };
                    for l in gt.used() {
                        let mask: Vec<f64> = gt.labels().iter().map(|&x| if x == l { 1.0 } else { 0.0 }).collect();
                        if let Some(d) = part_descriptor(&f.prior.msg, &mask, 5)? {
                            parts.push((d.values().to_vec(), l));
                        }
                    }
                }
                parts
            };
            let report = rank_probe(&parts, &config)?;
            write(&out, &report.to_csv())?;
            for s in &report.summary {
                println!(
                    "{} label(s): sigma2 [{:.4}, {:.4}]  mse [{:.4}, {:.4}]",
                    s.label_count, s.sigma2_min, s.sigma2_max, s.mse_min, s.mse_max
                );
            }
            for n in &report.notes {
                println!("note: {n}");
            }
        }
        Command::Run { manifest } => {
            require_file(&manifest)?;
            let report = run_experiment(&manifest)?;
            println!("outputs in {}", report.out.display());
            if let Some(m) = report.mean_rand_index {
                println!("mean rand index {m:.4}");
            }
            for t in &report.timings {
                println!("{} {:.2}s", t.stage, t.seconds);
            }
        }
        Command::Plot { input, out } => {
            require_file(&input)?;
            let text = fs::read_to_string(&input).map_err(|e| Error::io(&input, e))?;
            let svg = plot_csv(&text)?;
            write(&out, &svg)?;
        }
    }
    Ok(())
}

fn plot_csv(text: &str) -> Result<String> {
    let (header, rows) = parse_csv(text);
    let num = |r: &[String], i: usize| r.get(i).and_then(|v| v.parse::<f64>().ok()).unwrap_or(f64::NAN);
    let col = |name: &str| header.iter().position(|h| h == name);
    if let (Some(c), Some(s)) = (col("label_count"), col("sigma2")) {
        let series = vec![Series {
            name: "sigma2".into(),
            points: rows.iter().map(|r| (num(r, c), num(r, s))).collect(),
        }];
        return Ok(render("rank probe", "labels in collection", "second singular value", &series, Style::Scatter));
    }
    let Some(x) = header.first().cloned() else {
        return Err(Error::Invalid("empty CSV".into()));
    };
    let series: Vec<Series> = header
        .iter()
        .enumerate()
        .skip(1)
        .filter(|(_, h)| *h != "labels_used")
        .map(|(i, h)| Series {
            name: h.clone(),
            points: rows.iter().map(|r| (num(r, 0), num(r, i))).collect(),
        })
        .collect();
    Ok(render("", &x, "value", &series, Style::Line))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
