mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde_json::{json, Value};

use hybridcrop::assignment::TrainExample;
use hybridcrop::composition::{
    fuse_cams, make_prior, resample_to_grid, ActivationMap, ClassProbabilities, CompositionError, NUM_CLASSES,
};
use hybridcrop::dataio::{load_dataset, synthetic, write_synthetic, DataError};
use hybridcrop::decoder::{load_checkpoint, save_checkpoint, CheckpointError, Prediction};
use hybridcrop::experiment::{
    ablate, predict_all, records_to_examples, scenes_to_examples, train_with, ExperimentError, McabMode, RunConfig,
};
use hybridcrop::gradcheck::{self, GradcheckConfig};
use hybridcrop::metrics::{EvalExample, MetricsReport};
use hybridcrop::tensor::{read_tensor, write_tensor, AescError, Tensor};

use config::UsageError;

/// Composition-aware image cropping: data generation, training, evaluation.
///
/// Any config field can also be set with its dotted name, e.g.
/// `--model.n_layers 1` or `--data.train path/to/train.jsonl`.
#[derive(Parser, Debug)]
#[command(name = "hybridcrop", version)]
struct Cli {
    /// JSON config merged over the desk defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Training seed; for `gen`, the data seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// How the composition prior biases cross-attention.
    #[arg(long, global = true, value_parser = ["average", "max", "off"])]
    mcab: Option<String>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    /// Initial learning rate.
    #[arg(long, global = true)]
    lr: Option<f64>,
    /// Output file or directory, depending on the command.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset: AESC images and CAMs plus dataset.jsonl.
    Gen {
        #[arg(long)]
        images: Option<usize>,
        #[arg(long)]
        candidates: Option<usize>,
    },
    /// Train a model; writes checkpoint/, loss_curve.json and config.json.
    Train,
    /// Score a checkpoint, or a predictions file, on the eval split.
    Eval {
        #[arg(long, required_unless_present = "predictions")]
        checkpoint: Option<PathBuf>,
        /// JSON lines of `{"id": ..., "predictions": [{"box": [...], "score": ...}]}`.
        #[arg(long, conflicts_with = "checkpoint")]
        predictions: Option<PathBuf>,
    },
    /// Fuse nine class activation maps into the grid prior.
    Fuse {
        /// Nine AESC rank-2 maps, one per composition class.
        #[arg(long, num_args = NUM_CLASSES, required = true)]
        cams: Vec<PathBuf>,
        /// Nine class probabilities, comma separated.
        #[arg(long, value_delimiter = ',', required = true)]
        probs: Vec<f64>,
        /// Also write a PGM preview of the fused map.
        #[arg(long)]
        pgm: Option<PathBuf>,
    },
    /// Compare every gradient against central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        seeds: u64,
    },
    /// Train and evaluate every MCAB mode at depths 1..=model.n_layers.
    Ablate,
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let clap_exit = e.downcast_ref::<clap::Error>().map(|c| c.exit_code());
            let body = json!({"error": {"kind": kind(&e), "message": format!("{e:#}")}});
            eprintln!("{body}");
            ExitCode::from(clap_exit.map_or(1, |c| c as u8))
        }
    }
}

fn kind(e: &anyhow::Error) -> &'static str {
    for cause in e.chain() {
        if cause.is::<UsageError>() || cause.is::<clap::Error>() {
            return "usage";
        }
        if cause.is::<CheckFailed>() {
            return "check_failed";
        }
        if cause.is::<DataError>() {
            return "data";
        }
        if cause.is::<AescError>() {
            return "tensor_file";
        }
        if cause.is::<CheckpointError>() {
            return "checkpoint";
        }
        if cause.is::<CompositionError>() {
            return "composition";
        }
        if cause.is::<ExperimentError>() {
            return "experiment";
        }
        if cause.is::<std::io::Error>() {
            return "io";
        }
    }
    "internal"
}

#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct CheckFailed(String);

fn run() -> Result<()> {
    let (args, overrides) = config::split_overrides(std::env::args().collect())?;
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            e.print()?;
            return Ok(());
        }
        Err(e) => return Err(e.into()),
    };
    let mut cfg = config::load(cli.config.as_deref(), &overrides)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(m) = &cli.mcab {
        cfg.mcab = m.parse().map_err(UsageError)?;
    }
    if let Some(e) = cli.epochs {
        cfg.epochs = e;
    }
    if let Some(lr) = cli.lr {
        cfg.lr.initial = lr;
    }
    if let Some(o) = &cli.out {
        cfg.out = Some(o.clone());
    }

    match cli.command {
        Command::Gen { images, candidates } => cmd_gen(&cfg, cli.seed, images, candidates),
        Command::Train => cmd_train(&cfg),
        Command::Eval { checkpoint, predictions } => cmd_eval(&cfg, checkpoint.as_deref(), predictions.as_deref()),
        Command::Fuse { cams, probs, pgm } => cmd_fuse(&cfg, &cams, &probs, pgm.as_deref()),
        Command::Gradcheck { seeds } => cmd_gradcheck(&cfg, seeds),
        Command::Ablate => cmd_ablate(&cfg),
    }
}

fn require_out(cfg: &RunConfig) -> Result<&Path> {
    cfg.out
        .as_deref()
        .ok_or_else(|| UsageError("this command needs --out".into()).into())
}

/// Writes a report to `out`, or to `out/name` when `out` is a directory.
fn write_report(out: &Path, name: &str, v: &impl serde::Serialize) -> Result<()> {
    if out.is_dir() {
        write_json(&out.join(name), v)
    } else {
        write_json(out, v)
    }
}

fn write_json(path: &Path, v: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(v)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn synthetic_config(cfg: &RunConfig, candidates: usize) -> Result<synthetic::SyntheticConfig> {
    let m = &cfg.model;
    if m.grid_h != m.grid_w || m.image_h != m.image_w {
        bail!(UsageError("synthetic data needs a square image and grid".into()));
    }
    let mut s = synthetic::SyntheticConfig::new(m.grid_h, candidates);
    s.patch_px = m.image_h / m.grid_h;
    s.channels = m.image_channels;
    Ok(s)
}

fn cmd_gen(cfg: &RunConfig, seed: Option<u64>, images: Option<usize>, candidates: Option<usize>) -> Result<()> {
    let out = require_out(cfg)?;
    let seed = seed.unwrap_or(cfg.data.train_seed);
    let scfg = synthetic_config(cfg, candidates.unwrap_or(cfg.data.candidates))?;
    let scenes = synthetic::generate_with(&scfg, seed, images.unwrap_or(cfg.data.train_images));
    let records = write_synthetic(out, &scenes)?;
    println!(
        "{}",
        json!({"dataset": out.join("dataset.jsonl"), "records": records.len(), "seed": seed})
    );
    Ok(())
}

/// Examples for one split: the configured dataset, or synthetic scenes.
fn split(cfg: &RunConfig, mode: McabMode, train: bool) -> Result<Vec<TrainExample>> {
    let (path, seed, n) = if train {
        (&cfg.data.train, cfg.data.train_seed, cfg.data.train_images)
    } else {
        (&cfg.data.eval, cfg.data.eval_seed, cfg.data.eval_images)
    };
    Ok(match path {
        Some(p) => records_to_examples(&load_dataset(p)?, &cfg.model, mode)?,
        None => {
            let scenes = synthetic::generate_with(&synthetic_config(cfg, cfg.data.candidates)?, seed, n);
            scenes_to_examples(&scenes, &cfg.model, mode)?
        }
    })
}

fn cmd_train(cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    let out = require_out(cfg)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let examples = split(cfg, cfg.mcab, true)?;
    let (state, report) = train_with(cfg, &examples, |epoch, loss| {
        eprintln!("epoch {:>3}/{} loss {loss:.5} lr {:.1e}", epoch + 1, cfg.epochs, cfg.lr.at(epoch));
    })?;
    save_checkpoint(out.join("checkpoint"), &state)?;
    write_json(&out.join("loss_curve.json"), &report)?;
    write_json(&out.join("config.json"), cfg)?;
    println!(
        "{}",
        json!({
            "checkpoint": out.join("checkpoint"),
            "steps": report.step_losses.len(),
            "final_epoch_loss": report.epoch_losses.last(),
        })
    );
    Ok(())
}

fn read_predictions(path: &Path) -> Result<Vec<(String, Vec<Prediction>)>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let v: Value = serde_json::from_str(l).map_err(|e| UsageError(format!("{}:{}: {e}", path.display(), i + 1)))?;
            let id = v["id"].as_str().ok_or_else(|| UsageError(format!("{}:{}: missing id", path.display(), i + 1)))?;
            let preds: Vec<Prediction> = serde_json::from_value(v["predictions"].clone())
                .map_err(|e| UsageError(format!("{}:{}: predictions: {e}", path.display(), i + 1)))?;
            Ok((id.to_string(), preds))
        })
        .collect()
}

fn cmd_eval(cfg: &RunConfig, checkpoint: Option<&Path>, predictions: Option<&Path>) -> Result<()> {
    let examples: Vec<EvalExample> = match (checkpoint, predictions) {
        (Some(dir), _) => {
            let state = load_checkpoint(dir)?;
            let mut c = cfg.clone();
            c.model = state.config().clone();
            predict_all(&state, &split(&c, c.mcab, false)?)?
        }
        (None, Some(file)) => {
            let Some(data) = &cfg.data.eval else {
                bail!(UsageError("--predictions needs --data.eval".into()));
            };
            let records = load_dataset(data)?;
            read_predictions(file)?
                .into_iter()
                .map(|(id, predictions)| {
                    let r = records
                        .iter()
                        .find(|r| r.id == id)
                        .ok_or_else(|| UsageError(format!("no record with id `{id}` in {}", data.display())))?;
                    Ok(EvalExample {
                        predictions,
                        ground_truths: r.crops.clone(),
                    })
                })
                .collect::<Result<_>>()?
        }
        (None, None) => bail!(UsageError("eval needs --checkpoint or --predictions".into())),
    };
    let report = MetricsReport::compute(&examples, &cfg.eval.ks, &cfg.eval.ns, cfg.eval.epsilon)?;
    if let Some(out) = &cfg.out {
        write_report(out, "metrics.json", &report)?;
    }
    print!("{}", report.table(cfg.mcab.name()));
    Ok(())
}

fn cmd_fuse(cfg: &RunConfig, cams: &[PathBuf], probs: &[f64], pgm: Option<&Path>) -> Result<()> {
    let out = require_out(cfg)?;
    let Some(mode) = cfg.mcab.fusion() else {
        bail!(UsageError("fuse needs --mcab average or max".into()));
    };
    let probs: [f64; NUM_CLASSES] = probs
        .try_into()
        .map_err(|_| UsageError(format!("--probs needs {NUM_CLASSES} values, got {}", probs.len())))?;
    let probs = ClassProbabilities::new(probs)?;
    let maps = cams
        .iter()
        .map(|p| Ok(ActivationMap::from_tensor(&read_tensor(p)?)?))
        .collect::<Result<Vec<_>>>()?;
    let fused = fuse_cams(&maps, &probs, mode)?;
    let grid = resample_to_grid(&fused, cfg.model.grid_h, cfg.model.grid_w)?;
    let prior = make_prior(&grid, cfg.model.epsilon_b);
    write_tensor(out, &Tensor::new(vec![prior.grid_h(), prior.grid_w()], prior.bias().to_vec())?)?;
    if let Some(p) = pgm {
        fs::write(p, fused.to_pgm()).with_context(|| format!("writing {}", p.display()))?;
    }
    println!("{}", json!({"prior": out, "grid": [prior.grid_h(), prior.grid_w()], "mode": cfg.mcab.name()}));
    Ok(())
}

fn cmd_gradcheck(cfg: &RunConfig, seeds: u64) -> Result<()> {
    let gc = GradcheckConfig::default();
    let report = gradcheck::run(0..seeds, &gc)?;
    for (name, err) in report.worst_by_name() {
        println!("{name:<14} {err:.2e}");
    }
    if let Some(out) = &cfg.out {
        write_report(out, "gradcheck.json", &report)?;
    }
    let failed: Vec<String> = report
        .failures()
        .map(|r| format!("{} (seed {}, {:.2e})", r.name, r.seed, r.max_rel_error))
        .collect();
    if !failed.is_empty() {
        bail!(CheckFailed(format!(
            "{} of {} checks above {:.0e}: {}",
            failed.len(),
            report.results.len(),
            gc.tolerance,
            failed.join(", ")
        )));
    }
    println!("all {} checks below {:.0e}", report.results.len(), gc.tolerance);
    Ok(())
}

fn cmd_ablate(cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    let depths: Vec<usize> = (1..=cfg.model.n_layers).collect();
    let modes = [McabMode::Off, McabMode::Max, McabMode::Average];
    let report = ablate(cfg, &modes, &depths, |mode| {
        let wrap = |e: anyhow::Error| ExperimentError::Config(format!("{e:#}"));
        Ok((split(cfg, mode, true).map_err(wrap)?, split(cfg, mode, false).map_err(wrap)?))
    })?;
    if let Some(out) = &cfg.out {
        write_report(out, "ablation.json", &report)?;
    }
    print!("{}", report.table());
    Ok(())
}
