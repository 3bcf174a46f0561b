use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use relwear_core::data::{
    assemble_dataset, generate_group_scene, generate_sample, read_dataset, read_scene, write_dataset, write_scene,
    GenConfig,
};
use relwear_core::nn::{load_checkpoint, predict_pair, save_checkpoint};
use relwear_core::relation::compose_triplet;
use relwear_core::train::{evaluate_scores, fold_partition, score_fold, train_with, EpochRecord};
use serde::Serialize;

mod run_config;

use run_config::RunConfig;

/// Group scenes written next to a generated dataset for `predict`.
const GROUP_SCENES: usize = 4;

#[derive(Parser)]
#[command(name = "relwear", version, about = "Person-clothing relationship classifier on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with validation folds.
    GenData(GenDataArgs),
    /// Train a model and keep the best validation checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on every validation fold.
    Eval(EvalArgs),
    /// Worn-confidence matrix between every person and garment of a scene.
    Predict(PredictArgs),
    /// Joint triplet confidence from detector and predicate confidences.
    Compose(ComposeArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    image_size: usize,
    #[arg(long, default_value_t = 0.37, value_parser = probability)]
    unworn_ratio: f64,
    #[arg(long)]
    out: PathBuf,
    /// Worker threads; output is identical for any count.
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Run configuration JSON; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the seed in the run configuration.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 10)]
    folds: usize,
    /// ROC curve CSV; the JSON report and per-fold CSV are written beside it.
    #[arg(long)]
    roc: Option<PathBuf>,
    #[arg(long)]
    threshold: Option<f64>,
    /// Worker threads for per-fold scoring; output is identical for any count.
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    scene: PathBuf,
    /// Detector confidence of the persons.
    #[arg(long, value_parser = probability, requires = "po")]
    ps: Option<f64>,
    /// Detector confidence of the garments.
    #[arg(long, value_parser = probability, requires = "ps")]
    po: Option<f64>,
}

#[derive(Args)]
struct ComposeArgs {
    #[arg(long, value_parser = probability)]
    ps: f64,
    #[arg(long, value_parser = probability)]
    po: f64,
    #[arg(long, value_parser = probability)]
    pp: f64,
}

fn probability(s: &str) -> std::result::Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("`{s}` is not a number"))?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("{v} is outside [0, 1]"))
    }
}

fn pool(threads: usize) -> Result<rayon::ThreadPool> {
    if threads == 0 {
        bail!("--threads must be at least 1");
    }
    Ok(rayon::ThreadPoolBuilder::new().num_threads(threads).build()?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

fn gen_data(a: &GenDataArgs) -> Result<()> {
    if a.count == 0 {
        bail!("--count must be at least 1");
    }
    let cfg = GenConfig {
        image_size: a.image_size,
        unworn_ratio: a.unworn_ratio,
        ..GenConfig::default()
    };
    cfg.validate()?;
    let samples = pool(a.threads)?.install(|| {
        (0..a.count)
            .into_par_iter()
            .map(|i| generate_sample(a.seed, i, &cfg))
            .collect::<relwear_core::Result<Vec<_>>>()
    })?;
    let ds = assemble_dataset(samples, a.seed, &cfg)?;
    write_dataset(&ds, &a.out).with_context(|| format!("cannot write dataset to {}", a.out.display()))?;
    for i in 0..GROUP_SCENES {
        let scene = generate_group_scene(a.seed, i, &cfg)?;
        write_scene(&scene, &a.out.join("scenes").join(format!("scene_{i:03}.json")))?;
    }
    let (worn, unworn) = ds.class_counts();
    println!("samples: {}", ds.len());
    println!("worn: {worn}");
    println!("unworn: {unworn}");
    println!("train: {}", ds.train_indices().len());
    for k in 1..=ds.manifest.folds {
        println!("val-fold-{k}: {}", ds.fold_indices(k).len());
    }
    Ok(())
}

#[derive(Serialize)]
struct History<'a> {
    version: u32,
    best_epoch: usize,
    best_val_accuracy: f64,
    epochs: &'a [EpochRecord],
}

fn train(a: &TrainArgs) -> Result<()> {
    let mut run = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = a.seed {
        run.train.seed = seed;
    }
    let ds = read_dataset(&a.data).with_context(|| format!("cannot read dataset {}", a.data.display()))?;
    let gen = &ds.manifest.generator.config;
    if let Some(expected) = &run.generator {
        if expected != gen {
            bail!("the dataset was generated with a different generator configuration than the run config names");
        }
    }
    if run.model.input_size != gen.image_size {
        bail!(
            "model input size {} does not match the dataset image size {}",
            run.model.input_size,
            gen.image_size
        );
    }
    if run.train.selection_fold > ds.manifest.folds {
        bail!(
            "selection fold {} is not among the dataset's {} folds",
            run.train.selection_fold,
            ds.manifest.folds
        );
    }
    let train_idx = ds.train_indices();
    let val_idx = ds.fold_indices(run.train.selection_fold);
    let epochs = run.train.epochs;
    let out = train_with(&run.model, &ds, &train_idx, &val_idx, &run.train, |r| {
        println!(
            "epoch {:>3}/{epochs}  loss {:.4}  train acc {:.4}  val acc {:.4}  best {:.4} (epoch {})",
            r.epoch, r.train_loss, r.train_accuracy, r.val_accuracy, r.best_val_accuracy, r.best_epoch
        );
    })?;
    save_checkpoint(&out.best, &a.out)?;
    write_json(&a.out.join("run_config.json"), &run)?;
    write_json(
        &a.out.join("history.json"),
        &History {
            version: 1,
            best_epoch: out.best_epoch,
            best_val_accuracy: out.best_val_accuracy,
            epochs: &out.history,
        },
    )?;
    println!(
        "kept epoch {} (val accuracy {:.4}) in {}",
        out.best_epoch,
        out.best_val_accuracy,
        a.out.display()
    );
    Ok(())
}

/// `roc.csv` -> `roc.<suffix>` in the same directory.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.{suffix}"))
}

fn eval(a: &EvalArgs) -> Result<()> {
    let model = load_checkpoint(&a.model)?;
    let ds = read_dataset(&a.data).with_context(|| format!("cannot read dataset {}", a.data.display()))?;
    let threshold = a.threshold.unwrap_or(0.5);
    let parts = fold_partition(&ds, a.folds)?;
    let scored = pool(a.threads)?.install(|| {
        parts
            .par_iter()
            .enumerate()
            .map(|(i, idx)| score_fold(&model, &ds, idx).map(|(s, l)| (i + 1, s, l)))
            .collect::<relwear_core::Result<Vec<_>>>()
    })?;
    let report = evaluate_scores(&scored, threshold)?;
    print!("{}", report.table());
    match report.auc {
        Some(auc) => println!("AUC {auc:.4}"),
        None => println!("AUC n/a (only one class among the evaluated samples)"),
    }
    if let Some(roc) = &a.roc {
        if let Some(dir) = roc.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(roc, report.roc_csv()).with_context(|| format!("cannot write {}", roc.display()))?;
        fs::write(sibling(roc, "folds.csv"), report.folds_csv())?;
        fs::write(sibling(roc, "report.json"), report.to_json()?)?;
    }
    Ok(())
}

fn predict(a: &PredictArgs) -> Result<()> {
    let model = load_checkpoint(&a.model)?;
    let (scene, image) = read_scene(&a.scene)?;
    if scene.persons.is_empty() || scene.clothes.is_empty() {
        bail!(
            "scene needs at least one person and one clothing mask, found {} and {}",
            scene.persons.len(),
            scene.clothes.len()
        );
    }
    if let Some(i) = scene.persons.iter().position(|m| m.is_empty()) {
        bail!("person mask {i} is empty");
    }
    if let Some(j) = scene.clothes.iter().position(|m| m.is_empty()) {
        bail!("clothing mask {j} is empty");
    }
    let mode = model.config().attention;
    let mut matrix = Vec::with_capacity(scene.persons.len());
    for s in &scene.persons {
        let row = scene
            .clothes
            .iter()
            .map(|o| predict_pair(&model, &image, s, o, mode))
            .collect::<relwear_core::Result<Vec<f64>>>()?;
        matrix.push(row);
    }
    let detectors = a.ps.zip(a.po);

    let mut text = String::new();
    let _ = write!(text, "{:<10}", "");
    for j in 0..scene.clothes.len() {
        let _ = write!(text, " {:>10}", format!("clothing {j}"));
    }
    text.push('\n');
    for (i, row) in matrix.iter().enumerate() {
        let _ = write!(text, "{:<10}", format!("person {i}"));
        for p in row {
            let _ = write!(text, " {p:>10.4}");
        }
        text.push('\n');
    }
    let mut csv = String::from("person,clothing,p_worn");
    if detectors.is_some() {
        csv.push_str(",p_s,p_o,p_joint");
    }
    csv.push('\n');
    if let Some((ps, po)) = detectors {
        let _ = writeln!(text, "\njoint confidence with p_s = {ps}, p_o = {po}");
    }
    for (i, row) in matrix.iter().enumerate() {
        if detectors.is_some() {
            let _ = write!(text, "{:<10}", format!("person {i}"));
        }
        for (j, &p) in row.iter().enumerate() {
            let _ = write!(csv, "{i},{j},{p}");
            if let Some((ps, po)) = detectors {
                let t = compose_triplet(ps, po, p)?;
                let _ = write!(csv, ",{ps},{po},{}", t.p_joint);
                let _ = write!(text, " {:>10.4}", t.p_joint);
            }
            csv.push('\n');
        }
        if detectors.is_some() {
            text.push('\n');
        }
    }
    print!("{text}");
    let out = sibling(&a.scene, "predictions.csv");
    fs::write(&out, csv).with_context(|| format!("cannot write {}", out.display()))?;
    Ok(())
}

fn compose(a: &ComposeArgs) -> Result<()> {
    let t = compose_triplet(a.ps, a.po, a.pp)?;
    println!("{}", t.p_joint);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Predict(a) => predict(a),
        Command::Compose(a) => compose(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
