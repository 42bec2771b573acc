//! `protoseg` — command-line frontend for the few-shot segmentation pipeline.
//!
//! Subcommands: `gen` (synthetic corpus), `train`, `eval`, `infer`, and
//! `gradcheck` (finite-difference verification). Every command is
//! deterministic given its flags and seeds. Settings resolve in precedence
//! order flags > config file > built-in defaults, and the effective values are
//! echoed as `#` comment lines into every CSV the command writes.
//!
//! Exit codes: 0 success, 1 I/O or runtime failure, 2 bad arguments,
//! 3 gradient-check failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use protoseg::checkpoint::{load_checkpoint, save_checkpoint};
use protoseg::data::{
    binarize_mask, generate_synthetic, load_dataset, save_dataset, write_pgm, ImageSample,
};
use protoseg::gradsuite;
use protoseg::metrics::{
    curve_to_csv, dsc, evaluate, evaluate_baseline, iteration_curve, soft_fg_channel,
};
use protoseg::numerics::ops::bilinear_resize;
use protoseg::refine::{predict, M0Mode, Model, ModelConfig};
use protoseg::train::{train, TrainConfig};
use protoseg::Error;

#[derive(Parser)]
#[command(name = "protoseg", version, about = "Few-shot shape segmentation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-class shape corpus.
    Gen(GenArgs),
    /// Train a model episodically on a corpus, holding one class out.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the held-out class.
    Eval(EvalArgs),
    /// Segment one query image from one support example.
    Infer(InferArgs),
    /// Verify analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
    /// Number of images.
    #[arg(long, default_value_t = 200)]
    num: usize,
    /// Number of classes per image (≥ 2).
    #[arg(long, default_value_t = 4)]
    classes: usize,
    /// Image side length in pixels (square, divisible by 4).
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Corpus seed.
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// Corpus directory (from `gen`).
    #[arg(long)]
    data: PathBuf,
    /// Class id to hold out of training.
    #[arg(long)]
    holdout: usize,
    /// Optional JSON settings file (flags still win).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint output path; the manifest lands at `<out>.json` and the
    /// training log at `<out>.train.csv`.
    #[arg(long)]
    out: PathBuf,
    /// Disable the support/query-swapped alignment regularizer.
    #[arg(long)]
    no_align_loss: bool,
    /// Refinement iterations unrolled during training.
    #[arg(long)]
    t_train: Option<usize>,
    /// Correlation neighborhood radius d.
    #[arg(long)]
    radius: Option<usize>,
    /// Feature channel width.
    #[arg(long)]
    z: Option<usize>,
    /// Cosine sharpness multiplier.
    #[arg(long)]
    alpha: Option<f64>,
    /// Dice weight in the segmentation loss.
    #[arg(long)]
    beta: Option<f64>,
    /// Training epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Episodes drawn per epoch.
    #[arg(long)]
    episodes_per_epoch: Option<usize>,
    /// Initial learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Training seed (initialization + episode sampling).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    /// Corpus directory.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint path (payload file; manifest expected beside it).
    #[arg(long)]
    model: PathBuf,
    /// Held-out class to evaluate.
    #[arg(long)]
    holdout: usize,
    /// Optional JSON settings file; must agree with the checkpoint manifest.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of evaluation repeats.
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    /// Use this sample id as the support in every episode.
    #[arg(long)]
    fixed_support: Option<String>,
    /// Refinement iterations at inference time.
    #[arg(long)]
    t_infer: Option<usize>,
    /// Evaluation seed (support draws).
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Report CSV output path.
    #[arg(long)]
    report: PathBuf,
    /// Also write a per-iteration mean-DSC curve to this CSV.
    #[arg(long)]
    curve: Option<PathBuf>,
    /// Also score the affine-aligned support mask alone (no model) on the
    /// same episodes, as a floor the trained model should clear.
    #[arg(long)]
    baseline: bool,
}

#[derive(Args)]
struct InferArgs {
    /// Checkpoint path.
    #[arg(long)]
    model: PathBuf,
    /// Corpus directory.
    #[arg(long)]
    data: PathBuf,
    /// Support sample id.
    #[arg(long)]
    support: String,
    /// Query sample id.
    #[arg(long)]
    query: String,
    /// Class id whose support mask guides the segmentation.
    #[arg(long)]
    class: usize,
    /// Output path prefix.
    #[arg(long)]
    out: PathBuf,
    /// Refinement iterations at inference time.
    #[arg(long)]
    t_infer: Option<usize>,
    /// Additionally write the prediction after every iteration.
    #[arg(long)]
    emit_iterations: bool,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Which case to run.
    #[arg(long, default_value = "all", value_parser = clap::builder::PossibleValuesParser::new(op_names()))]
    op: String,
    /// Fixture and probe-site seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn op_names() -> Vec<&'static str> {
    let mut names = vec!["all"];
    names.extend(gradsuite::OP_NAMES);
    names
}

/// Optional overrides read from a JSON settings file. Missing fields fall
/// back to built-in defaults; explicit command-line flags win over both.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    z: Option<usize>,
    radius: Option<usize>,
    alpha: Option<f64>,
    beta: Option<f64>,
    t_train: Option<usize>,
    t_infer: Option<usize>,
    epochs: Option<usize>,
    episodes_per_epoch: Option<usize>,
    lr: Option<f64>,
    lr_decay_factor: Option<f64>,
    lr_decay_every: Option<usize>,
    seed: Option<u64>,
    align_loss: Option<bool>,
    k_shots: Option<usize>,
    m0_mode: Option<String>,
}

impl FileConfig {
    fn load(path: Option<&Path>) -> Result<Self, Error> {
        let Some(path) = path else { return Ok(FileConfig::default()) };
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("malformed config {}: {e}", path.display())))
    }

    fn m0_mode(&self) -> Result<M0Mode, Error> {
        match self.m0_mode.as_deref() {
            None | Some("union") => Ok(M0Mode::Union),
            Some("average") => Ok(M0Mode::Average),
            Some(other) => {
                Err(Error::Config(format!("m0_mode must be union|average, got {other:?}")))
            }
        }
    }
}

fn main() -> ExitCode {
    init_thread_pool();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Gen(args) => cmd_gen(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Infer(args) => cmd_infer(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

/// Honors `PROTOSEG_THREADS`; by default rayon uses all logical CPUs.
fn init_thread_pool() {
    if let Ok(v) = std::env::var("PROTOSEG_THREADS") {
        if let Ok(n) = v.trim().parse::<usize>() {
            if n >= 1 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
}

fn cmd_gen(args: GenArgs) -> Result<ExitCode, Error> {
    let samples = generate_synthetic(args.num, args.size, args.classes, args.seed)?;
    std::fs::create_dir_all(&args.out)?;
    save_dataset(&samples, &args.out)?;

    let mut area = vec![0.0f64; args.classes];
    for s in &samples {
        for (&k, mask) in &s.masks {
            let fg: f32 = mask.values().iter().sum();
            area[k] += fg as f64 / mask.numel() as f64;
        }
    }
    println!(
        "generated {} samples ({}x{}, {} classes, seed {}) into {}",
        samples.len(),
        args.size,
        args.size,
        args.classes,
        args.seed,
        args.out.display()
    );
    for (k, a) in area.iter().enumerate() {
        println!("  class {k}: mean foreground area {:.2}%", 100.0 * a / samples.len() as f64);
    }
    Ok(ExitCode::SUCCESS)
}

/// The fully resolved settings a command ran with, echoed into CSV headers.
fn echo_lines(pairs: &[(&str, String)]) -> Vec<String> {
    pairs.iter().map(|(k, v)| format!("{k} = {v}")).collect()
}

fn cmd_train(args: TrainArgs) -> Result<ExitCode, Error> {
    let file = FileConfig::load(args.config.as_deref())?;

    let mut tc = TrainConfig::new(args.holdout, 0);
    tc.seed = args.seed.or(file.seed).unwrap_or(0);
    tc.epochs = args.epochs.or(file.epochs).unwrap_or(tc.epochs);
    tc.episodes_per_epoch =
        args.episodes_per_epoch.or(file.episodes_per_epoch).unwrap_or(tc.episodes_per_epoch);
    tc.lr = args.lr.or(file.lr).unwrap_or(tc.lr);
    tc.lr_decay_factor = file.lr_decay_factor.unwrap_or(tc.lr_decay_factor);
    tc.lr_decay_every = file.lr_decay_every.unwrap_or(tc.lr_decay_every);
    tc.beta = args.beta.or(file.beta).unwrap_or(tc.beta);
    tc.t_train = args.t_train.or(file.t_train).unwrap_or(tc.t_train);
    tc.k_shots = file.k_shots.unwrap_or(tc.k_shots);
    tc.align_loss = if args.no_align_loss { false } else { file.align_loss.unwrap_or(true) };

    let config = ModelConfig {
        z: args.z.or(file.z).unwrap_or(32),
        d: args.radius.or(file.radius).unwrap_or(5),
        alpha: args.alpha.or(file.alpha).unwrap_or(20.0),
        t_train: tc.t_train,
        t_infer: file.t_infer.unwrap_or(10),
        m0_mode: file.m0_mode()?,
        recurse_binary: false,
    };

    let dataset = load_dataset(&args.data)?;
    let mut model = Model::init(config, tc.seed);
    let log = train(&mut model, &dataset, &tc)?;

    save_checkpoint(&model, tc.seed, tc.epochs, &args.out)?;
    let comments = echo_lines(&[
        ("data", args.data.display().to_string()),
        ("holdout", tc.holdout_class.to_string()),
        ("z", config.z.to_string()),
        ("radius", config.d.to_string()),
        ("alpha", format!("{}", config.alpha)),
        ("beta", format!("{}", tc.beta)),
        ("t_train", tc.t_train.to_string()),
        ("epochs", tc.epochs.to_string()),
        ("episodes_per_epoch", tc.episodes_per_epoch.to_string()),
        ("lr", format!("{}", tc.lr)),
        ("lr_decay_factor", format!("{}", tc.lr_decay_factor)),
        ("lr_decay_every", tc.lr_decay_every.to_string()),
        ("align_loss", tc.align_loss.to_string()),
        ("k_shots", tc.k_shots.to_string()),
        ("seed", tc.seed.to_string()),
    ]);
    let log_path = sibling(&args.out, ".train.csv");
    std::fs::write(&log_path, log.to_csv(&comments))?;
    println!(
        "trained {} epochs; checkpoint {}, log {}",
        tc.epochs,
        args.out.display(),
        log_path.display()
    );
    Ok(ExitCode::SUCCESS)
}

/// `path` with `suffix` appended to the file name (`model.ckpt` → `model.ckpt<suffix>`).
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(suffix);
    PathBuf::from(os)
}

/// A settings file may pin architecture knobs; they must then match the
/// checkpoint manifest, otherwise the run would silently use different ones.
fn check_manifest_compat(
    manifest: &protoseg::checkpoint::Manifest,
    file: &FileConfig,
) -> Result<(), Error> {
    let mismatch = |what: &str, want: String, got: String| {
        Err(Error::Checkpoint(format!(
            "config {what} = {want} conflicts with checkpoint manifest ({what} = {got})"
        )))
    };
    if let Some(z) = file.z {
        if z != manifest.z {
            return mismatch("z", z.to_string(), manifest.z.to_string());
        }
    }
    if let Some(d) = file.radius {
        if d != manifest.d {
            return mismatch("radius", d.to_string(), manifest.d.to_string());
        }
    }
    if let Some(a) = file.alpha {
        if a != manifest.alpha {
            return mismatch("alpha", a.to_string(), manifest.alpha.to_string());
        }
    }
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<ExitCode, Error> {
    let file = FileConfig::load(args.config.as_deref())?;
    let dataset = load_dataset(&args.data)?;
    let (mut model, manifest) = load_checkpoint(&args.model)?;
    check_manifest_compat(&manifest, &file)?;
    model.config.t_infer = args.t_infer.or(file.t_infer).unwrap_or(10);
    model.config.m0_mode = file.m0_mode()?;

    let report = evaluate(
        &model,
        &dataset,
        args.holdout,
        args.repeats,
        args.fixed_support.as_deref(),
        args.seed,
    )?;
    let baseline = if args.baseline {
        Some(evaluate_baseline(
            &dataset,
            args.holdout,
            args.repeats,
            args.fixed_support.as_deref(),
            args.seed,
        )?)
    } else {
        None
    };

    let mut comments = echo_lines(&[
        ("data", args.data.display().to_string()),
        ("model", args.model.display().to_string()),
        ("holdout", args.holdout.to_string()),
        ("z", manifest.z.to_string()),
        ("radius", manifest.d.to_string()),
        ("alpha", format!("{}", manifest.alpha)),
        ("t_infer", model.config.t_infer.to_string()),
        ("repeats", args.repeats.to_string()),
        (
            "fixed_support",
            args.fixed_support.clone().unwrap_or_else(|| "none".to_string()),
        ),
        ("seed", args.seed.to_string()),
    ]);
    if let Some(base) = &baseline {
        comments.push(format!("baseline_mean_dsc = {:.6}", base.mean));
    }
    std::fs::write(&args.report, report.to_csv(&comments))?;
    println!(
        "holdout {}: mean DSC {:.4} ± {:.4} over {} repeats → {}",
        args.holdout,
        report.mean,
        report.std,
        args.repeats,
        args.report.display()
    );
    if let Some(base) = &baseline {
        println!(
            "holdout {}: affine-only baseline mean DSC {:.4} ± {:.4}",
            args.holdout, base.mean, base.std
        );
    }

    if let Some(curve_path) = &args.curve {
        let curve =
            iteration_curve(&model, &dataset, args.holdout, model.config.t_infer, args.seed)?;
        std::fs::write(curve_path, curve_to_csv(&curve, &comments))?;
        println!("iteration curve → {}", curve_path.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn find_sample<'a>(dataset: &'a [ImageSample], id: &str) -> Result<&'a ImageSample, Error> {
    dataset
        .iter()
        .find(|s| s.sample_id == id)
        .ok_or_else(|| Error::InsufficientData(format!("sample id {id:?} not in dataset")))
}

fn cmd_infer(args: InferArgs) -> Result<ExitCode, Error> {
    let dataset = load_dataset(&args.data)?;
    let (mut model, _) = load_checkpoint(&args.model)?;
    model.config.t_infer = args.t_infer.unwrap_or(10);

    let support = find_sample(&dataset, &args.support)?;
    let query = find_sample(&dataset, &args.query)?;
    let support_mask = support.masks.get(&args.class).ok_or_else(|| {
        Error::InsufficientData(format!(
            "sample {:?} has no mask for class {}",
            args.support, args.class
        ))
    })?;

    let pair = vec![(support.image.clone(), support_mask.clone())];
    let (final_mask, trace) = predict(&model, &pair, &query.image)?;
    let (h, w, _) = query.image.dims3()?;

    let final_path = sibling(&args.out, ".final.pgm");
    write_pgm(&final_path, &final_mask)?;
    println!("final mask → {}", final_path.display());

    if args.emit_iterations {
        for (i, soft) in trace.soft_masks.iter().enumerate() {
            let up = binarize_mask(&bilinear_resize(&soft_fg_channel(soft)?, h, w)?);
            write_pgm(&sibling(&args.out, &format!(".iter{}.pgm", i + 1)), &up)?;
        }
        println!("{} per-iteration masks emitted", trace.soft_masks.len());
    }

    if let Some(truth) = query.masks.get(&args.class) {
        let comments = echo_lines(&[
            ("model", args.model.display().to_string()),
            ("support", args.support.clone()),
            ("query", args.query.clone()),
            ("class", args.class.to_string()),
            ("t_infer", model.config.t_infer.to_string()),
        ]);
        let mut rows = vec![(0usize, dsc(&binarize_mask(&trace.m0), truth)?)];
        for (i, soft) in trace.soft_masks.iter().enumerate() {
            let up = binarize_mask(&bilinear_resize(&soft_fg_channel(soft)?, h, w)?);
            rows.push((i + 1, dsc(&up, truth)?));
        }
        let mut csv = String::new();
        for c in &comments {
            csv.push_str(&format!("# {c}\n"));
        }
        csv.push_str("t,dsc\n");
        for (t, v) in rows {
            csv.push_str(&format!("{t},{v:.6}\n"));
        }
        let dsc_path = sibling(&args.out, ".dsc.csv");
        std::fs::write(&dsc_path, csv)?;
        println!("per-iteration DSC → {}", dsc_path.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<ExitCode, Error> {
    let reports = if args.op == "all" {
        gradsuite::run_all(args.seed)?
    } else {
        vec![gradsuite::run_case(&args.op, args.seed)?]
    };
    let mut failures = Vec::new();
    for r in &reports {
        println!(
            "{:<8} max rel error {:.3e} (tolerance {:.0e}, {} probes): {}",
            r.op_name,
            r.max_rel_error,
            r.tolerance,
            r.probes,
            if r.passed { "PASS" } else { "FAIL" }
        );
        if !r.passed {
            failures.push(r.op_name.clone());
        }
    }
    if failures.is_empty() {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("gradient check failed for: {}", failures.join(", "));
        Ok(ExitCode::from(3))
    }
}
