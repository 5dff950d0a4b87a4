//! `fsad`: dataset generation, synthesis, training, evaluation and gradient
//! checking from the command line.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use fsad_core::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
use fsad_core::config::RunConfig;
use fsad_core::evalkit::{evaluate, transfer_eval, write_heatmaps, ModelOrigin};
use fsad_core::phantom::{
    build_dataset, load_image, load_mask, save_image, save_mask, support_images, FamilyId, Manifest,
};
use fsad_core::rng::derive_seed;
use fsad_core::synthesis::{sample_mask_for_task, SynthesisTask};
use fsad_core::trainer::{grad_check, sample_batch, train_with_observer, GradCheckOptions};

const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser, Debug)]
#[command(
    name = "fsad",
    version,
    about = "Few-shot anomaly detection with learnable prompts"
)]
struct Cli {
    /// JSON run configuration; built-in defaults when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configuration seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Caps the number of worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a phantom dataset and its manifest.
    Dataset(DatasetArgs),
    /// Synthesize one anomaly into an image.
    Synthesize(SynthesizeArgs),
    /// Train prompts and adapters on a manifest's support set.
    Train(TrainArgs),
    /// Score a manifest's test split.
    Eval(EvalArgs),
    /// Compare analytic gradients with central differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
struct DatasetArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    family: Option<FamilyId>,
    #[arg(long)]
    k: Option<usize>,
}

#[derive(Args, Debug)]
struct SynthesizeArgs {
    #[arg(long)]
    image: PathBuf,
    /// Mask PNG; sampled to suit the task when absent.
    #[arg(long)]
    mask: Option<PathBuf>,
    /// cutpaste, gauss or source; drawn with equal probability when absent.
    #[arg(long)]
    task: Option<SynthesisTask>,
    /// Output directory for image.png, mask.png and provenance.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Checkpoint path; the loss CSV is written beside it.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    steps: Option<usize>,
    /// Restricts synthesis to these tasks (comma separated).
    #[arg(long, value_delimiter = ',')]
    tasks: Option<Vec<SynthesisTask>>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Trained checkpoint; the untrained model of the configuration when absent.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    manifest: PathBuf,
    /// Report JSON path.
    #[arg(long)]
    out: PathBuf,
    /// Marks the run as a cross-family transfer evaluation.
    #[arg(long)]
    transfer: bool,
    /// Directory for one 8-bit heatmap PNG per test image.
    #[arg(long)]
    heatmaps: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Support set to draw the batch from; generated in memory when absent.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    coords: usize,
    #[arg(long, default_value_t = 1e-5)]
    h: f64,
    #[arg(long, hide = true)]
    corrupt_gradient: bool,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .context("configuring the thread pool")?;
    }
    let mut cfg = match &cli.config {
        Some(path) => {
            RunConfig::load(path).with_context(|| format!("loading config {}", path.display()))?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    match cli.command {
        Command::Dataset(args) => cmd_dataset(cfg, args),
        Command::Synthesize(args) => cmd_synthesize(cfg, args),
        Command::Train(args) => cmd_train(cfg, args),
        Command::Eval(args) => cmd_eval(cfg, args),
        Command::Gradcheck(args) => cmd_gradcheck(cfg, args),
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let json = serde_json::to_string_pretty(value)?;
    std::fs::write(path, json).with_context(|| format!("writing {}", path.display()))
}

fn cmd_dataset(mut cfg: RunConfig, args: DatasetArgs) -> Result<ExitCode> {
    if let Some(f) = args.family {
        cfg.data.family = f;
    }
    if let Some(k) = args.k {
        cfg.data.k = k;
    }
    cfg.validate()?;
    let manifest = build_dataset(&cfg.data, &cfg.synthesis, cfg.seed, &args.out)?
        .with_config_digest(cfg.digest())?;
    println!(
        "wrote {} train, {} normal and {} anomalous test images to {}",
        manifest.train.len(),
        manifest.test_normal.len(),
        manifest.test_anomaly.len(),
        args.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_synthesize(cfg: RunConfig, args: SynthesizeArgs) -> Result<ExitCode> {
    cfg.validate()?;
    let image = load_image(&args.image)?;
    let mut rng = fsad_core::rng::derived_rng(cfg.seed, "cli-synthesize-task", 0);
    let task = args
        .task
        .unwrap_or_else(|| cfg.synthesis.sample_task(&mut rng));
    let apply_seed = derive_seed(cfg.seed, "cli-synthesize", 0);
    let (out_image, mask, record) = match &args.mask {
        Some(path) => {
            let mask = load_mask(path)?;
            let (img, record) = cfg.synthesis.synthesize(&image, &mask, task, apply_seed)?;
            (img, mask, record)
        }
        None if image.height() == image.width() => {
            let s = cfg.synthesis.synthesize_random(&image, task, apply_seed)?;
            (s.image, s.mask, s.record)
        }
        None => {
            let mask = sample_mask_for_task(task, apply_seed, image.height())?;
            let (img, record) = cfg.synthesis.synthesize(&image, &mask, task, apply_seed)?;
            (img, mask, record)
        }
    };
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    save_image(&out_image, args.out.join("image.png"))?;
    save_mask(&mask, args.out.join("mask.png"))?;
    let provenance = serde_json::json!({
        "source": args.image,
        "mask": args.mask,
        "task": task,
        "parameters": record,
        "seed": cfg.seed,
        "config_digest": cfg.digest(),
    });
    write_json(&args.out.join("provenance.json"), &provenance)?;
    println!("task: {task}");
    println!("parameters: {}", serde_json::to_string(&record)?);
    Ok(ExitCode::SUCCESS)
}

fn cmd_train(mut cfg: RunConfig, args: TrainArgs) -> Result<ExitCode> {
    if let Some(steps) = args.steps {
        cfg.train.steps = steps;
    }
    if let Some(tasks) = &args.tasks {
        cfg.synthesis.task_weights =
            SynthesisTask::ALL.map(|t| if tasks.contains(&t) { 1.0 } else { 0.0 });
    }
    cfg.validate()?;
    let manifest = Manifest::load(&args.manifest)?;
    let support = manifest.load_train()?;
    let encoders = cfg.build_encoders()?;
    let mut model = cfg.init_model(encoders)?;
    let report = train_with_observer(
        &mut model,
        &support,
        &cfg.train,
        &cfg.synthesis,
        cfg.train_seed(),
        |step, loss| {
            if step % 50 == 0 {
                log::info!("step {step}: focal {:.5} dice {:.5}", loss.focal, loss.dice);
            }
        },
    )?;
    let csv = args.out.with_extension("loss.csv");
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)
            .with_context(|| format!("creating {}", parent.display()))?;
    }
    report.write_csv(&csv)?;
    let meta = CheckpointMeta {
        steps: cfg.train.steps,
        seed: cfg.seed,
        family: Some(manifest.family),
        loss_history: csv.file_name().map(|n| n.to_string_lossy().into_owned()),
        config_digest: Some(cfg.digest()),
    };
    save_checkpoint(&model, &meta, &args.out)?;
    write_json(&args.out.with_extension("config.json"), &cfg)?;
    if let Some(last) = report.history.last() {
        println!(
            "final loss {:.5} (focal {:.5}, dice {:.5})",
            last.total, last.focal, last.dice
        );
    }
    println!("checkpoint written to {}", args.out.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(cfg: RunConfig, args: EvalArgs) -> Result<ExitCode> {
    let manifest = Manifest::load(&args.manifest)?;
    let (model, origin) = match &args.checkpoint {
        Some(path) => {
            let (model, meta) = load_checkpoint(path)?;
            let origin = ModelOrigin {
                family: meta.family,
                seed: Some(meta.seed),
                steps: meta.steps,
                config_digest: meta.config_digest,
            };
            (model, origin)
        }
        None => {
            cfg.validate()?;
            let model = cfg.init_model(cfg.build_encoders()?)?;
            let origin = ModelOrigin {
                family: None,
                seed: Some(cfg.seed),
                steps: 0,
                config_digest: Some(cfg.digest()),
            };
            (model, origin)
        }
    };
    let eval = if args.transfer {
        transfer_eval(&model, &manifest, &origin)?
    } else {
        evaluate(&model, &manifest, &origin)?
    };
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)
            .with_context(|| format!("creating {}", parent.display()))?;
    }
    eval.report.save(&args.out)?;
    if let Some(dir) = &args.heatmaps {
        let written = write_heatmaps(&eval, dir)?;
        println!("wrote {} heatmaps to {}", written.len(), dir.display());
    }
    println!("image AUROC {:.4}", eval.report.image_auroc);
    if let Some(p) = eval.report.pixel_auroc {
        println!("pixel AUROC {p:.4}");
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(cfg: RunConfig, args: GradcheckArgs) -> Result<ExitCode> {
    cfg.validate()?;
    let support = match &args.manifest {
        Some(path) => Manifest::load(path)?.load_train()?,
        None => support_images(&cfg.data, cfg.seed)?,
    };
    let model = cfg.init_model(cfg.build_encoders()?)?;
    let batch = sample_batch(
        &model,
        &support,
        cfg.train.batch_size,
        cfg.train.p_empty,
        &cfg.synthesis,
        derive_seed(cfg.seed, "gradcheck-batch", 0),
    )?;
    let opts = GradCheckOptions {
        coordinates: args.coords,
        step: args.h,
        seed: cfg.seed,
        corrupt_gradient: args.corrupt_gradient,
    };
    let report = grad_check(&model, &batch, &cfg.train.loss, &opts)?;
    println!("coordinates checked: {}", report.coordinates.len());
    println!("max relative error: {:.3e}", report.max_rel_error);
    if report.max_rel_error >= GRADCHECK_TOLERANCE {
        bail!(
            "gradient check failed: {:.3e} is not below {GRADCHECK_TOLERANCE:e}",
            report.max_rel_error
        );
    }
    Ok(ExitCode::SUCCESS)
}
