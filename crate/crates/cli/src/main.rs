//! Command-line driver for the garment transfer model: dataset
//! generation, two-phase training, sampling, evaluation, and inspection.
//! Every run directory receives a `run_config.cfg` echo of the exact
//! configuration used.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use candle_core::Device;
use clap::{Args, Parser, Subcommand};

use redress_core::assembly::{self, Stage, Task};
use redress_core::config::{FullConfig, Variant};
use redress_core::datagen::{self, Split};
use redress_core::diffusion::NoiseSchedule;
use redress_core::error::{Error, Result};
use redress_core::{inference, nn, training, Model};

const DATA_ROOT_VAR: &str = "REDRESS_DATA_ROOT";

#[derive(Parser)]
#[command(name = "redress", version, about = "Two-way garment transfer on a desk-scale wardrobe")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic person/garment dataset
    GenData(GenDataArgs),
    /// Run one training stage
    Train(TrainArgs),
    /// Generate images from a checkpoint
    Sample(SampleArgs),
    /// Score a checkpoint on the test split
    Eval(EvalArgs),
    /// Dump canvases, masks, and checkpoint facts for a look inside
    Inspect(InspectArgs),
}

/// Configuration layers shared by all subcommands, applied over the
/// defaults in order: environment, file, preset, explicit flags.
#[derive(Args)]
struct ConfigArgs {
    /// Configuration file to apply
    #[arg(long)]
    config: Option<PathBuf>,
    /// Ablation preset (full, no-srm, no-spatial-concat, mask2bbox,
    /// vton-only, vtoff-only, or variant1..variant5)
    #[arg(long)]
    variant: Option<String>,
    /// Dataset root (overrides config and environment)
    #[arg(long)]
    data_root: Option<String>,
}

impl ConfigArgs {
    fn build(&self) -> Result<FullConfig> {
        let mut cfg = FullConfig::default();
        if let Ok(root) = std::env::var(DATA_ROOT_VAR) {
            cfg.data.root = root;
        }
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            cfg.apply_text(&text)?;
        }
        if let Some(name) = &self.variant {
            let variant: Variant = name.parse()?;
            variant.apply(&mut cfg);
        }
        if let Some(root) = &self.data_root {
            cfg.data.root = root.clone();
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct GenDataArgs {
    #[command(flatten)]
    common: ConfigArgs,
    /// Number of samples (train and test together)
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: ConfigArgs,
    /// Run directory for checkpoints and logs
    #[arg(long)]
    out: PathBuf,
    /// Training stage (1 or 2)
    #[arg(long)]
    stage: Option<u32>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Checkpoint to start from (stage 2 starts from a stage 1 run)
    #[arg(long)]
    init_from: Option<PathBuf>,
    #[arg(long)]
    task_mix: Option<f64>,
}

#[derive(Args)]
struct SampleArgs {
    #[command(flatten)]
    common: ConfigArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Which task to run (defaults to the configured one)
    #[arg(long)]
    task: Option<Task>,
    /// Denoising steps
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Try-off synthesis region (full or bbox)
    #[arg(long)]
    tryoff_mask: Option<String>,
    /// Test-split samples to run (all of them by default)
    #[arg(long)]
    count: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: ConfigArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// vton, vtoff, or both
    #[arg(long, default_value = "both")]
    task: String,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct InspectArgs {
    #[command(flatten)]
    common: ConfigArgs,
    #[arg(long)]
    out: PathBuf,
    /// Checkpoint to describe
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Dataset sample to dump canvases for
    #[arg(long, default_value_t = 0)]
    index: usize,
    /// Task of the dumped canvases
    #[arg(long, default_value = "vton")]
    task: Task,
    /// Stage of the dumped mask selection (1 or 2)
    #[arg(long, default_value_t = 2)]
    stage: u32,
}

fn echo_config(cfg: &FullConfig, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("run_config.cfg");
    std::fs::write(&path, cfg.serialize()).map_err(|e| Error::io(&path, e))
}

fn gen_data(args: &GenDataArgs) -> Result<()> {
    let mut cfg = args.common.build()?;
    if let Some(c) = args.count {
        cfg.data.num_samples = c;
    }
    if let Some(s) = args.seed {
        cfg.data.seed = s;
    }
    cfg.validate()?;
    let root = PathBuf::from(&cfg.data.root);
    let manifest = datagen::generate_dataset(
        cfg.data.num_samples,
        cfg.data.seed,
        cfg.data.image_h,
        cfg.data.image_w,
        &root,
    )?;
    echo_config(&cfg, &root)?;
    let train = manifest
        .entries
        .iter()
        .filter(|e| e.split == Split::Train)
        .count();
    println!(
        "wrote {} samples ({} train, {} test) to {}",
        manifest.count,
        train,
        manifest.count - train,
        root.display()
    );
    Ok(())
}

fn train(args: &TrainArgs) -> Result<()> {
    let mut cfg = args.common.build()?;
    if let Some(v) = args.stage {
        cfg.train.stage = v;
    }
    if let Some(v) = args.steps {
        cfg.train.steps = v;
    }
    if let Some(v) = args.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = args.lr {
        cfg.train.lr = v;
    }
    if let Some(v) = args.warmup {
        cfg.train.warmup = v;
    }
    if let Some(v) = args.seed {
        cfg.train.seed = v;
    }
    if let Some(v) = &args.init_from {
        cfg.train.init_from = v.display().to_string();
    }
    if let Some(v) = args.task_mix {
        cfg.train.task_mix = v;
    }
    cfg.validate()?;
    echo_config(&cfg, &args.out)?;
    let summary = training::train(&cfg, &args.out, &Device::Cpu)?;
    println!(
        "trained {} steps; final loss {:.5} (mean of last {}: {:.5})",
        summary.steps,
        summary.final_loss,
        20,
        summary.mean_recent_loss
    );
    println!("checkpoint: {}", summary.checkpoint.display());
    println!("metrics: {}", summary.metrics_log.display());
    Ok(())
}

/// Applies sampling flags on top of a checkpoint's stored config.
fn sampling_setup(
    common: &ConfigArgs,
    checkpoint: &Path,
    steps: Option<usize>,
    seed: Option<u64>,
) -> Result<(Model, FullConfig, Stage)> {
    if common.config.is_some() || common.variant.is_some() {
        return Err(Error::Config(
            "the model architecture comes from the checkpoint; \
             pass --data-root and the sampling flags instead of --config or --variant"
                .into(),
        ));
    }
    let device = Device::Cpu;
    let (model, _store, mut cfg, meta) = Model::from_checkpoint(checkpoint, &device)?;
    let stage = Stage::from_phase(meta.stage)?;
    if let Some(root) = std::env::var(DATA_ROOT_VAR).ok().filter(|_| common.data_root.is_none()) {
        cfg.data.root = root;
    }
    if let Some(root) = &common.data_root {
        cfg.data.root = root.clone();
    }
    if let Some(v) = steps {
        cfg.sample.steps = v;
    }
    if let Some(v) = seed {
        cfg.sample.seed = v;
    }
    cfg.validate()?;
    Ok((model, cfg, stage))
}

fn sample(args: &SampleArgs) -> Result<()> {
    let (model, mut cfg, stage) =
        sampling_setup(&args.common, &args.checkpoint, args.steps, args.seed)?;
    if let Some(t) = args.task {
        cfg.sample.task = t;
    }
    if let Some(m) = &args.tryoff_mask {
        cfg.sample.tryoff_mask = m.parse()?;
    }
    let device = Device::Cpu;
    let samples = datagen::load_split(Path::new(&cfg.data.root), Split::Test, &device)?;
    if samples.is_empty() {
        return Err(Error::Invalid("test split is empty".into()));
    }
    let count = args.count.unwrap_or(samples.len()).min(samples.len());
    let schedule = NoiseSchedule::linear(
        cfg.diffusion.train_steps,
        cfg.diffusion.beta_start,
        cfg.diffusion.beta_end,
    )?;
    echo_config(&cfg, &args.out)?;
    let task = cfg.sample.task;
    for s in &samples[..count] {
        let out = inference::run_batch(
            &model,
            stage,
            task,
            cfg.sample.tryoff_mask,
            &s.person.unsqueeze(0)?,
            Some(&s.garment.unsqueeze(0)?),
            &s.person_mask.unsqueeze(0)?,
            &[s.category],
            &schedule,
            cfg.sample.steps,
            redress_core::rng::mix(cfg.sample.seed, &[s.index as u64]),
        )?;
        inference::save_outputs(&out, &args.out, task.as_str(), s.index)?;
    }
    println!(
        "sampled {count} {} image(s) into {}",
        task.as_str(),
        args.out.display()
    );
    Ok(())
}

fn eval(args: &EvalArgs) -> Result<()> {
    let (model, cfg, stage) =
        sampling_setup(&args.common, &args.checkpoint, args.steps, args.seed)?;
    let device = Device::Cpu;
    let samples = datagen::load_split(Path::new(&cfg.data.root), Split::Test, &device)?;
    let schedule = NoiseSchedule::linear(
        cfg.diffusion.train_steps,
        cfg.diffusion.beta_start,
        cfg.diffusion.beta_end,
    )?;
    let tasks: Vec<Task> = match args.task.as_str() {
        "both" => vec![Task::Vton, Task::Vtoff],
        other => vec![other.parse()?],
    };
    echo_config(&cfg, &args.out)?;
    let mut reports = Vec::new();
    for task in tasks {
        let report = inference::evaluate(
            &model,
            stage,
            task,
            cfg.sample.tryoff_mask,
            &samples,
            &schedule,
            cfg.sample.steps,
            cfg.sample.seed,
            cfg.train.batch_size,
        )?;
        println!(
            "{}: ssim {:.4} ms-ssim {:.4} psnr {:.2}{}",
            task.as_str(),
            report.ssim,
            report.ms_ssim,
            report.psnr,
            match (report.mask_iou, report.mask_dice) {
                (Some(i), Some(d)) => format!(" mask-iou {i:.4} mask-dice {d:.4}"),
                _ => String::new(),
            }
        );
        reports.push(report);
    }
    let path = args.out.join("eval.json");
    let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::to_writer_pretty(file, &reports)?;
    println!("report: {}", path.display());
    Ok(())
}

fn inspect(args: &InspectArgs) -> Result<()> {
    let cfg = args.common.build()?;
    echo_config(&cfg, &args.out)?;
    if let Some(ckpt) = &args.checkpoint {
        let device = Device::Cpu;
        let (_model, store, ckpt_cfg, meta) = Model::from_checkpoint(ckpt, &device)?;
        println!("checkpoint: {}", ckpt.display());
        println!("  step {} of stage {}", meta.step, meta.stage);
        println!("  variant {}", ckpt_cfg.variant.as_str());
        println!("  {} trainable tensors, {} parameters", store.var_names().len(), store.num_params());
        return Ok(());
    }

    let device = Device::Cpu;
    let samples = datagen::load_split(Path::new(&cfg.data.root), Split::Train, &device)?;
    let s = samples
        .iter()
        .find(|s| s.index == args.index)
        .ok_or_else(|| Error::Invalid(format!("no train sample with index {}", args.index)))?;
    let stage = Stage::from_phase(args.stage)?;
    let seed = redress_core::rng::mix(cfg.train.seed, &[args.index as u64]);
    let mask = assembly::select_training_mask(
        &s.person_mask,
        &s.flat_mask,
        args.task,
        stage,
        seed,
    )?;
    let person = s.person.unsqueeze(0)?;
    let garment = s.garment.unsqueeze(0)?;
    let mask_b = mask.unsqueeze(0)?;
    let mode = cfg.model.canvas;
    let target = assembly::build_target_mode(&person, &garment, args.task, mode)?;
    let guidance = assembly::build_guidance_mode(&person, &garment, &mask_b, args.task, mode)?;
    let mask_canvas = assembly::build_mask_canvas_mode(&mask_b, args.task, mode)?;
    let factor = cfg.codec.factor;
    let mask_lat = nn::downsample_area(&mask_canvas, factor, factor)?;

    let dir = &args.out;
    redress_core::imageio::save_rgb(&target.get(0)?, &dir.join("target.png"))?;
    redress_core::imageio::save_rgb(&guidance.get(0)?, &dir.join("guidance.png"))?;
    redress_core::imageio::save_mask(&mask_canvas.get(0)?, &dir.join("mask_canvas.png"))?;
    redress_core::imageio::save_mask(&mask, &dir.join("synthesis_mask.png"))?;
    println!(
        "dumped {} canvases for sample {} (stage {}) into {}",
        args.task.as_str(),
        args.index,
        args.stage,
        dir.display()
    );
    println!(
        "  target {:?}  guidance {:?}  mask canvas {:?}  latent mask {:?}",
        target.dims(),
        guidance.dims(),
        mask_canvas.dims(),
        mask_lat.dims()
    );
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match &cli.cmd {
        Cmd::GenData(a) => gen_data(a),
        Cmd::Train(a) => train(a),
        Cmd::Sample(a) => sample(a),
        Cmd::Eval(a) => eval(a),
        Cmd::Inspect(a) => inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
