//! The two-phase training protocol.
//!
//! Phase 1 trains everything that exists without extended attention: the
//! denoiser under semantic conditioning, and the spatial branch through its
//! garment-localization query. Phase 2 switches extended attention on
//! (through the zero gates) and drops the localization loss, fine-tuning
//! the whole network on the denoising objective alone. Steps alternate
//! deterministically between try-on and try-off according to the task mix,
//! and every random draw is keyed by the run seed and step, so a run is
//! exactly reproducible.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};

use crate::assembly::{self, Stage, Task};
use crate::checkpoint::{self, CheckpointMeta};
use crate::config::FullConfig;
use crate::datagen::{self, Category, LoadedSample, Split};
use crate::diffusion::{self, NoiseSchedule};
use crate::error::{Error, Result};
use crate::model::{Conditioning, Model};
use crate::nn;
use crate::params::ParamStore;
use crate::rng;

const EPS_DICE: f64 = 1e-6;
const EPS_BCE: f64 = 1e-7;

/// Soft dice loss over the whole batch: `1 - (2*sum(p*g) + eps) /
/// (sum(p) + sum(g) + eps)`.
pub fn dice_loss(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    if pred.dims() != target.dims() {
        return Err(Error::shape(
            "dice_loss",
            format!("{:?}", pred.dims()),
            format!("{:?}", target.dims()),
        ));
    }
    let inter = (pred * target)?.sum_all()?;
    let total = (pred.sum_all()? + target.sum_all()?)?;
    let num = (inter.affine(2.0, 0.0)? + EPS_DICE)?;
    let den = (total + EPS_DICE)?;
    Ok(num.div(&den)?.affine(-1.0, 1.0)?)
}

/// Binary cross-entropy on probabilities, clamped away from the log poles.
pub fn bce_loss(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    if pred.dims() != target.dims() {
        return Err(Error::shape(
            "bce_loss",
            format!("{:?}", pred.dims()),
            format!("{:?}", target.dims()),
        ));
    }
    let p = pred.clamp(EPS_BCE, 1.0 - EPS_BCE)?;
    let pos = (target * p.log()?)?;
    let neg = (target.affine(-1.0, 1.0)? * p.affine(-1.0, 1.0)?.log()?)?;
    Ok((pos + neg)?.mean_all()?.affine(-1.0, 0.0)?)
}

/// Which task a training step runs. The mix is honored exactly in the
/// long run by Bresenham-style accumulation: a step is try-on when the
/// running count of try-on steps falls behind `mix * steps`.
pub fn task_for_step(step: usize, mix: f64) -> Task {
    let before = (step as f64 * mix).floor();
    let after = ((step + 1) as f64 * mix).floor();
    if after > before {
        Task::Vton
    } else {
        Task::Vtoff
    }
}

/// Linear warmup to the base rate.
pub fn lr_at(base: f64, step: usize, warmup: usize) -> f64 {
    if warmup == 0 || step >= warmup {
        base
    } else {
        base * (step + 1) as f64 / warmup as f64
    }
}

/// One assembled training batch.
pub struct TrainBatch {
    pub input: Tensor,
    pub ts: Vec<usize>,
    pub eps: Tensor,
    pub x_ref: Tensor,
    pub cats: Vec<Category>,
    /// Ground-truth garment occupancy on the localization grid.
    pub flat_small: Tensor,
}

/// Builds the canvases, noises the latent, and assembles the denoiser
/// input for one step. All randomness comes from `seed` and `step`.
pub fn prepare_batch(
    model: &Model,
    samples: &[&LoadedSample],
    task: Task,
    stage: Stage,
    schedule: &NoiseSchedule,
    step: usize,
    seed: u64,
) -> Result<TrainBatch> {
    if samples.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    let device = samples[0].person.device().clone();
    let mode = model.canvas_mode();
    let factor = model.codec.factor();

    let mut masks = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let mask_seed = rng::mix(seed, &[0x6d61, step as u64, i as u64]);
        masks.push(assembly::select_training_mask(
            &s.person_mask,
            &s.flat_mask,
            task,
            stage,
            mask_seed,
        )?);
    }
    let mask = Tensor::stack(&masks, 0)?;
    let person = Tensor::stack(&samples.iter().map(|s| &s.person).collect::<Vec<_>>(), 0)?;
    let garment = Tensor::stack(&samples.iter().map(|s| &s.garment).collect::<Vec<_>>(), 0)?;
    let flat = Tensor::stack(
        &samples.iter().map(|s| &s.flat_mask).collect::<Vec<_>>(),
        0,
    )?;
    let cats: Vec<Category> = samples.iter().map(|s| s.category).collect();

    let target = assembly::build_target_mode(&person, &garment, task, mode)?;
    let guidance = assembly::build_guidance_mode(&person, &garment, &mask, task, mode)?;
    let mask_canvas = assembly::build_mask_canvas_mode(&mask, task, mode)?;

    let z0 = model.codec.encode(&target)?.data;
    let guidance_lat = model.codec.encode(&guidance)?.data;
    let mask_lat = nn::downsample_area(&mask_canvas, factor, factor)?;

    let mut r = rng::rng_for(seed, &[0x7e51, step as u64]);
    let t_max = schedule.len();
    let ts: Vec<usize> = (0..samples.len())
        .map(|_| rand::Rng::gen_range(&mut r, 1..=t_max))
        .collect();
    let eps = rng::normal_tensor(&mut r, z0.dims(), z0.dtype(), &device)?;
    let z_t = diffusion::forward_noise(&z0, &ts, &eps, schedule)?;
    let input = assembly::concat_input(&z_t, &guidance_lat, &mask_lat)?;

    let x_ref = match task {
        Task::Vton => garment,
        Task::Vtoff => person,
    };
    let flat_small = nn::downsample_area(&flat, factor, factor)?;
    Ok(TrainBatch {
        input,
        ts,
        eps,
        x_ref,
        cats,
        flat_small,
    })
}

/// Scalar parts of one step's objective.
#[derive(Debug, Clone, Copy)]
pub struct StepLosses {
    pub total: f64,
    pub mse: f64,
    pub mask: Option<f64>,
}

/// Computes the step objective. The localization loss applies in stage 1
/// whenever the spatial branch exists, and in stage 2 only when configured.
pub fn step_loss(
    model: &Model,
    cfg: &FullConfig,
    batch: &TrainBatch,
    stage: Stage,
) -> Result<(Tensor, StepLosses)> {
    let cond: Conditioning = model.condition(&batch.x_ref, &batch.cats, true)?;
    let mode = model.conditioning_mode(stage);
    let srm_features = cond.srm.as_ref().map(|s| &s.features);
    let eps_hat = model
        .denoiser
        .forward(&batch.input, &batch.ts, &cond.f_sam, srm_features, mode)?;
    let mse = diffusion::diffusion_loss(&batch.eps, &eps_hat)?;

    let supervise = match stage {
        Stage::Stage1 => true,
        Stage::Stage2 => cfg.train.stage2_mask_supervision,
        Stage::Inference => false,
    };
    if supervise {
        if let Some(srm_out) = &cond.srm {
            let dice = dice_loss(&srm_out.tfq0, &batch.flat_small)?;
            let bce = bce_loss(&srm_out.tfq0, &batch.flat_small)?;
            let mask = ((dice * cfg.train.dice_weight)? + (bce * cfg.train.bce_weight)?)?;
            let total = (&mse + (&mask * cfg.train.mask_loss_weight)?)?;
            let losses = StepLosses {
                total: total.to_dtype(DType::F64)?.to_scalar::<f64>()?,
                mse: mse.to_dtype(DType::F64)?.to_scalar::<f64>()?,
                mask: Some(mask.to_dtype(DType::F64)?.to_scalar::<f64>()?),
            };
            return Ok((total, losses));
        }
    }
    let losses = StepLosses {
        total: mse.to_dtype(DType::F64)?.to_scalar::<f64>()?,
        mse: losses_scalar(&mse)?,
        mask: None,
    };
    Ok((mse, losses))
}

fn losses_scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

pub struct TrainSummary {
    pub steps: usize,
    pub final_loss: f64,
    pub mean_recent_loss: f64,
    pub checkpoint: PathBuf,
    pub metrics_log: PathBuf,
}

/// Indices of the samples a step trains on: a deterministic round-robin
/// walk over the split.
pub fn batch_indices(step: usize, batch_size: usize, n: usize) -> Vec<usize> {
    (0..batch_size).map(|j| (step * batch_size + j) % n).collect()
}

#[derive(serde::Serialize)]
struct LogRow<'a> {
    step: usize,
    stage: u32,
    task: &'a str,
    lr: f64,
    loss: f64,
    mse: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    mask: Option<f64>,
}

/// Runs the configured training stage and writes checkpoints plus a
/// JSON-lines metrics log under `out_dir`.
pub fn train(cfg: &FullConfig, out_dir: &Path, device: &candle_core::Device) -> Result<TrainSummary> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let samples = datagen::load_split(Path::new(&cfg.data.root), Split::Train, device)?;
    if samples.is_empty() {
        return Err(Error::Invalid(format!(
            "no training samples under {}",
            cfg.data.root
        )));
    }
    let stage = match cfg.train.stage {
        1 => Stage::Stage1,
        _ => Stage::Stage2,
    };

    let store = if cfg.train.init_from.is_empty() {
        ParamStore::new(cfg.train.seed, DType::F32, device.clone())
    } else {
        let loaded = checkpoint::load(Path::new(&cfg.train.init_from), device)?;
        ParamStore::with_loaded(cfg.train.seed, DType::F32, device.clone(), loaded.tensors)
    };
    let model = Model::new(cfg, &store.root())?;
    store.finish_load()?;
    let schedule = NoiseSchedule::linear(
        cfg.diffusion.train_steps,
        cfg.diffusion.beta_start,
        cfg.diffusion.beta_end,
    )?;

    let mut opt = AdamW::new(
        store.all_vars(),
        ParamsAdamW {
            lr: lr_at(cfg.train.lr, 0, cfg.train.warmup),
            weight_decay: cfg.train.weight_decay,
            ..Default::default()
        },
    )?;

    let log_path = out_dir.join("metrics.jsonl");
    let mut log = std::fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut recent = std::collections::VecDeque::new();
    let mut last_loss = f64::NAN;

    for step in 0..cfg.train.steps {
        let task = task_for_step(step, cfg.train.task_mix);
        let refs: Vec<&LoadedSample> = batch_indices(step, cfg.train.batch_size, samples.len())
            .into_iter()
            .map(|i| &samples[i])
            .collect();
        let batch = prepare_batch(&model, &refs, task, stage, &schedule, step, cfg.train.seed)?;
        let (loss, parts) = step_loss(&model, cfg, &batch, stage)?;
        let grads = loss.backward()?;
        opt.set_learning_rate(lr_at(cfg.train.lr, step, cfg.train.warmup));
        opt.step(&grads)?;

        last_loss = parts.total;
        recent.push_back(parts.total);
        if recent.len() > 20 {
            recent.pop_front();
        }
        let row = LogRow {
            step,
            stage: cfg.train.stage,
            task: task.as_str(),
            lr: lr_at(cfg.train.lr, step, cfg.train.warmup),
            loss: parts.total,
            mse: parts.mse,
            mask: parts.mask,
        };
        serde_json::to_writer(&mut log, &row)?;
        log.write_all(b"\n").map_err(|e| Error::io(&log_path, e))?;
        if cfg.train.log_every != 0 && step % cfg.train.log_every == 0 {
            log::info!(
                "step {step} {} loss {:.5} mse {:.5}",
                task.as_str(),
                parts.total,
                parts.mse
            );
        }
        if cfg.train.checkpoint_every != 0
            && step + 1 != cfg.train.steps
            && (step + 1) % cfg.train.checkpoint_every == 0
        {
            let path = out_dir.join(format!("model_{:06}.rdck", step + 1));
            save_checkpoint(&path, &store, cfg, (step + 1) as u64)?;
        }
    }

    let final_path = out_dir.join("model_final.rdck");
    save_checkpoint(&final_path, &store, cfg, cfg.train.steps as u64)?;
    let mean_recent = if recent.is_empty() {
        f64::NAN
    } else {
        recent.iter().sum::<f64>() / recent.len() as f64
    };
    Ok(TrainSummary {
        steps: cfg.train.steps,
        final_loss: last_loss,
        mean_recent_loss: mean_recent,
        checkpoint: final_path,
        metrics_log: log_path,
    })
}

fn save_checkpoint(path: &Path, store: &ParamStore, cfg: &FullConfig, step: u64) -> Result<()> {
    let meta = CheckpointMeta {
        step,
        stage: cfg.train.stage,
        config: cfg.serialize(),
    };
    checkpoint::save(path, &store.entries(), &meta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn dice_matches_hand_counts() -> Result<()> {
        let dev = Device::Cpu;
        // half-overlapping flat masks: dice = 1 - 2*1/(2+2) = 1/2, loss 1/2
        let p = Tensor::from_vec(vec![1f32, 1.0, 0.0, 0.0], (1, 1, 2, 2), &dev)?;
        let g = Tensor::from_vec(vec![1f32, 0.0, 1.0, 0.0], (1, 1, 2, 2), &dev)?;
        let d = losses_scalar(&dice_loss(&p, &g)?)?;
        assert!((d - 0.5).abs() < 1e-6);
        // empty against empty collapses to zero loss through the epsilon
        let z = Tensor::zeros((1, 1, 2, 2), candle_core::DType::F32, &dev)?;
        let d0 = losses_scalar(&dice_loss(&z, &z)?)?;
        assert!(d0.abs() < 1e-9);
        // perfect match is zero loss
        let d1 = losses_scalar(&dice_loss(&p, &p)?)?;
        assert!(d1.abs() < 1e-6);
        Ok(())
    }

    #[test]
    fn bce_of_indifference_is_ln_two() -> Result<()> {
        let dev = Device::Cpu;
        let p = Tensor::full(0.5f32, (1, 1, 4, 4), &dev)?;
        let g = Tensor::from_vec(
            (0..16).map(|i| (i % 2) as f32).collect::<Vec<_>>(),
            (1, 1, 4, 4),
            &dev,
        )?;
        let b = losses_scalar(&bce_loss(&p, &g)?)?;
        assert!((b - (2f64).ln()).abs() < 1e-6);
        // clamping keeps confident wrong predictions finite
        let wrong = g.affine(-1.0, 1.0)?;
        let bw = losses_scalar(&bce_loss(&wrong, &g)?)?;
        assert!(bw.is_finite());
        assert!(bw > 10.0);
        Ok(())
    }

    #[test]
    fn task_mix_is_exact_over_any_window() {
        let count = |mix: f64, n: usize| {
            (0..n)
                .filter(|&s| task_for_step(s, mix) == Task::Vton)
                .count()
        };
        assert_eq!(count(0.5, 100), 50);
        assert_eq!(count(1.0, 37), 37);
        assert_eq!(count(0.0, 37), 0);
        assert_eq!(count(0.25, 100), 25);
        // even mixes alternate strictly
        for s in 0..20 {
            assert_eq!(
                task_for_step(s, 0.5),
                if s % 2 == 1 { Task::Vton } else { Task::Vtoff }
            );
        }
    }

    #[test]
    fn warmup_ramps_linearly_then_holds() {
        assert!((lr_at(1e-3, 0, 100) - 1e-5).abs() < 1e-12);
        assert!((lr_at(1e-3, 49, 100) - 5e-4).abs() < 1e-12);
        assert_eq!(lr_at(1e-3, 100, 100), 1e-3);
        assert_eq!(lr_at(1e-3, 5000, 100), 1e-3);
        assert_eq!(lr_at(1e-3, 0, 0), 1e-3);
    }

    #[test]
    fn round_robin_covers_the_split() {
        assert_eq!(batch_indices(0, 4, 10), vec![0, 1, 2, 3]);
        assert_eq!(batch_indices(2, 4, 10), vec![8, 9, 0, 1]);
        let mut seen = std::collections::HashSet::new();
        for step in 0..5 {
            seen.extend(batch_indices(step, 2, 10));
        }
        assert_eq!(seen.len(), 10);
    }
}
