//! Inference and evaluation.
//!
//! Try-on inpaints the worn-garment region of the person from the flat
//! garment; try-off synthesizes the flat garment from the worn photo
//! without a garment mask, either over the whole half or inside the
//! bounding box of the worn region. The conditioning branches run once per
//! reference image and are reused across denoising steps.

use std::path::Path;

use candle_core::Tensor;

use crate::assembly::{self, CanvasMode, Stage, Task};
use crate::config::TryoffMask;
use crate::datagen::{self, Category, LoadedSample};
use crate::diffusion::{self, NoiseSchedule};
use crate::error::{Error, Result};
use crate::metrics;
use crate::model::Model;
use crate::nn;

/// The canvas color a flat garment sits on, broadcast as the known
/// background outside a try-off bounding box.
fn flat_background(like: &Tensor) -> Result<Tensor> {
    let (b, _, h, w) = like.dims4()?;
    let mut data = Vec::with_capacity(b * 3 * h * w);
    for _ in 0..b {
        for ch in datagen::FLAT_BG {
            data.extend(std::iter::repeat(ch).take(h * w));
        }
    }
    Ok(Tensor::from_vec(data, (b, 3, h, w), like.device())?.to_dtype(like.dtype())?)
}

/// The synthesis mask for one inference call.
fn inference_mask(
    task: Task,
    tryoff_mask: TryoffMask,
    person_mask: &Tensor,
) -> Result<Tensor> {
    match task {
        Task::Vton => Ok(person_mask.clone()),
        Task::Vtoff => match tryoff_mask {
            TryoffMask::Full => Ok(Tensor::ones(
                person_mask.dims(),
                person_mask.dtype(),
                person_mask.device(),
            )?),
            TryoffMask::Bbox => {
                let (b, _, _, _) = person_mask.dims4()?;
                let mut boxes = Vec::with_capacity(b);
                for i in 0..b {
                    boxes.push(assembly::mask_to_bbox(&person_mask.get(i)?)?);
                }
                Ok(Tensor::stack(&boxes, 0)?)
            }
        },
    }
}

/// Generates the active half for a batch. Inputs are `[B, 3, H, W]` images
/// in `[-1, 1]` and a `[B, 1, H, W]` worn-garment mask; the result is the
/// synthesized image of the same shape.
pub fn run_batch(
    model: &Model,
    stage: Stage,
    task: Task,
    tryoff_mask: TryoffMask,
    person: &Tensor,
    garment_ref: Option<&Tensor>,
    person_mask: &Tensor,
    cats: &[Category],
    schedule: &NoiseSchedule,
    steps: usize,
    seed: u64,
) -> Result<Tensor> {
    let mode = model.canvas_mode();
    let m_eff = inference_mask(task, tryoff_mask, person_mask)?;
    // (x, c) in canvas terms: the person slot and the garment slot. The
    // unknown active image enters as a placeholder that the mask erases.
    let (x, c, x_ref) = match task {
        Task::Vton => {
            let g = garment_ref.ok_or_else(|| {
                Error::Invalid("try-on needs the flat garment as reference".into())
            })?;
            (person.clone(), g.clone(), g.clone())
        }
        Task::Vtoff => {
            let placeholder = flat_background(person)?;
            (person.clone(), placeholder, person.clone())
        }
    };
    let guidance = assembly::build_guidance_mode(&x, &c, &m_eff, task, mode)?;
    let mask_canvas = assembly::build_mask_canvas_mode(&m_eff, task, mode)?;
    let factor = model.codec.factor();
    let guidance_lat = model.codec.encode(&guidance)?.data;
    let mask_lat = nn::downsample_area(&mask_canvas, factor, factor)?;

    let cond = model.condition(&x_ref, cats, model.conditioning_mode(stage).needs_spatial())?;
    let cond_mode = model.conditioning_mode(stage);
    let srm_features = cond.srm.as_ref().map(|s| &s.features);
    let z = diffusion::sample(
        |input, t| {
            model
                .denoiser
                .forward(input, &vec![t; input.dim(0)?], &cond.f_sam, srm_features, cond_mode)
        },
        &guidance_lat,
        &mask_lat,
        schedule,
        steps,
        seed,
    )?;
    let decoded = model.codec.decode(&crate::codec::LatentGrid {
        data: z,
        factor,
    })?;
    let out = match mode {
        CanvasMode::PairConcat => assembly::active_half(&decoded)?,
        CanvasMode::ActiveOnly => decoded,
    };
    Ok(out.clamp(-1.0, 1.0)?)
}

/// Mean image metrics of a task over samples, plus localization overlap
/// when the spatial branch exists.
#[derive(Debug, Clone, serde::Serialize)]
pub struct EvalReport {
    pub task: Task,
    pub count: usize,
    pub ssim: f64,
    pub ms_ssim: f64,
    pub psnr: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mask_iou: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mask_dice: Option<f64>,
}

/// Runs inference over a split and scores it against the ground truth:
/// the person photo for try-on, the flat garment for try-off. PSNR caps at
/// 99 dB per sample so an exact reconstruction cannot drag the mean to
/// infinity.
pub fn evaluate(
    model: &Model,
    stage: Stage,
    task: Task,
    tryoff_mask: TryoffMask,
    samples: &[LoadedSample],
    schedule: &NoiseSchedule,
    steps: usize,
    seed: u64,
    batch_size: usize,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Invalid("no samples to evaluate".into()));
    }
    let mut ssim_sum = 0.0;
    let mut ms_sum = 0.0;
    let mut psnr_sum = 0.0;
    let mut iou_sum = 0.0;
    let mut dice_sum = 0.0;
    let mut mask_count = 0usize;
    for chunk in samples.chunks(batch_size.max(1)) {
        let person = Tensor::stack(&chunk.iter().map(|s| &s.person).collect::<Vec<_>>(), 0)?;
        let garment = Tensor::stack(&chunk.iter().map(|s| &s.garment).collect::<Vec<_>>(), 0)?;
        let pmask = Tensor::stack(
            &chunk.iter().map(|s| &s.person_mask).collect::<Vec<_>>(),
            0,
        )?;
        let cats: Vec<Category> = chunk.iter().map(|s| s.category).collect();
        let out = run_batch(
            model,
            stage,
            task,
            tryoff_mask,
            &person,
            Some(&garment),
            &pmask,
            &cats,
            schedule,
            steps,
            crate::rng::mix(seed, &[chunk[0].index as u64]),
        )?;
        let truth = match task {
            Task::Vton => &person,
            Task::Vtoff => &garment,
        };
        for (i, s) in chunk.iter().enumerate() {
            let got = metrics::image_array(&out.get(i)?)?;
            let want = metrics::image_array(&truth.get(i)?)?;
            ssim_sum += metrics::ssim(&got, &want)?;
            ms_sum += metrics::ms_ssim(&got, &want, 3)?;
            psnr_sum += metrics::psnr(&got, &want)?.min(99.0);
            if model.has_spatial_branch() {
                let x_ref = match task {
                    Task::Vton => garment.get(i)?,
                    Task::Vtoff => person.get(i)?,
                };
                let cond = model.condition(&x_ref.unsqueeze(0)?, &[s.category], true)?;
                let srm = cond.srm.as_ref().expect("spatial branch just checked");
                let factor = model.codec.factor();
                let flat_small =
                    nn::downsample_area(&s.flat_mask.unsqueeze(0)?, factor, factor)?;
                let pred = metrics::mask_array(&srm.tfq0.get(0)?)?;
                let want_m = metrics::mask_array(&flat_small.get(0)?)?;
                iou_sum += metrics::iou(&pred, &want_m)?;
                dice_sum += metrics::dice(&pred, &want_m)?;
                mask_count += 1;
            }
        }
    }
    let n = samples.len() as f64;
    Ok(EvalReport {
        task,
        count: samples.len(),
        ssim: ssim_sum / n,
        ms_ssim: ms_sum / n,
        psnr: psnr_sum / n,
        mask_iou: (mask_count > 0).then(|| iou_sum / mask_count as f64),
        mask_dice: (mask_count > 0).then(|| dice_sum / mask_count as f64),
    })
}

/// Saves the generated images of a batch as indexed PNGs.
pub fn save_outputs(out: &Tensor, dir: &Path, prefix: &str, start_index: usize) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (b, _, _, _) = out.dims4()?;
    for i in 0..b {
        let path = dir.join(format!("{prefix}_{:05}.png", start_index + i));
        crate::imageio::save_rgb(&out.get(i)?, &path)?;
    }
    Ok(())
}
