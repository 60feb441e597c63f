//! Canvas assembly for the two-way objective.
//!
//! Both tasks share one composition rule: the half being synthesized sits
//! on the left of a horizontally concatenated canvas and the reference half
//! sits on the right. Try-on puts the person left and the flat garment
//! right; try-off swaps them. The guidance canvas zeroes the region to be
//! generated, and the scalar mask canvas holds 1 where content is kept and
//! 0 where it is generated. Swapping the task is exactly swapping canvas
//! halves along with the corresponding mask swap.

use candle_core::{DType, Tensor, D};
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Vton,
    Vtoff,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Vton => "vton",
            Task::Vtoff => "vtoff",
        }
    }

    pub fn swapped(self) -> Task {
        match self {
            Task::Vton => Task::Vtoff,
            Task::Vtoff => Task::Vton,
        }
    }
}

impl std::str::FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vton" => Ok(Task::Vton),
            "vtoff" => Ok(Task::Vtoff),
            other => Err(Error::Invalid(format!("unknown task {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Stage1,
    Stage2,
    Inference,
}

impl Stage {
    /// The training phase a checkpoint records.
    pub fn from_phase(phase: u32) -> Result<Stage> {
        match phase {
            1 => Ok(Stage::Stage1),
            2 => Ok(Stage::Stage2),
            other => Err(Error::Invalid(format!("unknown training phase {other}"))),
        }
    }
}

/// Whether the reference occupies the right canvas half or conditions the
/// model only through the feature branches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CanvasMode {
    PairConcat,
    ActiveOnly,
}

fn check_pair(x: &Tensor, c: &Tensor, context: &'static str) -> Result<()> {
    if x.dims() != c.dims() {
        return Err(Error::shape(
            context,
            format!("{:?}", x.dims()),
            format!("{:?}", c.dims()),
        ));
    }
    Ok(())
}

fn concat_w(left: &Tensor, right: &Tensor) -> Result<Tensor> {
    Ok(Tensor::cat(&[left, right], D::Minus1)?)
}

/// Orders (person, garment) as (active, reference) for a task.
fn role_order<'a>(x: &'a Tensor, c: &'a Tensor, task: Task) -> (&'a Tensor, &'a Tensor) {
    match task {
        Task::Vton => (x, c),
        Task::Vtoff => (c, x),
    }
}

/// The clean canvas the model learns to reproduce: `[active | reference]`.
pub fn build_target(x: &Tensor, c: &Tensor, task: Task) -> Result<Tensor> {
    check_pair(x, c, "build_target")?;
    let (a, r) = role_order(x, c, task);
    concat_w(a, r)
}

/// Blanks the masked region of an image: `(1 - m) * img`.
pub fn apply_agnostic(img: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let keep = mask.affine(-1.0, 1.0)?;
    Ok(img.broadcast_mul(&keep)?)
}

/// The guidance canvas: like the target, but with the synthesis region of
/// the active half removed.
pub fn build_guidance(x: &Tensor, c: &Tensor, m_eff: &Tensor, task: Task) -> Result<Tensor> {
    check_pair(x, c, "build_guidance")?;
    let (a, r) = role_order(x, c, task);
    concat_w(&apply_agnostic(a, m_eff)?, r)
}

/// The scalar keep/generate canvas: `1 - m_eff` over the active half, ones
/// over the reference half.
pub fn build_mask_canvas(m_eff: &Tensor, _task: Task) -> Result<Tensor> {
    let keep = m_eff.affine(-1.0, 1.0)?;
    let ones = Tensor::ones(m_eff.dims(), m_eff.dtype(), m_eff.device())?;
    concat_w(&keep, &ones)
}

/// Single-half variants: the reference half is dropped from the canvases
/// entirely.
pub fn build_target_mode(x: &Tensor, c: &Tensor, task: Task, mode: CanvasMode) -> Result<Tensor> {
    match mode {
        CanvasMode::PairConcat => build_target(x, c, task),
        CanvasMode::ActiveOnly => {
            check_pair(x, c, "build_target")?;
            Ok(role_order(x, c, task).0.clone())
        }
    }
}

pub fn build_guidance_mode(
    x: &Tensor,
    c: &Tensor,
    m_eff: &Tensor,
    task: Task,
    mode: CanvasMode,
) -> Result<Tensor> {
    match mode {
        CanvasMode::PairConcat => build_guidance(x, c, m_eff, task),
        CanvasMode::ActiveOnly => {
            check_pair(x, c, "build_guidance")?;
            apply_agnostic(role_order(x, c, task).0, m_eff)
        }
    }
}

pub fn build_mask_canvas_mode(m_eff: &Tensor, task: Task, mode: CanvasMode) -> Result<Tensor> {
    match mode {
        CanvasMode::PairConcat => build_mask_canvas(m_eff, task),
        CanvasMode::ActiveOnly => Ok(m_eff.affine(-1.0, 1.0)?),
    }
}

pub fn swap_halves(canvas: &Tensor) -> Result<Tensor> {
    let w = canvas.dim(D::Minus1)?;
    if w % 2 != 0 {
        return Err(Error::shape("swap_halves", "even width", format!("{w}")));
    }
    let left = canvas.narrow(D::Minus1, 0, w / 2)?;
    let right = canvas.narrow(D::Minus1, w / 2, w / 2)?;
    concat_w(&right, &left)
}

pub fn active_half(canvas: &Tensor) -> Result<Tensor> {
    let w = canvas.dim(D::Minus1)?;
    Ok(canvas.narrow(D::Minus1, 0, w / 2)?)
}

pub fn reference_half(canvas: &Tensor) -> Result<Tensor> {
    let w = canvas.dim(D::Minus1)?;
    Ok(canvas.narrow(D::Minus1, w / 2, w / 2)?)
}

/// The synthesis-region mask used during training.
///
/// Try-on always inpaints the worn-garment region. Try-off inpaints the
/// flat-garment region in the first stage and a seeded rectangle containing
/// it in the second, which narrows the train/inference gap where the exact
/// region is unknown.
pub fn select_training_mask(
    person_mask: &Tensor,
    flat_mask: &Tensor,
    task: Task,
    stage: Stage,
    seed: u64,
) -> Result<Tensor> {
    match (task, stage) {
        (Task::Vton, _) => Ok(person_mask.clone()),
        (Task::Vtoff, Stage::Stage1) => Ok(flat_mask.clone()),
        (Task::Vtoff, Stage::Stage2) => augment_square(flat_mask, seed),
        (Task::Vtoff, Stage::Inference) => Err(Error::Invalid(
            "try-off inference masks are chosen by the sampler, not the training selector".into(),
        )),
    }
}

fn mask_to_host(mask: &Tensor) -> Result<(Vec<bool>, usize, usize)> {
    let (c, h, w) = mask.dims3()?;
    if c != 1 {
        return Err(Error::shape("mask", "1 channel", format!("{c}")));
    }
    let v = mask.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    let mut out = Vec::with_capacity(v.len());
    for x in v {
        if x != 0.0 && x != 1.0 {
            return Err(Error::Invalid(format!("mask value {x} is not binary")));
        }
        out.push(x == 1.0);
    }
    Ok((out, h, w))
}

fn rect_mask(h: usize, w: usize, y0: usize, y1: usize, x0: usize, x1: usize) -> Vec<f32> {
    let mut out = vec![0f32; h * w];
    for y in y0..=y1 {
        for x in x0..=x1 {
            out[y * w + x] = 1.0;
        }
    }
    out
}

fn support_bbox(bits: &[bool], h: usize, w: usize) -> Option<(usize, usize, usize, usize)> {
    let (mut y0, mut y1, mut x0, mut x1) = (h, 0usize, w, 0usize);
    let mut any = false;
    for y in 0..h {
        for x in 0..w {
            if bits[y * w + x] {
                any = true;
                y0 = y0.min(y);
                y1 = y1.max(y);
                x0 = x0.min(x);
                x1 = x1.max(x);
            }
        }
    }
    any.then_some((y0, y1, x0, x1))
}

fn dilate(bits: &[bool], h: usize, w: usize, r: usize) -> Vec<bool> {
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            if !bits[y * w + x] {
                continue;
            }
            let y_lo = y.saturating_sub(r);
            let x_lo = x.saturating_sub(r);
            for yy in y_lo..=(y + r).min(h - 1) {
                for xx in x_lo..=(x + r).min(w - 1) {
                    out[yy * w + xx] = true;
                }
            }
        }
    }
    out
}

/// Erosion treating everything outside the frame as set, so that the
/// dilate-erode composite never loses pixels of the original mask at the
/// border.
fn erode(bits: &[bool], h: usize, w: usize, r: usize) -> Vec<bool> {
    let mut out = vec![true; h * w];
    for y in 0..h {
        'pixel: for x in 0..w {
            let y_lo = y.saturating_sub(r);
            let x_lo = x.saturating_sub(r);
            for yy in y_lo..=(y + r).min(h - 1) {
                for xx in x_lo..=(x + r).min(w - 1) {
                    if !bits[yy * w + xx] {
                        out[y * w + x] = false;
                        continue 'pixel;
                    }
                }
            }
        }
    }
    out
}

/// Internal deterministic core of [`augment_square`].
fn augment_square_with(
    mask: &Tensor,
    r_d: usize,
    r_e: usize,
    margins: [f64; 4],
) -> Result<Tensor> {
    let (bits, h, w) = mask_to_host(mask)?;
    let closed = erode(&dilate(&bits, h, w, r_d), h, w, r_e);
    let (y0, y1, x0, x1) = support_bbox(&closed, h, w)
        .ok_or_else(|| Error::Invalid("cannot box an empty mask".into()))?;
    let (my0, my1) = (
        (margins[0] * h as f64) as usize,
        (margins[1] * h as f64) as usize,
    );
    let (mx0, mx1) = (
        (margins[2] * w as f64) as usize,
        (margins[3] * w as f64) as usize,
    );
    let y0 = y0.saturating_sub(my0);
    let y1 = (y1 + my1).min(h - 1);
    let x0 = x0.saturating_sub(mx0);
    let x1 = (x1 + mx1).min(w - 1);
    let out = rect_mask(h, w, y0, y1, x0, x1);
    Ok(Tensor::from_vec(out, (1, h, w), mask.device())?)
}

/// Replaces a mask by a randomized filled rectangle that always contains
/// it: the mask is dilated and then eroded by seeded radii (the erosion
/// radius never exceeding the dilation radius), boxed, and expanded by a
/// seeded margin of up to 15% per side, clipped to the frame.
pub fn augment_square(mask: &Tensor, seed: u64) -> Result<Tensor> {
    let mut r = rng::rng_for(seed, &[0xb0c5]);
    let r_d = r.gen_range(1..=3usize);
    let r_e = r.gen_range(0..=r_d);
    let margins = [
        r.gen_range(0.0..0.15),
        r.gen_range(0.0..0.15),
        r.gen_range(0.0..0.15),
        r.gen_range(0.0..0.15),
    ];
    augment_square_with(mask, r_d, r_e, margins)
}

/// The tight axis-aligned bounding rectangle of a mask, filled.
pub fn mask_to_bbox(mask: &Tensor) -> Result<Tensor> {
    let (bits, h, w) = mask_to_host(mask)?;
    let (y0, y1, x0, x1) = support_bbox(&bits, h, w)
        .ok_or_else(|| Error::Invalid("cannot box an empty mask".into()))?;
    let out = rect_mask(h, w, y0, y1, x0, x1);
    Ok(Tensor::from_vec(out, (1, h, w), mask.device())?)
}

/// Channel concatenation law for the denoiser input: noised target latent,
/// guidance latent, mask channel, in that order, `2c + 1` channels total.
pub fn concat_input(z_t: &Tensor, guidance: &Tensor, mask_channel: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = z_t.dims4()?;
    if guidance.dims4()? != (b, c, h, w) {
        return Err(Error::shape(
            "concat_input guidance",
            format!("{:?}", z_t.dims()),
            format!("{:?}", guidance.dims()),
        ));
    }
    if mask_channel.dims4()? != (b, 1, h, w) {
        return Err(Error::shape(
            "concat_input mask",
            format!("[{b}, 1, {h}, {w}]"),
            format!("{:?}", mask_channel.dims()),
        ));
    }
    Ok(Tensor::cat(&[z_t, guidance, mask_channel], 1)?)
}

pub struct AssembledInput {
    /// `[B, 2c+1, h, w]` denoiser input.
    pub tensor: Tensor,
    pub task: Task,
    pub stage: Stage,
    /// Per-sample diffusion timestep.
    pub ts: Vec<usize>,
    pub latent_channels: usize,
}

pub fn assemble(
    z_t: &Tensor,
    guidance: &Tensor,
    mask_channel: &Tensor,
    task: Task,
    stage: Stage,
    ts: Vec<usize>,
) -> Result<AssembledInput> {
    let (b, c, _, _) = z_t.dims4()?;
    if ts.len() != b {
        return Err(Error::shape(
            "assemble timesteps",
            format!("{b}"),
            format!("{}", ts.len()),
        ));
    }
    Ok(AssembledInput {
        tensor: concat_input(z_t, guidance, mask_channel)?,
        task,
        stage,
        ts,
        latent_channels: c,
    })
}
