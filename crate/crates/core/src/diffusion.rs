//! Forward noising, the noise-prediction objective, and deterministic DDIM
//! sampling.
//!
//! The schedule is the usual linear-beta variance schedule. With cumulative
//! products `acum(t) = prod_{s<=t} (1 - beta_s)` the forward process is
//! `z_t = sqrt(acum(t)) * z_0 + sqrt(1 - acum(t)) * eps`, and the sampler
//! runs the eta=0 update, which is fully deterministic given the start
//! noise.

use candle_core::Tensor;

use crate::assembly;
use crate::error::{Error, Result};
use crate::rng;

pub const DEFAULT_TRAIN_STEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 2e-2;
pub const DEFAULT_SAMPLE_STEPS: usize = 30;

#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    /// `acum[t - 1]` is the cumulative product for timestep `t` in `1..=T`.
    acum: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(t_max: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if t_max == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!(
                "betas must satisfy 0 < start <= end < 1, got ({beta_start}, {beta_end})"
            )));
        }
        let mut betas = Vec::with_capacity(t_max);
        let mut acum = Vec::with_capacity(t_max);
        let mut prod = 1.0f64;
        for s in 0..t_max {
            let frac = if t_max == 1 {
                0.0
            } else {
                s as f64 / (t_max - 1) as f64
            };
            let beta = beta_start + (beta_end - beta_start) * frac;
            prod *= 1.0 - beta;
            betas.push(beta);
            acum.push(prod);
        }
        Ok(NoiseSchedule { betas, acum })
    }

    pub fn default_linear() -> Result<Self> {
        Self::linear(DEFAULT_TRAIN_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END)
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        if t == 0 || t > self.len() {
            return Err(Error::Invalid(format!(
                "timestep {t} outside schedule range 1..={}",
                self.len()
            )));
        }
        Ok(self.betas[t - 1])
    }

    /// Cumulative signal fraction for `t` in `0..=T`; `alpha_cum(0) == 1`.
    pub fn alpha_cum(&self, t: usize) -> Result<f64> {
        if t > self.len() {
            return Err(Error::Invalid(format!(
                "timestep {t} outside schedule range 0..={}",
                self.len()
            )));
        }
        Ok(if t == 0 { 1.0 } else { self.acum[t - 1] })
    }
}

/// Applies forward noising with a per-sample timestep.
pub fn forward_noise(
    z0: &Tensor,
    ts: &[usize],
    eps: &Tensor,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    let dims = z0.dims4()?;
    if eps.dims4()? != dims {
        return Err(Error::shape(
            "forward_noise",
            format!("{:?}", dims),
            format!("{:?}", eps.dims()),
        ));
    }
    if ts.len() != dims.0 {
        return Err(Error::shape(
            "forward_noise timesteps",
            format!("{}", dims.0),
            format!("{}", ts.len()),
        ));
    }
    let mut sig = Vec::with_capacity(ts.len());
    let mut noi = Vec::with_capacity(ts.len());
    for &t in ts {
        let a = schedule.alpha_cum(t)?;
        sig.push(a.sqrt());
        noi.push((1.0 - a).sqrt());
    }
    let dev = z0.device();
    let sig = Tensor::from_vec(sig, (ts.len(), 1, 1, 1), dev)?.to_dtype(z0.dtype())?;
    let noi = Tensor::from_vec(noi, (ts.len(), 1, 1, 1), dev)?.to_dtype(z0.dtype())?;
    Ok((z0.broadcast_mul(&sig)? + eps.broadcast_mul(&noi)?)?)
}

/// Mean squared error between true and predicted noise, over every element
/// of the canvas.
pub fn diffusion_loss(eps: &Tensor, eps_hat: &Tensor) -> Result<Tensor> {
    if eps.dims() != eps_hat.dims() {
        return Err(Error::shape(
            "diffusion_loss",
            format!("{:?}", eps.dims()),
            format!("{:?}", eps_hat.dims()),
        ));
    }
    Ok((eps_hat - eps)?.sqr()?.mean_all()?)
}

/// The descending timestep grid for a sampling run: `steps + 1` values from
/// `T` down to 0, evenly spaced up to rounding.
pub fn sample_timesteps(t_max: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > t_max {
        return Err(Error::Config(format!(
            "sample steps must be in 1..={t_max}, got {steps}"
        )));
    }
    let mut ts = Vec::with_capacity(steps + 1);
    for k in 0..=steps {
        let t = ((t_max as f64) * ((steps - k) as f64) / (steps as f64)).round() as usize;
        ts.push(t);
    }
    for w in ts.windows(2) {
        debug_assert!(w[0] > w[1], "sample grid must strictly decrease");
    }
    Ok(ts)
}

/// Deterministic DDIM update loop starting from the given state at `t =
/// t_max`. At each grid point the full denoiser input is assembled from the
/// current generated latent, the fixed guidance latent, and the mask
/// channel; the predicted noise then moves the state to the next grid
/// point. Returns the final latent at `t = 0`.
pub fn sample_from<F>(
    mut predict: F,
    z_init: &Tensor,
    guidance: &Tensor,
    mask_channel: &Tensor,
    schedule: &NoiseSchedule,
    steps: usize,
) -> Result<Tensor>
where
    F: FnMut(&Tensor, usize) -> Result<Tensor>,
{
    let grid = sample_timesteps(schedule.len(), steps)?;
    let mut z = z_init.clone();
    for w in grid.windows(2) {
        let (t, t_prev) = (w[0], w[1]);
        let input = assembly::concat_input(&z, guidance, mask_channel)?;
        let eps = predict(&input, t)?;
        if eps.dims() != z.dims() {
            return Err(Error::shape(
                "sampler noise prediction",
                format!("{:?}", z.dims()),
                format!("{:?}", eps.dims()),
            ));
        }
        let a_t = schedule.alpha_cum(t)?;
        let a_p = schedule.alpha_cum(t_prev)?;
        // Project to the clean estimate, then re-noise to the next grid point.
        let z0_hat = ((&z - (&eps * (1.0 - a_t).sqrt())?)? * (1.0 / a_t.sqrt()))?;
        z = ((&z0_hat * a_p.sqrt())? + (&eps * (1.0 - a_p).sqrt())?)?;
    }
    Ok(z)
}

/// [`sample_from`] with the start state drawn as seeded standard normal
/// noise, the usual entry point for inference.
pub fn sample<F>(
    predict: F,
    guidance: &Tensor,
    mask_channel: &Tensor,
    schedule: &NoiseSchedule,
    steps: usize,
    seed: u64,
) -> Result<Tensor>
where
    F: FnMut(&Tensor, usize) -> Result<Tensor>,
{
    let (b, c, h, w) = guidance.dims4()?;
    let mut r = rng::rng_for(seed, &[0x5a4d]);
    let z_init = rng::normal_tensor(&mut r, &[b, c, h, w], guidance.dtype(), guidance.device())?;
    sample_from(predict, &z_init, guidance, mask_channel, schedule, steps)
}
