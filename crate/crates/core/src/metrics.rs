//! Image quality and mask overlap metrics.
//!
//! These run in f64 over `ndarray` buffers, deliberately independent of the
//! tensor stack so they can serve as oracles for it. Images are `[C, H, W]`
//! with values in `[0, 1]`.

use candle_core::Tensor;
use ndarray::{Array2, Array3};

use crate::error::{Error, Result};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

/// The classic five-scale weights truncated to three scales and
/// renormalized to sum to one.
pub fn ms_ssim_weights() -> [f64; 3] {
    let base = [0.0448, 0.2856, 0.3001];
    let sum: f64 = base.iter().sum();
    [base[0] / sum, base[1] / sum, base[2] / sum]
}

/// Normalized Gaussian window used for the local SSIM statistics.
pub fn gaussian_window(size: usize, sigma: f64) -> Array2<f64> {
    let half = (size as isize - 1) / 2;
    let g: Vec<f64> = (-half..=half)
        .map(|x| (-((x * x) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let mut w = Array2::zeros((size, size));
    for (i, gi) in g.iter().enumerate() {
        for (j, gj) in g.iter().enumerate() {
            w[(i, j)] = gi * gj;
        }
    }
    let sum = w.sum();
    w.mapv_inplace(|v| v / sum);
    w
}

fn check_pair(a: &Array3<f64>, b: &Array3<f64>) -> Result<(usize, usize, usize)> {
    if a.dim() != b.dim() {
        return Err(Error::shape(
            "metric inputs",
            format!("{:?}", a.dim()),
            format!("{:?}", b.dim()),
        ));
    }
    Ok(a.dim())
}

/// Per-channel local statistics, then the SSIM map means. Returns
/// `(luminance * cs, cs)` averaged over all valid window positions and
/// channels.
fn ssim_parts(a: &Array3<f64>, b: &Array3<f64>) -> Result<(f64, f64)> {
    let (c, h, w) = check_pair(a, b)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Invalid(format!(
            "image {h}x{w} smaller than the {SSIM_WINDOW}-pixel window"
        )));
    }
    let win = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
    let c1 = K1 * K1;
    let c2 = K2 * K2;
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut ssim_sum = 0.0;
    let mut cs_sum = 0.0;
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                let mut ma = 0.0;
                let mut mb = 0.0;
                let mut maa = 0.0;
                let mut mbb = 0.0;
                let mut mab = 0.0;
                for dy in 0..SSIM_WINDOW {
                    for dx in 0..SSIM_WINDOW {
                        let wv = win[(dy, dx)];
                        let av = a[(ch, y + dy, x + dx)];
                        let bv = b[(ch, y + dy, x + dx)];
                        ma += wv * av;
                        mb += wv * bv;
                        maa += wv * av * av;
                        mbb += wv * bv * bv;
                        mab += wv * av * bv;
                    }
                }
                let va = maa - ma * ma;
                let vb = mbb - mb * mb;
                let cov = mab - ma * mb;
                let l = (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
                let cs = (2.0 * cov + c2) / (va + vb + c2);
                ssim_sum += l * cs;
                cs_sum += cs;
            }
        }
    }
    let n = (c * oh * ow) as f64;
    Ok((ssim_sum / n, cs_sum / n))
}

/// Structural similarity with an 11-pixel Gaussian window over valid
/// positions, averaged across channels. Inputs in `[0, 1]`.
pub fn ssim(a: &Array3<f64>, b: &Array3<f64>) -> Result<f64> {
    Ok(ssim_parts(a, b)?.0)
}

fn halve(a: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = a.dim();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Array3::zeros((c, oh, ow));
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                out[(ch, y, x)] = 0.25
                    * (a[(ch, 2 * y, 2 * x)]
                        + a[(ch, 2 * y, 2 * x + 1)]
                        + a[(ch, 2 * y + 1, 2 * x)]
                        + a[(ch, 2 * y + 1, 2 * x + 1)]);
            }
        }
    }
    out
}

/// Multi-scale structural similarity over `scales` octaves (2x average
/// pooling between octaves). Contrast-structure terms weigh the finer
/// scales and the full index weighs the coarsest; terms clamp at zero
/// before the weighted geometric mean. `ms_ssim(a, b, 1)` equals
/// `ssim(a, b)` for non-negative indices.
pub fn ms_ssim(a: &Array3<f64>, b: &Array3<f64>, scales: usize) -> Result<f64> {
    if scales == 0 || scales > 3 {
        return Err(Error::Invalid(format!("scale count {scales} outside 1..=3")));
    }
    let weights = ms_ssim_weights();
    let offset = 3 - scales;
    let wsum: f64 = weights[offset..].iter().sum();
    let mut ca = a.clone();
    let mut cb = b.clone();
    let mut acc = 1.0;
    for s in 0..scales {
        let w = weights[offset + s] / wsum;
        let (ssim_v, cs_v) = ssim_parts(&ca, &cb)?;
        let term = if s + 1 == scales { ssim_v } else { cs_v };
        acc *= term.max(0.0).powf(w);
        if s + 1 != scales {
            ca = halve(&ca);
            cb = halve(&cb);
        }
    }
    Ok(acc)
}

/// Peak signal-to-noise ratio for a unit data range; identical inputs give
/// infinity.
pub fn psnr(a: &Array3<f64>, b: &Array3<f64>) -> Result<f64> {
    check_pair(a, b)?;
    let n = a.len() as f64;
    let mse: f64 = a
        .iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(-10.0 * mse.log10())
}

fn binarize(m: &Array2<f64>, threshold: f64) -> Vec<bool> {
    m.iter().map(|&v| v >= threshold).collect()
}

/// Intersection over union after thresholding at 0.5. Two empty masks count
/// as a perfect match.
pub fn iou(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::shape(
            "mask pair",
            format!("{:?}", a.dim()),
            format!("{:?}", b.dim()),
        ));
    }
    let (av, bv) = (binarize(a, 0.5), binarize(b, 0.5));
    let inter = av.iter().zip(&bv).filter(|(x, y)| **x && **y).count();
    let union = av.iter().zip(&bv).filter(|(x, y)| **x || **y).count();
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Dice coefficient after thresholding at 0.5, with the same empty-empty
/// convention as [`iou`].
pub fn dice(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::shape(
            "mask pair",
            format!("{:?}", a.dim()),
            format!("{:?}", b.dim()),
        ));
    }
    let (av, bv) = (binarize(a, 0.5), binarize(b, 0.5));
    let inter = av.iter().zip(&bv).filter(|(x, y)| **x && **y).count();
    let total = av.iter().filter(|x| **x).count() + bv.iter().filter(|x| **x).count();
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// Converts a `[3, H, W]` tensor in `[-1, 1]` into the `[0, 1]` f64 array
/// the metrics expect.
pub fn image_array(t: &Tensor) -> Result<Array3<f64>> {
    let (c, h, w) = t.dims3()?;
    let v = t
        .to_dtype(candle_core::DType::F64)?
        .flatten_all()?
        .to_vec1::<f64>()?;
    let arr = Array3::from_shape_vec((c, h, w), v)
        .map_err(|e| Error::Invalid(format!("image buffer: {e}")))?;
    Ok(arr.mapv(|x| ((x + 1.0) / 2.0).clamp(0.0, 1.0)))
}

/// Converts a `[1, H, W]` or `[H, W]` mask tensor into an f64 array.
pub fn mask_array(t: &Tensor) -> Result<Array2<f64>> {
    let t = match t.dims().len() {
        3 => t.squeeze(0)?,
        2 => t.clone(),
        _ => {
            return Err(Error::shape(
                "mask tensor",
                "[1, H, W] or [H, W]",
                format!("{:?}", t.dims()),
            ))
        }
    };
    let (h, w) = t.dims2()?;
    let v = t
        .to_dtype(candle_core::DType::F64)?
        .flatten_all()?
        .to_vec1::<f64>()?;
    Array2::from_shape_vec((h, w), v).map_err(|e| Error::Invalid(format!("mask buffer: {e}")))
}
