//! PNG input and output.
//!
//! Images live in `[-1, 1]` as `[3, H, W]` tensors; masks are `{0, 1}` as
//! `[1, H, W]`. The 8-bit quantization here is the identity on values that
//! came from 8-bit files, so a load/save cycle is lossless.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use image::{GrayImage, RgbImage};

use crate::error::{Error, Result};

pub fn tensor_to_rgb8(img: &Tensor) -> Result<RgbImage> {
    let (c, h, w) = img.dims3()?;
    if c != 3 {
        return Err(Error::shape("tensor_to_rgb8", "3 channels", format!("{c}")));
    }
    let data = img.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    let mut out = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = |ch: usize| {
                let v = data[ch * h * w + y * w + x];
                (((v + 1.0) / 2.0 * 255.0).round().clamp(0.0, 255.0)) as u8
            };
            out.put_pixel(x as u32, y as u32, image::Rgb([px(0), px(1), px(2)]));
        }
    }
    Ok(out)
}

pub fn rgb8_to_tensor(img: &RgbImage, device: &Device) -> Result<Tensor> {
    let (w, h) = img.dimensions();
    let (w, h) = (w as usize, h as usize);
    let mut data = vec![0f32; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let p = img.get_pixel(x as u32, y as u32);
            for ch in 0..3 {
                data[ch * h * w + y * w + x] = p.0[ch] as f32 / 255.0 * 2.0 - 1.0;
            }
        }
    }
    Ok(Tensor::from_vec(data, (3, h, w), device)?)
}

pub fn mask_to_gray8(mask: &Tensor) -> Result<GrayImage> {
    let (c, h, w) = mask.dims3()?;
    if c != 1 {
        return Err(Error::shape("mask_to_gray8", "1 channel", format!("{c}")));
    }
    let data = mask.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    let mut out = GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let v = (data[y * w + x].clamp(0.0, 1.0) * 255.0).round() as u8;
            out.put_pixel(x as u32, y as u32, image::Luma([v]));
        }
    }
    Ok(out)
}

pub fn gray8_to_mask(img: &GrayImage, device: &Device) -> Result<Tensor> {
    let (w, h) = img.dimensions();
    let (w, h) = (w as usize, h as usize);
    let mut data = vec![0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            data[y * w + x] = if img.get_pixel(x as u32, y as u32).0[0] >= 128 {
                1.0
            } else {
                0.0
            };
        }
    }
    Ok(Tensor::from_vec(data, (1, h, w), device)?)
}

pub fn save_rgb(img: &Tensor, path: &Path) -> Result<()> {
    tensor_to_rgb8(img)?
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(Error::from)
}

pub fn save_mask(mask: &Tensor, path: &Path) -> Result<()> {
    mask_to_gray8(mask)?
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(Error::from)
}

pub fn load_rgb(path: &Path, device: &Device) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|e| Error::msg(format!("{}: {e}", path.display())))?
        .to_rgb8();
    rgb8_to_tensor(&img, device)
}

pub fn load_mask(path: &Path, device: &Device) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|e| Error::msg(format!("{}: {e}", path.display())))?
        .to_luma8();
    gray8_to_mask(&img, device)
}
