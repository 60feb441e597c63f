//! Deterministic latent pixel codec.
//!
//! Images move between pixel space and a compact latent grid through an
//! exact space-to-depth rearrangement followed by a fixed affine map. With
//! the default identity constants the round trip is bit-exact, which makes
//! every latent-space property checkable against pixel space directly.
//!
//! Layout law: latent channel `c*f*f + dy*f + dx` at cell `(y, x)` holds
//! pixel channel `c` at `(y*f + dy, x*f + dx)`.

use candle_core::Tensor;

use crate::error::{Error, Result};

pub const DEFAULT_SCALE: f64 = 1.0;
pub const DEFAULT_SHIFT: f64 = 0.0;

/// A batch of latent grids produced by [`Codec::encode`].
#[derive(Clone)]
pub struct LatentGrid {
    pub data: Tensor,
    pub factor: usize,
}

impl LatentGrid {
    pub fn dims(&self) -> Result<(usize, usize, usize, usize)> {
        Ok(self.data.dims4()?)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Codec {
    factor: usize,
    scale: f64,
    shift: f64,
}

impl Codec {
    pub fn new(factor: usize) -> Result<Self> {
        Self::with_affine(factor, DEFAULT_SCALE, DEFAULT_SHIFT)
    }

    pub fn with_affine(factor: usize, scale: f64, shift: f64) -> Result<Self> {
        if factor == 0 {
            return Err(Error::Config("codec factor must be positive".into()));
        }
        if scale == 0.0 {
            return Err(Error::Config("codec scale must be nonzero".into()));
        }
        Ok(Codec {
            factor,
            scale,
            shift,
        })
    }

    pub fn factor(&self) -> usize {
        self.factor
    }

    /// Latent channel count, `3 * f^2`.
    pub fn channels(&self) -> usize {
        3 * self.factor * self.factor
    }

    pub fn latent_dims(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if h % self.factor != 0 || w % self.factor != 0 {
            return Err(Error::shape(
                "codec input",
                format!("spatial dims divisible by {}", self.factor),
                format!("({h}, {w})"),
            ));
        }
        Ok((h / self.factor, w / self.factor))
    }

    /// Encodes an RGB image batch `[B, 3, H, W]` (a single `[3, H, W]` image
    /// is treated as a batch of one).
    pub fn encode(&self, image: &Tensor) -> Result<LatentGrid> {
        let image = match image.rank() {
            3 => image.unsqueeze(0)?,
            4 => image.clone(),
            r => {
                return Err(Error::shape("codec encode", "rank 3 or 4", format!("rank {r}")));
            }
        };
        let (b, c, hh, ww) = image.dims4()?;
        if c != 3 {
            return Err(Error::shape("codec encode", "3 channels", format!("{c}")));
        }
        let (h, w) = self.latent_dims(hh, ww)?;
        let f = self.factor;
        let z = image
            .reshape((b, 3, h, f, w, f))?
            .permute((0, 1, 3, 5, 2, 4))?
            .contiguous()?
            .reshape((b, 3 * f * f, h, w))?;
        let z = if self.scale == 1.0 && self.shift == 0.0 {
            z
        } else {
            z.affine(self.scale, self.shift)?
        };
        Ok(LatentGrid {
            data: z,
            factor: f,
        })
    }

    pub fn decode(&self, latent: &LatentGrid) -> Result<Tensor> {
        if latent.factor != self.factor {
            return Err(Error::shape(
                "codec decode",
                format!("factor {}", self.factor),
                format!("factor {}", latent.factor),
            ));
        }
        let (b, c, h, w) = latent.data.dims4()?;
        let f = self.factor;
        if c != 3 * f * f {
            return Err(Error::shape(
                "codec decode",
                format!("{} channels", 3 * f * f),
                format!("{c}"),
            ));
        }
        let z = if self.scale == 1.0 && self.shift == 0.0 {
            latent.data.clone()
        } else {
            latent.data.affine(1.0 / self.scale, -self.shift / self.scale)?
        };
        Ok(z
            .reshape((b, 3, f, f, h, w))?
            .permute((0, 1, 4, 2, 5, 3))?
            .contiguous()?
            .reshape((b, 3, h * f, w * f))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};
    use proptest::prelude::*;

    #[test]
    fn channel_layout_follows_the_law() -> Result<()> {
        let dev = Device::Cpu;
        // 2x2 image, f=2: one latent cell whose channels enumerate
        // (c, dy, dx) in row-major order.
        let img = Tensor::from_vec(
            (0..12).map(|v| v as f32).collect::<Vec<_>>(),
            (1, 3, 2, 2),
            &dev,
        )?;
        let z = Codec::new(2)?.encode(&img)?;
        assert_eq!(z.data.dims(), &[1, 12, 1, 1]);
        let flat = z.data.flatten_all()?.to_vec1::<f32>()?;
        assert_eq!(flat, (0..12).map(|v| v as f32).collect::<Vec<_>>());
        Ok(())
    }

    #[test]
    fn roundtrip_is_bit_exact_with_identity_constants() -> Result<()> {
        let dev = Device::Cpu;
        let mut rng = crate::rng::rng_for(1, &[]);
        let data: Vec<f32> = crate::rng::normal_vec(&mut rng, 2 * 3 * 8 * 12)
            .iter()
            .map(|v| *v as f32)
            .collect();
        let img = Tensor::from_vec(data.clone(), (2, 3, 8, 12), &dev)?;
        let codec = Codec::new(4)?;
        let back = codec.decode(&codec.encode(&img)?)?;
        assert_eq!(back.flatten_all()?.to_vec1::<f32>()?, data);
        Ok(())
    }

    #[test]
    fn affine_constants_shift_values_and_invert() -> Result<()> {
        let dev = Device::Cpu;
        let img = Tensor::full(0.5f32, (1, 3, 4, 4), &dev)?;
        let codec = Codec::with_affine(2, 2.0, -1.0)?;
        let z = codec.encode(&img)?;
        let v = z.data.flatten_all()?.to_vec1::<f32>()?;
        assert!(v.iter().all(|x| (*x - 0.0).abs() < 1e-7));
        let back = codec.decode(&z)?;
        let bv = back.flatten_all()?.to_vec1::<f32>()?;
        assert!(bv.iter().all(|x| (*x - 0.5).abs() < 1e-6));
        Ok(())
    }

    #[test]
    fn rejects_bad_shapes() -> Result<()> {
        let dev = Device::Cpu;
        let codec = Codec::new(4)?;
        let bad = Tensor::zeros((1, 3, 6, 8), DType::F32, &dev)?;
        assert!(codec.encode(&bad).is_err());
        let bad_ch = Tensor::zeros((1, 4, 8, 8), DType::F32, &dev)?;
        assert!(codec.encode(&bad_ch).is_err());
        let wrong = LatentGrid {
            data: Tensor::zeros((1, 13, 2, 2), DType::F32, &dev)?,
            factor: 4,
        };
        assert!(codec.decode(&wrong).is_err());
        assert!(Codec::new(0).is_err());
        Ok(())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn roundtrip_any_divisible_shape(
            f in 1usize..4,
            h in 1usize..4,
            w in 1usize..4,
            seed in 0u64..1000,
        ) {
            let dev = Device::Cpu;
            let (hh, ww) = (h * f, w * f);
            let mut rng = crate::rng::rng_for(seed, &[]);
            let data: Vec<f32> = crate::rng::normal_vec(&mut rng, 3 * hh * ww)
                .iter()
                .map(|v| *v as f32)
                .collect();
            let img = Tensor::from_vec(data.clone(), (1, 3, hh, ww), &dev).unwrap();
            let codec = Codec::new(f).unwrap();
            let z = codec.encode(&img).unwrap();
            prop_assert_eq!(z.data.dims(), &[1, 3 * f * f, h, w]);
            let back = codec.decode(&z).unwrap();
            prop_assert_eq!(back.flatten_all().unwrap().to_vec1::<f32>().unwrap(), data);
        }
    }
}
