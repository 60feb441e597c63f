//! The conditional noise-prediction network.
//!
//! A compact UNet over the paired latent canvas. Every resolution carries
//! attention: a self-attention over canvas tokens, an optional cross-
//! attention to the spatial reference features sharing the same query
//! projection and entering through a zero-initialized gate, and a cross-
//! attention to the semantic tokens. Because the gate starts at exactly
//! zero, enabling the spatial branch leaves the network function unchanged
//! until training moves the gate, which is what makes the second training
//! phase a safe warm start from the first.

use candle_core::Tensor;
use candle_nn::{Conv2d, GroupNorm, Linear, Module};

use crate::error::{Error, Result};
use crate::nn::{self, LayerNorm};
use crate::params::Scope;
use crate::srm::SrmFeatures;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConditioningMode {
    /// Semantic tokens only (first training phase).
    SamOnly,
    /// Semantic tokens plus gated spatial features (second phase).
    SamAndSrm,
}

impl ConditioningMode {
    pub fn needs_spatial(self) -> bool {
        self == ConditioningMode::SamAndSrm
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DenoiserConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub widths: [usize; 3],
    pub head_dim: usize,
    pub groups: usize,
    /// Width of the semantic conditioning tokens.
    pub context_dim: usize,
    pub max_timestep: usize,
    /// Latent canvas dims.
    pub latent_h: usize,
    pub latent_w: usize,
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config("denoiser channel counts must be positive".into()));
        }
        for w in self.widths {
            if w % self.groups != 0 || w % self.head_dim != 0 {
                return Err(Error::Config(format!(
                    "stage width {w} must divide by {} norm groups and {} head dim",
                    self.groups, self.head_dim
                )));
            }
        }
        if self.latent_h % 4 != 0 || self.latent_w % 4 != 0 {
            return Err(Error::Config(format!(
                "latent canvas {}x{} must divide by 4 for three resolutions",
                self.latent_h, self.latent_w
            )));
        }
        if self.max_timestep == 0 {
            return Err(Error::Config("max timestep must be positive".into()));
        }
        Ok(())
    }

    /// Spatial dims of the three attention scales.
    pub fn attention_resolutions(&self) -> [(usize, usize); 3] {
        [
            (self.latent_h, self.latent_w),
            (self.latent_h / 2, self.latent_w / 2),
            (self.latent_h / 4, self.latent_w / 4),
        ]
    }
}

struct ResBlock {
    gn1: GroupNorm,
    conv1: Conv2d,
    temb: Linear,
    gn2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new(scope: &Scope, name: &str, in_c: usize, out_c: usize, time_dim: usize, groups: usize) -> Result<Self> {
        let s = scope.sub(name);
        let skip = if in_c != out_c {
            Some(nn::conv2d(&s, "skip", in_c, out_c, 1, 1, 0)?)
        } else {
            None
        };
        Ok(ResBlock {
            gn1: nn::group_norm(&s, "gn1", in_c, groups)?,
            conv1: nn::conv2d(&s, "conv1", in_c, out_c, 3, 1, 1)?,
            temb: nn::linear(&s, "temb", time_dim, out_c)?,
            gn2: nn::group_norm(&s, "gn2", out_c, groups)?,
            conv2: nn::conv2d(&s, "conv2", out_c, out_c, 3, 1, 1)?,
            skip,
        })
    }

    fn forward(&self, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&self.gn1.forward(x)?.silu()?)?;
        let t = self.temb.forward(&temb.silu()?)?;
        let h = h.broadcast_add(&t.unsqueeze(2)?.unsqueeze(3)?)?;
        let h = self.conv2.forward(&self.gn2.forward(&h)?.silu()?)?;
        let res = match &self.skip {
            Some(skip) => skip.forward(x)?,
            None => x.clone(),
        };
        Ok((h + res)?)
    }
}

/// One attention site: canvas self-attention, the gated spatial cross-
/// attention sharing its queries, semantic cross-attention, feed-forward.
struct AttnSite {
    ln1: LayerNorm,
    self_attn: nn::MultiHeadAttention,
    srm_attn: nn::MultiHeadAttention,
    srm_gate: Linear,
    ln2: LayerNorm,
    sam_attn: nn::MultiHeadAttention,
    ln3: LayerNorm,
    ffn: nn::Mlp,
}

impl AttnSite {
    fn new(scope: &Scope, name: &str, width: usize, context_dim: usize, head_dim: usize) -> Result<Self> {
        let s = scope.sub(name);
        let heads = width / head_dim;
        Ok(AttnSite {
            ln1: nn::layer_norm(&s, "ln1", width)?,
            self_attn: nn::MultiHeadAttention::new(&s, "self_attn", width, width, heads)?,
            srm_attn: nn::MultiHeadAttention::without_q(&s, "srm_attn", width, width, heads)?,
            srm_gate: nn::linear_zero(&s, "srm_gate", width, width)?,
            ln2: nn::layer_norm(&s, "ln2", width)?,
            sam_attn: nn::MultiHeadAttention::new(&s, "sam_attn", width, context_dim, heads)?,
            ln3: nn::layer_norm(&s, "ln3", width)?,
            ffn: nn::Mlp::new(&s, "ffn", width, width * 2, width)?,
        })
    }

    fn forward(
        &self,
        x: &Tensor,
        f_sam: &Tensor,
        srm_scale: Option<&Tensor>,
        mode: ConditioningMode,
    ) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let tokens = x.reshape((b, c, h * w))?.transpose(1, 2)?.contiguous()?;
        let normed = self.ln1.forward(&tokens)?;
        let q = self.self_attn.project_q(&normed)?;
        let mut fused = (&tokens + self.self_attn.attend(&q, &normed, None)?)?;
        if mode == ConditioningMode::SamAndSrm {
            let srm = srm_scale.ok_or_else(|| {
                Error::msg("extended attention requires spatial features at every scale")
            })?;
            let (sb, sc, sh, sw) = srm.dims4()?;
            if sb != b || sc != c {
                return Err(Error::shape(
                    "spatial features",
                    format!("[{b}, {c}, ..]"),
                    format!("[{sb}, {sc}, {sh}, {sw}]"),
                ));
            }
            let srm_tokens = srm.reshape((sb, sc, sh * sw))?.transpose(1, 2)?.contiguous()?;
            let cross = self.srm_attn.attend(&q, &srm_tokens, None)?;
            fused = (&fused + self.srm_gate.forward(&cross)?)?;
        }
        let fused = (&fused + self.sam_attn.forward(&self.ln2.forward(&fused)?, f_sam, None)?)?;
        let fused = (&fused + self.ffn.forward(&self.ln3.forward(&fused)?)?)?;
        Ok(fused.transpose(1, 2)?.reshape((b, c, h, w))?)
    }
}

struct Level {
    res0: ResBlock,
    res1: ResBlock,
    attn: AttnSite,
}

impl Level {
    fn new(
        scope: &Scope,
        name: &str,
        in_c: usize,
        out_c: usize,
        time_dim: usize,
        cfg: &DenoiserConfig,
    ) -> Result<Self> {
        let s = scope.sub(name);
        Ok(Level {
            res0: ResBlock::new(&s, "res0", in_c, out_c, time_dim, cfg.groups)?,
            res1: ResBlock::new(&s, "res1", out_c, out_c, time_dim, cfg.groups)?,
            attn: AttnSite::new(&s, "attn", out_c, cfg.context_dim, cfg.head_dim)?,
        })
    }

    fn forward(
        &self,
        x: &Tensor,
        temb: &Tensor,
        f_sam: &Tensor,
        srm_scale: Option<&Tensor>,
        mode: ConditioningMode,
    ) -> Result<Tensor> {
        let h = self.res1.forward(&self.res0.forward(x, temb)?, temb)?;
        self.attn.forward(&h, f_sam, srm_scale, mode)
    }
}

pub struct Denoiser {
    cfg: DenoiserConfig,
    time_fc1: Linear,
    time_fc2: Linear,
    conv_in: Conv2d,
    enc1: Level,
    down1: Conv2d,
    enc2: Level,
    down2: Conv2d,
    enc3: Level,
    mid_res0: ResBlock,
    mid_attn: AttnSite,
    mid_res1: ResBlock,
    dec3: Level,
    up3: Conv2d,
    dec2: Level,
    up2: Conv2d,
    dec1: Level,
    out_norm: GroupNorm,
    out_conv: Conv2d,
}

impl Denoiser {
    pub fn new(cfg: DenoiserConfig, scope: &Scope) -> Result<Self> {
        cfg.validate()?;
        let s = scope.sub("denoiser");
        let [w1, w2, w3] = cfg.widths;
        let time_dim = w1 * 4;
        Ok(Denoiser {
            time_fc1: nn::linear(&s.sub("time"), "fc1", w1, time_dim)?,
            time_fc2: nn::linear(&s.sub("time"), "fc2", time_dim, time_dim)?,
            conv_in: nn::conv2d(&s, "conv_in", cfg.in_channels, w1, 3, 1, 1)?,
            enc1: Level::new(&s, "enc1", w1, w1, time_dim, &cfg)?,
            down1: nn::conv2d(&s, "down1", w1, w2, 3, 2, 1)?,
            enc2: Level::new(&s, "enc2", w2, w2, time_dim, &cfg)?,
            down2: nn::conv2d(&s, "down2", w2, w3, 3, 2, 1)?,
            enc3: Level::new(&s, "enc3", w3, w3, time_dim, &cfg)?,
            mid_res0: ResBlock::new(&s.sub("mid"), "res0", w3, w3, time_dim, cfg.groups)?,
            mid_attn: AttnSite::new(&s.sub("mid"), "attn", w3, cfg.context_dim, cfg.head_dim)?,
            mid_res1: ResBlock::new(&s.sub("mid"), "res1", w3, w3, time_dim, cfg.groups)?,
            dec3: Level::new(&s, "dec3", 2 * w3, w3, time_dim, &cfg)?,
            up3: nn::conv2d(&s, "up3", w3, w2, 3, 1, 1)?,
            dec2: Level::new(&s, "dec2", 2 * w2, w2, time_dim, &cfg)?,
            up2: nn::conv2d(&s, "up2", w2, w1, 3, 1, 1)?,
            dec1: Level::new(&s, "dec1", 2 * w1, w1, time_dim, &cfg)?,
            out_norm: nn::group_norm(&s, "out_norm", w1, cfg.groups)?,
            out_conv: nn::conv2d(&s, "out_conv", w1, cfg.out_channels, 3, 1, 1)?,
            cfg,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    fn check_srm(&self, f_srm: Option<&SrmFeatures>, mode: ConditioningMode) -> Result<()> {
        if mode == ConditioningMode::SamAndSrm {
            let f = f_srm.ok_or_else(|| {
                Error::msg("extended attention requires spatial features")
            })?;
            if f.scales.len() != 3 {
                return Err(Error::shape(
                    "spatial features",
                    "3 scales",
                    format!("{}", f.scales.len()),
                ));
            }
        }
        Ok(())
    }

    /// Predicts the noise on the generated canvas from the assembled input.
    pub fn forward(
        &self,
        input: &Tensor,
        ts: &[usize],
        f_sam: &Tensor,
        f_srm: Option<&SrmFeatures>,
        mode: ConditioningMode,
    ) -> Result<Tensor> {
        let (b, c, h, w) = input.dims4()?;
        if c != self.cfg.in_channels || h != self.cfg.latent_h || w != self.cfg.latent_w {
            return Err(Error::shape(
                "denoiser input",
                format!(
                    "[B, {}, {}, {}]",
                    self.cfg.in_channels, self.cfg.latent_h, self.cfg.latent_w
                ),
                format!("{:?}", input.dims()),
            ));
        }
        if ts.len() != b {
            return Err(Error::shape(
                "denoiser timesteps",
                format!("{b}"),
                format!("{}", ts.len()),
            ));
        }
        for &t in ts {
            if t == 0 || t > self.cfg.max_timestep {
                return Err(Error::Invalid(format!(
                    "timestep {t} outside 1..={}",
                    self.cfg.max_timestep
                )));
            }
        }
        self.check_srm(f_srm, mode)?;
        let scale = |i: usize| f_srm.map(|f| &f.scales[i]);

        let sin = nn::timestep_embedding(ts, self.cfg.widths[0], input.dtype(), input.device())?;
        let temb = self.time_fc2.forward(&self.time_fc1.forward(&sin)?.silu()?)?;

        let x0 = self.conv_in.forward(input)?;
        let e1 = self.enc1.forward(&x0, &temb, f_sam, scale(0), mode)?;
        let e2 = self.enc2.forward(&self.down1.forward(&e1)?, &temb, f_sam, scale(1), mode)?;
        let e3 = self.enc3.forward(&self.down2.forward(&e2)?, &temb, f_sam, scale(2), mode)?;

        let m = self.mid_res0.forward(&e3, &temb)?;
        let m = self.mid_attn.forward(&m, f_sam, scale(2), mode)?;
        let m = self.mid_res1.forward(&m, &temb)?;

        let d3 = self.dec3.forward(
            &Tensor::cat(&[&m, &e3], 1)?,
            &temb,
            f_sam,
            scale(2),
            mode,
        )?;
        let u3 = self.up3.forward(&nn::upsample2x(&d3)?)?;
        let d2 = self.dec2.forward(
            &Tensor::cat(&[&u3, &e2], 1)?,
            &temb,
            f_sam,
            scale(1),
            mode,
        )?;
        let u2 = self.up2.forward(&nn::upsample2x(&d2)?)?;
        let d1 = self.dec1.forward(
            &Tensor::cat(&[&u2, &e1], 1)?,
            &temb,
            f_sam,
            scale(0),
            mode,
        )?;
        let out = self
            .out_conv
            .forward(&self.out_norm.forward(&d1)?.silu()?)?;
        nn::debug_assert_finite(&out, "denoiser output")?;
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use candle_core::{DType, Device};

    pub fn test_config() -> DenoiserConfig {
        DenoiserConfig {
            in_channels: 97,
            out_channels: 48,
            widths: [64, 128, 256],
            head_dim: 32,
            groups: 8,
            context_dim: 128,
            max_timestep: 1000,
            latent_h: 16,
            latent_w: 24,
        }
    }

    fn rand_input(store_seed: u64) -> (Tensor, Tensor) {
        let dev = Device::Cpu;
        let mut r = crate::rng::rng_for(store_seed, &[1]);
        let input = crate::rng::normal_tensor(&mut r, &[1, 97, 16, 24], DType::F32, &dev).unwrap();
        let f_sam = crate::rng::normal_tensor(&mut r, &[1, 9, 128], DType::F32, &dev).unwrap();
        (input, f_sam)
    }

    fn rand_srm(seed: u64) -> SrmFeatures {
        let dev = Device::Cpu;
        let mut r = crate::rng::rng_for(seed, &[2]);
        let dims = [(64usize, 16usize, 24usize), (128, 8, 12), (256, 4, 6)];
        let scales = dims
            .iter()
            .map(|&(c, h, w)| {
                crate::rng::normal_tensor(&mut r, &[1, c, h, w], DType::F32, &dev).unwrap()
            })
            .collect();
        SrmFeatures { scales }
    }

    #[test]
    fn output_covers_the_generated_channels() -> Result<()> {
        let store = ParamStore::new(1, DType::F32, Device::Cpu);
        let net = Denoiser::new(test_config(), &store.root())?;
        let (input, f_sam) = rand_input(1);
        let out = net.forward(&input, &[500], &f_sam, None, ConditioningMode::SamOnly)?;
        assert_eq!(out.dims(), &[1, 48, 16, 24]);
        assert_eq!(net.config().attention_resolutions(), [(16, 24), (8, 12), (4, 6)]);
        Ok(())
    }

    #[test]
    fn zero_gate_makes_extended_attention_inert_at_init() -> Result<()> {
        let store = ParamStore::new(2, DType::F32, Device::Cpu);
        let net = Denoiser::new(test_config(), &store.root())?;
        // every gate starts at exactly zero
        for name in store.var_names() {
            if name.contains("srm_gate") {
                let t = store.get(&name).unwrap();
                let mx = t.abs()?.max_all()?.to_scalar::<f32>()?;
                assert_eq!(mx, 0.0, "{name} not zero");
            }
        }
        let (input, f_sam) = rand_input(2);
        let srm = rand_srm(2);
        let plain = net.forward(&input, &[10], &f_sam, None, ConditioningMode::SamOnly)?;
        let ext = net.forward(&input, &[10], &f_sam, Some(&srm), ConditioningMode::SamAndSrm)?;
        let diff = (&plain - &ext)?.abs()?.max_all()?.to_scalar::<f32>()?;
        assert!(diff <= 1e-6, "diff {diff}");
        Ok(())
    }

    #[test]
    fn nonzero_gate_feels_the_spatial_features() -> Result<()> {
        let store = ParamStore::new(3, DType::F32, Device::Cpu);
        let net = Denoiser::new(test_config(), &store.root())?;
        let (input, f_sam) = rand_input(3);
        let a = net.forward(&input, &[10], &f_sam, Some(&rand_srm(3)), ConditioningMode::SamAndSrm)?;
        // nudge one gate away from zero and the features must matter
        let gate = store.var("denoiser.enc1.attn.srm_gate.weight").unwrap();
        gate.set(&Tensor::full(0.05f32, gate.dims(), &Device::Cpu)?)?;
        let b = net.forward(&input, &[10], &f_sam, Some(&rand_srm(3)), ConditioningMode::SamAndSrm)?;
        let c = net.forward(&input, &[10], &f_sam, Some(&rand_srm(99)), ConditioningMode::SamAndSrm)?;
        let db = (&a - &b)?.abs()?.max_all()?.to_scalar::<f32>()?;
        let dc = (&b - &c)?.abs()?.max_all()?.to_scalar::<f32>()?;
        assert!(db > 1e-7);
        assert!(dc > 1e-7);
        Ok(())
    }

    #[test]
    fn rejects_out_of_range_timesteps() -> Result<()> {
        let store = ParamStore::new(4, DType::F32, Device::Cpu);
        let net = Denoiser::new(test_config(), &store.root())?;
        let (input, f_sam) = rand_input(4);
        assert!(net.forward(&input, &[0], &f_sam, None, ConditioningMode::SamOnly).is_err());
        assert!(net.forward(&input, &[1001], &f_sam, None, ConditioningMode::SamOnly).is_err());
        assert!(net
            .forward(&input, &[5, 5], &f_sam, None, ConditioningMode::SamOnly)
            .is_err());
        assert!(net
            .forward(&input, &[5], &f_sam, None, ConditioningMode::SamAndSrm)
            .is_err());
        Ok(())
    }
}
