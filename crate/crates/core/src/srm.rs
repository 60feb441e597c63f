//! Spatial refinement of the reference image.
//!
//! A trainable convolutional pyramid extracts reference features at 1/4,
//! 1/8, and 1/16 resolution. A stack of decoder units then refines a set of
//! learned spatial queries: each unit self-attends over the queries,
//! cross-attends under re-projected semantic and spatial masks, and emits
//! per-query heat maps over the finest grid. Query 0 is trained to localize
//! the garment; the full heat-map stack is decoded into multi-scale feature
//! maps shaped for the denoiser's attention sites.

use candle_core::Tensor;
use candle_nn::{Conv2d, Linear, Module};

use crate::error::{Error, Result};
use crate::nn::{self, LayerNorm};
use crate::params::{Init, Scope};

#[derive(Debug, Clone, Copy)]
pub struct SrmConfig {
    /// Token and pyramid width.
    pub d: usize,
    /// Number of spatial queries.
    pub k_queries: usize,
    /// Semantic query count of the companion branch (mask width of the
    /// first cross-attention).
    pub n_semantic: usize,
    /// Decoder units; each runs three blocks.
    pub units: usize,
    pub heads: usize,
    /// Threshold for binarizing attention masks.
    pub mask_threshold: f64,
    /// Reference image size; must divide by 16.
    pub image_h: usize,
    pub image_w: usize,
    /// Output widths per decoded scale, matching the denoiser stages.
    pub out_widths: [usize; 3],
    /// Output spatial dims per scale, matching the denoiser attention sites.
    pub out_dims: [(usize, usize); 3],
}

impl SrmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.d % self.heads != 0 {
            return Err(Error::Config(format!(
                "spatial width {} must be a positive multiple of {} heads",
                self.d, self.heads
            )));
        }
        if self.k_queries == 0 || self.units == 0 {
            return Err(Error::Config("spatial branch sizes must be positive".into()));
        }
        if self.image_h % 16 != 0 || self.image_w % 16 != 0 {
            return Err(Error::Config(format!(
                "reference dims must divide by 16, got {}x{}",
                self.image_h, self.image_w
            )));
        }
        let (h1, w1) = (self.image_h / 4, self.image_w / 4);
        let paired = [(h1, 2 * w1), (h1 / 2, w1), (h1 / 4, w1 / 2)];
        let single = [(h1, w1), (h1 / 2, w1 / 2), (h1 / 4, w1 / 4)];
        if self.out_dims != paired && self.out_dims != single {
            return Err(Error::Config(format!(
                "decoded scale dims {:?} do not match the {}x{} reference (expected {:?} for a paired canvas or {:?} for a single half)",
                self.out_dims, self.image_h, self.image_w, paired, single
            )));
        }
        Ok(())
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.image_h / 4, self.image_w / 4)
    }

    /// Whether the decoded scales are stretched to the paired-canvas width.
    pub fn widen(&self) -> bool {
        self.out_dims[0].1 == self.image_w / 2
    }
}

/// Reference features at 1/4, 1/8, 1/16 of the input resolution, all of
/// width `d`.
pub struct FeaturePyramid {
    pub h1: Tensor,
    pub h2: Tensor,
    pub h3: Tensor,
}

struct PyramidEncoder {
    stem0: Conv2d,
    stem1: Conv2d,
    down2: Conv2d,
    down3: Conv2d,
}

impl PyramidEncoder {
    fn new(d: usize, scope: &Scope) -> Result<Self> {
        let s = scope.sub("pyramid");
        Ok(PyramidEncoder {
            stem0: nn::conv2d(&s, "stem0", 3, d / 2, 3, 2, 1)?,
            stem1: nn::conv2d(&s, "stem1", d / 2, d, 3, 2, 1)?,
            down2: nn::conv2d(&s, "down2", d, d, 3, 2, 1)?,
            down3: nn::conv2d(&s, "down3", d, d, 3, 2, 1)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<FeaturePyramid> {
        let h1 = self.stem1.forward(&self.stem0.forward(x)?.gelu()?)?;
        let h2 = self.down2.forward(&h1.gelu()?)?;
        let h3 = self.down3.forward(&h2.gelu()?)?;
        Ok(FeaturePyramid { h1, h2, h3 })
    }
}

/// Multi-head attention whose key mask is produced upstream as a soft map:
/// the map is binarized and rows left empty fall back to full attention, so
/// the output is always finite.
pub struct MaskedAttention {
    inner: nn::MultiHeadAttention,
    threshold: f64,
}

impl MaskedAttention {
    pub fn new(
        scope: &Scope,
        name: &str,
        q_dim: usize,
        kv_dim: usize,
        heads: usize,
        threshold: f64,
    ) -> Result<Self> {
        Ok(MaskedAttention {
            inner: nn::MultiHeadAttention::new(scope, name, q_dim, kv_dim, heads)?,
            threshold,
        })
    }

    /// `attn_mask` is `[B, Tq, Tk]` in `[0, 1]`, or `None` for unmasked.
    pub fn forward(&self, q: &Tensor, kv: &Tensor, attn_mask: Option<&Tensor>) -> Result<Tensor> {
        let out = match attn_mask {
            Some(m) => {
                let eff = nn::effective_attention_mask(m, self.threshold)?;
                self.inner.forward(q, kv, Some(&eff))?
            }
            None => self.inner.forward(q, kv, None)?,
        };
        nn::debug_assert_finite(&out, "masked attention")?;
        Ok(out)
    }
}

struct DecoderBlock {
    ln1: LayerNorm,
    self_attn: nn::MultiHeadAttention,
    ln2: LayerNorm,
    cross: MaskedAttention,
    ln3: LayerNorm,
    ffn: nn::Mlp,
}

impl DecoderBlock {
    fn new(cfg: &SrmConfig, scope: &Scope) -> Result<Self> {
        Ok(DecoderBlock {
            ln1: nn::layer_norm(scope, "ln1", cfg.d)?,
            self_attn: nn::MultiHeadAttention::new(scope, "self_attn", cfg.d, cfg.d, cfg.heads)?,
            ln2: nn::layer_norm(scope, "ln2", cfg.d)?,
            cross: MaskedAttention::new(scope, "cross", cfg.d, cfg.d, cfg.heads, cfg.mask_threshold)?,
            ln3: nn::layer_norm(scope, "ln3", cfg.d)?,
            ffn: nn::Mlp::new(scope, "ffn", cfg.d, cfg.d * 4, cfg.d)?,
        })
    }

    fn forward(&self, f: &Tensor, kv: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        let h = self.ln1.forward(f)?;
        let f = (f + self.self_attn.forward(&h, &h, None)?)?;
        let f = (&f + self.cross.forward(&self.ln2.forward(&f)?, kv, mask)?)?;
        Ok((&f + self.ffn.forward(&self.ln3.forward(&f)?)?)?)
    }
}

/// One decoder unit: three blocks attending to the semantic tokens, the 1/8
/// features, and the 1/16 features in turn.
struct DecoderUnit {
    block1: DecoderBlock,
    block2: DecoderBlock,
    block3: DecoderBlock,
}

impl DecoderUnit {
    fn new(cfg: &SrmConfig, scope: &Scope) -> Result<Self> {
        Ok(DecoderUnit {
            block1: DecoderBlock::new(cfg, &scope.sub("block1"))?,
            block2: DecoderBlock::new(cfg, &scope.sub("block2"))?,
            block3: DecoderBlock::new(cfg, &scope.sub("block3"))?,
        })
    }

    fn forward(
        &self,
        f: &Tensor,
        f_qf: &Tensor,
        h2_tokens: &Tensor,
        h3_tokens: &Tensor,
        m1: Option<&Tensor>,
        m2_h2: Option<&Tensor>,
        m2_h3: Option<&Tensor>,
    ) -> Result<Tensor> {
        let f = self.block1.forward(f, f_qf, m1)?;
        let f = self.block2.forward(&f, h2_tokens, m2_h2)?;
        self.block3.forward(&f, h3_tokens, m2_h3)
    }
}

/// Re-projection of one unit's output queries into the attention masks of
/// the next unit.
struct MaskProjector {
    m1_proj: Linear,
    m2_mlp: nn::Mlp,
}

impl MaskProjector {
    fn new(cfg: &SrmConfig, scope: &Scope) -> Result<Self> {
        Ok(MaskProjector {
            m1_proj: nn::linear(scope, "m1_proj", cfg.d, cfg.d)?,
            m2_mlp: nn::Mlp::new(scope, "m2_mlp", cfg.d, cfg.d, cfg.d)?,
        })
    }

    /// Soft semantic mask `[B, K, N]`.
    fn m1(&self, f: &Tensor, f_qf: &Tensor) -> Result<Tensor> {
        let logits = self
            .m1_proj
            .forward(f)?
            .matmul(&f_qf.transpose(1, 2)?.contiguous()?)?;
        Ok(candle_nn::ops::sigmoid(&logits)?)
    }

    /// Soft spatial mask over the finest grid, `[B, K, H1, W1]`.
    fn m2(&self, f: &Tensor, h1_flat: &Tensor, grid: (usize, usize)) -> Result<Tensor> {
        let logits = self.m2_mlp.forward(f)?.matmul(h1_flat)?;
        let (b, k, _) = logits.dims3()?;
        Ok(candle_nn::ops::sigmoid(&logits)?.reshape((b, k, grid.0, grid.1))?)
    }
}

/// The final heat-map head: one two-layer network per query, distinct
/// weights, contracted against the finest pyramid features.
struct TaskHead {
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
}

impl TaskHead {
    fn new(cfg: &SrmConfig, scope: &Scope) -> Result<Self> {
        let d = cfg.d;
        let k = cfg.k_queries;
        let s = scope.sub("task_head");
        Ok(TaskHead {
            w1: s.take("w1", &[k, d, d], Init::FanIn(d))?,
            b1: s.take("b1", &[k, 1, d], Init::Zeros)?,
            w2: s.take("w2", &[k, d, d], Init::FanIn(d))?,
            b2: s.take("b2", &[k, 1, d], Init::Zeros)?,
        })
    }

    /// `[B, K, D] -> [B, K, D]` through each query's own head.
    fn per_query_mlp(&self, f: &Tensor) -> Result<Tensor> {
        let x = f.transpose(0, 1)?.contiguous()?;
        let h = x.matmul(&self.w1)?.broadcast_add(&self.b1)?.gelu()?;
        let y = h.matmul(&self.w2)?.broadcast_add(&self.b2)?;
        Ok(y.transpose(0, 1)?.contiguous()?)
    }

    /// Per-query heat maps over the finest grid, `[B, K, H1, W1]`; raw
    /// logits except that the garment-location map (query 0) is a sigmoid.
    fn heat_maps(&self, f: &Tensor, h1_flat: &Tensor, grid: (usize, usize)) -> Result<Tensor> {
        let proj = self.per_query_mlp(f)?;
        let maps = proj.matmul(h1_flat)?;
        let (b, k, _) = maps.dims3()?;
        let maps = maps.reshape((b, k, grid.0, grid.1))?;
        let q0 = candle_nn::ops::sigmoid(&maps.narrow(1, 0, 1)?)?;
        let rest = maps.narrow(1, 1, k - 1)?;
        Ok(Tensor::cat(&[&q0, &rest], 1)?)
    }
}

/// One decoded output scale: strided convolution over the heat-map stack,
/// width-only upsampling onto the paired-canvas aspect (skipped for a
/// single-half canvas), and one transformer block.
struct ScaleDecoder {
    conv: Conv2d,
    block: nn::TransformerBlock,
    width: usize,
    dims: (usize, usize),
    widen: bool,
}

impl ScaleDecoder {
    fn new(
        scope: &Scope,
        name: &str,
        k: usize,
        width: usize,
        stride: usize,
        dims: (usize, usize),
        widen: bool,
        head_dim: usize,
    ) -> Result<Self> {
        let s = scope.sub(name);
        Ok(ScaleDecoder {
            conv: nn::conv2d(&s, "conv", k, width, 3, stride, 1)?,
            block: nn::TransformerBlock::new(&s, "block", width, width / head_dim)?,
            width,
            dims,
            widen,
        })
    }

    fn forward(&self, maps: &Tensor) -> Result<Tensor> {
        let x = self.conv.forward(maps)?;
        let x = if self.widen { nn::upsample_w2x(&x)? } else { x };
        let (b, c, h, w) = x.dims4()?;
        if (h, w) != self.dims || c != self.width {
            return Err(Error::shape(
                "decoded scale",
                format!("[{}, {}, {}]", self.width, self.dims.0, self.dims.1),
                format!("[{c}, {h}, {w}]"),
            ));
        }
        let tokens = x.reshape((b, c, h * w))?.transpose(1, 2)?.contiguous()?;
        let tokens = self.block.forward(&tokens)?;
        Ok(tokens.transpose(1, 2)?.reshape((b, c, h, w))?)
    }
}

/// Decoded reference features, one map per denoiser attention scale.
pub struct SrmFeatures {
    pub scales: Vec<Tensor>,
}

pub struct SrmOutput {
    pub features: SrmFeatures,
    /// Sigmoid garment-location map of query 0, `[B, 1, H1, W1]`.
    pub tfq0: Tensor,
    /// Full heat-map stack, `[B, K, H1, W1]`.
    pub heat_maps: Tensor,
    pub pyramid: FeaturePyramid,
}

pub struct SpatialRefinement {
    cfg: SrmConfig,
    pyramid: PyramidEncoder,
    queries: Tensor,
    units: Vec<DecoderUnit>,
    /// Projector `i` turns the output of unit `i` into the masks of unit
    /// `i + 1`, so there is one fewer than there are units.
    projectors: Vec<MaskProjector>,
    task_head: TaskHead,
    decoders: Vec<ScaleDecoder>,
}

impl SpatialRefinement {
    pub fn new(cfg: SrmConfig, scope: &Scope, head_dim: usize) -> Result<Self> {
        cfg.validate()?;
        let s = scope.sub("srm");
        let pyramid = PyramidEncoder::new(cfg.d, &s)?;
        let queries = s.take("queries", &[cfg.k_queries, cfg.d], Init::Normal(0.02))?;
        let mut units = Vec::new();
        let mut projectors = Vec::new();
        for i in 0..cfg.units {
            units.push(DecoderUnit::new(&cfg, &s.sub(&format!("unit{i}")))?);
            if i + 1 < cfg.units {
                projectors.push(MaskProjector::new(&cfg, &s.sub(&format!("proj{i}")))?);
            }
        }
        let task_head = TaskHead::new(&cfg, &s)?;
        let strides = [1usize, 2, 4];
        let mut decoders = Vec::new();
        for i in 0..3 {
            decoders.push(ScaleDecoder::new(
                &s.sub("decode"),
                &format!("scale{i}"),
                cfg.k_queries,
                cfg.out_widths[i],
                strides[i],
                cfg.out_dims[i],
                cfg.widen(),
                head_dim,
            )?);
        }
        Ok(SpatialRefinement {
            cfg,
            pyramid,
            queries,
            units,
            projectors,
            task_head,
            decoders,
        })
    }

    pub fn config(&self) -> &SrmConfig {
        &self.cfg
    }

    pub fn extract_pyramid(&self, x_ref: &Tensor) -> Result<FeaturePyramid> {
        let (_, c, h, w) = x_ref.dims4()?;
        if c != 3 || h != self.cfg.image_h || w != self.cfg.image_w {
            return Err(Error::shape(
                "spatial branch input",
                format!("[B, 3, {}, {}]", self.cfg.image_h, self.cfg.image_w),
                format!("{:?}", x_ref.dims()),
            ));
        }
        self.pyramid.forward(x_ref)
    }

    /// Full pass over a reference image. `f_qf` is the query-token output
    /// of the semantic branch, `[B, N, D]`.
    pub fn run(&self, x_ref: &Tensor, f_qf: &Tensor) -> Result<SrmOutput> {
        let (b, n, d) = f_qf.dims3()?;
        if n != self.cfg.n_semantic || d != self.cfg.d {
            return Err(Error::shape(
                "spatial branch semantic tokens",
                format!("[B, {}, {}]", self.cfg.n_semantic, self.cfg.d),
                format!("{:?}", f_qf.dims()),
            ));
        }
        let pyramid = self.extract_pyramid(x_ref)?;
        let grid = self.cfg.grid();
        let (h2h, h2w) = (grid.0 / 2, grid.1 / 2);
        let (h3h, h3w) = (grid.0 / 4, grid.1 / 4);

        let flat_tokens = |t: &Tensor| -> Result<Tensor> {
            let (b, c, h, w) = t.dims4()?;
            Ok(t.reshape((b, c, h * w))?.transpose(1, 2)?.contiguous()?)
        };
        let h1_flat = pyramid.h1.reshape((b, d, grid.0 * grid.1))?.contiguous()?;
        let h2_tokens = flat_tokens(&pyramid.h2)?;
        let h3_tokens = flat_tokens(&pyramid.h3)?;

        let mut f = self
            .queries
            .unsqueeze(0)?
            .broadcast_as((b, self.cfg.k_queries, d))?
            .contiguous()?;
        let mut m1: Option<Tensor> = None;
        let mut m2: Option<Tensor> = None;
        for (i, unit) in self.units.iter().enumerate() {
            let (m2_h2, m2_h3) = match &m2 {
                Some(m) => {
                    let k = self.cfg.k_queries;
                    let a = nn::downsample_area(m, grid.0 / h2h, grid.1 / h2w)?
                        .reshape((b, k, h2h * h2w))?;
                    let bt = nn::downsample_area(m, grid.0 / h3h, grid.1 / h3w)?
                        .reshape((b, k, h3h * h3w))?;
                    (Some(a), Some(bt))
                }
                None => (None, None),
            };
            f = unit.forward(
                &f,
                f_qf,
                &h2_tokens,
                &h3_tokens,
                m1.as_ref(),
                m2_h2.as_ref(),
                m2_h3.as_ref(),
            )?;
            if let Some(proj) = self.projectors.get(i) {
                m1 = Some(proj.m1(&f, f_qf)?);
                m2 = Some(proj.m2(&f, &h1_flat, grid)?);
            }
        }
        let heat_maps = self.task_head.heat_maps(&f, &h1_flat, grid)?;
        let tfq0 = heat_maps.narrow(1, 0, 1)?;
        let mut scales = Vec::new();
        for dec in &self.decoders {
            scales.push(dec.forward(&heat_maps)?);
        }
        Ok(SrmOutput {
            features: SrmFeatures { scales },
            tfq0,
            heat_maps,
            pyramid,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{self, Category};
    use crate::params::ParamStore;
    use candle_core::{DType, Device};

    pub fn test_config() -> SrmConfig {
        SrmConfig {
            d: 128,
            k_queries: 16,
            n_semantic: 8,
            units: 3,
            heads: 4,
            mask_threshold: 0.5,
            image_h: 64,
            image_w: 48,
            out_widths: [64, 128, 256],
            out_dims: [(16, 24), (8, 12), (4, 6)],
        }
    }

    fn build() -> (ParamStore, SpatialRefinement) {
        let store = ParamStore::new(7, DType::F32, Device::Cpu);
        let srm = SpatialRefinement::new(test_config(), &store.root(), 32).unwrap();
        (store, srm)
    }

    fn reference() -> Tensor {
        datagen::generate_sample(1, Category::Upper, 64, 48, &Device::Cpu)
            .unwrap()
            .person
            .unsqueeze(0)
            .unwrap()
    }

    #[test]
    fn pyramid_has_three_scales_of_shared_width() -> Result<()> {
        let (_s, srm) = build();
        let p = srm.extract_pyramid(&reference())?;
        assert_eq!(p.h1.dims(), &[1, 128, 16, 12]);
        assert_eq!(p.h2.dims(), &[1, 128, 8, 6]);
        assert_eq!(p.h3.dims(), &[1, 128, 4, 3]);
        Ok(())
    }

    #[test]
    fn decoded_scales_match_denoiser_sites() -> Result<()> {
        let (_s, srm) = build();
        let f_qf = Tensor::zeros((1, 8, 128), DType::F32, &Device::Cpu)?;
        let out = srm.run(&reference(), &f_qf)?;
        assert_eq!(out.features.scales[0].dims(), &[1, 64, 16, 24]);
        assert_eq!(out.features.scales[1].dims(), &[1, 128, 8, 12]);
        assert_eq!(out.features.scales[2].dims(), &[1, 256, 4, 6]);
        assert_eq!(out.tfq0.dims(), &[1, 1, 16, 12]);
        assert_eq!(out.heat_maps.dims(), &[1, 16, 16, 12]);
        let q0 = out.tfq0.flatten_all()?.to_vec1::<f32>()?;
        assert!(q0.iter().all(|v| (0.0..=1.0).contains(v)));
        Ok(())
    }

    #[test]
    fn masked_attention_selects_single_key_exactly() -> Result<()> {
        let dev = Device::Cpu;
        let store = ParamStore::new(3, DType::F64, dev.clone());
        let attn = MaskedAttention::new(&store.root(), "attn", 8, 8, 2, 0.5)?;
        let mut r = crate::rng::rng_for(4, &[]);
        let q = Tensor::from_vec(crate::rng::normal_vec(&mut r, 2 * 8), (1, 2, 8), &dev)?;
        let kv = Tensor::from_vec(crate::rng::normal_vec(&mut r, 5 * 8), (1, 5, 8), &dev)?;
        // query 0 may only see key 3; query 1 sees nothing and falls back
        let mut mv = vec![0f64; 2 * 5];
        mv[3] = 1.0;
        let mask = Tensor::from_vec(mv, (1, 2, 5), &dev)?;
        let out = attn.forward(&q, &kv, Some(&mask))?;

        // with one admissible key the softmax is a delta: the output row is
        // exactly the projected value of that key
        let key3 = kv.narrow(1, 3, 1)?;
        let v3 = candle_nn::Module::forward(
            &candle_nn::Linear::new(
                store.get("attn.v.weight").unwrap(),
                Some(store.get("attn.v.bias").unwrap()),
            ),
            &key3,
        )?;
        let o3 = candle_nn::Module::forward(
            &candle_nn::Linear::new(
                store.get("attn.out.weight").unwrap(),
                Some(store.get("attn.out.bias").unwrap()),
            ),
            &v3,
        )?;
        let got = out.narrow(1, 0, 1)?.flatten_all()?.to_vec1::<f64>()?;
        let want = o3.flatten_all()?.to_vec1::<f64>()?;
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-10, "{g} vs {w}");
        }

        // the empty row equals plain attention
        let unmasked = attn.forward(&q, &kv, None)?;
        let a = out.narrow(1, 1, 1)?.flatten_all()?.to_vec1::<f64>()?;
        let b = unmasked.narrow(1, 1, 1)?.flatten_all()?.to_vec1::<f64>()?;
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
        Ok(())
    }

    #[test]
    fn masked_attention_matches_bruteforce_oracle() -> Result<()> {
        let dev = Device::Cpu;
        let store = ParamStore::new(9, DType::F64, dev.clone());
        let heads = 2usize;
        let (dim, tq, tk) = (8usize, 3usize, 6usize);
        let attn = MaskedAttention::new(&store.root(), "a", dim, dim, heads, 0.5)?;
        let mut r = crate::rng::rng_for(10, &[]);
        let q = Tensor::from_vec(crate::rng::normal_vec(&mut r, tq * dim), (1, tq, dim), &dev)?;
        let kv = Tensor::from_vec(crate::rng::normal_vec(&mut r, tk * dim), (1, tk, dim), &dev)?;
        let mask_v: Vec<f64> = crate::rng::uniform_vec(&mut r, tq * tk, 0.0, 1.0);
        let mask = Tensor::from_vec(mask_v.clone(), (1, tq, tk), &dev)?;
        let got = attn
            .forward(&q, &kv, Some(&mask))?
            .flatten_all()?
            .to_vec1::<f64>()?;

        // oracle: dense loops in f64 over the same projection weights
        let get2 = |name: &str| -> Vec<Vec<f64>> {
            store.get(name).unwrap().to_vec2::<f64>().unwrap()
        };
        let get1 = |name: &str| -> Vec<f64> {
            store.get(name).unwrap().to_vec1::<f64>().unwrap()
        };
        let (wq, bq) = (get2("a.q.weight"), get1("a.q.bias"));
        let (wk, bk) = (get2("a.k.weight"), get1("a.k.bias"));
        let (wv, bv) = (get2("a.v.weight"), get1("a.v.bias"));
        let (wo, bo) = (get2("a.out.weight"), get1("a.out.bias"));
        let qv = q.squeeze(0)?.to_vec2::<f64>()?;
        let kvv = kv.squeeze(0)?.to_vec2::<f64>()?;
        let proj = |rows: &Vec<Vec<f64>>, w: &Vec<Vec<f64>>, b: &Vec<f64>| -> Vec<Vec<f64>> {
            rows.iter()
                .map(|r| {
                    (0..w.len())
                        .map(|o| {
                            b[o] + r.iter().zip(&w[o]).map(|(a, c)| a * c).sum::<f64>()
                        })
                        .collect()
                })
                .collect()
        };
        let qp = proj(&qv, &wq, &bq);
        let kp = proj(&kvv, &wk, &bk);
        let vp = proj(&kvv, &wv, &bv);
        let hd = dim / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut merged = vec![vec![0f64; dim]; tq];
        for h in 0..heads {
            for i in 0..tq {
                let row_mask: Vec<bool> = (0..tk).map(|j| mask_v[i * tk + j] >= 0.5).collect();
                let any = row_mask.iter().any(|m| *m);
                let mut logits = vec![f64::NEG_INFINITY; tk];
                for j in 0..tk {
                    if any && !row_mask[j] {
                        continue;
                    }
                    let mut dot = 0.0;
                    for d in 0..hd {
                        dot += qp[i][h * hd + d] * kp[j][h * hd + d];
                    }
                    logits[j] = dot * scale;
                }
                let m = logits.iter().cloned().fold(f64::MIN, f64::max);
                let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
                let z: f64 = exps.iter().sum();
                for d in 0..hd {
                    let mut acc = 0.0;
                    for j in 0..tk {
                        if exps[j] > 0.0 {
                            acc += exps[j] / z * vp[j][h * hd + d];
                        }
                    }
                    merged[i][h * hd + d] = acc;
                }
            }
        }
        let out_oracle = proj(&merged, &wo, &bo);
        for i in 0..tq {
            for d in 0..dim {
                let g = got[i * dim + d];
                let o = out_oracle[i][d];
                assert!((g - o).abs() <= 1e-5, "({i},{d}): {g} vs {o}");
            }
        }
        Ok(())
    }

    #[test]
    fn unit_with_all_ones_masks_equals_unmasked_pass() -> Result<()> {
        let dev = Device::Cpu;
        let store = ParamStore::new(5, DType::F32, dev.clone());
        let cfg = test_config();
        let unit = DecoderUnit::new(&cfg, &store.root().sub("u"))?;
        let mut r = crate::rng::rng_for(11, &[]);
        let mut tf32 = |n: usize, shape: (usize, usize, usize)| -> Result<Tensor> {
            let v: Vec<f32> = crate::rng::normal_vec(&mut r, n).iter().map(|x| *x as f32).collect();
            Ok(Tensor::from_vec(v, shape, &dev)?)
        };
        let f = tf32(16 * 128, (1, 16, 128))?;
        let f_qf = tf32(8 * 128, (1, 8, 128))?;
        let h2 = tf32(48 * 128, (1, 48, 128))?;
        let h3 = tf32(12 * 128, (1, 12, 128))?;
        let ones = |tk: usize| Tensor::ones((1, 16, tk), DType::F32, &dev);
        let a = unit.forward(&f, &f_qf, &h2, &h3, None, None, None)?;
        let m1 = ones(8)?;
        let m2a = ones(48)?;
        let m2b = ones(12)?;
        let b = unit.forward(&f, &f_qf, &h2, &h3, Some(&m1), Some(&m2a), Some(&m2b))?;
        let diff = (&a - &b)?.abs()?.max_all()?.to_scalar::<f32>()?;
        assert!(diff < 1e-5, "diff {diff}");
        Ok(())
    }

    #[test]
    fn rejects_wrong_semantic_width() -> Result<()> {
        let (_s, srm) = build();
        let f_qf = Tensor::zeros((1, 5, 128), DType::F32, &Device::Cpu)?;
        assert!(srm.run(&reference(), &f_qf).is_err());
        Ok(())
    }
}
