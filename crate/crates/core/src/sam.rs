//! Semantic abstraction of the reference image.
//!
//! A frozen, seeded convolutional encoder stands in for a large pretrained
//! vision backbone: it maps the reference image to one global token and a
//! grid of patch tokens. A small query transformer then distills the patch
//! tokens, together with a learned per-category embedding table, into a
//! fixed number of semantic tokens. The conditioning sequence handed to the
//! denoiser is the projected global token followed by those query tokens.

use candle_core::{DType, Tensor};
use candle_nn::{Conv2d, Linear, Module};

use crate::datagen::Category;
use crate::error::{Error, Result};
use crate::nn::{self, LayerNorm};
use crate::params::{Init, Scope};

#[derive(Debug, Clone, Copy)]
pub struct SamConfig {
    /// Token width used across the conditioning branches.
    pub d: usize,
    /// Number of learned semantic queries.
    pub n_queries: usize,
    /// Embedding tokens per garment category.
    pub cat_tokens: usize,
    /// Query-transformer depth.
    pub depth: usize,
    pub heads: usize,
    /// Total stride of the frozen encoder; reference dims must divide by it.
    pub patch: usize,
}

impl Default for SamConfig {
    fn default() -> Self {
        SamConfig {
            d: 128,
            n_queries: 8,
            cat_tokens: 4,
            depth: 2,
            heads: 4,
            patch: 16,
        }
    }
}

impl SamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.d % self.heads != 0 {
            return Err(Error::Config(format!(
                "token width {} must be a positive multiple of {} heads",
                self.d, self.heads
            )));
        }
        if self.n_queries == 0 || self.cat_tokens == 0 || self.depth == 0 {
            return Err(Error::Config("semantic branch sizes must be positive".into()));
        }
        if self.patch != 16 {
            return Err(Error::Config(format!(
                "frozen encoder stride is fixed at 16, got {}",
                self.patch
            )));
        }
        Ok(())
    }
}

/// Token-wise standardization (mean 0, variance 1 over the channel axis),
/// parameter free.
fn normalize_tokens(t: &Tensor) -> Result<Tensor> {
    let mean = t.mean_keepdim(candle_core::D::Minus1)?;
    let centered = t.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(candle_core::D::Minus1)?;
    Ok(centered.broadcast_div(&(var + 1e-6)?.sqrt()?)?)
}

struct FrozenEncoder {
    convs: Vec<Conv2d>,
    proj_g: Linear,
    patch: usize,
}

impl FrozenEncoder {
    fn new(cfg: &SamConfig, scope: &Scope) -> Result<Self> {
        let s = scope.sub("frozen");
        let widths = [3, cfg.d / 4, cfg.d / 2, cfg.d / 2, cfg.d];
        let mut convs = Vec::new();
        for i in 0..4 {
            let (ci, co) = (widths[i], widths[i + 1]);
            let fan_in = ci * 9;
            let cs = s.sub(&format!("conv{i}"));
            let w = cs.take_frozen("weight", &[co, ci, 3, 3], Init::FanIn(fan_in))?;
            let b = cs.take_frozen("bias", &[co], Init::FanIn(fan_in))?;
            convs.push(Conv2d::new(
                w,
                Some(b),
                candle_nn::Conv2dConfig {
                    padding: 1,
                    stride: 2,
                    ..Default::default()
                },
            ));
        }
        let gs = s.sub("global");
        let w = gs.take_frozen("weight", &[cfg.d, cfg.d], Init::FanIn(cfg.d))?;
        let b = gs.take_frozen("bias", &[cfg.d], Init::FanIn(cfg.d))?;
        Ok(FrozenEncoder {
            convs,
            proj_g: Linear::new(w, Some(b)),
            patch: cfg.patch,
        })
    }

    /// Returns the global token `[B, 1, D]` and patch tokens `[B, L, D]`.
    /// Outputs are detached: nothing upstream of them ever trains.
    fn forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let (b, c, h, w) = x.dims4()?;
        if c != 3 || h % self.patch != 0 || w % self.patch != 0 {
            return Err(Error::shape(
                "frozen encoder input",
                format!("[B, 3, {0}k, {0}m]", self.patch),
                format!("{:?}", x.dims()),
            ));
        }
        let mut h_t = x.clone();
        for (i, conv) in self.convs.iter().enumerate() {
            h_t = conv.forward(&h_t)?;
            if i + 1 < self.convs.len() {
                h_t = h_t.gelu()?;
            }
        }
        let (_, d, hh, ww) = h_t.dims4()?;
        let tokens = h_t.reshape((b, d, hh * ww))?.transpose(1, 2)?;
        let tokens = normalize_tokens(&tokens)?.detach();
        let global = self.proj_g.forward(&tokens.mean_keepdim(1)?)?;
        let global = normalize_tokens(&global)?.detach();
        Ok((global, tokens))
    }
}

struct QFormerBlock {
    ln1: LayerNorm,
    self_attn: nn::MultiHeadAttention,
    ln2: LayerNorm,
    cross: nn::MultiHeadAttention,
    ln3: LayerNorm,
    ffn: nn::Mlp,
}

impl QFormerBlock {
    fn new(cfg: &SamConfig, scope: &Scope) -> Result<Self> {
        Ok(QFormerBlock {
            ln1: nn::layer_norm(scope, "ln1", cfg.d)?,
            self_attn: nn::MultiHeadAttention::new(scope, "self_attn", cfg.d, cfg.d, cfg.heads)?,
            ln2: nn::layer_norm(scope, "ln2", cfg.d)?,
            cross: nn::MultiHeadAttention::new(scope, "cross", cfg.d, cfg.d, cfg.heads)?,
            ln3: nn::layer_norm(scope, "ln3", cfg.d)?,
            ffn: nn::Mlp::new(scope, "ffn", cfg.d, cfg.d * 4, cfg.d)?,
        })
    }

    fn forward(&self, q: &Tensor, ctx: &Tensor) -> Result<Tensor> {
        let h = self.ln1.forward(q)?;
        let q = (q + self.self_attn.forward(&h, &h, None)?)?;
        let q = (&q + self.cross.forward(&self.ln2.forward(&q)?, ctx, None)?)?;
        Ok((&q + self.ffn.forward(&self.ln3.forward(&q)?)?)?)
    }
}

pub struct SamOutput {
    /// `[B, 1 + N, D]`: projected global token, then query tokens.
    pub f_sam: Tensor,
    /// `[B, N, D]` query tokens alone; also consumed by the spatial branch.
    pub f_qf: Tensor,
    pub global: Tensor,
    pub patches: Tensor,
}

pub struct SemanticAbstraction {
    cfg: SamConfig,
    frozen: FrozenEncoder,
    queries: Tensor,
    categories: Tensor,
    blocks: Vec<QFormerBlock>,
    proj_g: Linear,
}

impl SemanticAbstraction {
    pub fn new(cfg: SamConfig, scope: &Scope) -> Result<Self> {
        cfg.validate()?;
        let s = scope.sub("sam");
        let frozen = FrozenEncoder::new(&cfg, &s)?;
        let queries = s.take("queries", &[cfg.n_queries, cfg.d], Init::Normal(0.02))?;
        let categories = s.take(
            "categories",
            &[Category::ALL.len(), cfg.cat_tokens, cfg.d],
            Init::Normal(0.02),
        )?;
        let mut blocks = Vec::new();
        for i in 0..cfg.depth {
            blocks.push(QFormerBlock::new(&cfg, &s.sub(&format!("block{i}")))?);
        }
        let proj_g = nn::linear(&s, "proj_g", cfg.d, cfg.d)?;
        Ok(SemanticAbstraction {
            cfg,
            frozen,
            queries,
            categories,
            blocks,
            proj_g,
        })
    }

    pub fn config(&self) -> &SamConfig {
        &self.cfg
    }

    /// Runs the frozen backbone only.
    pub fn encode_reference(&self, x_ref: &Tensor) -> Result<(Tensor, Tensor)> {
        self.frozen.forward(x_ref)
    }

    fn category_ids(&self, cats: &[Category], device: &candle_core::Device) -> Result<Tensor> {
        let ids: Vec<u32> = cats.iter().map(|c| c.index() as u32).collect();
        Ok(Tensor::from_vec(ids, cats.len(), device)?)
    }

    /// Full pass: frozen encoding, query filtering, assembly of the
    /// conditioning sequence.
    pub fn forward(&self, x_ref: &Tensor, cats: &[Category]) -> Result<SamOutput> {
        let (b, _, _, _) = x_ref.dims4()?;
        if cats.len() != b {
            return Err(Error::shape(
                "semantic branch categories",
                format!("{b}"),
                format!("{}", cats.len()),
            ));
        }
        let (global, patches) = self.frozen.forward(x_ref)?;
        let ids = self.category_ids(cats, x_ref.device())?;
        let t_p = self.categories.index_select(&ids.to_dtype(DType::U32)?, 0)?;
        let ctx = Tensor::cat(&[&patches, &t_p], 1)?;
        let mut q = self
            .queries
            .unsqueeze(0)?
            .broadcast_as((b, self.cfg.n_queries, self.cfg.d))?
            .contiguous()?;
        for block in &self.blocks {
            q = block.forward(&q, &ctx)?;
        }
        let f_qf = q;
        let g_proj = self.proj_g.forward(&global)?;
        let f_sam = Tensor::cat(&[&g_proj, &f_qf], 1)?;
        nn::debug_assert_finite(&f_sam, "semantic tokens")?;
        Ok(SamOutput {
            f_sam,
            f_qf,
            global,
            patches,
        })
    }
}
