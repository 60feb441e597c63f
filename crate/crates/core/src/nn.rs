//! Small neural-net building blocks shared by the conditioning branches and
//! the denoiser: parameter-store backed layers, numerically stable softmax,
//! multi-head attention with optional key masking, and a couple of exact
//! resamplers.

use candle_core::{DType, Tensor, D};
use candle_nn::{Conv2d, Conv2dConfig, GroupNorm, Linear, Module};

use crate::error::{Error, Result};
use crate::params::{Init, Scope};

pub fn linear(scope: &Scope, name: &str, in_dim: usize, out_dim: usize) -> Result<Linear> {
    let s = scope.sub(name);
    let w = s.take("weight", &[out_dim, in_dim], Init::FanIn(in_dim))?;
    let b = s.take("bias", &[out_dim], Init::FanIn(in_dim))?;
    Ok(Linear::new(w, Some(b)))
}

/// A linear layer whose weight and bias start at exactly zero, used to gate
/// new branches in so that they contribute nothing at initialization.
pub fn linear_zero(scope: &Scope, name: &str, in_dim: usize, out_dim: usize) -> Result<Linear> {
    let s = scope.sub(name);
    let w = s.take("weight", &[out_dim, in_dim], Init::Zeros)?;
    let b = s.take("bias", &[out_dim], Init::Zeros)?;
    Ok(Linear::new(w, Some(b)))
}

pub fn conv2d(
    scope: &Scope,
    name: &str,
    in_c: usize,
    out_c: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<Conv2d> {
    let s = scope.sub(name);
    let fan_in = in_c * kernel * kernel;
    let w = s.take("weight", &[out_c, in_c, kernel, kernel], Init::FanIn(fan_in))?;
    let b = s.take("bias", &[out_c], Init::FanIn(fan_in))?;
    let cfg = Conv2dConfig {
        padding,
        stride,
        ..Default::default()
    };
    Ok(Conv2d::new(w, Some(b), cfg))
}

/// Layer norm spelled out with elementwise ops; the fused library kernel
/// only covers the half and single float types, and the gradient checks
/// run these blocks in f64.
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let n = x.dim(D::Minus1)? as f64;
        let mean = (x.sum_keepdim(D::Minus1)? / n)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = (centered.sqr()?.sum_keepdim(D::Minus1)? / n)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed
            .broadcast_mul(&self.weight)?
            .broadcast_add(&self.bias)?)
    }
}

pub fn layer_norm(scope: &Scope, name: &str, dim: usize) -> Result<LayerNorm> {
    let s = scope.sub(name);
    Ok(LayerNorm {
        weight: s.take("weight", &[dim], Init::Ones)?,
        bias: s.take("bias", &[dim], Init::Zeros)?,
        eps: 1e-5,
    })
}

pub fn group_norm(scope: &Scope, name: &str, channels: usize, groups: usize) -> Result<GroupNorm> {
    let s = scope.sub(name);
    let w = s.take("weight", &[channels], Init::Ones)?;
    let b = s.take("bias", &[channels], Init::Zeros)?;
    Ok(GroupNorm::new(w, b, channels, groups, 1e-5).map_err(Error::from)?)
}

/// Softmax over the last dimension with the row maximum subtracted before
/// exponentiation. The subtracted maximum is detached so it acts as a pure
/// numeric shift.
pub fn softmax_stable(x: &Tensor) -> Result<Tensor> {
    let m = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&m)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&s)?)
}

fn neg_inf_like(t: &Tensor) -> Result<Tensor> {
    let out = match t.dtype() {
        DType::F64 => Tensor::full(f64::NEG_INFINITY, t.shape(), t.device())?,
        _ => Tensor::full(f32::NEG_INFINITY, t.shape(), t.device())?.to_dtype(t.dtype())?,
    };
    Ok(out)
}

#[cfg(debug_assertions)]
pub fn debug_assert_finite(t: &Tensor, context: &str) -> Result<()> {
    let bad = t
        .ne(t)?
        .to_dtype(DType::F32)?
        .sum_all()?
        .to_scalar::<f32>()?;
    if bad > 0.0 {
        return Err(Error::msg(format!("{context}: produced NaN")));
    }
    Ok(())
}

#[cfg(not(debug_assertions))]
pub fn debug_assert_finite(_t: &Tensor, _context: &str) -> Result<()> {
    Ok(())
}

/// Converts a soft key mask in `[0, 1]` of shape `[batch, queries, keys]`
/// into the u8 mask actually applied to attention logits: entries are
/// binarized at `threshold`, and a query row left with no admissible key
/// falls back to attending everywhere instead of producing NaN.
pub fn effective_attention_mask(mask: &Tensor, threshold: f64) -> Result<Tensor> {
    let bin = mask.ge(threshold)?.to_dtype(mask.dtype())?;
    let any = bin.max_keepdim(D::Minus1)?;
    let fallback = any.broadcast_as(bin.shape())?.affine(-1.0, 1.0)?;
    Ok(bin.maximum(&fallback)?.gt(0.5)?)
}

/// Scaled dot-product attention over pre-split heads.
///
/// `q`, `k`, `v` are `[batch, heads, tokens, head_dim]`; `mask` is an
/// optional u8 tensor broadcastable to `[batch, heads, q_tokens, k_tokens]`
/// where zero entries are excluded from the softmax.
pub fn sdpa(q: &Tensor, k: &Tensor, v: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
    let head_dim = q.dim(D::Minus1)?;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let logits = (q.contiguous()?.matmul(&k.transpose(D::Minus2, D::Minus1)?.contiguous()?)?
        * scale)?;
    let logits = match mask {
        Some(m) => {
            let m = m.broadcast_as(logits.shape())?;
            m.where_cond(&logits, &neg_inf_like(&logits)?)?
        }
        None => logits,
    };
    let attn = softmax_stable(&logits)?;
    Ok(attn.matmul(&v.contiguous()?)?)
}

pub fn split_heads(x: &Tensor, heads: usize) -> Result<Tensor> {
    let (b, t, c) = x.dims3()?;
    if c % heads != 0 {
        return Err(Error::shape(
            "split_heads",
            format!("width divisible by {heads} heads"),
            format!("{c}"),
        ));
    }
    Ok(x.reshape((b, t, heads, c / heads))?.transpose(1, 2)?)
}

pub fn merge_heads(x: &Tensor) -> Result<Tensor> {
    let (b, h, t, d) = x.dims4()?;
    Ok(x.transpose(1, 2)?.reshape((b, t, h * d))?)
}

/// Multi-head attention with separate query and key/value input widths.
/// The output width matches the query width.
pub struct MultiHeadAttention {
    q: Option<Linear>,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
}

impl MultiHeadAttention {
    pub fn new(scope: &Scope, name: &str, q_dim: usize, kv_dim: usize, heads: usize) -> Result<Self> {
        let s = scope.sub(name);
        Ok(MultiHeadAttention {
            q: Some(linear(&s, "q", q_dim, q_dim)?),
            k: linear(&s, "k", kv_dim, q_dim)?,
            v: linear(&s, "v", kv_dim, q_dim)?,
            out: linear(&s, "out", q_dim, q_dim)?,
            heads,
        })
    }

    /// A head without its own query projection; queries must be supplied
    /// already projected and split, via [`MultiHeadAttention::attend`]. Used
    /// where two attention branches share one query matrix.
    pub fn without_q(
        scope: &Scope,
        name: &str,
        q_dim: usize,
        kv_dim: usize,
        heads: usize,
    ) -> Result<Self> {
        let s = scope.sub(name);
        Ok(MultiHeadAttention {
            q: None,
            k: linear(&s, "k", kv_dim, q_dim)?,
            v: linear(&s, "v", kv_dim, q_dim)?,
            out: linear(&s, "out", q_dim, q_dim)?,
            heads,
        })
    }

    pub fn project_q(&self, q_in: &Tensor) -> Result<Tensor> {
        let q = self
            .q
            .as_ref()
            .ok_or_else(|| Error::msg("attention head has no query projection"))?;
        split_heads(&q.forward(q_in)?, self.heads)
    }

    /// Runs attention with externally projected queries of shape
    /// `[batch, heads, tokens, head_dim]`.
    pub fn attend(&self, q_heads: &Tensor, kv_in: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        let k = split_heads(&self.k.forward(kv_in)?, self.heads)?;
        let v = split_heads(&self.v.forward(kv_in)?, self.heads)?;
        let mask = match mask {
            Some(m) => Some(m.unsqueeze(1)?),
            None => None,
        };
        let o = sdpa(q_heads, &k, &v, mask.as_ref())?;
        Ok(self.out.forward(&merge_heads(&o)?)?)
    }

    pub fn forward(&self, q_in: &Tensor, kv_in: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        let q = self.project_q(q_in)?;
        self.attend(&q, kv_in, mask)
    }
}

pub struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    pub fn new(scope: &Scope, name: &str, dim: usize, hidden: usize, out: usize) -> Result<Self> {
        let s = scope.sub(name);
        Ok(Mlp {
            fc1: linear(&s, "fc1", dim, hidden)?,
            fc2: linear(&s, "fc2", hidden, out)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.fc2.forward(&self.fc1.forward(x)?.gelu()?)?)
    }
}

/// Pre-norm transformer block: self-attention and a feed-forward, each with
/// a residual connection.
pub struct TransformerBlock {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    ffn: Mlp,
}

impl TransformerBlock {
    pub fn new(scope: &Scope, name: &str, dim: usize, heads: usize) -> Result<Self> {
        let s = scope.sub(name);
        Ok(TransformerBlock {
            ln1: layer_norm(&s, "ln1", dim)?,
            attn: MultiHeadAttention::new(&s, "attn", dim, dim, heads)?,
            ln2: layer_norm(&s, "ln2", dim)?,
            ffn: Mlp::new(&s, "ffn", dim, dim * 4, dim)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.ln1.forward(x)?;
        let x = (x + self.attn.forward(&h, &h, None)?)?;
        let h = self.ln2.forward(&x)?;
        Ok((&x + self.ffn.forward(&h)?)?)
    }
}

/// Exact nearest-neighbor 2x upsampling in both spatial dimensions,
/// implemented as a reshape/broadcast so the backward pass is the plain sum
/// over duplicated cells.
pub fn upsample2x(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x
        .reshape((b, c, h, 1, w, 1))?
        .broadcast_as((b, c, h, 2, w, 2))?
        .contiguous()?
        .reshape((b, c, 2 * h, 2 * w))?)
}

/// Nearest-neighbor 2x upsampling along width only.
pub fn upsample_w2x(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x
        .reshape((b, c, h, w, 1))?
        .broadcast_as((b, c, h, w, 2))?
        .contiguous()?
        .reshape((b, c, h, 2 * w))?)
}

/// Area-average downsampling by an integer factor per axis. Inputs whose
/// extent is not divisible by the factor are rejected.
pub fn downsample_area(x: &Tensor, fh: usize, fw: usize) -> Result<Tensor> {
    let (_b, _c, h, w) = x.dims4()?;
    if fh == 0 || fw == 0 || h % fh != 0 || w % fw != 0 {
        return Err(Error::shape(
            "downsample_area",
            format!("spatial dims divisible by ({fh}, {fw})"),
            format!("({h}, {w})"),
        ));
    }
    if fh == 1 && fw == 1 {
        return Ok(x.clone());
    }
    Ok(x.avg_pool2d((fh, fw))?)
}

/// Classic sinusoidal embedding of integer timesteps.
pub fn timestep_embedding(
    ts: &[usize],
    dim: usize,
    dtype: DType,
    device: &candle_core::Device,
) -> Result<Tensor> {
    if dim % 2 != 0 {
        return Err(Error::Config(format!(
            "timestep embedding width must be even, got {dim}"
        )));
    }
    let half = dim / 2;
    let denom = (half.saturating_sub(1)).max(1) as f64;
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / denom).exp();
            data.push((t as f64 * freq).sin());
        }
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / denom).exp();
            data.push((t as f64 * freq).cos());
        }
    }
    Ok(Tensor::from_vec(data, (ts.len(), dim), device)?.to_dtype(dtype)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use candle_core::Device;

    fn store() -> ParamStore {
        ParamStore::new(42, DType::F64, Device::Cpu)
    }

    #[test]
    fn softmax_rows_sum_to_one() -> Result<()> {
        let x = Tensor::from_vec(
            vec![1.0f64, 2.0, 3.0, -1.0, 1000.0, 999.0, 998.0, 997.0],
            (2, 4),
            &Device::Cpu,
        )?;
        let s = softmax_stable(&x)?;
        for row in s.sum(D::Minus1)?.to_vec1::<f64>()? {
            assert!((row - 1.0).abs() < 1e-12);
        }
        let v = s.to_vec2::<f64>()?;
        assert!(v[1][0] > v[1][1] && v[1][1] > v[1][2]);
        Ok(())
    }

    #[test]
    fn sdpa_matches_naive_loops() -> Result<()> {
        let dev = Device::Cpu;
        let (b, h, tq, tk, hd) = (1, 2, 3, 4, 5);
        let mut r = crate::rng::rng_for(5, &[]);
        let q = Tensor::from_vec(crate::rng::normal_vec(&mut r, b * h * tq * hd), (b, h, tq, hd), &dev)?;
        let k = Tensor::from_vec(crate::rng::normal_vec(&mut r, b * h * tk * hd), (b, h, tk, hd), &dev)?;
        let v = Tensor::from_vec(crate::rng::normal_vec(&mut r, b * h * tk * hd), (b, h, tk, hd), &dev)?;
        let got = sdpa(&q, &k, &v, None)?.squeeze(0)?.to_vec3::<f64>()?;

        let qv = q.flatten_all()?.to_vec1::<f64>()?;
        let kv = k.flatten_all()?.to_vec1::<f64>()?;
        let vv = v.flatten_all()?.to_vec1::<f64>()?;
        let scale = 1.0 / (hd as f64).sqrt();
        for hh in 0..h {
            for i in 0..tq {
                let mut logits = vec![0.0f64; tk];
                for j in 0..tk {
                    let mut dot = 0.0;
                    for d in 0..hd {
                        dot += qv[(hh * tq + i) * hd + d] * kv[(hh * tk + j) * hd + d];
                    }
                    logits[j] = dot * scale;
                }
                let m = logits.iter().cloned().fold(f64::MIN, f64::max);
                let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
                let z: f64 = exps.iter().sum();
                for d in 0..hd {
                    let mut o = 0.0;
                    for j in 0..tk {
                        o += exps[j] / z * vv[(hh * tk + j) * hd + d];
                    }
                    assert!((o - got[hh][i][d]).abs() < 1e-10);
                }
            }
        }
        Ok(())
    }

    #[test]
    fn empty_mask_rows_fall_back_to_full_attention() -> Result<()> {
        let dev = Device::Cpu;
        let mask = Tensor::from_vec(vec![0.9f64, 0.2, 0.0, 0.0, 0.0, 0.49], (1, 2, 3), &dev)?;
        let eff = effective_attention_mask(&mask, 0.5)?.to_dtype(DType::F64)?;
        let v = eff.to_vec3::<f64>()?;
        assert_eq!(v[0][0], vec![1.0, 0.0, 0.0]);
        assert_eq!(v[0][1], vec![1.0, 1.0, 1.0]);
        Ok(())
    }

    #[test]
    fn all_ones_mask_equals_unmasked() -> Result<()> {
        let dev = Device::Cpu;
        let store = store();
        let mha = MultiHeadAttention::new(&store.root(), "mha", 8, 6, 2)?;
        let mut r = crate::rng::rng_for(6, &[]);
        let q = Tensor::from_vec(crate::rng::normal_vec(&mut r, 2 * 3 * 8), (2, 3, 8), &dev)?;
        let kv = Tensor::from_vec(crate::rng::normal_vec(&mut r, 2 * 5 * 6), (2, 5, 6), &dev)?;
        let ones = Tensor::ones((2, 3, 5), DType::U8, &dev)?;
        let a = mha.forward(&q, &kv, None)?;
        let b = mha.forward(&q, &kv, Some(&ones))?;
        let diff = (&a - &b)?.abs()?.max_all()?.to_scalar::<f64>()?;
        assert!(diff < 1e-5, "diff {diff}");
        Ok(())
    }

    #[test]
    fn upsample_doubles_each_cell() -> Result<()> {
        let x = Tensor::from_vec(vec![1.0f64, 2.0, 3.0, 4.0], (1, 1, 2, 2), &Device::Cpu)?;
        let up = upsample2x(&x)?;
        assert_eq!(
            up.flatten_all()?.to_vec1::<f64>()?,
            vec![1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
        );
        let uw = upsample_w2x(&x)?;
        assert_eq!(uw.dims(), &[1, 1, 2, 4]);
        assert_eq!(
            uw.flatten_all()?.to_vec1::<f64>()?,
            vec![1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0]
        );
        Ok(())
    }

    #[test]
    fn downsample_area_averages_blocks() -> Result<()> {
        let x = Tensor::from_vec(
            (0..16).map(|v| v as f64).collect::<Vec<_>>(),
            (1, 1, 4, 4),
            &Device::Cpu,
        )?;
        let d = downsample_area(&x, 2, 2)?;
        assert_eq!(d.flatten_all()?.to_vec1::<f64>()?, vec![2.5, 4.5, 10.5, 12.5]);
        assert!(downsample_area(&x, 3, 2).is_err());
        Ok(())
    }

    #[test]
    fn timestep_embedding_is_deterministic_and_distinct() -> Result<()> {
        let a = timestep_embedding(&[1, 500], 64, DType::F32, &Device::Cpu)?;
        let b = timestep_embedding(&[1, 500], 64, DType::F32, &Device::Cpu)?;
        assert_eq!(a.to_vec2::<f32>()?, b.to_vec2::<f32>()?);
        let rows = a.to_vec2::<f32>()?;
        assert_ne!(rows[0], rows[1]);
        assert_eq!(rows[0].len(), 64);
        Ok(())
    }
}
