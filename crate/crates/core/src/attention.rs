//! Multi-head attention, pre-norm residual blocks and sinusoidal positions.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::moe::{MoeConfig, MoeLayer, RouterDecision};
use crate::nn::{Ctx, FeedForward, LayerNorm, Linear};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionBlockConfig {
    pub model_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub causal: bool,
}

impl AttentionBlockConfig {
    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.num_heads == 0 || self.ffn_dim == 0 {
            return Err(Error::Config("attention dimensions must be positive".into()));
        }
        if self.model_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} is not divisible by num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }
}

/// Sinusoid at a real-valued position: `sin(p·ω_i)` on even dims and
/// `cos(p·ω_i)` on odd dims with `ω_i = 10000^(-2i/d)`.
pub fn sinusoid<T: Real>(position: f64, dim: usize) -> Vec<T> {
    (0..dim)
        .map(|j| {
            let i = (j / 2) as f64;
            let angle = position / 10000f64.powf(2.0 * i / dim as f64);
            T::of(if j % 2 == 0 { angle.sin() } else { angle.cos() })
        })
        .collect()
}

/// `[len, dim]` table whose row `p` encodes position `p`.
pub fn positional_encoding<T: Real>(len: usize, dim: usize) -> Tensor<T> {
    encodings_at(&(0..len).map(|p| p as f64).collect::<Vec<_>>(), dim)
}

/// One encoding row per entry of `positions`.
pub fn encodings_at<T: Real>(positions: &[f64], dim: usize) -> Tensor<T> {
    let data = positions.iter().flat_map(|&p| sinusoid::<T>(p, dim)).collect();
    Tensor::new(&[positions.len(), dim], data).expect("at least one position")
}

/// Additive mask that hides positions `j > i`.
pub fn causal_mask<T: Real>(len: usize) -> Tensor<T> {
    Tensor::from_fn(&[len, len], |k| {
        if k % len > k / len {
            T::neg_infinity()
        } else {
            T::zero()
        }
    })
}

/// Query/key/value/output projections for scaled dot-product attention.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub num_heads: usize,
}

/// Output of an attention call with the per-head weight matrices.
pub struct Attended<'t, T: Real> {
    pub output: Var<'t, T>,
    /// `[Lq, Lk]` per head; rows sum to one.
    pub weights: Vec<Var<'t, T>>,
}

impl MultiHeadAttention {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        dim: usize,
        num_heads: usize,
    ) -> Self {
        Self {
            query: Linear::new(store, rng, &format!("{name}.query"), dim, dim, true),
            key: Linear::new(store, rng, &format!("{name}.key"), dim, dim, true),
            value: Linear::new(store, rng, &format!("{name}.value"), dim, dim, true),
            output: Linear::new(store, rng, &format!("{name}.output"), dim, dim, true),
            num_heads,
        }
    }

    pub fn dim(&self) -> usize {
        self.query.in_dim
    }

    /// `queries [Lq, d]` attend over `context [Lk, d]`.
    pub fn attend<'t, T: Real>(
        &self,
        ctx: Ctx<'t, T>,
        queries: Var<'t, T>,
        context: Var<'t, T>,
        causal: bool,
    ) -> Result<Attended<'t, T>> {
        let (sq, sk) = (queries.shape(), context.shape());
        let d = self.dim();
        if sq.len() != 2 || sk.len() != 2 || sq[1] != d || sk[1] != d {
            return Err(Error::Shape {
                op: "attention",
                lhs: sq,
                rhs: sk,
            });
        }
        if causal && sq[0] != sk[0] {
            return Err(Error::Shape {
                op: "causal attention",
                lhs: sq,
                rhs: sk,
            });
        }
        let q = self.query.forward(ctx, queries)?;
        let k = self.key.forward(ctx, context)?;
        let v = self.value.forward(ctx, context)?;
        let hd = d / self.num_heads;
        let scale = T::of(1.0 / (hd as f64).sqrt());
        let mask = causal.then(|| ctx.constant(causal_mask(sq[0])));
        let mut heads = Vec::with_capacity(self.num_heads);
        let mut weights = Vec::with_capacity(self.num_heads);
        for h in 0..self.num_heads {
            let (qh, kh, vh) = if self.num_heads == 1 {
                (q, k, v)
            } else {
                (q.narrow(1, h * hd, hd)?, k.narrow(1, h * hd, hd)?, v.narrow(1, h * hd, hd)?)
            };
            let mut scores = qh.matmul_t(kh)?.scale(scale);
            if let Some(m) = mask {
                scores = scores.add(m)?;
            }
            let w = scores.softmax_last()?;
            heads.push(w.matmul(vh)?);
            weights.push(w);
        }
        let merged = if heads.len() == 1 {
            heads[0]
        } else {
            Var::concat(&heads, 1)?
        };
        Ok(Attended {
            output: self.output.forward(ctx, merged)?,
            weights,
        })
    }
}

/// Self-attention of `x [L, d]` over itself.
pub fn self_attention<'t, T: Real>(
    ctx: Ctx<'t, T>,
    attn: &MultiHeadAttention,
    x: Var<'t, T>,
    causal: bool,
) -> Result<Attended<'t, T>> {
    ctx.tape.record(|s| s.self_attention_calls += 1);
    attn.attend(ctx, x, x, causal)
}

/// `queries [Q, d]` attend over `context [L, d]`; output is `[Q, d]` for any `L`.
pub fn cross_attention<'t, T: Real>(
    ctx: Ctx<'t, T>,
    attn: &MultiHeadAttention,
    queries: Var<'t, T>,
    context: Var<'t, T>,
) -> Result<Attended<'t, T>> {
    ctx.tape.record(|s| s.cross_attention_calls += 1);
    attn.attend(ctx, queries, context, false)
}

/// `x + SelfAttn(LN(x))`.
#[derive(Clone, Debug)]
pub struct SelfAttentionBlock {
    pub norm: LayerNorm,
    pub attn: MultiHeadAttention,
    pub causal: bool,
}

impl SelfAttentionBlock {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        cfg: &AttentionBlockConfig,
    ) -> Self {
        Self {
            norm: LayerNorm::new(store, &format!("{name}.norm"), cfg.model_dim),
            attn: MultiHeadAttention::new(store, rng, &format!("{name}.attn"), cfg.model_dim, cfg.num_heads),
            causal: cfg.causal,
        }
    }

    pub fn forward<'t, T: Real>(&self, ctx: Ctx<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let h = self.norm.forward(ctx, x)?;
        let a = self_attention(ctx, &self.attn, h, self.causal)?;
        x.add(a.output)
    }
}

/// `q + CrossAttn(LN(q), context)`.
#[derive(Clone, Debug)]
pub struct CrossAttentionBlock {
    pub norm: LayerNorm,
    pub attn: MultiHeadAttention,
}

impl CrossAttentionBlock {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        cfg: &AttentionBlockConfig,
    ) -> Self {
        Self {
            norm: LayerNorm::new(store, &format!("{name}.norm"), cfg.model_dim),
            attn: MultiHeadAttention::new(store, rng, &format!("{name}.attn"), cfg.model_dim, cfg.num_heads),
        }
    }

    pub fn forward<'t, T: Real>(
        &self,
        ctx: Ctx<'t, T>,
        queries: Var<'t, T>,
        context: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let h = self.norm.forward(ctx, queries)?;
        let a = cross_attention(ctx, &self.attn, h, context)?;
        queries.add(a.output)
    }
}

/// Feed-forward sublayer: a plain FFN or a mixture of experts.
#[derive(Clone, Debug)]
pub enum FfnKind {
    Dense(FeedForward),
    Moe(MoeLayer),
}

/// `x + FFN(LN(x))`.
#[derive(Clone, Debug)]
pub struct FfnBlock {
    pub norm: LayerNorm,
    pub ffn: FfnKind,
}

impl FfnBlock {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        cfg: &AttentionBlockConfig,
        moe: Option<MoeConfig>,
    ) -> Self {
        let ffn = match moe {
            Some(m) => FfnKind::Moe(MoeLayer::new(store, rng, &format!("{name}.moe"), cfg.model_dim, cfg.ffn_dim, m)),
            None => FfnKind::Dense(FeedForward::new(store, rng, &format!("{name}.ffn"), cfg.model_dim, cfg.ffn_dim)),
        };
        Self {
            norm: LayerNorm::new(store, &format!("{name}.norm"), cfg.model_dim),
            ffn,
        }
    }

    /// Residual output; routing decisions are appended to `routing`.
    pub fn forward<'t, T: Real>(
        &self,
        ctx: Ctx<'t, T>,
        x: Var<'t, T>,
        routing: &mut Vec<RouterDecision<T>>,
    ) -> Result<Var<'t, T>> {
        let h = self.norm.forward(ctx, x)?;
        let y = match &self.ffn {
            FfnKind::Dense(f) => f.forward(ctx, h)?,
            FfnKind::Moe(m) => {
                let (y, d) = m.forward(ctx, h)?;
                routing.extend(d);
                y
            }
        };
        x.add(y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn position_zero_is_sin0_cos0() {
        let pe = positional_encoding::<f64>(4, 8);
        assert_eq!(pe.row(0), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        let diff: f64 = pe.row(0).iter().zip(pe.row(1)).map(|(a, b)| (a - b).powi(2)).sum();
        assert!(diff > 0.0);
    }

    #[test]
    fn shorter_table_is_a_prefix() {
        let short = positional_encoding::<f32>(16, 32);
        let long = positional_encoding::<f32>(64, 32);
        assert_eq!(short.data(), &long.data()[..16 * 32]);
    }

    #[test]
    fn config_requires_divisible_heads() {
        let cfg = AttentionBlockConfig {
            model_dim: 30,
            num_heads: 4,
            ffn_dim: 8,
            causal: false,
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn causal_mask_shape() {
        let m = causal_mask::<f32>(3);
        assert_eq!(m.data()[1], f32::NEG_INFINITY);
        assert_eq!(m.data()[3], 0.0);
        assert_eq!(m.data()[8], 0.0);
    }
}
