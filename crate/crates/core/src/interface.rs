//! Vision-language interfaces: map per-frame patch features to a token
//! sequence the language model consumes.
//!
//! * `linear`: per-patch affine projection, `F·P` output tokens (or `P`
//!   with temporal mean pooling).
//! * `qformer_sa`: learnable queries cross-attend over all frames at once,
//!   with self-attention among the queries in every submodule.
//! * `qformer_nosa`: the same stack without self-attention, applied to each
//!   frame separately, followed by an aggregation head over frames.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    encodings_at, AttentionBlockConfig, CrossAttentionBlock, FfnBlock, SelfAttentionBlock,
};
use crate::autograd::Var;
use crate::bank::MemoryBank;
use crate::error::{Error, Result};
use crate::moe::{MoeConfig, MoePlacement, RouterDecision};
use crate::nn::{Ctx, LayerNorm, Linear};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterfaceVariant {
    Linear,
    QformerSa,
    QformerNosa,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    MeanPool,
    AdaptivePool,
    Esa,
}

fn default_submodules() -> usize {
    2
}
fn default_queries() -> usize {
    8
}
fn default_true() -> bool {
    true
}
fn default_esa_layers() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterfaceConfig {
    pub variant: InterfaceVariant,
    /// Stacked Q-Former submodules; ignored by the linear variant.
    #[serde(default = "default_submodules")]
    pub submodules: usize,
    /// Frame aggregation head; present iff the variant is `qformer_nosa`.
    #[serde(default)]
    pub aggregation: Option<Aggregation>,
    #[serde(default = "default_queries")]
    pub num_query_tokens: usize,
    /// Initialize self-attention layers from an auxiliary text pretraining pass.
    #[serde(default)]
    pub pretrained_init: bool,
    #[serde(default)]
    pub moe: Option<MoeConfig>,
    /// Add frame-position encodings to visual tokens.
    #[serde(default = "default_true")]
    pub positional_encoding: bool,
    #[serde(default = "default_esa_layers")]
    pub esa_layers: usize,
    /// Linear variant only: average projected tokens over frames.
    #[serde(default)]
    pub temporal_pool: bool,
}

impl InterfaceConfig {
    pub fn linear() -> Self {
        Self {
            variant: InterfaceVariant::Linear,
            submodules: 1,
            aggregation: None,
            num_query_tokens: default_queries(),
            pretrained_init: false,
            moe: None,
            positional_encoding: true,
            esa_layers: 1,
            temporal_pool: false,
        }
    }

    pub fn linear_mean_pool() -> Self {
        Self {
            temporal_pool: true,
            ..Self::linear()
        }
    }

    pub fn qformer_sa(submodules: usize) -> Self {
        Self {
            variant: InterfaceVariant::QformerSa,
            submodules,
            ..Self::linear()
        }
    }

    pub fn qformer_nosa(submodules: usize, aggregation: Aggregation) -> Self {
        Self {
            variant: InterfaceVariant::QformerNosa,
            submodules,
            aggregation: Some(aggregation),
            ..Self::linear()
        }
    }

    pub fn with_moe(mut self, moe: MoeConfig) -> Self {
        self.moe = Some(moe);
        self
    }

    pub fn with_queries(mut self, q: usize) -> Self {
        self.num_query_tokens = q;
        self
    }

    pub fn is_qformer(&self) -> bool {
        self.variant != InterfaceVariant::Linear
    }

    pub fn validate(&self) -> Result<()> {
        let nosa = self.variant == InterfaceVariant::QformerNosa;
        if nosa != self.aggregation.is_some() {
            return Err(Error::Config(
                "aggregation must be set for qformer_nosa and only for it".into(),
            ));
        }
        if self.is_qformer() && !(1..=12).contains(&self.submodules) {
            return Err(Error::Config(format!(
                "submodules must be in 1..=12 (got {})",
                self.submodules
            )));
        }
        if self.num_query_tokens == 0 {
            return Err(Error::Config("num_query_tokens must be positive".into()));
        }
        if self.temporal_pool && self.is_qformer() {
            return Err(Error::Config("temporal_pool applies to the linear variant only".into()));
        }
        if self.aggregation == Some(Aggregation::Esa) && self.esa_layers == 0 {
            return Err(Error::Config("esa_layers must be positive".into()));
        }
        if let Some(m) = &self.moe {
            m.validate()?;
            if m.placement == MoePlacement::Qformer && !self.is_qformer() {
                return Err(Error::Config("Q-Former MoE needs a Q-Former interface".into()));
            }
        }
        Ok(())
    }
}

/// Widths shared by the interface and the language model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub visual_dim: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
}

impl ModelDims {
    pub fn block(&self, causal: bool) -> AttentionBlockConfig {
        AttentionBlockConfig {
            model_dim: self.model_dim,
            num_heads: self.num_heads,
            ffn_dim: self.ffn_dim,
            causal,
        }
    }
}

/// Frames of one clip with their 1-based frame numbers.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualInput<T: Real = f32> {
    /// `[F, P, d_v]`.
    pub frames: Tensor<T>,
    pub positions: Vec<f64>,
}

impl<T: Real> VisualInput<T> {
    pub fn full(frames: Tensor<T>) -> Self {
        let f = frames.shape()[0];
        Self {
            frames,
            positions: (1..=f).map(|i| i as f64).collect(),
        }
    }

    /// Keeps the frames at the given 0-based indices, in order.
    pub fn subset(frames: &Tensor<T>, indices: &[usize]) -> Result<Self> {
        let s = frames.shape();
        if indices.is_empty() || indices.iter().any(|&i| i >= s[0]) || indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Data(format!("invalid frame subset {indices:?} of {} frames", s[0])));
        }
        let data = indices.iter().flat_map(|&i| frames.row(i).iter().copied()).collect();
        Ok(Self {
            frames: Tensor::new(&[indices.len(), s[1], s[2]], data)?,
            positions: indices.iter().map(|&i| (i + 1) as f64).collect(),
        })
    }

    pub fn num_frames(&self) -> usize {
        self.frames.shape()[0]
    }
}

#[derive(Clone, Debug)]
pub struct QFormerLayer {
    pub cross: CrossAttentionBlock,
    pub self_attn: Option<SelfAttentionBlock>,
    pub ffn: FfnBlock,
}

/// Learnable queries refined by stacked cross-attention submodules.
#[derive(Clone, Debug)]
pub struct QFormer {
    pub queries: ParamId,
    pub query_norm: LayerNorm,
    pub context_proj: Linear,
    pub context_norm: LayerNorm,
    pub layers: Vec<QFormerLayer>,
    pub final_norm: LayerNorm,
    pub positional_encoding: bool,
}

impl QFormer {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        cfg: &InterfaceConfig,
        dims: &ModelDims,
    ) -> Self {
        let block = dims.block(false);
        let moe = cfg.moe.filter(|m| m.placement == MoePlacement::Qformer);
        let queries = store.add_randn(
            format!("{name}.queries"),
            &[cfg.num_query_tokens, dims.model_dim],
            0.02,
            rng,
        );
        let query_norm = LayerNorm::new(store, &format!("{name}.query_norm"), dims.model_dim);
        let context_proj = Linear::new(store, rng, &format!("{name}.context_proj"), dims.visual_dim, dims.model_dim, true);
        let context_norm = LayerNorm::new(store, &format!("{name}.context_norm"), dims.model_dim);
        let layers = (0..cfg.submodules)
            .map(|i| {
                let p = format!("{name}.layer{i}");
                QFormerLayer {
                    cross: CrossAttentionBlock::new(store, rng, &format!("{p}.cross"), &block),
                    self_attn: (cfg.variant == InterfaceVariant::QformerSa)
                        .then(|| SelfAttentionBlock::new(store, rng, &format!("{p}.self"), &block)),
                    ffn: FfnBlock::new(store, rng, &format!("{p}.ffn"), &block, moe),
                }
            })
            .collect();
        Self {
            queries,
            query_norm,
            context_proj,
            context_norm,
            layers,
            final_norm: LayerNorm::new(store, &format!("{name}.final_norm"), dims.model_dim),
            positional_encoding: cfg.positional_encoding,
        }
    }

    /// Projects `context [L, d_v]` (one position per row) and runs the stack.
    pub fn forward<'t, T: Real>(
        &self,
        ctx: Ctx<'t, T>,
        context: Var<'t, T>,
        positions: &[f64],
        routing: &mut Vec<RouterDecision<T>>,
    ) -> Result<Var<'t, T>> {
        let c = self.context_proj.forward(ctx, context)?;
        let mut c = self.context_norm.forward(ctx, c)?;
        if self.positional_encoding {
            let d = c.shape()[1];
            c = c.add(ctx.constant(encodings_at(positions, d)))?;
        }
        let mut q = self.query_norm.forward(ctx, ctx.p(self.queries))?;
        for layer in &self.layers {
            if let Some(sa) = &layer.self_attn {
                q = sa.forward(ctx, q)?;
            }
            q = layer.cross.forward(ctx, q, c)?;
            q = layer.ffn.forward(ctx, q, routing)?;
        }
        self.final_norm.forward(ctx, q)
    }
}

/// Combines per-frame query states `[F, Q, d]` into `[Q, d]`.
#[derive(Clone, Debug)]
pub enum Aggregator {
    MeanPool,
    /// Softmax over frames of a learned score of each frame's mean query state.
    AdaptivePool { score: Linear },
    /// Self-attention over all `F·Q` states with frame encodings, then frame mean.
    Esa { blocks: Vec<SelfAttentionBlock> },
}

impl Aggregator {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        kind: Aggregation,
        layers: usize,
        dims: &ModelDims,
    ) -> Self {
        match kind {
            Aggregation::MeanPool => Aggregator::MeanPool,
            Aggregation::AdaptivePool => Aggregator::AdaptivePool {
                score: Linear::new(store, rng, &format!("{name}.score"), dims.model_dim, 1, true),
            },
            Aggregation::Esa => Aggregator::Esa {
                blocks: (0..layers)
                    .map(|i| SelfAttentionBlock::new(store, rng, &format!("{name}.esa{i}"), &dims.block(false)))
                    .collect(),
            },
        }
    }

    pub fn forward<'t, T: Real>(
        &self,
        ctx: Ctx<'t, T>,
        per_frame: Var<'t, T>,
        frame_positions: &[f64],
    ) -> Result<Var<'t, T>> {
        let s = per_frame.shape();
        if s.len() != 3 || s[0] != frame_positions.len() {
            return Err(Error::Shape {
                op: "aggregate",
                lhs: s,
                rhs: vec![frame_positions.len()],
            });
        }
        let (f, q, d) = (s[0], s[1], s[2]);
        match self {
            Aggregator::MeanPool => per_frame.mean_axis(0),
            Aggregator::AdaptivePool { score } => {
                let summary = per_frame.mean_axis(1)?;
                let w = score.forward(ctx, summary)?.softmax(0)?;
                per_frame
                    .reshape(&[f, q * d])?
                    .mul(w)?
                    .sum_axis(0)?
                    .reshape(&[q, d])
            }
            Aggregator::Esa { blocks } => {
                let pos: Vec<f64> = frame_positions
                    .iter()
                    .flat_map(|&p| std::iter::repeat_n(p, q))
                    .collect();
                let mut x = per_frame
                    .reshape(&[f * q, d])?
                    .add(ctx.constant(encodings_at(&pos, d)))?;
                for b in blocks {
                    x = b.forward(ctx, x)?;
                }
                x.reshape(&[f, q, d])?.mean_axis(0)
            }
        }
    }
}

#[derive(Clone, Debug)]
pub enum InterfaceKind {
    Linear(Linear),
    QFormer {
        qformer: QFormer,
        aggregator: Option<Aggregator>,
    },
}

/// Interface output tokens plus MoE routing decisions made on the way.
pub struct InterfaceOutput<'t, T: Real> {
    pub tokens: Var<'t, T>,
    pub routing: Vec<RouterDecision<T>>,
}

#[derive(Clone, Debug)]
pub struct VisionLanguageInterface {
    pub cfg: InterfaceConfig,
    pub dims: ModelDims,
    pub kind: InterfaceKind,
}

impl VisionLanguageInterface {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        cfg: &InterfaceConfig,
        dims: &ModelDims,
    ) -> Result<Self> {
        cfg.validate()?;
        dims.block(false).validate()?;
        let kind = match cfg.variant {
            InterfaceVariant::Linear => {
                InterfaceKind::Linear(Linear::new(store, rng, "iface.linear", dims.visual_dim, dims.model_dim, true))
            }
            _ => InterfaceKind::QFormer {
                qformer: QFormer::new(store, rng, "iface.qformer", cfg, dims),
                aggregator: cfg
                    .aggregation
                    .map(|a| Aggregator::new(store, rng, "iface.agg", a, cfg.esa_layers, dims)),
            },
        };
        Ok(Self {
            cfg: cfg.clone(),
            dims: *dims,
            kind,
        })
    }

    /// Number of output tokens for a clip of `frames` frames.
    pub fn output_len(&self, frames: usize, patches: usize) -> usize {
        match (&self.kind, self.cfg.temporal_pool) {
            (InterfaceKind::Linear(_), false) => frames * patches,
            (InterfaceKind::Linear(_), true) => patches,
            (InterfaceKind::QFormer { .. }, _) => self.cfg.num_query_tokens,
        }
    }

    /// Runs the interface on `[F, P, d_v]` frames. With `bank_capacity`,
    /// frames are first ingested one by one into a memory bank and the
    /// Q-Former reads the bank's entries instead of the raw frames.
    pub fn forward<'t, T: Real>(
        &self,
        ctx: Ctx<'t, T>,
        frames: Var<'t, T>,
        positions: &[f64],
        bank_capacity: Option<usize>,
    ) -> Result<InterfaceOutput<'t, T>> {
        let s = frames.shape();
        if s.len() != 3 || s[2] != self.dims.visual_dim || s[0] != positions.len() {
            return Err(Error::Shape {
                op: "interface",
                lhs: s,
                rhs: vec![positions.len(), 0, self.dims.visual_dim],
            });
        }
        let mut routing = Vec::new();
        let tokens = match &self.kind {
            InterfaceKind::Linear(proj) => {
                if bank_capacity.is_some() {
                    return Err(Error::Config(
                        "a memory bank cannot feed the linear interface".into(),
                    ));
                }
                self.linear_forward(ctx, proj, frames, positions)?
            }
            InterfaceKind::QFormer { qformer, aggregator } => {
                let (frames, positions) = match bank_capacity {
                    Some(b) => bank_context(frames, positions, b)?,
                    None => (frames, positions.to_vec()),
                };
                match aggregator {
                    None => {
                        let (f, p, dv) = (s_at(&frames, 0), s_at(&frames, 1), s_at(&frames, 2));
                        let token_pos: Vec<f64> = positions
                            .iter()
                            .flat_map(|&x| std::iter::repeat_n(x, p))
                            .collect();
                        let context = frames.reshape(&[f * p, dv])?;
                        qformer.forward(ctx, context, &token_pos, &mut routing)?
                    }
                    Some(agg) => {
                        let per_frame = per_frame_queries(ctx, qformer, frames, &positions, &mut routing)?;
                        agg.forward(ctx, per_frame, &positions)?
                    }
                }
            }
        };
        Ok(InterfaceOutput { tokens, routing })
    }

    fn linear_forward<'t, T: Real>(
        &self,
        ctx: Ctx<'t, T>,
        proj: &Linear,
        frames: Var<'t, T>,
        positions: &[f64],
    ) -> Result<Var<'t, T>> {
        let s = frames.shape();
        let (f, p, dv) = (s[0], s[1], s[2]);
        let d = self.dims.model_dim;
        let mut x = proj.forward(ctx, frames.reshape(&[f * p, dv])?)?;
        if self.cfg.positional_encoding {
            let pos: Vec<f64> = positions.iter().flat_map(|&x| std::iter::repeat_n(x, p)).collect();
            x = x.add(ctx.constant(encodings_at(&pos, d)))?;
        }
        if self.cfg.temporal_pool {
            x = x.reshape(&[f, p * d])?.mean_axis(0)?.reshape(&[p, d])?;
        }
        Ok(x)
    }

    /// Name prefixes of the self-attention blocks inside the Q-Former or
    /// the ESA head.
    pub fn self_attention_prefixes(&self) -> Vec<String> {
        match &self.kind {
            InterfaceKind::QFormer { qformer, aggregator } => {
                let mut out: Vec<String> = (0..qformer.layers.len())
                    .filter(|&i| qformer.layers[i].self_attn.is_some())
                    .map(|i| format!("iface.qformer.layer{i}.self"))
                    .collect();
                if let Some(Aggregator::Esa { blocks }) = aggregator {
                    out.extend((0..blocks.len()).map(|i| format!("iface.agg.esa{i}")));
                }
                out
            }
            InterfaceKind::Linear(_) => Vec::new(),
        }
    }
}

fn s_at<T: Real>(v: &Var<'_, T>, i: usize) -> usize {
    v.shape()[i]
}

/// Runs the Q-Former once per frame, stacking results as `[F, Q, d]`.
pub fn per_frame_queries<'t, T: Real>(
    ctx: Ctx<'t, T>,
    qformer: &QFormer,
    frames: Var<'t, T>,
    positions: &[f64],
    routing: &mut Vec<RouterDecision<T>>,
) -> Result<Var<'t, T>> {
    let s = frames.shape();
    let (f, p, dv) = (s[0], s[1], s[2]);
    let mut outs = Vec::with_capacity(f);
    for (i, &pos) in positions.iter().enumerate() {
        let ctx_tokens = frames.narrow(0, i, 1)?.reshape(&[p, dv])?;
        outs.push(qformer.forward(ctx, ctx_tokens, &vec![pos; p], routing)?);
    }
    let q = outs[0].shape();
    let stacked = if outs.len() == 1 { outs[0] } else { Var::concat(&outs, 0)? };
    stacked.reshape(&[f, q[0], q[1]])
}

/// Ingests frames into a bank of capacity `b` and rebuilds the bank contents
/// on the tape, so each entry is the differentiable mean of its frames.
pub fn bank_context<'t, T: Real>(
    frames: Var<'t, T>,
    positions: &[f64],
    capacity: usize,
) -> Result<(Var<'t, T>, Vec<f64>)> {
    let s = frames.shape();
    let (f, p, dv) = (s[0], s[1], s[2]);
    let mut bank = MemoryBank::<T>::new(capacity)?;
    {
        let data = frames.data();
        for (i, &pos) in positions.iter().enumerate() {
            let frame = Tensor::new(&[p, dv], data[i * p * dv..(i + 1) * p * dv].to_vec())?;
            bank.ingest(frame, pos.round() as usize)?;
        }
    }
    let entries = bank.entries();
    if entries.len() == f {
        return Ok((frames, positions.to_vec()));
    }
    let mut parts = Vec::with_capacity(entries.len());
    for e in entries {
        let (r0, r1) = e.rows;
        let part = if r0 == r1 {
            frames.narrow(0, r0, 1)?
        } else {
            frames.narrow(0, r0, r1 - r0 + 1)?.mean_axis(0)?.reshape(&[1, p, dv])?
        };
        parts.push(part);
    }
    let positions = entries.iter().map(|e| e.position()).collect();
    Ok((Var::concat(&parts, 0)?, positions))
}
