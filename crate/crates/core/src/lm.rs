//! Decoder-only toy language model with a visual prefix.
//!
//! A sequence is laid out as `[VIS × N] BOS prompt target EOS`; the visual
//! prefix occupies reserved positions and is fed as embeddings rather than
//! through the vocabulary. Only target tokens and the closing EOS are scored.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionBlockConfig, FfnBlock, SelfAttentionBlock};
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::moe::{MoeConfig, MoePlacement, RouterDecision};
use crate::nn::{Ctx, LayerNorm, Linear};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor};
use crate::tokenizer::{BOS, EOS, PAD, VIS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LmConfig {
    pub layers: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub max_sequence_length: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LmPreset {
    Small,
    Large,
}

impl LmConfig {
    pub fn small() -> Self {
        Self {
            layers: 2,
            model_dim: 32,
            heads: 2,
            ffn_dim: 64,
            max_sequence_length: 128,
        }
    }

    pub fn large() -> Self {
        Self {
            layers: 3,
            model_dim: 48,
            heads: 4,
            ffn_dim: 96,
            max_sequence_length: 128,
        }
    }

    pub fn preset(p: LmPreset) -> Self {
        match p {
            LmPreset::Small => Self::small(),
            LmPreset::Large => Self::large(),
        }
    }

    pub fn block(&self) -> AttentionBlockConfig {
        AttentionBlockConfig {
            model_dim: self.model_dim,
            num_heads: self.heads,
            ffn_dim: self.ffn_dim,
            causal: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.max_sequence_length == 0 {
            return Err(Error::Config("LM needs at least one layer and position".into()));
        }
        self.block().validate()
    }
}

/// Next-token inputs and per-position labels for one example.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LmSequence {
    /// Text ids after the visual prefix: `BOS prompt target` plus padding.
    pub input: Vec<usize>,
    /// One label per position of the full sequence including the prefix.
    pub labels: Vec<Option<usize>>,
}

/// Builds inputs and labels; `pad` extra PAD positions are appended with
/// masked labels.
pub fn lm_sequence(visual_len: usize, prompt: &[usize], target: &[usize], pad: usize) -> LmSequence {
    let mut text = Vec::with_capacity(prompt.len() + target.len() + 2 + pad);
    text.push(BOS);
    text.extend_from_slice(prompt);
    let first_target = text.len();
    text.extend_from_slice(target);
    text.push(EOS);
    let mut labels = vec![None; visual_len];
    for j in 0..text.len() - 1 {
        labels.push((j + 1 >= first_target).then_some(text[j + 1]));
    }
    text.pop();
    text.extend(std::iter::repeat_n(PAD, pad));
    labels.extend(std::iter::repeat_n(None, pad));
    LmSequence { input: text, labels }
}

#[derive(Clone, Debug)]
pub struct LmLayer {
    pub attn: SelfAttentionBlock,
    pub ffn: FfnBlock,
}

#[derive(Clone, Debug)]
pub struct ToyLm {
    pub cfg: LmConfig,
    pub vocab_size: usize,
    pub embed: ParamId,
    pub pos: ParamId,
    pub layers: Vec<LmLayer>,
    pub final_norm: LayerNorm,
    pub head: Linear,
}

fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

impl ToyLm {
    /// MoE replaces every FFN when `moe` is placed in the LM.
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        cfg: &LmConfig,
        vocab_size: usize,
        moe: Option<MoeConfig>,
    ) -> Result<Self> {
        cfg.validate()?;
        if vocab_size <= VIS {
            return Err(Error::Config(format!("vocabulary of {vocab_size} lacks the special tokens")));
        }
        let moe = moe.filter(|m| m.placement == MoePlacement::Llm);
        if let Some(m) = &moe {
            m.validate()?;
        }
        let d = cfg.model_dim;
        let block = cfg.block();
        let embed = store.add_randn("lm.embed", &[vocab_size, d], 0.1, rng);
        let pos = store.add_randn("lm.pos", &[cfg.max_sequence_length, d], 0.02, rng);
        let layers = (0..cfg.layers)
            .map(|i| LmLayer {
                attn: SelfAttentionBlock::new(store, rng, &format!("lm.layer{i}.self"), &block),
                ffn: FfnBlock::new(store, rng, &format!("lm.layer{i}.ffn"), &block, moe),
            })
            .collect();
        Ok(Self {
            cfg: *cfg,
            vocab_size,
            embed,
            pos,
            layers,
            final_norm: LayerNorm::new(store, "lm.final_norm", d),
            head: Linear::new(store, rng, "lm.head", d, vocab_size, true),
        })
    }

    /// Logits `[N + len, V]` for a visual prefix `[N, d]` followed by `ids`.
    pub fn forward<'t, T: Real>(
        &self,
        ctx: Ctx<'t, T>,
        visual: Option<Var<'t, T>>,
        ids: &[usize],
        routing: &mut Vec<RouterDecision<T>>,
    ) -> Result<Var<'t, T>> {
        let n = visual.map_or(0, |v| v.shape()[0]);
        let len = n + ids.len();
        if len > self.cfg.max_sequence_length {
            return Err(Error::SequenceTooLong {
                len,
                max: self.cfg.max_sequence_length,
            });
        }
        if let Some(v) = visual {
            let s = v.shape();
            if s.len() != 2 || s[1] != self.cfg.model_dim {
                return Err(Error::Shape {
                    op: "visual prefix",
                    lhs: s,
                    rhs: vec![n, self.cfg.model_dim],
                });
            }
        }
        let x = match (visual, ids.is_empty()) {
            (Some(v), true) => v,
            (Some(v), false) => Var::concat(&[v, ctx.p(self.embed).embedding(ids)?], 0)?,
            (None, false) => ctx.p(self.embed).embedding(ids)?,
            (None, true) => return Err(Error::Config("empty LM input".into())),
        };
        let mut x = x.add(ctx.p(self.pos).narrow(0, 0, len)?)?;
        for layer in &self.layers {
            x = layer.attn.forward(ctx, x)?;
            x = layer.ffn.forward(ctx, x, routing)?;
        }
        let h = self.final_norm.forward(ctx, x)?;
        self.head.forward(ctx, h)
    }

    /// Mean cross-entropy over target positions.
    pub fn loss<'t, T: Real>(
        &self,
        ctx: Ctx<'t, T>,
        visual: Option<Var<'t, T>>,
        seq: &LmSequence,
        routing: &mut Vec<RouterDecision<T>>,
    ) -> Result<Var<'t, T>> {
        let logits = self.forward(ctx, visual, &seq.input, routing)?;
        logits.cross_entropy(&seq.labels)
    }

    pub fn lm_loss<'t, T: Real>(
        &self,
        ctx: Ctx<'t, T>,
        visual: Option<Var<'t, T>>,
        prompt: &[usize],
        target: &[usize],
        routing: &mut Vec<RouterDecision<T>>,
    ) -> Result<Var<'t, T>> {
        let n = visual.map_or(0, |v| v.shape()[0]);
        self.loss(ctx, visual, &lm_sequence(n, prompt, target, 0), routing)
    }

    /// Greedy decoding until EOS, `max_new` tokens, or the length limit.
    /// Ties go to the lowest token id. The returned ids exclude EOS.
    pub fn generate<T: Real>(
        &self,
        store: &ParamStore<T>,
        visual: Option<&Tensor<T>>,
        prompt: &[usize],
        max_new: usize,
    ) -> Result<Vec<usize>> {
        let n = visual.map_or(0, |v| v.shape()[0]);
        let mut ids = Vec::with_capacity(prompt.len() + 1 + max_new);
        ids.push(BOS);
        ids.extend_from_slice(prompt);
        let start = ids.len();
        if n + start > self.cfg.max_sequence_length {
            return Err(Error::SequenceTooLong {
                len: n + start,
                max: self.cfg.max_sequence_length,
            });
        }
        while ids.len() - start < max_new && n + ids.len() < self.cfg.max_sequence_length {
            let tape = Tape::new();
            let ctx = Ctx::new(&tape, store);
            let vis = visual.map(|v| tape.constant(v.clone()));
            let logits = self.forward(ctx, vis, &ids, &mut Vec::new())?;
            let next = {
                let data = logits.data();
                let v = self.vocab_size;
                let last = &data[data.len() - v..];
                argmax(last)
            };
            if next == EOS {
                break;
            }
            ids.push(next);
        }
        Ok(ids.split_off(start))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> LmConfig {
        LmConfig {
            layers: 1,
            model_dim: 8,
            heads: 2,
            ffn_dim: 16,
            max_sequence_length: 16,
        }
    }

    #[test]
    fn sequence_layout() {
        let s = lm_sequence(2, &[10, 11], &[20], 1);
        assert_eq!(s.input, vec![BOS, 10, 11, 20, PAD]);
        assert_eq!(s.labels, vec![None, None, None, None, Some(20), Some(EOS), None]);
    }

    #[test]
    fn too_long_is_an_error() {
        let mut store = ParamStore::<f32>::new();
        let lm = ToyLm::new(&mut store, &mut ChaCha8Rng::seed_from_u64(0), &tiny(), 12, None).unwrap();
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store);
        let err = lm.lm_loss(ctx, None, &[5; 10], &[6; 6], &mut Vec::new()).unwrap_err();
        assert!(matches!(err, Error::SequenceTooLong { len: 17, max: 16 }));
    }

    #[test]
    fn generation_is_deterministic() {
        let mut store = ParamStore::<f32>::new();
        let lm = ToyLm::new(&mut store, &mut ChaCha8Rng::seed_from_u64(3), &tiny(), 12, None).unwrap();
        let a = lm.generate(&store, None, &[5, 6], 6).unwrap();
        let b = lm.generate(&store, None, &[5, 6], 6).unwrap();
        assert_eq!(a, b);
        assert!(a.len() <= 6);
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[1.0f32, 3.0, 3.0]), 1);
    }
}
