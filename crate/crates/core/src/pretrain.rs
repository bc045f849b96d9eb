//! Auxiliary masked-token pretraining of self-attention blocks on text.
//!
//! Blocks are trained under the same parameter names they carry in the
//! target model, so transferring them is a name-wise copy.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{positional_encoding, AttentionBlockConfig, SelfAttentionBlock};
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Ctx, LayerNorm, Linear};
use crate::optim::{adamw_step, AdamWConfig, AdamWState};
use crate::params::ParamStore;
use crate::tensor::Real;
use crate::tokenizer::UNK;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub mask_prob: f64,
    pub seed: u64,
    pub optimizer: AdamWConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 150,
            batch_size: 8,
            mask_prob: 0.25,
            seed: 0,
            optimizer: AdamWConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainReport {
    pub first_loss: f64,
    pub last_loss: f64,
    /// Parameter tensors copied into the target store.
    pub copied: usize,
}

/// Trains self-attention blocks named by `prefixes` as a masked-token
/// encoder over `texts`, then copies them into `target`.
///
/// With no prefixes this is a no-op.
pub fn pretrain_self_attention<T: Real>(
    target: &mut ParamStore<T>,
    prefixes: &[String],
    block: &AttentionBlockConfig,
    texts: &[Vec<usize>],
    vocab_size: usize,
    cfg: &PretrainConfig,
) -> Result<PretrainReport> {
    if prefixes.is_empty() {
        return Ok(PretrainReport {
            first_loss: f64::NAN,
            last_loss: f64::NAN,
            copied: 0,
        });
    }
    if texts.iter().all(|t| t.is_empty()) {
        return Err(Error::Data("pretraining needs at least one non-empty text".into()));
    }
    let texts: Vec<&Vec<usize>> = texts.iter().filter(|t| !t.is_empty()).collect();
    let block = AttentionBlockConfig { causal: false, ..*block };
    let d = block.model_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParamStore::<T>::new();
    let embed = store.add_randn("pretrain.embed", &[vocab_size, d], 0.1, &mut rng);
    let blocks: Vec<SelfAttentionBlock> = prefixes
        .iter()
        .map(|p| SelfAttentionBlock::new(&mut store, &mut rng, p, &block))
        .collect();
    let norm = LayerNorm::new(&mut store, "pretrain.norm", d);
    let head = Linear::new(&mut store, &mut rng, "pretrain.head", d, vocab_size, true);
    let mut opt = AdamWState::new(&store);
    let (mut first, mut last) = (f64::NAN, f64::NAN);
    for step in 0..cfg.steps {
        let grads = {
            let tape = Tape::new();
            let ctx = Ctx::new(&tape, &store);
            let mut total: Option<Var<'_, T>> = None;
            for _ in 0..cfg.batch_size {
                let text = *texts.choose(&mut rng).expect("non-empty");
                let mut input = text.clone();
                let mut labels = vec![None; text.len()];
                for i in 0..text.len() {
                    if rng.random_bool(cfg.mask_prob) {
                        input[i] = UNK;
                        labels[i] = Some(text[i]);
                    }
                }
                if labels.iter().all(Option::is_none) {
                    let i = rng.random_range(0..text.len());
                    input[i] = UNK;
                    labels[i] = Some(text[i]);
                }
                let pos = ctx.constant(positional_encoding::<T>(text.len(), d));
                let mut x = ctx.p(embed).embedding(&input)?.add(pos)?;
                for b in &blocks {
                    x = b.forward(ctx, x)?;
                }
                let logits = head.forward(ctx, norm.forward(ctx, x)?)?;
                let l = logits.cross_entropy(&labels)?;
                total = Some(match total {
                    Some(t) => t.add(l)?,
                    None => l,
                });
            }
            let loss = total
                .ok_or_else(|| Error::Config("pretraining batch size must be positive".into()))?
                .scale(T::of(1.0 / cfg.batch_size as f64));
            let v = loss.value().item().as_f64();
            if step == 0 {
                first = v;
            }
            last = v;
            tape.backward(loss)?;
            tape.param_grads()
        };
        store.zero_grad();
        for (pid, g) in grads {
            store.get_mut(pid).accumulate_grad(&g)?;
        }
        adamw_step(&mut store, &mut opt, &cfg.optimizer)?;
    }
    let mut copied = 0;
    for (name, t) in store.iter() {
        if prefixes.iter().any(|p| name.starts_with(&format!("{p}."))) {
            target.set(name, t.data())?;
            copied += 1;
        }
    }
    Ok(PretrainReport {
        first_loss: first,
        last_loss: last,
        copied,
    })
}
