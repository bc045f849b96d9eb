//! Video-language model: interface, optional memory bank, toy LM.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::interface::{InterfaceConfig, ModelDims, VisionLanguageInterface, VisualInput};
use crate::lm::{LmConfig, ToyLm};
use crate::moe::{MoeConfig, RouterDecision};
use crate::nn::Ctx;
use crate::optim::{adamw_step, clip_grad_norm, AdamWConfig, AdamWState};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VlmConfig {
    pub interface: InterfaceConfig,
    pub lm: LmConfig,
    pub visual_dim: usize,
    #[serde(default)]
    pub bank_capacity: Option<usize>,
    #[serde(default)]
    pub moe: Option<MoeConfig>,
}

impl VlmConfig {
    pub fn dims(&self) -> ModelDims {
        ModelDims {
            visual_dim: self.visual_dim,
            model_dim: self.lm.model_dim,
            num_heads: self.lm.heads,
            ffn_dim: self.lm.ffn_dim,
        }
    }

    fn interface_config(&self) -> InterfaceConfig {
        let mut c = self.interface.clone();
        if self.moe.is_some() {
            c.moe = self.moe;
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.lm.validate()?;
        self.interface_config().validate()?;
        if let Some(b) = self.bank_capacity {
            if b == 0 {
                return Err(Error::Config("bank capacity must be positive".into()));
            }
            if !self.interface.is_qformer() {
                return Err(Error::Config("the memory bank needs a Q-Former interface".into()));
            }
        }
        Ok(())
    }
}

/// One supervised example: frames, prompt ids and target ids.
#[derive(Clone, Debug, PartialEq)]
pub struct Example<T: Real = f32> {
    pub visual: VisualInput<T>,
    pub prompt: Vec<usize>,
    pub target: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct StepOutcome<T: Real = f32> {
    pub loss: f64,
    pub grad_norm: f64,
    pub routing: Vec<RouterDecision<T>>,
}

#[derive(Clone, Debug)]
pub struct Vlm<T: Real = f32> {
    pub cfg: VlmConfig,
    pub interface: VisionLanguageInterface,
    pub lm: ToyLm,
    pub store: ParamStore<T>,
}

impl<T: Real> Vlm<T> {
    pub fn new(cfg: &VlmConfig, vocab_size: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let interface = VisionLanguageInterface::new(&mut store, &mut rng, &cfg.interface_config(), &cfg.dims())?;
        let lm = ToyLm::new(&mut store, &mut rng, &cfg.lm, vocab_size, cfg.moe)?;
        Ok(Self {
            cfg: cfg.clone(),
            interface,
            lm,
            store,
        })
    }

    /// Interface tokens for `visual`; frames enter the tape as constants.
    pub fn visual_tokens<'t>(
        &self,
        ctx: Ctx<'t, T>,
        visual: &VisualInput<T>,
        routing: &mut Vec<RouterDecision<T>>,
    ) -> Result<Var<'t, T>> {
        let frames = ctx.constant(visual.frames.clone());
        let out = self
            .interface
            .forward(ctx, frames, &visual.positions, self.cfg.bank_capacity)?;
        routing.extend(out.routing);
        Ok(out.tokens)
    }

    pub fn example_loss<'t>(
        &self,
        ctx: Ctx<'t, T>,
        ex: &Example<T>,
        routing: &mut Vec<RouterDecision<T>>,
    ) -> Result<Var<'t, T>> {
        let v = self.visual_tokens(ctx, &ex.visual, routing)?;
        self.lm.lm_loss(ctx, Some(v), &ex.prompt, &ex.target, routing)
    }

    /// Mean loss over `batch` on `tape`.
    pub fn batch_loss<'t>(
        &'t self,
        tape: &'t Tape<T>,
        batch: &[&Example<T>],
        routing: &mut Vec<RouterDecision<T>>,
    ) -> Result<Var<'t, T>> {
        let ctx = Ctx::new(tape, &self.store);
        if batch.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        let mut total: Option<Var<'t, T>> = None;
        for ex in batch {
            let l = self.example_loss(ctx, ex, routing)?;
            total = Some(match total {
                Some(t) => t.add(l)?,
                None => l,
            });
        }
        Ok(total.expect("non-empty batch").scale(T::of(1.0 / batch.len() as f64)))
    }

    /// Loss and parameter gradients without touching the store.
    pub fn loss_and_grads(&self, batch: &[&Example<T>]) -> Result<(f64, Vec<(ParamId, Vec<T>)>, Vec<RouterDecision<T>>)> {
        let tape = Tape::new();
        let mut routing = Vec::new();
        let loss = self.batch_loss(&tape, batch, &mut routing)?;
        let value = loss.value().item().as_f64();
        tape.backward(loss)?;
        Ok((value, tape.param_grads(), routing))
    }

    pub fn loss_value(&self, batch: &[&Example<T>]) -> Result<f64> {
        let tape = Tape::new();
        let loss = self.batch_loss(&tape, batch, &mut Vec::new())?;
        let v = loss.value().item().as_f64();
        Ok(v)
    }

    /// One AdamW step on the mean batch loss.
    pub fn train_step(
        &mut self,
        batch: &[&Example<T>],
        opt: &mut AdamWState<T>,
        cfg: &AdamWConfig,
        max_grad_norm: Option<f64>,
    ) -> Result<StepOutcome<T>> {
        let (loss, grads, routing) = self.loss_and_grads(batch)?;
        self.store.zero_grad();
        for (pid, g) in grads {
            self.store.get_mut(pid).accumulate_grad(&g)?;
        }
        let grad_norm = clip_grad_norm(&mut self.store, max_grad_norm.unwrap_or(f64::INFINITY));
        adamw_step(&mut self.store, opt, cfg)?;
        self.store.zero_grad();
        Ok(StepOutcome {
            loss,
            grad_norm,
            routing,
        })
    }

    /// Greedy answer ids for `prompt` about `visual`.
    pub fn generate(&self, visual: &VisualInput<T>, prompt: &[usize], max_new: usize) -> Result<Vec<usize>> {
        let tokens: Tensor<T> = {
            let tape = Tape::new();
            let ctx = Ctx::new(&tape, &self.store);
            self.visual_tokens(ctx, visual, &mut Vec::new())?.value()
        };
        self.lm.generate(&self.store, Some(&tokens), prompt, max_new)
    }

    /// Parameters plus optimizer moments, if given.
    pub fn checkpoint(&self, opt: Option<&AdamWState<T>>) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.push_store("param.", &self.store);
        if let Some(opt) = opt {
            ck.push("adam.step", Tensor::new(&[2], split_step(opt.step)).expect("two words"));
            for (i, (name, t)) in self.store.iter().enumerate() {
                ck.push(format!("adam.m.{name}"), moment(t.shape(), &opt.m[i]));
                ck.push(format!("adam.v.{name}"), moment(t.shape(), &opt.v[i]));
            }
        }
        ck
    }

    /// Restores parameters and, when present, optimizer moments.
    pub fn restore(&mut self, ck: &Checkpoint) -> Result<Option<AdamWState<T>>> {
        ck.load_store("param.", &mut self.store)?;
        let Some(step) = ck.get("adam.step") else {
            return Ok(None);
        };
        let mut opt = AdamWState::new(&self.store);
        opt.step = join_step(step.data());
        for (i, (name, _)) in self.store.iter().enumerate() {
            for (key, buf) in [("m", &mut opt.m[i]), ("v", &mut opt.v[i])] {
                let src = ck
                    .get(&format!("adam.{key}.{name}"))
                    .ok_or_else(|| Error::Checkpoint(format!("missing optimizer moment for `{name}`")))?;
                if src.numel() != buf.len() {
                    return Err(Error::Checkpoint(format!("optimizer moment for `{name}` has the wrong size")));
                }
                for (d, &s) in buf.iter_mut().zip(src.data()) {
                    *d = T::of(s as f64);
                }
            }
        }
        Ok(Some(opt))
    }
}

fn moment<T: Real>(shape: &[usize], data: &[T]) -> Tensor<f32> {
    Tensor::new(shape, data.iter().map(|v| v.as_f64() as f32).collect()).expect("moment shape")
}

/// Splits a step count into two exactly representable `f32` halves.
fn split_step(step: u64) -> Vec<f32> {
    vec![(step >> 16) as f32, (step & 0xffff) as f32]
}

fn join_step(words: &[f32]) -> u64 {
    ((words[0] as u64) << 16) | words[1] as u64
}
