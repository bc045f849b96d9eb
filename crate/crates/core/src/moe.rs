//! Dense and sparse top-k mixture-of-experts feed-forward layers.
//!
//! The router is a linear map to one logit per expert followed by a softmax
//! gate. Dense layers weight every expert by the full softmax. Sparse layers
//! keep the `top_k` largest logits (ties go to the lower expert index),
//! renormalize the softmax over that subset, and evaluate only the selected
//! experts. Selection is a hard decision; gradients reach the router through
//! the combine weights.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{Ctx, FeedForward, Linear};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MoeMode {
    Dense,
    Sparse,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MoePlacement {
    Qformer,
    Llm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MoeConfig {
    pub num_experts: usize,
    pub mode: MoeMode,
    /// Experts evaluated per token in sparse mode.
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    #[serde(default = "default_placement")]
    pub placement: MoePlacement,
}

fn default_top_k() -> usize {
    1
}

fn default_placement() -> MoePlacement {
    MoePlacement::Qformer
}

impl MoeConfig {
    pub fn dense(num_experts: usize) -> Self {
        Self {
            num_experts,
            mode: MoeMode::Dense,
            top_k: num_experts,
            placement: MoePlacement::Qformer,
        }
    }

    pub fn sparse(num_experts: usize, top_k: usize) -> Self {
        Self {
            num_experts,
            mode: MoeMode::Sparse,
            top_k,
            placement: MoePlacement::Qformer,
        }
    }

    pub fn with_placement(mut self, placement: MoePlacement) -> Self {
        self.placement = placement;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if ![1, 2, 4, 8].contains(&self.num_experts) {
            return Err(Error::Config(format!(
                "num_experts must be one of 1, 2, 4, 8 (got {})",
                self.num_experts
            )));
        }
        if self.mode == MoeMode::Sparse && !(1..=self.num_experts).contains(&self.top_k) {
            return Err(Error::Config(format!(
                "sparse top_k must be in 1..={} (got {})",
                self.num_experts, self.top_k
            )));
        }
        Ok(())
    }

    /// Experts evaluated per token.
    pub fn active_experts(&self) -> usize {
        match self.mode {
            MoeMode::Dense => self.num_experts,
            MoeMode::Sparse => self.top_k,
        }
    }
}

/// Routing outcome for one token.
#[derive(Clone, Debug, PartialEq)]
pub struct RouterDecision<T: Real = f32> {
    /// Full softmax over all experts.
    pub probs: Vec<T>,
    /// Selected experts, highest logit first.
    pub selected: Vec<usize>,
    /// Combine weight of each entry of `selected`; sums to one.
    pub weights: Vec<T>,
}

fn softmax<T: Real>(xs: &[T]) -> Vec<T> {
    let max = xs.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = xs.iter().map(|&x| (x - max).exp()).collect();
    let s: T = e.iter().copied().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Routing decision from router logits.
pub fn decide<T: Real>(logits: &[T], cfg: &MoeConfig) -> RouterDecision<T> {
    let probs = softmax(logits);
    match cfg.mode {
        MoeMode::Dense => RouterDecision {
            selected: (0..logits.len()).collect(),
            weights: probs.clone(),
            probs,
        },
        MoeMode::Sparse => {
            let mut order: Vec<usize> = (0..logits.len()).collect();
            // Stable sort keeps the lower index first among equal logits.
            order.sort_by(|&a, &b| logits[b].partial_cmp(&logits[a]).unwrap_or(std::cmp::Ordering::Equal));
            order.truncate(cfg.top_k);
            let chosen: Vec<T> = order.iter().map(|&e| logits[e]).collect();
            RouterDecision {
                weights: softmax(&chosen),
                selected: order,
                probs,
            }
        }
    }
}

/// Routes a single token through `router` outside of any tape.
pub fn route<T: Real>(token: &[T], router: &Linear, store: &ParamStore<T>, cfg: &MoeConfig) -> RouterDecision<T> {
    let w = store.get(router.weight).data();
    let e = router.out_dim;
    let mut logits: Vec<T> = match router.bias {
        Some(b) => store.get(b).data().to_vec(),
        None => vec![T::zero(); e],
    };
    for (i, &x) in token.iter().enumerate() {
        for j in 0..e {
            logits[j] += x * w[i * e + j];
        }
    }
    decide(&logits, cfg)
}

/// Per-expert routing diagnostics over a batch of decisions.
#[derive(Clone, Debug, PartialEq)]
pub struct LoadStats {
    /// Fraction of tokens that selected each expert. Sums to `top_k` in
    /// sparse mode and to `E` in dense mode.
    pub fractions: Vec<f64>,
    /// Mean router probability per expert.
    pub mean_prob: Vec<f64>,
}

pub fn load_stats<T: Real>(decisions: &[RouterDecision<T>]) -> Result<LoadStats> {
    let first = decisions
        .first()
        .ok_or_else(|| Error::Config("load_stats needs at least one decision".into()))?;
    let e = first.probs.len();
    let n = decisions.len() as f64;
    let mut fractions = vec![0.0; e];
    let mut mean_prob = vec![0.0; e];
    for d in decisions {
        for &s in &d.selected {
            fractions[s] += 1.0;
        }
        for (m, p) in mean_prob.iter_mut().zip(&d.probs) {
            *m += p.as_f64();
        }
    }
    fractions.iter_mut().for_each(|f| *f /= n);
    mean_prob.iter_mut().for_each(|m| *m /= n);
    Ok(LoadStats { fractions, mean_prob })
}

/// Router plus `E` expert FFNs.
#[derive(Clone, Debug)]
pub struct MoeLayer {
    pub router: Linear,
    pub experts: Vec<FeedForward>,
    pub cfg: MoeConfig,
}

impl MoeLayer {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        dim: usize,
        hidden: usize,
        cfg: MoeConfig,
    ) -> Self {
        let router = Linear::new(store, rng, &format!("{name}.router"), dim, cfg.num_experts, true);
        let experts = (0..cfg.num_experts)
            .map(|e| FeedForward::new(store, rng, &format!("{name}.expert{e}"), dim, hidden))
            .collect();
        Self { router, experts, cfg }
    }

    /// Mixes expert outputs for `[N, d]` tokens; returns the output and one
    /// decision per token.
    pub fn forward<'t, T: Real>(
        &self,
        ctx: Ctx<'t, T>,
        x: Var<'t, T>,
    ) -> Result<(Var<'t, T>, Vec<RouterDecision<T>>)> {
        let n = x.shape()[0];
        let num_e = self.cfg.num_experts;
        let logits = self.router.forward(ctx, x)?;
        let decisions: Vec<RouterDecision<T>> = {
            let l = logits.data();
            (0..n).map(|t| decide(&l[t * num_e..(t + 1) * num_e], &self.cfg)).collect()
        };
        let mut out: Option<Var<'t, T>> = None;
        let mut push = |v: Var<'t, T>| -> Result<()> {
            out = Some(match out {
                Some(acc) => acc.add(v)?,
                None => v,
            });
            Ok(())
        };
        match self.cfg.mode {
            MoeMode::Dense => {
                let w = logits.softmax_last()?;
                for (e, expert) in self.experts.iter().enumerate() {
                    let y = expert.forward(ctx, x)?;
                    push(y.mul(w.narrow(1, e, 1)?)?)?;
                }
                ctx.tape.record(|s| s.expert_invocations += n * num_e);
            }
            MoeMode::Sparse => {
                let mut mask = Tensor::<T>::full(&[n, num_e], T::neg_infinity());
                let mut routed: Vec<Vec<usize>> = vec![Vec::new(); num_e];
                for (t, d) in decisions.iter().enumerate() {
                    for &e in &d.selected {
                        mask.data_mut()[t * num_e + e] = T::zero();
                        routed[e].push(t);
                    }
                }
                let w = logits.add(ctx.constant(mask))?.softmax_last()?;
                for (e, expert) in self.experts.iter().enumerate() {
                    let ids = &routed[e];
                    if ids.is_empty() {
                        continue;
                    }
                    let y = expert.forward(ctx, x.gather_rows(ids)?)?;
                    let we = w.narrow(1, e, 1)?.gather_rows(ids)?;
                    push(y.mul(we)?.scatter_rows(ids, n)?)?;
                    ctx.tape.record(|s| s.expert_invocations += ids.len());
                }
            }
        }
        Ok((out.expect("at least one expert is selected"), decisions))
    }
}
