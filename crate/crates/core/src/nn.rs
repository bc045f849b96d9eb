//! Parameterized layers shared by the interface, the memory-bank path and the LM.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

/// A tape paired with the parameters it reads.
#[derive(Clone, Copy)]
pub struct Ctx<'t, T: Real = f32> {
    pub tape: &'t Tape<T>,
    pub store: &'t ParamStore<T>,
}

impl<'t, T: Real> Ctx<'t, T> {
    pub fn new(tape: &'t Tape<T>, store: &'t ParamStore<T>) -> Self {
        Self { tape, store }
    }

    pub fn p(&self, id: ParamId) -> Var<'t, T> {
        self.tape.param(self.store, id)
    }

    pub fn constant(&self, t: Tensor<T>) -> Var<'t, T> {
        self.tape.constant(t)
    }
}

/// `y = x W + b` on row vectors.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Self {
        let std = 1.0 / (in_dim as f64).sqrt();
        let weight = store.add_randn(format!("{name}.weight"), &[in_dim, out_dim], std, rng);
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim])));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<'t, T: Real>(&self, ctx: Ctx<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let y = x.matmul(ctx.p(self.weight))?;
        match self.bias {
            Some(b) => y.add(ctx.p(b)),
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[dim])),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward<'t, T: Real>(&self, ctx: Ctx<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.layer_norm(ctx.p(self.gamma), ctx.p(self.beta))
    }
}

/// Two-layer GELU MLP `d -> hidden -> d`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        dim: usize,
        hidden: usize,
    ) -> Self {
        Self {
            up: Linear::new(store, rng, &format!("{name}.up"), dim, hidden, true),
            down: Linear::new(store, rng, &format!("{name}.down"), hidden, dim, true),
        }
    }

    pub fn forward<'t, T: Real>(&self, ctx: Ctx<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let h = self.up.forward(ctx, x)?.gelu();
        self.down.forward(ctx, h)
    }
}
