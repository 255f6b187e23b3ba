//! Dense layers shared by the decoder stages.

use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::ndgrad::Var;
use crate::params::{Ctx, ParamId, ParamStore};

/// `x · W + b` over the last axis; `W` is `[in, out]`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub(crate) fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, inp: usize, out: usize, gain: f64) -> Self {
        Self {
            w: store.fan_in_uniform(rng, format!("{name}.weight"), &[inp, out], inp, gain),
            b: store.constant(format!("{name}.bias"), &[out], 0.0),
        }
    }

    pub(crate) fn zeroed(store: &mut ParamStore, name: &str, inp: usize, out: usize) -> Self {
        Self {
            w: store.constant(format!("{name}.weight"), &[inp, out], 0.0),
            b: store.constant(format!("{name}.bias"), &[out], 0.0),
        }
    }

    pub(crate) fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let (w, b) = (ctx.p(self.w), ctx.p(self.b));
        Ok(ctx.g.linear(x, w, b)?)
    }
}

/// Layer normalization over the last axis.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    pub(crate) fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.constant(format!("{name}.gamma"), &[dim], 1.0),
            beta: store.constant(format!("{name}.beta"), &[dim], 0.0),
        }
    }

    pub(crate) fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let (g, b) = (ctx.p(self.gamma), ctx.p(self.beta));
        Ok(ctx.g.layer_norm(x, g, b)?)
    }
}
