//! Small layer building blocks over [`Ctx`].

use crate::autodiff::{Ctx, ParamId, ParamStore, SeedRng, Tensor, Var};
use crate::error::Result;

/// `x·W + b` with `W: [fan_in, fan_out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, bias: bool, rng: &mut SeedRng) -> Self {
        let w = store.init_weight(&format!("{name}.w"), fan_in, fan_out, rng);
        let b = bias.then(|| store.init_zeros(&format!("{name}.b"), &[fan_out]));
        Self { w, b, fan_in, fan_out }
    }

    /// Same layer with every parameter set to zero.
    pub fn zeroed(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, bias: bool) -> Self {
        let w = store.insert(format!("{name}.w"), Tensor::zeros([fan_in, fan_out]));
        let b = bias.then(|| store.init_zeros(&format!("{name}.b"), &[fan_out]));
        Self { w, b, fan_in, fan_out }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let w = ctx.param(self.w);
        let y = ctx.g.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = ctx.param(b);
                ctx.g.add_bias(y, b)
            }
            None => Ok(y),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        std::iter::once(self.w).chain(self.b).collect()
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            gamma: store.init_ones(&format!("{name}.g"), &[d]),
            beta: store.init_zeros(&format!("{name}.b"), &[d]),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let g = ctx.param(self.gamma);
        let b = ctx.param(self.beta);
        ctx.g.layer_norm(x, g, b)
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.gamma, self.beta]
    }
}

/// Runs a forward pass with nothing trainable and returns the output row.
pub fn eval_row(store: &ParamStore, f: impl FnOnce(&mut Ctx) -> Result<Var>) -> Result<Vec<f64>> {
    let mut ctx = Ctx::frozen(store);
    let v = f(&mut ctx)?;
    Ok(ctx.g.value(v).data().to_vec())
}
