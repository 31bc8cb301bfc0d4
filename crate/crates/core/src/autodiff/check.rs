use super::graph::{Graph, Var};
use super::params::{Ctx, ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const DEFAULT_DELTA: f64 = 1e-5;

/// Compares reverse-mode gradients against central differences.
///
/// `build` constructs a scalar loss from leaves holding `inputs` (in order).
/// Returns the largest `|analytic - numeric| / (|analytic| + |numeric| + 1e-12)`
/// over every component of every input listed in `wrt`.
pub fn finite_diff_check<F>(inputs: &[Tensor], wrt: &[usize], delta: f64, build: F) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let leaves: Vec<Var> = vals.iter().map(|t| g.leaf(t.clone(), false)).collect();
        let loss = build(&mut g, &leaves)?;
        let v = g.value(loss).data()[0];
        if !v.is_finite() {
            return Err(Error::NonFinite("perturbed loss".into()));
        }
        Ok(v)
    };

    let mut g = Graph::new();
    let leaves: Vec<Var> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| g.leaf(t.clone(), wrt.contains(&i)))
        .collect();
    let loss = build(&mut g, &leaves)?;
    g.backward(loss)?;

    let mut worst: f64 = 0.0;
    let mut vals = inputs.to_vec();
    for &i in wrt {
        let analytic = g
            .grad(leaves[i])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[i].shape().to_vec()));
        for j in 0..inputs[i].len() {
            let orig = inputs[i].data()[j];
            vals[i].data_mut()[j] = orig + delta;
            let up = eval(&vals)?;
            vals[i].data_mut()[j] = orig - delta;
            let down = eval(&vals)?;
            vals[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * delta);
            let a = analytic.data()[j];
            let err = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-12);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// [`finite_diff_check`] over stored parameters: `build` runs a model forward
/// pass through `Ctx` and every parameter in `wrt` is perturbed in place.
pub fn finite_diff_check_params<F>(store: &ParamStore, wrt: &[ParamId], delta: f64, build: F) -> Result<f64>
where
    F: Fn(&mut Ctx) -> Result<Var>,
{
    let mut ctx = Ctx::new(store);
    let loss = build(&mut ctx)?;
    ctx.g.backward(loss)?;
    let analytic: Vec<(ParamId, Tensor)> = ctx.param_grads();
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut c = Ctx::frozen(s);
        let l = build(&mut c)?;
        let v = c.g.value(l).data()[0];
        if !v.is_finite() {
            return Err(Error::NonFinite("perturbed loss".into()));
        }
        Ok(v)
    };
    let mut s = store.clone();
    let mut worst: f64 = 0.0;
    for &id in wrt {
        let a = analytic
            .iter()
            .find(|(i, _)| *i == id)
            .map(|(_, t)| t.clone())
            .unwrap_or_else(|| Tensor::zeros(store.get(id).shape().to_vec()));
        for j in 0..a.len() {
            let orig = store.get(id).data()[j];
            s.get_mut(id).data_mut()[j] = orig + delta;
            let up = eval(&s)?;
            s.get_mut(id).data_mut()[j] = orig - delta;
            let down = eval(&s)?;
            s.get_mut(id).data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * delta);
            let an = a.data()[j];
            worst = worst.max((an - numeric).abs() / (an.abs() + numeric.abs() + 1e-12));
        }
    }
    Ok(worst)
}
