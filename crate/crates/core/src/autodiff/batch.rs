use std::collections::{BTreeMap, HashSet};

use rayon::prelude::*;

use super::graph::Var;
use super::params::{Ctx, ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Mean loss and mean parameter gradients over `items`, one graph per item.
///
/// Items may run on several threads; gradients are summed in item order, so
/// the result does not depend on the thread count.
pub fn mean_grads<T, F>(
    store: &ParamStore,
    trainable: Option<&HashSet<ParamId>>,
    items: &[T],
    build: F,
) -> Result<(f64, Vec<(ParamId, Tensor)>)>
where
    T: Sync,
    F: Fn(&mut Ctx, &T) -> Result<Var> + Sync,
{
    if items.is_empty() {
        return Err(Error::Empty("batch".into()));
    }
    let per_item: Vec<(f64, Vec<(ParamId, Tensor)>)> = items
        .par_iter()
        .map(|item| {
            let mut ctx = match trainable {
                Some(t) => Ctx::with_trainable(store, t),
                None => Ctx::new(store),
            };
            let loss = build(&mut ctx, item)?;
            let value = ctx.g.value(loss).data()[0];
            ctx.g.backward(loss)?;
            Ok((value, ctx.param_grads()))
        })
        .collect::<Result<_>>()?;
    let n = items.len() as f64;
    let mut total = 0.0;
    let mut acc: BTreeMap<ParamId, Tensor> = BTreeMap::new();
    for (loss, grads) in per_item {
        total += loss;
        for (id, g) in grads {
            match acc.get_mut(&id) {
                Some(a) => a.add_assign(&g),
                None => {
                    acc.insert(id, g);
                }
            }
        }
    }
    let grads = acc
        .into_iter()
        .map(|(id, mut g)| {
            g.scale_assign(1.0 / n);
            (id, g)
        })
        .collect();
    Ok((total / n, grads))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_mean_equals_mean_of_items() {
        let mut store = ParamStore::new();
        let w = store.insert("w", Tensor::row(vec![0.5, -1.0, 2.0]));
        let items = [vec![1.0, 2.0, 3.0], vec![-1.0, 0.0, 4.0], vec![0.3, 0.3, 0.3]];
        let build = |ctx: &mut Ctx, x: &Vec<f64>| {
            let wv = ctx.param(w);
            let xv = ctx.g.constant(Tensor::row(x.clone()));
            let p = ctx.g.mul(wv, xv)?;
            let p = ctx.g.mul(p, p)?;
            ctx.g.sum(p)
        };
        let (loss, grads) = mean_grads(&store, None, &items, build).unwrap();
        let mut single = Vec::new();
        let mut gsum = vec![0.0; 3];
        for it in &items {
            let (l, g) = mean_grads(&store, None, std::slice::from_ref(it), build).unwrap();
            single.push(l);
            for (a, b) in gsum.iter_mut().zip(g[0].1.data()) {
                *a += b / 3.0;
            }
        }
        assert!((loss - single.iter().sum::<f64>() / 3.0).abs() < 1e-10);
        for (a, b) in grads[0].1.data().iter().zip(&gsum) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(mean_grads(&store, None, &[] as &[Vec<f64>], build).is_err());
    }
}
