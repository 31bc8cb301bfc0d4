//! Word-level tokenizer, pseudo-self-attention decoder and beam search.

mod beam;
mod decoder;
mod vocab;

use std::collections::HashSet;

pub use beam::{beam_search, log_softmax, search, BeamConfig, BeamHypothesis};
pub use decoder::{decode_forward, pseudo_self_attention, Decoder, DecoderBlock, DecoderConfig, PsAttention, PsHead};
pub use vocab::{Vocabulary, BOS, EOS, PAD, SPECIALS, UNK};

use crate::autodiff::{mean_grads, Ctx, OptimizerState, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

/// Token-weighted share of one sequence in a batch: the batch loss is the mean
/// NLL over every predicted token, not the mean of per-sequence means.
pub fn weighted_sequence_loss(ctx: &mut Ctx, dec: &Decoder, e: Var, ids: &[usize], weight: f64) -> Result<Var> {
    let l = dec.sequence_loss(ctx, e, ids)?;
    ctx.g.scale(l, weight)
}

pub fn token_weights<'a>(seqs: impl Iterator<Item = &'a [usize]>) -> Vec<f64> {
    let counts: Vec<usize> = seqs.map(|s| s[1..].iter().filter(|&&t| t != PAD).count()).collect();
    let total: usize = counts.iter().sum();
    let n = counts.len() as f64;
    counts.iter().map(|&c| c as f64 * n / total.max(1) as f64).collect()
}

/// One optimizer step on `(e, [BOS] … [EOS])` pairs with the conditioning
/// vectors held fixed. Only parameters in `trainable` may receive gradient.
pub fn train_decoder_step(
    store: &mut ParamStore,
    dec: &Decoder,
    batch: &[(Vec<f64>, Vec<usize>)],
    trainable: &HashSet<ParamId>,
    opt: &mut OptimizerState,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Empty("decoder batch".into()));
    }
    let weights = token_weights(batch.iter().map(|(_, s)| s.as_slice()));
    let items: Vec<(&(Vec<f64>, Vec<usize>), f64)> = batch.iter().zip(weights).collect();
    let (loss, grads) = mean_grads(store, Some(trainable), &items, |ctx, ((e, ids), w)| {
        let ev = ctx.g.constant(Tensor::row(e.clone()));
        weighted_sequence_loss(ctx, dec, ev, ids, *w)
    })?;
    if let Some((id, _)) = grads.iter().find(|(id, _)| !trainable.contains(id)) {
        return Err(Error::FrozenGradient(store.name(*id).to_string()));
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite("decoder loss".into()));
    }
    opt.step(store, &grads)?;
    Ok(loss)
}
