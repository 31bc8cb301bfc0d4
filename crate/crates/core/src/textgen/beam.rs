use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use super::decoder::{decode_forward, Decoder};
use super::vocab::{BOS, EOS, PAD};
use crate::autodiff::ParamStore;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BeamConfig {
    pub beam: usize,
    /// Longest sequence, counting the leading `[BOS]`.
    pub max_len: usize,
    /// Length normalization exponent; finished scores are divided by `len^alpha`.
    pub alpha: f64,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self { beam: 4, max_len: 60, alpha: 0.0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BeamHypothesis {
    /// Starts with `[BOS]`.
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub finished: bool,
}

impl BeamHypothesis {
    fn score(&self, alpha: f64) -> f64 {
        if alpha == 0.0 {
            self.log_prob
        } else {
            self.log_prob / (self.tokens.len() as f64).powf(alpha)
        }
    }
}

/// Higher score first, then shorter, then smaller token ids.
fn rank(a: &BeamHypothesis, b: &BeamHypothesis, alpha: f64) -> Ordering {
    b.score(alpha)
        .total_cmp(&a.score(alpha))
        .then(a.tokens.len().cmp(&b.tokens.len()))
        .then_with(|| a.tokens.cmp(&b.tokens))
}

/// Log-softmax of a logit row.
pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

/// Beam search from `[BOS]`. `[PAD]` and `[BOS]` are never generated. A
/// hypothesis finishes on `[EOS]` or at `max_len` tokens; the best finished
/// one is returned.
pub fn beam_search(store: &ParamStore, dec: &Decoder, e: &[f64], cfg: &BeamConfig) -> Result<BeamHypothesis> {
    search(cfg, dec.vocab_size, |prefix| {
        let logits = decode_forward(store, dec, e, prefix)?;
        let (t, _) = logits.dims2();
        Ok(log_softmax(logits.row_slice(t - 1)))
    })
}

/// Beam search over any next-token distribution.
pub fn search<F>(cfg: &BeamConfig, vocab_size: usize, mut next_log_probs: F) -> Result<BeamHypothesis>
where
    F: FnMut(&[usize]) -> Result<Vec<f64>>,
{
    if cfg.beam == 0 {
        return Err(Error::Config("beam size must be at least 1".into()));
    }
    if cfg.max_len < 2 {
        return Err(Error::Config("max_len must leave room for one generated token".into()));
    }
    let mut alive = vec![BeamHypothesis { tokens: vec![BOS], log_prob: 0.0, finished: false }];
    let mut finished: Vec<BeamHypothesis> = Vec::new();
    while !alive.is_empty() {
        let mut candidates = Vec::with_capacity(alive.len() * vocab_size);
        for hyp in &alive {
            let lp = next_log_probs(&hyp.tokens)?;
            if lp.len() != vocab_size {
                return Err(Error::Shape(format!("{} log-probs for vocabulary {vocab_size}", lp.len())));
            }
            for (tok, &l) in lp.iter().enumerate() {
                if tok == PAD || tok == BOS {
                    continue;
                }
                let mut tokens = hyp.tokens.clone();
                tokens.push(tok);
                let done = tok == EOS || tokens.len() >= cfg.max_len;
                candidates.push(BeamHypothesis { tokens, log_prob: hyp.log_prob + l, finished: done });
            }
        }
        candidates.sort_by(|a, b| rank(a, b, 0.0));
        alive.clear();
        for c in candidates {
            if c.finished {
                finished.push(c);
            } else if alive.len() < cfg.beam {
                alive.push(c);
            }
        }
        // without length normalization, extending never raises a score
        if cfg.alpha == 0.0 {
            let best_done = finished.iter().map(|h| h.log_prob).fold(f64::NEG_INFINITY, f64::max);
            if alive.first().is_some_and(|a| best_done >= a.log_prob) {
                break;
            }
        }
    }
    finished
        .into_iter()
        .min_by(|a, b| rank(a, b, cfg.alpha))
        .ok_or_else(|| Error::Empty("beam search produced no hypothesis".into()))
}
