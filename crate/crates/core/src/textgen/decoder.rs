use serde::{Deserialize, Serialize};

use crate::autodiff::{Ctx, ParamId, ParamStore, SeedRng, Tensor, Var};
use crate::error::{shape_err, Error, Result};
use crate::nn::{LayerNorm, Linear};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_t: usize,
    pub max_positions: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self { layers: 2, heads: 2, d_t: 64, max_positions: 64 }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.d_t == 0 || self.max_positions == 0 {
            return Err(Error::Config("decoder dimensions must be positive".into()));
        }
        if !self.d_t.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("d_t={} is not divisible by {} heads", self.d_t, self.heads)));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_t / self.heads
    }
}

/// Projections of one attention head. `w_k`/`w_v` map the conditioning
/// vector to its key and value; the others act on the token stream.
#[derive(Clone, Debug)]
pub struct PsHead {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub c_k: ParamId,
    pub c_v: ParamId,
}

/// Pseudo self-attention: causal self-attention with one extra key/value
/// slot, derived from the conditioning vector, in front of the token slots.
#[derive(Clone, Debug)]
pub struct PsAttention {
    pub heads: Vec<PsHead>,
    pub d_head: usize,
}

impl PsAttention {
    pub fn new(store: &mut ParamStore, prefix: &str, d_t: usize, n_heads: usize, rng: &mut SeedRng) -> Self {
        let d_head = d_t / n_heads;
        let heads = (0..n_heads)
            .map(|h| {
                let mut w = |n: &str| store.init_weight(&format!("{prefix}.h{h}.{n}"), d_t, d_head, rng);
                PsHead { w_q: w("w_q"), w_k: w("w_k"), w_v: w("w_v"), c_k: w("c_k"), c_v: w("c_v") }
            })
            .collect();
        Self { heads, d_head }
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.heads.iter().flat_map(|h| [h.w_q, h.w_k, h.w_v, h.c_k, h.c_v]).collect()
    }

    /// Heads concatenated, `[T, d_t]`, plus each head's `[T, T+1]` attention
    /// weights (column 0 is the conditioning slot).
    pub fn forward(&self, ctx: &mut Ctx, e: Var, y: Var) -> Result<(Var, Vec<Var>)> {
        let (t, d) = ctx.g.value(y).dims2();
        if t == 0 {
            return shape_err("empty token sequence");
        }
        let (er, ed) = ctx.g.value(e).dims2();
        if er != 1 || ed != d {
            return shape_err(format!("conditioning vector [{er}, {ed}] for width {d}"));
        }
        let scale = 1.0 / (self.d_head as f64).sqrt();
        let live: Vec<usize> = (0..t).map(|i| i + 2).collect();
        let mut outs = Vec::with_capacity(self.heads.len());
        let mut weights = Vec::with_capacity(self.heads.len());
        for h in &self.heads {
            let [wq, wk, wv, ck, cv] = [h.w_q, h.w_k, h.w_v, h.c_k, h.c_v].map(|id| ctx.param(id));
            let q = ctx.g.matmul(y, wq)?;
            let kc = ctx.g.matmul(e, ck)?;
            let kt = ctx.g.matmul(y, wk)?;
            let k = ctx.g.concat(&[kc, kt], 0)?;
            let vc = ctx.g.matmul(e, cv)?;
            let vt = ctx.g.matmul(y, wv)?;
            let v = ctx.g.concat(&[vc, vt], 0)?;
            let s = ctx.g.matmul_nt(q, k)?;
            let s = ctx.g.scale(s, scale)?;
            let a = ctx.g.masked_softmax(s, live.clone())?;
            outs.push(ctx.g.matmul(a, v)?);
            weights.push(a);
        }
        let out = if outs.len() == 1 { outs[0] } else { ctx.g.concat(&outs, 1)? };
        Ok((out, weights))
    }
}

/// Evaluates the attention layer alone with frozen weights.
pub fn pseudo_self_attention(store: &ParamStore, layer: &PsAttention, e: &[f64], y: &Tensor) -> Result<Tensor> {
    let mut ctx = Ctx::frozen(store);
    let ev = ctx.g.constant(Tensor::row(e.to_vec()));
    let yv = ctx.g.constant(y.clone());
    let (out, _) = layer.forward(&mut ctx, ev, yv)?;
    Ok(ctx.g.value(out).clone())
}

#[derive(Clone, Debug)]
pub struct DecoderBlock {
    pub ln1: LayerNorm,
    pub attn: PsAttention,
    pub proj: Linear,
    pub ln2: LayerNorm,
    pub ff_up: Linear,
    pub ff_down: Linear,
}

/// Causal language model conditioned on one `d_t` vector per sequence.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub cfg: DecoderConfig,
    pub vocab_size: usize,
    pub tok_emb: ParamId,
    pub pos_emb: ParamId,
    pub blocks: Vec<DecoderBlock>,
    pub ln_f: LayerNorm,
    /// Zero-initialized so the untrained model predicts a uniform distribution.
    pub lm_head: Linear,
}

impl Decoder {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: &DecoderConfig, vocab_size: usize, rng: &mut SeedRng) -> Result<Self> {
        cfg.validate()?;
        if vocab_size == 0 {
            return Err(Error::Config("empty vocabulary".into()));
        }
        let d = cfg.d_t;
        let tok_emb = store.init_weight(&format!("{prefix}.tok_emb"), vocab_size, d, rng);
        let pos_emb = store.init_weight(&format!("{prefix}.pos_emb"), cfg.max_positions, d, rng);
        let blocks = (0..cfg.layers)
            .map(|l| {
                let p = format!("{prefix}.block{l}");
                DecoderBlock {
                    ln1: LayerNorm::new(store, &format!("{p}.ln1"), d),
                    attn: PsAttention::new(store, &format!("{p}.attn"), d, cfg.heads, rng),
                    proj: Linear::new(store, &format!("{p}.attn.out"), d, d, true, rng),
                    ln2: LayerNorm::new(store, &format!("{p}.ln2"), d),
                    ff_up: Linear::new(store, &format!("{p}.ff.up"), d, 4 * d, true, rng),
                    ff_down: Linear::new(store, &format!("{p}.ff.down"), 4 * d, d, true, rng),
                }
            })
            .collect();
        let ln_f = LayerNorm::new(store, &format!("{prefix}.ln_f"), d);
        let lm_head = Linear::zeroed(store, &format!("{prefix}.lm_head"), d, vocab_size, true);
        Ok(Self { cfg: cfg.clone(), vocab_size, tok_emb, pos_emb, blocks, ln_f, lm_head })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut out = vec![self.tok_emb, self.pos_emb];
        for b in &self.blocks {
            out.extend(b.ln1.params());
            out.extend(b.attn.params());
            out.extend(b.proj.params());
            out.extend(b.ln2.params());
            out.extend(b.ff_up.params());
            out.extend(b.ff_down.params());
        }
        out.extend(self.ln_f.params());
        out.extend(self.lm_head.params());
        out
    }

    /// Next-token logits `[T, V]` for `ids` conditioned on `e` (`[1, d_t]`).
    pub fn forward(&self, ctx: &mut Ctx, e: Var, ids: &[usize]) -> Result<Var> {
        if ids.is_empty() {
            return shape_err("empty token sequence");
        }
        if ids.len() > self.cfg.max_positions {
            return Err(Error::Shape(format!(
                "sequence of {} tokens exceeds {} positions",
                ids.len(),
                self.cfg.max_positions
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.vocab_size) {
            return Err(Error::OutOfRange { index: bad, len: self.vocab_size });
        }
        let positions: Vec<usize> = (0..ids.len()).collect();
        let te = ctx.param(self.tok_emb);
        let pe = ctx.param(self.pos_emb);
        let tok = ctx.g.embedding(te, ids)?;
        let pos = ctx.g.embedding(pe, &positions)?;
        let mut x = ctx.g.add(tok, pos)?;
        for b in &self.blocks {
            let n = b.ln1.forward(ctx, x)?;
            let (a, _) = b.attn.forward(ctx, e, n)?;
            let a = b.proj.forward(ctx, a)?;
            x = ctx.g.add(x, a)?;
            let n = b.ln2.forward(ctx, x)?;
            let f = b.ff_up.forward(ctx, n)?;
            let f = ctx.g.gelu(f)?;
            let f = b.ff_down.forward(ctx, f)?;
            x = ctx.g.add(x, f)?;
        }
        let x = self.ln_f.forward(ctx, x)?;
        self.lm_head.forward(ctx, x)
    }

    /// Mean next-token NLL of a `[BOS] … [EOS]` sequence, `[PAD]` targets skipped.
    pub fn sequence_loss(&self, ctx: &mut Ctx, e: Var, ids: &[usize]) -> Result<Var> {
        if ids.len() < 2 {
            return shape_err("a training sequence needs at least two tokens");
        }
        let logits = self.forward(ctx, e, &ids[..ids.len() - 1])?;
        let targets: Vec<Option<usize>> = ids[1..].iter().map(|&t| (t != super::PAD).then_some(t)).collect();
        ctx.g.cross_entropy(logits, &targets)
    }
}

/// Logits `[T, V]` with frozen weights.
pub fn decode_forward(store: &ParamStore, dec: &Decoder, e: &[f64], ids: &[usize]) -> Result<Tensor> {
    let mut ctx = Ctx::frozen(store);
    let ev = ctx.g.constant(Tensor::row(e.to_vec()));
    let out = dec.forward(&mut ctx, ev, ids)?;
    Ok(ctx.g.value(out).clone())
}
