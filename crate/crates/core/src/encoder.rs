//! Volume encoder and the multi-label pretraining head.
//!
//! The encoder cuts the volume into non-overlapping patches, passes every
//! voxel through a small pointwise layer, embeds each patch linearly, refines
//! tokens with residual per-token MLPs and mean-pools them into a single
//! feature vector `h`.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{mean_grads, Ctx, OptimizerState, ParamId, ParamStore, SeedRng, Tensor, Var};
use crate::data::{Dataset, Volume};
use crate::error::{shape_err, Error, Result};
use crate::nn::{eval_row, LayerNorm, Linear};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub patch: [usize; 3],
    pub d_h: usize,
    pub layers: usize,
    /// Learned per-token position embedding, zero at initialization.
    pub positional: bool,
    /// Width of the pointwise voxel layer; 0 feeds raw voxels to the embedding.
    pub voxel_channels: usize,
    /// Subtract each patch's mean before anything else.
    pub center: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { patch: [8, 8, 8], d_h: 128, layers: 2, positional: true, voxel_channels: 4, center: false }
    }
}

impl EncoderConfig {
    pub fn validate(&self, shape: [usize; 3]) -> Result<()> {
        if self.d_h == 0 || !self.d_h.is_multiple_of(2) {
            return Err(Error::Config(format!("d_h must be even and positive, got {}", self.d_h)));
        }
        if self.patch.contains(&0) {
            return Err(Error::Config("patch extents must be positive".into()));
        }
        for a in 0..3 {
            if !shape[a].is_multiple_of(self.patch[a]) {
                return Err(Error::Config(format!(
                    "volume shape {shape:?} is not divisible by patch {:?}",
                    self.patch
                )));
            }
        }
        Ok(())
    }

    pub fn tokens(&self, shape: [usize; 3]) -> usize {
        (0..3).map(|a| shape[a] / self.patch[a]).product()
    }

    pub fn patch_len(&self) -> usize {
        self.patch.iter().product()
    }

    /// Width of one token before the patch embedding.
    pub fn token_width(&self) -> usize {
        self.patch_len() * self.voxel_channels.max(1)
    }
}

/// Patches in z, y, x order, each flattened z-major: `[tokens, patch_len]`.
pub fn patchify(x: &Volume, patch: [usize; 3]) -> Result<Tensor> {
    let s = x.shape();
    if patch.contains(&0) || (0..3).any(|a| !s[a].is_multiple_of(patch[a])) {
        return shape_err(format!("volume {s:?} is not divisible by patch {patch:?}"));
    }
    let [pz, py, px] = patch;
    let (nz, ny, nx) = (s[0] / pz, s[1] / py, s[2] / px);
    let mut data = Vec::with_capacity(x.data().len());
    for bz in 0..nz {
        for by in 0..ny {
            for bx in 0..nx {
                for z in 0..pz {
                    for y in 0..py {
                        let start = x.index(bz * pz + z, by * py + y, bx * px);
                        data.extend_from_slice(&x.data()[start..start + px]);
                    }
                }
            }
        }
    }
    Tensor::new([nz * ny * nx, pz * py * px], data)
}

fn center_rows(t: &mut Tensor) {
    let (_, c) = t.dims2();
    for row in t.data_mut().chunks_mut(c) {
        let m = row.iter().sum::<f64>() / c as f64;
        row.iter_mut().for_each(|v| *v -= m);
    }
}

#[derive(Clone, Debug)]
struct MixLayer {
    norm: LayerNorm,
    up: Linear,
    down: Linear,
}

/// `gelu(a_c · v + b_c)` for every voxel `v` and channel `c`. Initialized as
/// soft intensity windows with thresholds spread over `[-0.8, 0.8]`.
#[derive(Clone, Debug)]
struct VoxelLayer {
    w: ParamId,
    b: ParamId,
    channels: usize,
}

const VOXEL_GAIN: f64 = 4.0;

impl VoxelLayer {
    fn new(store: &mut ParamStore, prefix: &str, channels: usize) -> Self {
        let t = |c: usize| -0.8 + 1.6 * (c as f64 + 0.5) / channels as f64;
        let w = store.insert(format!("{prefix}.w"), Tensor::new([1, channels], vec![VOXEL_GAIN; channels]).expect("shape"));
        let b = store.insert(format!("{prefix}.b"), Tensor::new([channels], (0..channels).map(|c| -VOXEL_GAIN * t(c)).collect()).expect("shape"));
        Self { w, b, channels }
    }

    fn forward(&self, ctx: &mut Ctx, patches: Var) -> Result<Var> {
        let (tokens, len) = ctx.g.value(patches).dims2();
        let v = ctx.g.reshape(patches, &[tokens * len, 1])?;
        let w = ctx.param(self.w);
        let b = ctx.param(self.b);
        let y = ctx.g.matmul(v, w)?;
        let y = ctx.g.add_bias(y, b)?;
        let y = ctx.g.gelu(y)?;
        ctx.g.reshape(y, &[tokens, len * self.channels])
    }
}

/// The visual encoder: volume to `h`.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    shape: [usize; 3],
    voxel: Option<VoxelLayer>,
    embed: Linear,
    pos: Option<ParamId>,
    layers: Vec<MixLayer>,
    norm: LayerNorm,
}

impl Encoder {
    /// Registers parameters under `prefix` for volumes of `shape`.
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: &EncoderConfig, shape: [usize; 3], rng: &mut SeedRng) -> Result<Self> {
        cfg.validate(shape)?;
        let d = cfg.d_h;
        let voxel = (cfg.voxel_channels > 0).then(|| VoxelLayer::new(store, &format!("{prefix}.voxel"), cfg.voxel_channels));
        let embed = Linear::new(store, &format!("{prefix}.embed"), cfg.token_width(), d, true, rng);
        let pos = cfg
            .positional
            .then(|| store.init_zeros(&format!("{prefix}.pos"), &[cfg.tokens(shape), d]));
        let layers = (0..cfg.layers)
            .map(|l| MixLayer {
                norm: LayerNorm::new(store, &format!("{prefix}.mix{l}.ln"), d),
                up: Linear::new(store, &format!("{prefix}.mix{l}.up"), d, 2 * d, true, rng),
                down: Linear::new(store, &format!("{prefix}.mix{l}.down"), 2 * d, d, true, rng),
            })
            .collect();
        let norm = LayerNorm::new(store, &format!("{prefix}.ln"), d);
        Ok(Self { cfg: cfg.clone(), shape, voxel, embed, pos, layers, norm })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut out: Vec<ParamId> = self.voxel.iter().flat_map(|v| [v.w, v.b]).collect();
        out.extend(self.embed.params());
        out.extend(self.pos);
        for l in &self.layers {
            out.extend(l.norm.params());
            out.extend(l.up.params());
            out.extend(l.down.params());
        }
        out.extend(self.norm.params());
        out
    }

    /// `h` as a `[1, d_h]` node.
    pub fn forward(&self, ctx: &mut Ctx, x: &Volume) -> Result<Var> {
        if x.shape() != self.shape {
            return shape_err(format!("encoder expects {:?}, got {:?}", self.shape, x.shape()));
        }
        let mut patches = patchify(x, self.cfg.patch)?;
        if self.cfg.center {
            center_rows(&mut patches);
        }
        let mut t = ctx.g.constant(patches);
        if let Some(v) = &self.voxel {
            t = v.forward(ctx, t)?;
        }
        let mut t = self.embed.forward(ctx, t)?;
        if let Some(pos) = self.pos {
            let p = ctx.param(pos);
            t = ctx.g.add(t, p)?;
        }
        for l in &self.layers {
            let n = l.norm.forward(ctx, t)?;
            let u = l.up.forward(ctx, n)?;
            let u = ctx.g.gelu(u)?;
            let d = l.down.forward(ctx, u)?;
            t = ctx.g.add(t, d)?;
        }
        let t = self.norm.forward(ctx, t)?;
        ctx.g.mean_rows(t)
    }
}

/// `h = Φ_V(x)` with frozen weights.
pub fn encode_volume(store: &ParamStore, enc: &Encoder, x: &Volume) -> Result<Vec<f64>> {
    eval_row(store, |ctx| enc.forward(ctx, x))
}

/// Ψ: linear map from `h` to one logit per label.
#[derive(Clone, Debug)]
pub struct LabelHead {
    pub linear: Linear,
}

impl LabelHead {
    pub fn new(store: &mut ParamStore, prefix: &str, d_h: usize, k: usize, rng: &mut SeedRng) -> Self {
        Self { linear: Linear::new(store, prefix, d_h, k, true, rng) }
    }

    pub fn k(&self) -> usize {
        self.linear.fan_out
    }

    pub fn forward(&self, ctx: &mut Ctx, h: Var) -> Result<Var> {
        self.linear.forward(ctx, h)
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.linear.params()
    }
}

/// Raw logits `Ψ(h)`; apply a sigmoid to get scores.
pub fn predict_multilabel(store: &ParamStore, head: &LabelHead, h: &[f64]) -> Result<Vec<f64>> {
    eval_row(store, |ctx| {
        let hv = ctx.g.constant(Tensor::row(h.to_vec()));
        head.forward(ctx, hv)
    })
}

/// Mean-over-labels BCE of `Ψ(Φ_V(x))` against `labels`.
pub fn pretrain_loss(ctx: &mut Ctx, enc: &Encoder, head: &LabelHead, x: &Volume, labels: &[bool]) -> Result<Var> {
    let h = enc.forward(ctx, x)?;
    let logits = head.forward(ctx, h)?;
    let p = ctx.g.sigmoid(logits)?;
    let y: Vec<f64> = labels.iter().map(|&l| l as u8 as f64).collect();
    ctx.g.bce(p, &y)
}

/// One pass over `data` in shuffled mini-batches. Returns the mean over
/// batches of the mean-over-labels BCE.
pub fn pretrain_epoch(
    store: &mut ParamStore,
    enc: &Encoder,
    head: &LabelHead,
    data: &Dataset,
    batch: usize,
    opt: &mut OptimizerState,
    rng: &mut SeedRng,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Empty("training set".into()));
    }
    if batch == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let trainable: HashSet<ParamId> = enc.params().into_iter().chain(head.params()).collect();
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);
    let mut total = 0.0;
    let mut batches = 0;
    for chunk in order.chunks(batch) {
        let items = chunk
            .iter()
            .map(|&i| Ok((data.volume(i)?, &data.cases[i].labels)))
            .collect::<Result<Vec<_>>>()?;
        let (loss, grads) = mean_grads(store, Some(&trainable), &items, |ctx, (x, y)| {
            pretrain_loss(ctx, enc, head, x, y)
        })?;
        if !loss.is_finite() {
            return Err(Error::NonFinite("pretraining loss".into()));
        }
        opt.step(store, &grads)?;
        total += loss;
        batches += 1;
    }
    Ok(total / batches as f64)
}
