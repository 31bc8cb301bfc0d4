//! Glue between the stages: abnormality embeddings, the visual-to-text
//! projector, the model bundle, stage training, generation and the ablation
//! driver.

mod experiment;
mod generate;
mod model;
mod train;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use experiment::{run_ablation, run_variant_seed, AblationRun, ExperimentSeed};
pub use generate::{case_features, generate_from_features, generate_report, generate_split, CaseFeatures, GeneratedReport, SelectedSentence};
pub use model::{module_seed, Model, PREFIXES};
pub use train::{run_stage, StageReport};

use crate::autodiff::{ParamId, ParamStore, SeedRng, Tensor, Var};
use crate::autodiff::Ctx;
use crate::error::{Error, Result};
use crate::nn::{eval_row, Linear};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Heads,
    Decoder,
    Baseline,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Pretrain, Stage::Heads, Stage::Decoder, Stage::Baseline];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Heads => "heads",
            Stage::Decoder => "decoder",
            Stage::Baseline => "baseline",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage `{s}`")))
    }

    /// Trains the text side (projector and decoder).
    pub fn is_text(self) -> bool {
        matches!(self, Stage::Decoder | Stage::Baseline)
    }
}

/// Ablation variants: whether selection and conditioning go through the
/// per-label heads, and whether the conditioning vector is slot-expanded.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Baseline,
    MultiTask,
    Expansion,
    Full,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Baseline, Variant::MultiTask, Variant::Expansion, Variant::Full];

    pub fn new(multitask: bool, expand: bool) -> Self {
        match (multitask, expand) {
            (false, false) => Variant::Baseline,
            (true, false) => Variant::MultiTask,
            (false, true) => Variant::Expansion,
            (true, true) => Variant::Full,
        }
    }

    pub fn multitask(self) -> bool {
        matches!(self, Variant::MultiTask | Variant::Full)
    }

    pub fn expand(self) -> bool {
        matches!(self, Variant::Expansion | Variant::Full)
    }

    /// The text stage that trains this variant.
    pub fn stage(self) -> Stage {
        if self.multitask() {
            Stage::Decoder
        } else {
            Stage::Baseline
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::MultiTask => "multitask",
            Variant::Expansion => "expansion",
            Variant::Full => "full",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }

    /// Width of the projector input for `k` labels.
    pub fn input_dim(self, k: usize, d_h: usize, d_i: usize) -> usize {
        let d = if self.multitask() { d_i } else { d_h };
        if self.expand() {
            k * d
        } else {
            d
        }
    }
}

/// `[0, …, 0, h_i, 0, …, 0]` with `h_i` in slot `i` of `k`.
pub fn expand_embedding(h_i: &[f64], i: usize, k: usize) -> Result<Vec<f64>> {
    if i >= k {
        return Err(Error::OutOfRange { index: i, len: k });
    }
    let d = h_i.len();
    let mut out = vec![0.0; k * d];
    out[i * d..(i + 1) * d].copy_from_slice(h_i);
    Ok(out)
}

/// Φ_T: one GELU hidden layer of width `d_t`, then a `d_t → d_t` output layer.
#[derive(Clone, Debug)]
pub struct TextProjector {
    pub hidden: Linear,
    pub out: Linear,
}

impl TextProjector {
    pub fn new(store: &mut ParamStore, prefix: &str, d_in: usize, d_t: usize, rng: &mut SeedRng) -> Self {
        Self {
            hidden: Linear::new(store, &format!("{prefix}.hidden"), d_in, d_t, true, rng),
            out: Linear::new(store, &format!("{prefix}.out"), d_t, d_t, true, rng),
        }
    }

    pub fn d_in(&self) -> usize {
        self.hidden.fan_in
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let z = self.hidden.forward(ctx, x)?;
        let z = ctx.g.gelu(z)?;
        self.out.forward(ctx, z)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.hidden.params();
        p.extend(self.out.params());
        p
    }
}

/// `e_i = Φ_T(x)` with frozen weights.
pub fn project_to_text(store: &ParamStore, proj: &TextProjector, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != proj.d_in() {
        return Err(Error::Shape(format!("projector input of {} for width {}", x.len(), proj.d_in())));
    }
    eval_row(store, |ctx| {
        let xv = ctx.g.constant(Tensor::row(x.to_vec()));
        proj.forward(ctx, xv)
    })
}

/// SHA-256 over the names, shapes and `f64` bytes of every parameter whose
/// name starts with one of `prefixes`, in name order.
pub fn param_digest(store: &ParamStore, prefixes: &[&str]) -> String {
    let mut h = Sha256::new();
    for (name, t) in store.sorted() {
        if !prefixes.iter().any(|p| name.starts_with(p)) {
            continue;
        }
        h.update(name.as_bytes());
        for &d in t.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for &v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}
