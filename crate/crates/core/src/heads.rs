//! Per-label projection and classification heads on top of the shared
//! encoder, threshold calibration and abnormality selection.

use std::collections::HashSet;

use log::warn;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{mean_grads, Ctx, OptimizerState, ParamId, ParamStore, SeedRng, Tensor, Var};
use crate::data::{Dataset, Volume};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::nn::{eval_row, Linear};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadsConfig {
    /// Width of each per-label embedding `h_i`.
    pub d_i: usize,
    /// Hidden width of each projection head.
    pub hidden: usize,
}

impl Default for HeadsConfig {
    fn default() -> Self {
        Self { d_i: 32, hidden: 128 }
    }
}

/// Ψ^p_i: `d_h → hidden → d_i` with a ReLU in between.
#[derive(Clone, Debug)]
pub struct ProjectionHead {
    pub hidden: Linear,
    pub out: Linear,
}

/// Ψ^c_i: `d_i → 1` logit.
#[derive(Clone, Debug)]
pub struct ClassificationHead {
    pub linear: Linear,
}

#[derive(Clone, Debug)]
pub struct MultiTaskHeads {
    pub cfg: HeadsConfig,
    pub projection: Vec<ProjectionHead>,
    pub classification: Vec<ClassificationHead>,
}

impl MultiTaskHeads {
    pub fn new(store: &mut ParamStore, prefix: &str, k: usize, d_h: usize, cfg: &HeadsConfig, rng: &mut SeedRng) -> Result<Self> {
        if k == 0 || cfg.d_i == 0 || cfg.hidden == 0 {
            return Err(Error::Config("heads need K, d_i and hidden width > 0".into()));
        }
        let mut projection = Vec::with_capacity(k);
        let mut classification = Vec::with_capacity(k);
        for i in 0..k {
            projection.push(ProjectionHead {
                hidden: Linear::new(store, &format!("{prefix}.{i}.proj.hidden"), d_h, cfg.hidden, true, rng),
                out: Linear::new(store, &format!("{prefix}.{i}.proj.out"), cfg.hidden, cfg.d_i, true, rng),
            });
            classification.push(ClassificationHead {
                linear: Linear::new(store, &format!("{prefix}.{i}.cls"), cfg.d_i, 1, true, rng),
            });
        }
        Ok(Self { cfg: cfg.clone(), projection, classification })
    }

    pub fn k(&self) -> usize {
        self.projection.len()
    }

    /// Parameters of Ψ^p_i and Ψ^c_i.
    pub fn head_params(&self, i: usize) -> Vec<ParamId> {
        let p = &self.projection[i];
        let mut out = p.hidden.params();
        out.extend(p.out.params());
        out.extend(self.classification[i].linear.params());
        out
    }

    pub fn params(&self) -> Vec<ParamId> {
        (0..self.k()).flat_map(|i| self.head_params(i)).collect()
    }

    /// Errors if any parameter is shared between two labels' heads.
    pub fn check_disjoint(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for i in 0..self.k() {
            for id in self.head_params(i) {
                if !seen.insert(id) {
                    return Err(Error::Graph(format!("head {i} shares a parameter with another head")));
                }
            }
        }
        Ok(())
    }

    pub fn project(&self, ctx: &mut Ctx, h: Var) -> Result<Vec<Var>> {
        self.projection
            .iter()
            .map(|p| {
                let z = p.hidden.forward(ctx, h)?;
                let z = ctx.g.relu(z)?;
                p.out.forward(ctx, z)
            })
            .collect()
    }

    /// One `[1, 1]` logit node per label.
    pub fn classify(&self, ctx: &mut Ctx, h_i: &[Var]) -> Result<Vec<Var>> {
        if h_i.len() != self.k() {
            return Err(Error::Shape(format!("{} embeddings for {} heads", h_i.len(), self.k())));
        }
        self.classification
            .iter()
            .zip(h_i)
            .map(|(c, &x)| c.linear.forward(ctx, x))
            .collect()
    }

    /// Per-label BCE nodes `L_i` for a single case.
    pub fn losses(&self, ctx: &mut Ctx, h: Var, y: &[f64]) -> Result<Vec<Var>> {
        if y.len() != self.k() {
            return Err(Error::Shape(format!("{} labels for {} heads", y.len(), self.k())));
        }
        let h_i = self.project(ctx, h)?;
        let logits = self.classify(ctx, &h_i)?;
        logits
            .into_iter()
            .zip(y)
            .map(|(l, &yi)| {
                let p = ctx.g.sigmoid(l)?;
                ctx.g.bce(p, &[yi])
            })
            .collect()
    }
}

/// `h_i = Ψ^p_i(h)` for every label, frozen weights.
pub fn project_per_label(store: &ParamStore, heads: &MultiTaskHeads, h: &[f64]) -> Result<Vec<Vec<f64>>> {
    if h.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("feature vector".into()));
    }
    let mut ctx = Ctx::frozen(store);
    let hv = ctx.g.constant(Tensor::row(h.to_vec()));
    let out = heads.project(&mut ctx, hv)?;
    Ok(out.into_iter().map(|v| ctx.g.value(v).data().to_vec()).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadLosses {
    pub per_label: Vec<f64>,
    pub total: f64,
}

/// Scores `ŷ_i = sigmoid(Ψ^c_i(h_i))` and the per-label BCE against `y`.
pub fn classify_per_label(
    store: &ParamStore,
    heads: &MultiTaskHeads,
    h_i: &[Vec<f64>],
    y: &[f64],
) -> Result<(Vec<f64>, HeadLosses)> {
    if h_i.len() != heads.k() || y.len() != heads.k() {
        return Err(Error::Shape(format!("expected {} embeddings and labels", heads.k())));
    }
    let logits = logits_from_embeddings(store, heads, h_i)?;
    let scores: Vec<f64> = logits.iter().map(|&l| crate::autodiff::sigmoid(l)).collect();
    let per_label = scores
        .iter()
        .zip(y)
        .map(|(&p, &yi)| crate::autodiff::bce_loss(p, yi))
        .collect::<Result<Vec<_>>>()?;
    let total = per_label.iter().sum();
    Ok((scores, HeadLosses { per_label, total }))
}

fn logits_from_embeddings(store: &ParamStore, heads: &MultiTaskHeads, h_i: &[Vec<f64>]) -> Result<Vec<f64>> {
    let mut ctx = Ctx::frozen(store);
    let vars: Vec<Var> = h_i.iter().map(|v| ctx.g.constant(Tensor::row(v.clone()))).collect();
    let logits = heads.classify(&mut ctx, &vars)?;
    Ok(logits.iter().map(|&l| ctx.g.value(l).data()[0]).collect())
}

/// Backpropagates `Σ L_i` over the labels with `include[i]` set and returns
/// the parameter gradients. Head `i` is reached only through `L_i`; the
/// encoder receives the sum.
pub fn routed_backward(ctx: &mut Ctx, heads: &MultiTaskHeads, losses: &[Var], include: &[bool]) -> Result<Vec<(ParamId, Tensor)>> {
    heads.check_disjoint()?;
    if losses.len() != heads.k() || include.len() != heads.k() {
        return Err(Error::Shape(format!("expected {} losses", heads.k())));
    }
    let kept: Vec<Var> = losses.iter().zip(include).filter(|(_, &k)| k).map(|(&l, _)| l).collect();
    let total = match kept.split_first() {
        None => return Ok(Vec::new()),
        Some((&first, rest)) => {
            let mut t = first;
            for &l in rest {
                t = ctx.g.add(t, l)?;
            }
            t
        }
    };
    ctx.g.backward(total)?;
    Ok(ctx.param_grads())
}

/// Why a label's threshold was not learned from both classes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ThresholdFlag {
    Calibrated,
    /// No validation positives: τ = 1, the label is never predicted.
    NoPositives,
    /// No validation negatives: τ = 0.
    NoNegatives,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdVector {
    pub tau: Vec<f64>,
    pub flags: Vec<ThresholdFlag>,
}

impl ThresholdVector {
    pub fn len(&self) -> usize {
        self.tau.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tau.is_empty()
    }
}

/// F1 with every zero denominator read as 0.
pub fn f1_score(tp: usize, fp: usize, fn_: usize) -> f64 {
    let p = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let r = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Candidate thresholds: 0, midpoints of consecutive distinct scores, 1.
pub fn candidate_thresholds(scores: &[f64]) -> Vec<f64> {
    let mut s: Vec<f64> = scores.to_vec();
    s.sort_by(f64::total_cmp);
    s.dedup();
    let mut c = vec![0.0];
    c.extend(s.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    c.push(1.0);
    c
}

/// Threshold maximizing validation F1 for one label, with the F1 it attains.
/// Ties go to the larger threshold.
pub fn calibrate_label(scores: &[f64], labels: &[bool]) -> Result<(f64, f64, ThresholdFlag)> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("validation scores".into()));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return Ok((1.0, 0.0, ThresholdFlag::NoPositives));
    }
    if positives == labels.len() {
        let tp = scores.iter().filter(|&&s| s > 0.0).count();
        return Ok((0.0, f1_score(tp, 0, positives - tp), ThresholdFlag::NoNegatives));
    }
    // sorted scores with a running count of positives at or above each rank
    let mut pairs: Vec<(f64, bool)> = scores.iter().copied().zip(labels.iter().copied()).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut pos_above = vec![0usize; pairs.len() + 1];
    for i in (0..pairs.len()).rev() {
        pos_above[i] = pos_above[i + 1] + pairs[i].1 as usize;
    }
    let mut best = (f64::NEG_INFINITY, 0.0);
    for tau in candidate_thresholds(scores) {
        let first = pairs.partition_point(|p| p.0 <= tau);
        let predicted = pairs.len() - first;
        let tp = pos_above[first];
        let f1 = f1_score(tp, predicted - tp, positives - tp);
        if f1 >= best.0 {
            best = (f1, tau);
        }
    }
    Ok((best.1, best.0, ThresholdFlag::Calibrated))
}

/// Per-label thresholds. `scores[i][n]` is label `i`'s score on case `n`.
pub fn calibrate_thresholds(scores: &[Vec<f64>], labels: &[Vec<bool>]) -> Result<ThresholdVector> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} score rows for {} label rows", scores.len(), labels.len())));
    }
    let mut tau = Vec::with_capacity(scores.len());
    let mut flags = Vec::with_capacity(scores.len());
    for (i, (s, y)) in scores.iter().zip(labels).enumerate() {
        let (t, _, flag) = calibrate_label(s, y)?;
        if flag != ThresholdFlag::Calibrated {
            warn!("label {i}: threshold {t} ({flag:?})");
        }
        tau.push(t);
        flags.push(flag);
    }
    Ok(ThresholdVector { tau, flags })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SelectMode {
    /// Only true positives: `ŷ_i > τ_i` and `y_i = 1`.
    Training,
    /// Every predicted positive.
    Inference,
}

/// Selected label indices in ascending order.
pub fn select_abnormal(scores: &[f64], thresholds: &ThresholdVector, mode: SelectMode, labels: Option<&[bool]>) -> Result<Vec<usize>> {
    if scores.len() != thresholds.len() {
        return Err(Error::Shape(format!("{} scores for {} thresholds", scores.len(), thresholds.len())));
    }
    let predicted = (0..scores.len()).filter(|&i| scores[i] > thresholds.tau[i]);
    match mode {
        SelectMode::Inference => Ok(predicted.collect()),
        SelectMode::Training => {
            let y = labels.ok_or_else(|| Error::Config("training-mode selection needs labels".into()))?;
            if y.len() != scores.len() {
                return Err(Error::Shape(format!("{} labels for {} scores", y.len(), scores.len())));
            }
            Ok(predicted.filter(|&i| y[i]).collect())
        }
    }
}

/// Sum of per-label BCE through encoder and heads for one case.
pub fn heads_loss(ctx: &mut Ctx, enc: &Encoder, heads: &MultiTaskHeads, x: &Volume, labels: &[bool]) -> Result<Var> {
    let h = enc.forward(ctx, x)?;
    let y: Vec<f64> = labels.iter().map(|&l| l as u8 as f64).collect();
    let losses = heads.losses(ctx, h, &y)?;
    let mut total = losses[0];
    for &l in &losses[1..] {
        total = ctx.g.add(total, l)?;
    }
    Ok(total)
}

/// One shuffled pass of joint encoder + heads training. The encoder and the
/// heads have separate optimizers so their learning rates can differ.
/// Returns the mean over batches of `Σ_i L_i`.
#[allow(clippy::too_many_arguments)]
pub fn heads_epoch(
    store: &mut ParamStore,
    enc: &Encoder,
    heads: &MultiTaskHeads,
    data: &Dataset,
    batch: usize,
    trunk_opt: &mut OptimizerState,
    head_opt: &mut OptimizerState,
    rng: &mut SeedRng,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Empty("training set".into()));
    }
    if batch == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    heads.check_disjoint()?;
    let trunk: HashSet<ParamId> = enc.params().into_iter().collect();
    let trainable: HashSet<ParamId> = trunk.iter().copied().chain(heads.params()).collect();
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);
    let mut total = 0.0;
    let mut batches = 0;
    for chunk in order.chunks(batch) {
        let items = chunk
            .iter()
            .map(|&i| Ok((data.volume(i)?, &data.cases[i].labels)))
            .collect::<Result<Vec<_>>>()?;
        let (loss, grads) = mean_grads(store, Some(&trainable), &items, |ctx, (x, y)| heads_loss(ctx, enc, heads, x, y))?;
        if !loss.is_finite() {
            return Err(Error::NonFinite("heads loss".into()));
        }
        let (tg, hg): (Vec<_>, Vec<_>) = grads.into_iter().partition(|(id, _)| trunk.contains(id));
        trunk_opt.step(store, &tg)?;
        head_opt.step(store, &hg)?;
        total += loss;
        batches += 1;
    }
    Ok(total / batches as f64)
}

/// Sigmoid scores of every head for one feature vector.
pub fn head_scores(store: &ParamStore, heads: &MultiTaskHeads, h: &[f64]) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let h_i = project_per_label(store, heads, h)?;
    let logits = logits_from_embeddings(store, heads, &h_i)?;
    Ok((h_i, logits.into_iter().map(crate::autodiff::sigmoid).collect()))
}

/// Sigmoid scores from Ψ for one feature vector.
pub fn psi_scores(store: &ParamStore, psi: &crate::encoder::LabelHead, h: &[f64]) -> Result<Vec<f64>> {
    let logits = eval_row(store, |ctx| {
        let hv = ctx.g.constant(Tensor::row(h.to_vec()));
        psi.forward(ctx, hv)
    })?;
    Ok(logits.into_iter().map(crate::autodiff::sigmoid).collect())
}
