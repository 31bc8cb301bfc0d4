use std::collections::HashSet;

use log::info;
use rand::seq::SliceRandom;
use rayon::prelude::*;

use super::generate::{case_features, CaseFeatures};
use super::model::module_rng;
use super::{Model, Stage, TextProjector, Variant};
use crate::autodiff::{mean_grads, AdamConfig, OptimizerState, ParamId, ParamStore, Tensor};
use crate::checkpoint::Checkpoint;
use crate::config::{RunConfig, StageConfig};
use crate::data::{Dataset, Splits};
use crate::encoder::{encode_volume, pretrain_epoch};
use crate::error::{Error, Result};
use crate::heads::{calibrate_thresholds, head_scores, heads_epoch, psi_scores, select_abnormal, SelectMode, ThresholdVector};
use crate::textgen::{token_weights, weighted_sequence_loss, Decoder};

/// Outcome of one stage: the trained model and the mean loss of each epoch
/// run in this call.
#[derive(Clone, Debug)]
pub struct StageReport {
    pub stage: Stage,
    pub model: Model,
    /// `(epoch, mean loss)`, epochs counted across resumed runs.
    pub losses: Vec<(usize, f64)>,
}

impl StageReport {
    pub fn checkpoint(&self) -> Result<Checkpoint> {
        self.model.checkpoint()
    }
}

fn check_splits(cfg: &RunConfig, splits: &Splits) -> Result<()> {
    let reg = cfg.data.registry()?;
    for d in [&splits.train, &splits.val, &splits.test] {
        if d.registry != reg || d.params.shape != cfg.data.shape {
            return Err(Error::Config("dataset does not match the configured labels or volume shape".into()));
        }
    }
    if splits.train.is_empty() || splits.val.is_empty() {
        return Err(Error::Empty("training and validation splits must be non-empty".into()));
    }
    Ok(())
}

fn required_prior(stage: Stage) -> Option<Stage> {
    match stage {
        Stage::Pretrain => None,
        Stage::Heads | Stage::Baseline => Some(Stage::Pretrain),
        Stage::Decoder => Some(Stage::Heads),
    }
}

fn adam(s: &StageConfig, lr: f64) -> AdamConfig {
    AdamConfig { weight_decay: s.weight_decay, ..AdamConfig::adam(lr) }
}

/// Runs `stage` on `splits`. `prior` is the checkpoint of the preceding stage,
/// or of this stage to continue training it.
pub fn run_stage(stage: Stage, cfg: &RunConfig, splits: &Splits, prior: Option<&Checkpoint>, force: bool) -> Result<StageReport> {
    cfg.validate()?;
    check_splits(cfg, splits)?;
    let resume = prior.is_some_and(|c| c.last_stage() == Some(stage));
    if !resume {
        match (required_prior(stage), prior) {
            (Some(need), None) => {
                return Err(Error::MissingPrerequisite(format!("stage {} needs a {} checkpoint", stage.name(), need.name())));
            }
            (Some(need), Some(c)) if c.last_stage() != Some(need) => {
                return Err(Error::MissingPrerequisite(format!(
                    "stage {} needs a {} checkpoint, got one ending in {}",
                    stage.name(),
                    need.name(),
                    c.last_stage().map_or("nothing", Stage::name)
                )));
            }
            (None, Some(_)) => return Err(Error::Config("pretraining starts from scratch; only its own checkpoint can be resumed".into())),
            _ => {}
        }
    }
    let variant = match stage {
        Stage::Decoder => Variant::new(true, cfg.expand),
        Stage::Baseline => Variant::new(false, cfg.expand),
        _ => Variant::Full,
    };
    if let Some(v) = prior.filter(|_| resume && stage.is_text()).and_then(|c| c.meta.variant) {
        if v != variant {
            return Err(Error::Config(format!("checkpoint holds the {} variant, configuration asks for {}", v.name(), variant.name())));
        }
    }
    let mut model = match prior {
        Some(c) => Model::from_prior(cfg, variant, c, stage, force)?,
        None => Model::new(cfg, variant)?,
    };
    if !resume {
        model.optimizers.clear();
    }
    let start = if resume { model.epochs.get(stage.name()).copied().unwrap_or(0) } else { 0 };
    let losses = match stage {
        Stage::Pretrain => train_pretrain(&mut model, &splits.train, start)?,
        Stage::Heads => train_heads(&mut model, &splits.train, start)?,
        Stage::Decoder | Stage::Baseline => train_text(&mut model, stage, &splits.train, start)?,
    };
    match stage {
        Stage::Pretrain => model.psi_thresholds = Some(calibrate(&model, &splits.val, false)?),
        Stage::Heads => model.head_thresholds = Some(calibrate(&model, &splits.val, true)?),
        _ => {}
    }
    model.epochs.insert(stage.name().to_string(), start + losses.len());
    if !resume {
        model.stages.push(stage);
    }
    model.round_to_f32();
    Ok(StageReport { stage, model, losses })
}

fn take_optimizer(model: &mut Model, name: &str, config: AdamConfig) -> OptimizerState {
    match model.optimizers.remove(name) {
        Some(mut o) => {
            o.config = config;
            o
        }
        None => OptimizerState::new(config),
    }
}

fn train_pretrain(model: &mut Model, data: &Dataset, start: usize) -> Result<Vec<(usize, f64)>> {
    let s = model.config.train.pretrain;
    let mut opt = take_optimizer(model, "pretrain", adam(&s, s.lr));
    let mut losses = Vec::with_capacity(s.epochs);
    for epoch in start..start + s.epochs {
        let mut rng = module_rng(model.config.seed, &format!("shuffle.pretrain.{epoch}"));
        let loss = pretrain_epoch(&mut model.store, &model.encoder, &model.psi, data, s.batch, &mut opt, &mut rng)?;
        info!("pretrain epoch {}: loss {loss:.5}", epoch + 1);
        losses.push((epoch + 1, loss));
    }
    model.optimizers.insert("pretrain".into(), opt);
    Ok(losses)
}

fn train_heads(model: &mut Model, data: &Dataset, start: usize) -> Result<Vec<(usize, f64)>> {
    let s = model.config.train.heads;
    let mut trunk = take_optimizer(model, "heads.trunk", adam(&s, s.lr));
    let mut heads = take_optimizer(model, "heads.heads", adam(&s, model.config.train.head_lr));
    let mut losses = Vec::with_capacity(s.epochs);
    for epoch in start..start + s.epochs {
        let mut rng = module_rng(model.config.seed, &format!("shuffle.heads.{epoch}"));
        let loss = heads_epoch(&mut model.store, &model.encoder, &model.heads, data, s.batch, &mut trunk, &mut heads, &mut rng)?;
        info!("heads epoch {}: loss {loss:.5}", epoch + 1);
        losses.push((epoch + 1, loss));
    }
    model.optimizers.insert("heads.trunk".into(), trunk);
    model.optimizers.insert("heads.heads".into(), heads);
    Ok(losses)
}

/// Thresholds from validation scores of Ψ or of the per-label heads.
fn calibrate(model: &Model, val: &Dataset, multitask: bool) -> Result<ThresholdVector> {
    let rows: Vec<Vec<f64>> = (0..val.len())
        .into_par_iter()
        .map(|n| {
            let h = encode_volume(&model.store, &model.encoder, &val.volume(n)?)?;
            if multitask {
                Ok(head_scores(&model.store, &model.heads, &h)?.1)
            } else {
                psi_scores(&model.store, &model.psi, &h)
            }
        })
        .collect::<Result<_>>()?;
    let k = model.k();
    let scores: Vec<Vec<f64>> = (0..k).map(|i| rows.iter().map(|r| r[i]).collect()).collect();
    let labels: Vec<Vec<bool>> = (0..k).map(|i| val.cases.iter().map(|c| c.labels[i]).collect()).collect();
    calibrate_thresholds(&scores, &labels)
}

/// `(projector input, [BOS] … [EOS])` for every true-positive label of every case.
fn text_pairs(model: &Model, data: &Dataset) -> Result<Vec<(Vec<f64>, Vec<usize>)>> {
    let thresholds = model
        .thresholds()
        .ok_or_else(|| Error::MissingPrerequisite("calibrated thresholds".into()))?;
    let feats: Vec<CaseFeatures> = (0..data.len())
        .into_par_iter()
        .map(|n| case_features(model, &data.volume(n)?))
        .collect::<Result<_>>()?;
    let mut pairs = Vec::new();
    for (case, f) in data.cases.iter().zip(&feats) {
        let sentences = case.sentences();
        for i in select_abnormal(&f.scores, thresholds, SelectMode::Training, Some(&case.labels))? {
            let (_, s) = sentences
                .iter()
                .find(|(l, _)| *l == i)
                .ok_or_else(|| Error::Format(format!("case {} has no sentence for label {i}", case.id)))?;
            pairs.push((f.conditioning(model.variant, i)?, model.vocab.encode_sentence(s)));
        }
    }
    Ok(pairs)
}

/// One step on a batch of pairs, gradient flowing through Φ_T into the decoder.
pub(crate) fn text_step(
    store: &mut ParamStore,
    projector: &TextProjector,
    decoder: &Decoder,
    batch: &[&(Vec<f64>, Vec<usize>)],
    trainable: &HashSet<ParamId>,
    opt: &mut OptimizerState,
) -> Result<f64> {
    let weights = token_weights(batch.iter().map(|(_, s)| s.as_slice()));
    let items: Vec<(&(Vec<f64>, Vec<usize>), f64)> = batch.iter().copied().zip(weights).collect();
    let (loss, grads) = mean_grads(store, Some(trainable), &items, |ctx, ((x, ids), w)| {
        let xv = ctx.g.constant(Tensor::row(x.clone()));
        let e = projector.forward(ctx, xv)?;
        weighted_sequence_loss(ctx, decoder, e, ids, *w)
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

fn train_text(model: &mut Model, stage: Stage, data: &Dataset, start: usize) -> Result<Vec<(usize, f64)>> {
    let s = model.config.train.decoder;
    let pairs = text_pairs(model, data)?;
    if pairs.is_empty() {
        return Err(Error::Empty("no true-positive labels to train the decoder on".into()));
    }
    info!("{}: {} training sentences", stage.name(), pairs.len());
    let trainable = model.text_params();
    let mut opt = take_optimizer(model, stage.name(), AdamConfig::adamw(s.lr, s.weight_decay));
    let mut losses = Vec::with_capacity(s.epochs);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    for epoch in start..start + s.epochs {
        let mut rng = module_rng(model.config.seed, &format!("shuffle.{}.{epoch}", stage.name()));
        order.sort_unstable();
        order.shuffle(&mut rng);
        let (mut total, mut batches) = (0.0, 0);
        for chunk in order.chunks(s.batch) {
            let batch: Vec<&(Vec<f64>, Vec<usize>)> = chunk.iter().map(|&i| &pairs[i]).collect();
            total += text_step(&mut model.store, &model.projector, &model.decoder, &batch, &trainable, &mut opt)?;
            batches += 1;
        }
        let loss = total / batches as f64;
        info!("{} epoch {}: loss {loss:.5}", stage.name(), epoch + 1);
        losses.push((epoch + 1, loss));
    }
    model.optimizers.insert(stage.name().to_string(), opt);
    Ok(losses)
}
