use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{expand_embedding, project_to_text, Model, Variant};
use crate::data::{Dataset, Volume};
use crate::encoder::encode_volume;
use crate::error::{Error, Result};
use crate::heads::{head_scores, psi_scores, select_abnormal, SelectMode};
use crate::textgen::beam_search;

/// Upstream outputs for one volume.
#[derive(Clone, Debug, PartialEq)]
pub struct CaseFeatures {
    pub h: Vec<f64>,
    /// Per-label embeddings; empty for variants without the heads.
    pub h_i: Vec<Vec<f64>>,
    /// Scores used for selection.
    pub scores: Vec<f64>,
}

impl CaseFeatures {
    /// Projector input for label `i`.
    pub fn conditioning(&self, variant: Variant, i: usize) -> Result<Vec<f64>> {
        let k = self.scores.len();
        let base = if variant.multitask() {
            self.h_i.get(i).ok_or(Error::OutOfRange { index: i, len: self.h_i.len() })?
        } else {
            &self.h
        };
        if variant.expand() {
            expand_embedding(base, i, k)
        } else {
            Ok(base.clone())
        }
    }
}

pub fn case_features(model: &Model, x: &Volume) -> Result<CaseFeatures> {
    let h = encode_volume(&model.store, &model.encoder, x)?;
    if model.variant.multitask() {
        let (h_i, scores) = head_scores(&model.store, &model.heads, &h)?;
        Ok(CaseFeatures { h, h_i, scores })
    } else {
        let scores = psi_scores(&model.store, &model.psi, &h)?;
        Ok(CaseFeatures { h, h_i: Vec::new(), scores })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectedSentence {
    pub label: usize,
    pub name: String,
    pub score: f64,
    pub sentence: String,
}

/// One JSON line of generation output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratedReport {
    pub case_id: u64,
    pub seed: u64,
    pub config_hash: String,
    pub variant: Variant,
    /// Ascending label order.
    pub selected: Vec<SelectedSentence>,
    pub report: String,
    /// No label was selected.
    pub empty: bool,
}

fn check_ready(model: &Model) -> Result<()> {
    if model.thresholds().is_none() {
        return Err(Error::MissingPrerequisite("calibrated thresholds".into()));
    }
    if !model.has_stage(model.variant.stage()) {
        return Err(Error::MissingPrerequisite(format!("trained {} decoder", model.variant.name())));
    }
    Ok(())
}

/// Selection, projection and beam search for every selected label.
pub fn generate_from_features(model: &Model, case_id: u64, f: &CaseFeatures) -> Result<GeneratedReport> {
    check_ready(model)?;
    let thresholds = model.thresholds().expect("checked");
    let chosen = select_abnormal(&f.scores, thresholds, SelectMode::Inference, None)?;
    let mut selected = Vec::with_capacity(chosen.len());
    for i in chosen {
        let x = f.conditioning(model.variant, i)?;
        let e = project_to_text(&model.store, &model.projector, &x)?;
        let best = beam_search(&model.store, &model.decoder, &e, &model.config.beam)?;
        selected.push(SelectedSentence {
            label: i,
            name: model.registry.name(i).to_string(),
            score: f.scores[i],
            sentence: model.vocab.detokenize(&best.tokens),
        });
    }
    let report = selected.iter().map(|s| s.sentence.as_str()).collect::<Vec<_>>().join(" ");
    Ok(GeneratedReport {
        case_id,
        seed: model.config.seed,
        config_hash: model.config.hash()?,
        variant: model.variant,
        empty: selected.is_empty(),
        selected,
        report,
    })
}

/// Report for one volume; only the volume and `[BOS]` enter the model.
pub fn generate_report(model: &Model, case_id: u64, x: &Volume) -> Result<GeneratedReport> {
    check_ready(model)?;
    let f = case_features(model, x)?;
    generate_from_features(model, case_id, &f)
}

/// Reports for every case of a split, in split order.
pub fn generate_split(model: &Model, data: &Dataset) -> Result<Vec<GeneratedReport>> {
    check_ready(model)?;
    if data.registry != model.registry || data.params.shape != model.config.data.shape {
        return Err(Error::Config("split does not match the model's label set or volume shape".into()));
    }
    (0..data.len())
        .into_par_iter()
        .map(|i| generate_report(model, data.cases[i].id, &data.volume(i)?))
        .collect()
}
