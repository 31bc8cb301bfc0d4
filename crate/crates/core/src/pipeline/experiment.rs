use log::info;

use super::{generate_split, param_digest, run_stage, GeneratedReport, Model, Stage, Variant};
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::Splits;
use crate::error::Result;
use crate::metrics::{evaluate_corpus, MetricsReport, RunMeta};

/// Upstream stages of one seed, shared by every variant.
#[derive(Clone, Debug)]
pub struct ExperimentSeed {
    pub seed: u64,
    pub pretrain: Checkpoint,
    pub pretrain_losses: Vec<(usize, f64)>,
    pub heads: Option<Checkpoint>,
    pub heads_losses: Vec<(usize, f64)>,
}

impl ExperimentSeed {
    /// Pretraining, plus the heads stage when `with_heads` is set.
    pub fn train(cfg: &RunConfig, splits: &Splits, with_heads: bool) -> Result<Self> {
        info!("seed {}: pretraining", cfg.seed);
        let pre = run_stage(Stage::Pretrain, cfg, splits, None, false)?;
        let pretrain = pre.checkpoint()?;
        let (heads, heads_losses) = if with_heads {
            info!("seed {}: heads", cfg.seed);
            let h = run_stage(Stage::Heads, cfg, splits, Some(&pretrain), false)?;
            (Some(h.checkpoint()?), h.losses)
        } else {
            (None, Vec::new())
        };
        Ok(Self { seed: cfg.seed, pretrain, pretrain_losses: pre.losses, heads, heads_losses })
    }
}

#[derive(Clone, Debug)]
pub struct AblationRun {
    pub variant: Variant,
    pub seed: u64,
    pub losses: Vec<(usize, f64)>,
    pub checkpoint: Checkpoint,
    pub generations: Vec<GeneratedReport>,
    pub metrics: MetricsReport,
    /// Digest of the encoder, Ψ and head parameters before and after the text stage.
    pub frozen_before: String,
    pub frozen_after: String,
}

const FROZEN: [&str; 3] = ["enc.", "psi.", "heads."];

/// Text stage, test-split generation and evaluation for one variant.
pub fn run_variant_seed(cfg: &RunConfig, splits: &Splits, variant: Variant, upstream: &ExperimentSeed) -> Result<AblationRun> {
    let cfg = RunConfig { expand: variant.expand(), seed: upstream.seed, ..cfg.clone() };
    let prior = if variant.multitask() {
        upstream
            .heads
            .as_ref()
            .ok_or_else(|| crate::error::Error::MissingPrerequisite("heads checkpoint".into()))?
    } else {
        &upstream.pretrain
    };
    let frozen_before = param_digest(&Model::restore(prior)?.store, &FROZEN);
    info!("seed {}: training the {} decoder", cfg.seed, variant.name());
    let report = run_stage(variant.stage(), &cfg, splits, Some(prior), false)?;
    let frozen_after = param_digest(&report.model.store, &FROZEN);
    let generations = generate_split(&report.model, &splits.test)?;
    let pairs: Vec<(u64, String)> = generations.iter().map(|g| (g.case_id, g.report.clone())).collect();
    let meta = RunMeta { seed: cfg.seed, config_hash: cfg.hash()? };
    let metrics = evaluate_corpus(&pairs, &splits.test, meta)?;
    info!("seed {}: {} macro F1 {:.4}", cfg.seed, variant.name(), metrics.f1);
    Ok(AblationRun {
        variant,
        seed: cfg.seed,
        losses: report.losses.clone(),
        checkpoint: report.checkpoint()?,
        generations,
        metrics,
        frozen_before,
        frozen_after,
    })
}

/// Every variant over `seeds`, sharing the upstream stages per seed.
/// `on_run` sees each finished run, so callers can persist partial results.
pub fn run_ablation(
    cfg: &RunConfig,
    splits: &Splits,
    variants: &[Variant],
    seeds: &[u64],
    mut on_run: impl FnMut(&AblationRun) -> Result<()>,
) -> Result<(Vec<ExperimentSeed>, Vec<AblationRun>)> {
    let with_heads = variants.iter().any(|v| v.multitask());
    let mut ups = Vec::with_capacity(seeds.len());
    let mut runs = Vec::with_capacity(seeds.len() * variants.len());
    for &seed in seeds {
        let cfg = RunConfig { seed, ..cfg.clone() };
        let up = ExperimentSeed::train(&cfg, splits, with_heads)?;
        for &v in variants {
            let run = run_variant_seed(&cfg, splits, v, &up)?;
            on_run(&run)?;
            runs.push(run);
        }
        ups.push(up);
    }
    Ok((ups, runs))
}
