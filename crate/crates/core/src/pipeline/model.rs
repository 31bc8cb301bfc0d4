use std::collections::{BTreeMap, HashSet};

use super::{Stage, TextProjector, Variant};
use crate::autodiff::{seeded, OptimizerState, ParamId, ParamStore, SeedRng};
use crate::checkpoint::{Checkpoint, CheckpointMeta, OptimizerMeta};
use crate::config::RunConfig;
use crate::data::LabelRegistry;
use crate::encoder::{Encoder, LabelHead};
use crate::error::{Error, Result};
use crate::heads::{MultiTaskHeads, ThresholdVector};
use crate::textgen::{Decoder, Vocabulary};

/// Parameter name prefixes of the five modules.
pub const PREFIXES: [&str; 5] = ["enc.", "psi.", "heads.", "phi.", "dec."];

/// Independent stream per module, so a module's initialization does not
/// depend on which other modules exist.
pub fn module_seed(seed: u64, tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ h
}

pub(crate) fn module_rng(seed: u64, tag: &str) -> SeedRng {
    seeded(module_seed(seed, tag))
}

/// Every module of one variant, their parameters and the training state.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: RunConfig,
    pub variant: Variant,
    pub registry: LabelRegistry,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub psi: LabelHead,
    pub heads: MultiTaskHeads,
    pub projector: TextProjector,
    pub decoder: Decoder,
    pub vocab: Vocabulary,
    pub stages: Vec<Stage>,
    pub epochs: BTreeMap<String, usize>,
    pub psi_thresholds: Option<ThresholdVector>,
    pub head_thresholds: Option<ThresholdVector>,
    pub optimizers: BTreeMap<String, OptimizerState>,
}

impl Model {
    /// Freshly initialized modules for `variant` under `config`.
    pub fn new(config: &RunConfig, variant: Variant) -> Result<Self> {
        config.validate()?;
        let registry = config.data.registry()?;
        let k = registry.len();
        let shape = config.data.shape;
        let d_h = config.encoder.d_h;
        let mut store = ParamStore::new();
        let seed = config.seed;
        let encoder = Encoder::new(&mut store, "enc", &config.encoder, shape, &mut module_rng(seed, "enc"))?;
        let psi = LabelHead::new(&mut store, "psi", d_h, k, &mut module_rng(seed, "psi"));
        let heads = MultiTaskHeads::new(&mut store, "heads", k, d_h, &config.heads, &mut module_rng(seed, "heads"))?;
        let d_in = variant.input_dim(k, d_h, config.heads.d_i);
        let projector = TextProjector::new(&mut store, "phi", d_in, config.decoder.d_t, &mut module_rng(seed, "phi"));
        let vocab = Vocabulary::for_registry(&registry, shape);
        let decoder = Decoder::new(&mut store, "dec", &config.decoder, vocab.len(), &mut module_rng(seed, "dec"))?;
        let mut config = config.clone();
        config.out_dir = RunConfig::default().out_dir;
        Ok(Self {
            config,
            variant,
            registry,
            store,
            encoder,
            psi,
            heads,
            projector,
            decoder,
            vocab,
            stages: Vec::new(),
            epochs: BTreeMap::new(),
            psi_thresholds: None,
            head_thresholds: None,
            optimizers: BTreeMap::new(),
        })
    }

    pub fn k(&self) -> usize {
        self.registry.len()
    }

    pub fn has_stage(&self, stage: Stage) -> bool {
        self.stages.contains(&stage)
    }

    /// Thresholds used for selection by this variant.
    pub fn thresholds(&self) -> Option<&ThresholdVector> {
        if self.variant.multitask() {
            self.head_thresholds.as_ref()
        } else {
            self.psi_thresholds.as_ref()
        }
    }

    /// Parameters changed by the text stage.
    pub fn text_params(&self) -> HashSet<ParamId> {
        self.projector.params().into_iter().chain(self.decoder.params()).collect()
    }

    /// Rounds every parameter and optimizer moment to `f32`, matching what a
    /// checkpoint round trip yields.
    pub fn round_to_f32(&mut self) {
        let ids: Vec<ParamId> = self.store.ids().collect();
        for id in ids {
            for v in self.store.get_mut(id).data_mut() {
                *v = *v as f32 as f64;
            }
        }
        for opt in self.optimizers.values_mut() {
            let entries: Vec<_> = opt.entries().map(|(id, m, v)| (id, m.clone(), v.clone())).collect();
            for (id, mut m, mut v) in entries {
                for x in m.data_mut().iter_mut().chain(v.data_mut()) {
                    *x = *x as f32 as f64;
                }
                opt.set_moments(id, m, v);
            }
        }
    }

    /// Checkpoint of the current state. Before any text stage the projector
    /// and decoder are left out, since their shapes depend on the variant.
    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let text_trained = self.stages.iter().any(|s| s.is_text());
        let keep = |name: &str| text_trained || !(name.starts_with("phi.") || name.starts_with("dec."));
        let mut tensors: Vec<(String, crate::autodiff::Tensor)> = self
            .store
            .sorted()
            .into_iter()
            .filter(|(n, _)| keep(n))
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect();
        let mut optimizers = Vec::new();
        for (name, opt) in &self.optimizers {
            optimizers.push(OptimizerMeta { name: name.clone(), config: opt.config, step: opt.t });
            for (id, m, v) in opt.entries() {
                let p = self.store.name(id);
                tensors.push((format!("@{name}/m/{p}"), m.clone()));
                tensors.push((format!("@{name}/v/{p}"), v.clone()));
            }
        }
        tensors.sort_by(|a, b| a.0.cmp(&b.0));
        Ok(Checkpoint {
            config_hash: self.config.hash()?,
            meta: CheckpointMeta {
                config: self.config.clone(),
                stages: self.stages.clone(),
                variant: self.stages.iter().any(|s| s.is_text()).then_some(self.variant),
                epochs: self.epochs.clone(),
                psi_thresholds: self.psi_thresholds.clone(),
                head_thresholds: self.head_thresholds.clone(),
                optimizers,
            },
            tensors,
            vocab: self.vocab.clone(),
        })
    }

    /// Rebuilds the model a checkpoint was written from.
    pub fn restore(ckpt: &Checkpoint) -> Result<Self> {
        let variant = ckpt.meta.variant.unwrap_or(Variant::Full);
        let mut m = Self::new(&ckpt.meta.config, variant)?;
        m.load_state(ckpt)?;
        Ok(m)
    }

    /// A fresh model for `config` and `variant` that takes over the trained
    /// state of an earlier stage. Settings of the stages the checkpoint
    /// finished before `stage` must match unless `force` is set.
    pub fn from_prior(config: &RunConfig, variant: Variant, ckpt: &Checkpoint, stage: Stage, force: bool) -> Result<Self> {
        let done: Vec<&str> = ckpt.meta.stages.iter().filter(|s| !s.is_text() && **s != stage).map(|s| s.name()).collect();
        let (have, want) = (ckpt.meta.config.upstream_hash(&done)?, config.upstream_hash(&done)?);
        if have != want && !force {
            return Err(Error::Config(format!(
                "checkpoint was produced by configuration {have} but this run is {want}"
            )));
        }
        let mut m = Self::new(config, variant)?;
        m.load_state(ckpt)?;
        Ok(m)
    }

    fn load_state(&mut self, ckpt: &Checkpoint) -> Result<()> {
        if ckpt.vocab != self.vocab {
            return Err(Error::Config("checkpoint vocabulary differs from the configured label set".into()));
        }
        let mut moments: BTreeMap<String, Vec<(ParamId, [Option<crate::autodiff::Tensor>; 2])>> = BTreeMap::new();
        for (name, t) in &ckpt.tensors {
            if let Some(rest) = name.strip_prefix('@') {
                let (opt, rest) = rest
                    .split_once('/')
                    .ok_or_else(|| Error::Format(format!("bad optimizer tensor `{name}`")))?;
                let (which, param) = rest
                    .split_once('/')
                    .ok_or_else(|| Error::Format(format!("bad optimizer tensor `{name}`")))?;
                let id = self.store.id(param)?;
                let slot = match which {
                    "m" => 0,
                    "v" => 1,
                    _ => return Err(Error::Format(format!("bad optimizer tensor `{name}`"))),
                };
                let list = moments.entry(opt.to_string()).or_default();
                match list.iter_mut().find(|(i, _)| *i == id) {
                    Some((_, pair)) => pair[slot] = Some(t.clone()),
                    None => {
                        let mut pair = [None, None];
                        pair[slot] = Some(t.clone());
                        list.push((id, pair));
                    }
                }
                continue;
            }
            let id = self
                .store
                .id(name)
                .map_err(|_| Error::Config(format!("checkpoint parameter `{name}` has no place in this configuration")))?;
            if self.store.get(id).shape() != t.shape() {
                return Err(Error::Config(format!(
                    "parameter `{name}` is {:?} in the checkpoint but {:?} in this configuration",
                    t.shape(),
                    self.store.get(id).shape()
                )));
            }
            *self.store.get_mut(id) = t.clone();
        }
        self.optimizers.clear();
        for meta in &ckpt.meta.optimizers {
            let mut opt = OptimizerState::new(meta.config);
            opt.t = meta.step;
            for (id, [m, v]) in moments.remove(&meta.name).unwrap_or_default() {
                let (Some(m), Some(v)) = (m, v) else {
                    return Err(Error::Format(format!("optimizer `{}` lacks a moment", meta.name)));
                };
                opt.set_moments(id, m, v);
            }
            self.optimizers.insert(meta.name.clone(), opt);
        }
        self.stages = ckpt.meta.stages.clone();
        self.epochs = ckpt.meta.epochs.clone();
        self.psi_thresholds = ckpt.meta.psi_thresholds.clone();
        self.head_thresholds = ckpt.meta.head_thresholds.clone();
        Ok(())
    }
}
