//! Binary checkpoint: magic `AGRG`, version, config hash, JSON metadata, a
//! named table of `f32` tensors and the vocabulary.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamConfig, Tensor};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::heads::ThresholdVector;
use crate::pipeline::{Stage, Variant};
use crate::textgen::Vocabulary;

pub const MAGIC: &[u8; 4] = b"AGRG";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerMeta {
    pub name: String,
    pub config: AdamConfig,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// The producing configuration, output location cleared.
    pub config: RunConfig,
    pub stages: Vec<Stage>,
    pub variant: Option<Variant>,
    /// Epochs completed per stage name.
    pub epochs: BTreeMap<String, usize>,
    pub psi_thresholds: Option<ThresholdVector>,
    pub head_thresholds: Option<ThresholdVector>,
    pub optimizers: Vec<OptimizerMeta>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_hash: String,
    pub meta: CheckpointMeta,
    /// Sorted by name. Optimizer moments are stored as `@{optimizer}.{m|v}.{param}`.
    pub tensors: Vec<(String, Tensor)>,
    pub vocab: Vocabulary,
}

fn put_u32(w: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in 32 bits")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn put_bytes(w: &mut impl Write, b: &[u8]) -> Result<()> {
    put_u32(w, b.len())?;
    w.write_all(b)?;
    Ok(())
}

fn get_u32(r: &mut impl Read) -> Result<usize> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b) as usize)
}

fn get_string(r: &mut impl Read) -> Result<String> {
    let n = get_u32(r)?;
    let mut b = vec![0u8; n];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|_| Error::Format("string is not UTF-8".into()))
}

impl Checkpoint {
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        put_u32(w, FORMAT_VERSION as usize)?;
        put_bytes(w, self.config_hash.as_bytes())?;
        put_bytes(w, serde_json::to_string(&self.meta)?.as_bytes())?;
        put_u32(w, self.tensors.len())?;
        for (name, t) in &self.tensors {
            put_bytes(w, name.as_bytes())?;
            put_u32(w, t.shape().len())?;
            for &d in t.shape() {
                put_u32(w, d)?;
            }
            for &v in t.data() {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        put_bytes(w, self.vocab.to_text().as_bytes())?;
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not an AGRG checkpoint".into()));
        }
        let version = get_u32(r)?;
        if version != FORMAT_VERSION as usize {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let config_hash = get_string(r)?;
        let meta: CheckpointMeta = serde_json::from_str(&get_string(r)?)?;
        let n = get_u32(r)?;
        let mut tensors = Vec::with_capacity(n);
        for _ in 0..n {
            let name = get_string(r)?;
            let ndim = get_u32(r)?;
            let shape = (0..ndim).map(|_| get_u32(r)).collect::<Result<Vec<_>>>()?;
            let len: usize = shape.iter().product();
            let mut raw = vec![0u8; len * 4];
            r.read_exact(&mut raw)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        let vocab = Vocabulary::from_text(&get_string(r)?)?;
        Ok(Self { config_hash, meta, tensors, vocab })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        self.write_to(&mut out)?;
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let mut w = BufWriter::new(fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = fs::File::open(path)
            .map_err(|e| Error::MissingPrerequisite(format!("checkpoint {}: {e}", path.display())))?;
        Self::read_from(&mut BufReader::new(f))
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn last_stage(&self) -> Option<Stage> {
        self.meta.stages.last().copied()
    }

    pub fn has_stage(&self, stage: Stage) -> bool {
        self.meta.stages.contains(&stage)
    }
}
