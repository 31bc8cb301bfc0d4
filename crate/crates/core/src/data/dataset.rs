use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;

use rayon::prelude::*;

use super::registry::LabelRegistry;
use super::synth::{draw_specs, render_volume, synthesize_case, SynthParams};
use super::volume::Volume;
use crate::error::{Error, Result};
use crate::text;

pub const MAGIC: &[u8; 4] = b"AGDS";
pub const FORMAT_VERSION: u32 = 1;

/// Labels and reference text for one case. The volume is either held in
/// memory as `f32` (after loading a dataset file) or regenerated from the seed.
#[derive(Clone, Debug, PartialEq)]
pub struct Case {
    pub id: u64,
    pub labels: Vec<bool>,
    pub report: String,
    voxels: Option<Vec<f32>>,
}

impl Case {
    /// `(label, sentence)` pairs in ascending label order.
    pub fn sentences(&self) -> Vec<(usize, String)> {
        let positives = self.labels.iter().enumerate().filter(|(_, &l)| l).map(|(i, _)| i);
        positives.zip(text::sentences(&self.report)).collect()
    }

    pub fn positives(&self) -> Vec<usize> {
        (0..self.labels.len()).filter(|&i| self.labels[i]).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub registry: LabelRegistry,
    pub params: SynthParams,
    pub cases: Vec<Case>,
}

impl Dataset {
    /// Cases for every seed in `seeds`. With `keep_volumes` false only labels
    /// and reports are materialized.
    pub fn synthesize(seeds: Range<u64>, registry: &LabelRegistry, params: &SynthParams, keep_volumes: bool) -> Result<Self> {
        if registry.is_empty() {
            return Err(Error::Config("empty registry".into()));
        }
        let cases = seeds
            .into_par_iter()
            .map(|seed| {
                if keep_volumes {
                    let c = synthesize_case(seed, registry, params)?;
                    Ok(Case { id: seed, labels: c.labels, report: c.report, voxels: Some(to_f32(c.volume.data())) })
                } else {
                    let specs = draw_specs(seed, registry, params);
                    let mut labels = vec![false; registry.len()];
                    for s in &specs {
                        labels[s.label] = true;
                    }
                    let report = super::synth::render_report(&specs, registry, params.shape)?;
                    Ok(Case { id: seed, labels, report, voxels: None })
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { registry: registry.clone(), params: *params, cases })
    }

    pub fn len(&self) -> usize {
        self.cases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cases.is_empty()
    }

    pub fn k(&self) -> usize {
        self.registry.len()
    }

    /// Preprocessed volume of case `idx`.
    pub fn volume(&self, idx: usize) -> Result<Volume> {
        let case = self.cases.get(idx).ok_or(Error::OutOfRange { index: idx, len: self.cases.len() })?;
        match &case.voxels {
            Some(v) => Volume::new(self.params.shape, v.iter().map(|&x| x as f64).collect()),
            None => {
                let specs = draw_specs(case.id, &self.registry, &self.params);
                render_volume(case.id, &specs, self.params.shape)
            }
        }
    }

    /// Per-label fraction of positive cases.
    pub fn label_rates(&self) -> Vec<f64> {
        let n = self.cases.len().max(1) as f64;
        (0..self.k())
            .map(|i| self.cases.iter().filter(|c| c.labels[i]).count() as f64 / n)
            .collect()
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let k = self.k();
        if k > 32 {
            return Err(Error::Format(format!("label bitmask holds at most 32 labels, got {k}")));
        }
        w.write_all(MAGIC)?;
        for v in [FORMAT_VERSION, k as u32] {
            w.write_all(&v.to_le_bytes())?;
        }
        for d in self.params.shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        w.write_all(&(self.cases.len() as u32).to_le_bytes())?;
        let mut buf = Vec::new();
        for idx in 0..self.cases.len() {
            let c = &self.cases[idx];
            let mask = c.labels.iter().enumerate().fold(0u32, |m, (i, &l)| m | ((l as u32) << i));
            w.write_all(&c.id.to_le_bytes())?;
            w.write_all(&mask.to_le_bytes())?;
            w.write_all(&(c.report.len() as u32).to_le_bytes())?;
            w.write_all(c.report.as_bytes())?;
            let vol = self.volume(idx)?;
            buf.clear();
            for &x in vol.data() {
                buf.extend_from_slice(&(x as f32).to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    /// Reads a dataset written by [`Dataset::write_to`]. `registry` must have
    /// the stored K; `prevalence` is not stored and is taken from `params`.
    pub fn read_from(r: &mut impl Read, registry: &LabelRegistry, prevalence: f64) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a dataset file (bad magic)".into()));
        }
        let version = read_u32(r)?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported dataset version {version}")));
        }
        let k = read_u32(r)? as usize;
        if k != registry.len() {
            return Err(Error::Mismatch(format!("dataset has K={k}, registry has {}", registry.len())));
        }
        let shape = [read_u32(r)? as usize, read_u32(r)? as usize, read_u32(r)? as usize];
        let n = read_u32(r)? as usize;
        if shape.contains(&0) {
            return Err(Error::Format(format!("bad volume shape {shape:?}")));
        }
        let mut cases = Vec::with_capacity(n);
        let mut raw = vec![0u8; shape.iter().product::<usize>() * 4];
        for _ in 0..n {
            let mut id = [0u8; 8];
            r.read_exact(&mut id)?;
            let mask = read_u32(r)?;
            if k < 32 && mask >> k != 0 {
                return Err(Error::Format(format!("label mask {mask:#x} exceeds K={k}")));
            }
            let len = read_u32(r)? as usize;
            let mut report = vec![0u8; len];
            r.read_exact(&mut report)?;
            let report = String::from_utf8(report).map_err(|e| Error::Format(e.to_string()))?;
            r.read_exact(&mut raw)?;
            let voxels = raw.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
            cases.push(Case {
                id: u64::from_le_bytes(id),
                labels: (0..k).map(|i| mask & (1 << i) != 0).collect(),
                report,
                voxels: Some(voxels),
            });
        }
        Ok(Self { registry: registry.clone(), params: SynthParams { shape, prevalence }, cases })
    }

    pub fn load(path: &Path, registry: &LabelRegistry, prevalence: f64) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut f, registry, prevalence)
    }
}

fn to_f32(data: &[f64]) -> Vec<f32> {
    data.iter().map(|&x| x as f32).collect()
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Seed ranges for train, validation and test: consecutive, disjoint blocks
/// starting at `base_seed`.
pub fn split_seeds(n_train: usize, n_val: usize, n_test: usize, base_seed: u64) -> Result<[Range<u64>; 3]> {
    if n_train == 0 || n_val == 0 || n_test == 0 {
        return Err(Error::Config("split sizes must be positive".into()));
    }
    let mut start = base_seed;
    let mut next = |n: usize| -> Result<Range<u64>> {
        let end = start
            .checked_add(n as u64)
            .ok_or_else(|| Error::Config("seed range overflows u64".into()))?;
        let r = start..end;
        start = end;
        Ok(r)
    };
    Ok([next(n_train)?, next(n_val)?, next(n_test)?])
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

pub fn split_dataset(
    n_train: usize,
    n_val: usize,
    n_test: usize,
    base_seed: u64,
    registry: &LabelRegistry,
    params: &SynthParams,
) -> Result<Splits> {
    let [tr, va, te] = split_seeds(n_train, n_val, n_test, base_seed)?;
    Ok(Splits {
        train: Dataset::synthesize(tr, registry, params, false)?,
        val: Dataset::synthesize(va, registry, params, false)?,
        test: Dataset::synthesize(te, registry, params, false)?,
    })
}
