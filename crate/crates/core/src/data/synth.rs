//! Procedural stand-in for chest CT: a smooth background with one geometric
//! primitive per present abnormality, plus a templated reference report.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::registry::LabelRegistry;
use super::volume::{clip_normalize_hu, crop_or_pad, Volume};
use crate::autodiff::{seeded, SeedRng};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PrimitiveKind {
    Sphere,
    Box,
    Shell,
    Rod,
    PlaneSlab,
    CheckerPatch,
}

impl PrimitiveKind {
    pub const ALL: [PrimitiveKind; 6] = [
        PrimitiveKind::Sphere,
        PrimitiveKind::Box,
        PrimitiveKind::Shell,
        PrimitiveKind::Rod,
        PrimitiveKind::PlaneSlab,
        PrimitiveKind::CheckerPatch,
    ];

    pub fn for_label(label: usize) -> Self {
        Self::ALL[label % Self::ALL.len()]
    }

    fn base_intensity(self) -> f64 {
        match self {
            PrimitiveKind::Sphere => 450.0,
            PrimitiveKind::Box => 300.0,
            PrimitiveKind::Shell => 600.0,
            PrimitiveKind::Rod => 700.0,
            PrimitiveKind::PlaneSlab => 500.0,
            PrimitiveKind::CheckerPatch => 350.0,
        }
    }

    /// Half-extent along (z, y, x) for a primitive of the given size.
    fn half_extent(self, size: f64) -> [f64; 3] {
        match self {
            PrimitiveKind::Sphere | PrimitiveKind::Shell => [size; 3],
            PrimitiveKind::Box | PrimitiveKind::CheckerPatch => [0.8 * size; 3],
            PrimitiveKind::Rod => [size, ROD_RADIUS, ROD_RADIUS],
            PrimitiveKind::PlaneSlab => [SLAB_HALF_THICKNESS, 1.5 * size, 1.5 * size],
        }
    }

    /// Contribution at offset `d` from the center, in HU.
    fn sample(self, d: [f64; 3], size: f64, intensity: f64, parity: bool) -> f64 {
        let [dz, dy, dx] = d;
        let r = (dz * dz + dy * dy + dx * dx).sqrt();
        let inside = |h: [f64; 3]| dz.abs() <= h[0] && dy.abs() <= h[1] && dx.abs() <= h[2];
        let hit = match self {
            PrimitiveKind::Sphere => r <= size,
            PrimitiveKind::Shell => r <= size && r >= size - 1.0,
            PrimitiveKind::Rod => (dy * dy + dx * dx).sqrt() <= ROD_RADIUS && dz.abs() <= size,
            PrimitiveKind::Box | PrimitiveKind::PlaneSlab | PrimitiveKind::CheckerPatch => {
                inside(self.half_extent(size))
            }
        };
        match (hit, self) {
            (false, _) => 0.0,
            (true, PrimitiveKind::CheckerPatch) if parity => -intensity,
            (true, _) => intensity,
        }
    }
}

const ROD_RADIUS: f64 = 1.25;
const SLAB_HALF_THICKNESS: f64 = 0.5;
pub const SIZE_RANGE: (f64, f64) = (2.0, 5.0);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SizeBucket {
    Small,
    Moderate,
    Large,
}

impl SizeBucket {
    pub fn of(size: f64) -> Self {
        if size < 3.0 {
            SizeBucket::Small
        } else if size < 4.0 {
            SizeBucket::Moderate
        } else {
            SizeBucket::Large
        }
    }

    pub fn word(self) -> &'static str {
        match self {
            SizeBucket::Small => "small",
            SizeBucket::Moderate => "moderate",
            SizeBucket::Large => "large",
        }
    }
}

/// Location octant relative to the volume center.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Octant {
    pub upper: bool,
    pub left: bool,
    pub anterior: bool,
}

impl Octant {
    pub fn of(center: [usize; 3], shape: [usize; 3]) -> Self {
        Self {
            upper: 2 * center[0] < shape[0],
            anterior: 2 * center[1] < shape[1],
            left: 2 * center[2] < shape[2],
        }
    }

    pub fn phrase(self) -> String {
        format!(
            "{} {} {}",
            if self.left { "left" } else { "right" },
            if self.upper { "upper" } else { "lower" },
            if self.anterior { "anterior" } else { "posterior" }
        )
    }
}

/// One injected abnormality.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnomalySpec {
    pub label: usize,
    pub kind: PrimitiveKind,
    pub center: [usize; 3],
    pub size: f64,
    /// HU offset added inside the primitive.
    pub intensity: f64,
}

impl AnomalySpec {
    pub fn bucket(&self) -> SizeBucket {
        SizeBucket::of(self.size)
    }

    pub fn octant(&self, shape: [usize; 3]) -> Octant {
        Octant::of(self.center, shape)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub shape: [usize; 3],
    /// Independent per-label presence probability.
    pub prevalence: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self { shape: [24, 48, 48], prevalence: 0.35 }
    }
}

/// Ground truth for one synthetic study.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCase {
    pub id: u64,
    pub volume: Volume,
    pub labels: Vec<bool>,
    pub report: String,
    /// `(label, sentence)` in ascending label order.
    pub sentences: Vec<(usize, String)>,
    pub specs: Vec<AnomalySpec>,
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

/// Sentence for one spec from its label's template.
pub fn render_sentence(spec: &AnomalySpec, registry: &LabelRegistry, shape: [usize; 3]) -> String {
    let name = registry.anchor(spec.label);
    let size = spec.bucket().word();
    let filled = registry
        .template(spec.label)
        .replace("{Name}", &capitalize(&name))
        .replace("{name}", &name)
        .replace("{Size}", &capitalize(size))
        .replace("{size}", size)
        .replace("{loc}", &spec.octant(shape).phrase());
    capitalize(&filled)
}

/// One sentence per spec, in ascending label order, joined by single spaces.
pub fn render_report(specs: &[AnomalySpec], registry: &LabelRegistry, shape: [usize; 3]) -> Result<String> {
    Ok(render_sentences(specs, registry, shape)?
        .into_iter()
        .map(|(_, s)| s)
        .collect::<Vec<_>>()
        .join(" "))
}

fn render_sentences(
    specs: &[AnomalySpec],
    registry: &LabelRegistry,
    shape: [usize; 3],
) -> Result<Vec<(usize, String)>> {
    let mut sorted: Vec<&AnomalySpec> = specs.iter().collect();
    sorted.sort_by_key(|s| s.label);
    for w in sorted.windows(2) {
        if w[0].label == w[1].label {
            return Err(Error::InvalidLabel(format!("label {} injected twice", w[0].label)));
        }
    }
    if let Some(s) = sorted.iter().find(|s| s.label >= registry.len()) {
        return Err(Error::OutOfRange { index: s.label, len: registry.len() });
    }
    Ok(sorted.into_iter().map(|s| (s.label, render_sentence(s, registry, shape))).collect())
}

/// Draws which labels are present and their primitives. Consumes the
/// per-case spec stream only, so it is cheap relative to rendering.
pub fn draw_specs(seed: u64, registry: &LabelRegistry, params: &SynthParams) -> Vec<AnomalySpec> {
    let mut rng = seeded(seed);
    let mut specs = Vec::new();
    for label in 0..registry.len() {
        let present = rng.random::<f64>() < params.prevalence;
        if !present {
            continue;
        }
        let kind = PrimitiveKind::for_label(label);
        let size = rng.random_range(SIZE_RANGE.0..SIZE_RANGE.1);
        let half = kind.half_extent(size);
        let mut center = [0usize; 3];
        for a in 0..3 {
            // keep one voxel of margin beyond the half extent
            let m = half[a].ceil() as usize + 1;
            let n = params.shape[a];
            center[a] = if n > 2 * m { rng.random_range(m..n - m) } else { n / 2 };
        }
        let tier = 1.0 + 0.2 * (label / PrimitiveKind::ALL.len()) as f64;
        let intensity = tier * kind.base_intensity() + rng.random_range(-20.0..20.0);
        specs.push(AnomalySpec { label, kind, center, size, intensity });
    }
    specs
}

/// Background field: a baseline attenuation plus a few low-frequency waves
/// and faint voxel noise, all in HU.
fn background(seed: u64, shape: [usize; 3]) -> Vec<f64> {
    let mut rng: SeedRng = seeded(seed ^ 0x9e37_79b9_7f4a_7c15);
    let base = rng.random_range(-800.0..-760.0);
    let n: usize = shape.iter().product();
    let mut field = vec![base; n];
    for _ in 0..4 {
        let amp = rng.random_range(4.0..12.0);
        let freq: [f64; 3] = std::array::from_fn(|_| rng.random_range(0..3) as f64);
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        // cos(a + b + c + phase) via per-axis complex exponentials
        let axis = |a: usize| -> Vec<(f64, f64)> {
            (0..shape[a])
                .map(|i| {
                    let t = std::f64::consts::TAU * freq[a] * i as f64 / shape[a] as f64;
                    (t.cos(), t.sin())
                })
                .collect()
        };
        let (ez, ey, ex) = (axis(0), axis(1), axis(2));
        let (pc, ps) = (phase.cos(), phase.sin());
        let mut idx = 0;
        for &(zc, zs) in &ez {
            let (a_re, a_im) = (zc * pc - zs * ps, zc * ps + zs * pc);
            for &(yc, ys) in &ey {
                let (b_re, b_im) = (a_re * yc - a_im * ys, a_re * ys + a_im * yc);
                for &(xc, xs) in &ex {
                    field[idx] += amp * (b_re * xc - b_im * xs);
                    idx += 1;
                }
            }
        }
    }
    for v in &mut field {
        *v += rng.random_range(-8.0..8.0);
    }
    field
}

/// Raw HU volume for a seed with exactly the given primitives added.
pub fn render_raw(seed: u64, specs: &[AnomalySpec], shape: [usize; 3]) -> Volume {
    let mut data = background(seed, shape);
    for s in specs {
        let half = s.kind.half_extent(s.size);
        let lo = |a: usize| (s.center[a] as f64 - half[a]).floor().max(0.0) as usize;
        let hi = |a: usize| ((s.center[a] as f64 + half[a]).ceil() as usize).min(shape[a] - 1);
        for z in lo(0)..=hi(0) {
            for y in lo(1)..=hi(1) {
                for x in lo(2)..=hi(2) {
                    let d = [
                        z as f64 - s.center[0] as f64,
                        y as f64 - s.center[1] as f64,
                        x as f64 - s.center[2] as f64,
                    ];
                    let parity = (z + y + x) % 2 == 1;
                    let v = s.kind.sample(d, s.size, s.intensity, parity);
                    data[(z * shape[1] + y) * shape[2] + x] += v;
                }
            }
        }
    }
    Volume::new(shape, data).expect("shape matches background")
}

/// Preprocessed volume for a seed and spec set. Voxels are rounded through
/// `f32` so a volume read back from a dataset file is bit-identical.
pub fn render_volume(seed: u64, specs: &[AnomalySpec], shape: [usize; 3]) -> Result<Volume> {
    let raw = render_raw(seed, specs, shape);
    let mut v = crop_or_pad(&clip_normalize_hu(&raw)?, shape)?;
    for x in v.data_mut() {
        *x = *x as f32 as f64;
    }
    Ok(v)
}

/// Fully deterministic synthetic case for `seed`.
pub fn synthesize_case(seed: u64, registry: &LabelRegistry, params: &SynthParams) -> Result<SyntheticCase> {
    if registry.is_empty() {
        return Err(Error::Config("empty registry".into()));
    }
    let specs = draw_specs(seed, registry, params);
    let volume = render_volume(seed, &specs, params.shape)?;
    let mut labels = vec![false; registry.len()];
    for s in &specs {
        labels[s.label] = true;
    }
    let sentences = render_sentences(&specs, registry, params.shape)?;
    let report = sentences.iter().map(|(_, s)| s.as_str()).collect::<Vec<_>>().join(" ");
    Ok(SyntheticCase { id: seed, volume, labels, report, sentences, specs })
}
