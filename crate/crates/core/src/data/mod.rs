//! Synthetic volumes, labels and reference reports.

mod dataset;
mod registry;
mod synth;
mod volume;

pub use dataset::{split_dataset, split_seeds, Case, Dataset, Splits};
pub use registry::{LabelRegistry, CT_RATE_LABELS};
pub use synth::{
    draw_specs, render_raw, render_report, render_sentence, render_volume, synthesize_case, AnomalySpec, Octant,
    PrimitiveKind, SizeBucket, SynthParams, SyntheticCase, SIZE_RANGE,
};
pub use volume::{clip_normalize_hu, crop_or_pad, denormalize_hu, Volume, HU_MAX, HU_MIN, PAD_VALUE};
