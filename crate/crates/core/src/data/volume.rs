use crate::error::{shape_err, Error, Result};

pub const HU_MIN: f64 = -1000.0;
pub const HU_MAX: f64 = 200.0;
/// Normalized value used for padding (air after clipping).
pub const PAD_VALUE: f64 = -1.0;

/// Voxel grid in `D×H×W` order, row-major with `W` fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    shape: [usize; 3],
    data: Vec<f64>,
}

impl Volume {
    pub fn new(shape: [usize; 3], data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return shape_err(format!("volume extents must be positive, got {shape:?}"));
        }
        if shape.iter().product::<usize>() != data.len() {
            return shape_err(format!("{shape:?} volume with {} voxels", data.len()));
        }
        Ok(Self { shape, data })
    }

    pub fn filled(shape: [usize; 3], value: f64) -> Self {
        Self { shape, data: vec![value; shape.iter().product()] }
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.shape[1] + y) * self.shape[2] + x
    }

    pub fn at(&self, z: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(z, y, x)]
    }
}

/// Clips HU values to `[-1000, 200]` and maps that interval linearly onto `[-1, 1]`.
pub fn clip_normalize_hu(raw: &Volume) -> Result<Volume> {
    if raw.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("raw volume".into()));
    }
    let data = raw
        .data
        .iter()
        .map(|&v| 2.0 * (v.clamp(HU_MIN, HU_MAX) - HU_MIN) / (HU_MAX - HU_MIN) - 1.0)
        .collect();
    Ok(Volume { shape: raw.shape, data })
}

/// Maps normalized values back to HU.
pub fn denormalize_hu(v: &Volume) -> Volume {
    let data = v
        .data
        .iter()
        .map(|&n| (n + 1.0) * (HU_MAX - HU_MIN) / 2.0 + HU_MIN)
        .collect();
    Volume { shape: v.shape, data }
}

/// Center-crops or pads each axis to `target`. Odd differences put the extra
/// voxel on the high-index side; padding uses [`PAD_VALUE`].
pub fn crop_or_pad(v: &Volume, target: [usize; 3]) -> Result<Volume> {
    if target.contains(&0) {
        return shape_err(format!("target extents must be positive, got {target:?}"));
    }
    if v.shape == target {
        return Ok(v.clone());
    }
    // For each axis: offset of the target origin inside the source (crop) or
    // of the source origin inside the target (pad).
    let mut src_start = [0usize; 3];
    let mut dst_start = [0usize; 3];
    let mut span = [0usize; 3];
    for a in 0..3 {
        let (s, t) = (v.shape[a], target[a]);
        if s >= t {
            src_start[a] = (s - t) / 2;
            span[a] = t;
        } else {
            dst_start[a] = (t - s) / 2;
            span[a] = s;
        }
    }
    let mut out = Volume::filled(target, PAD_VALUE);
    for z in 0..span[0] {
        for y in 0..span[1] {
            let src = v.index(src_start[0] + z, src_start[1] + y, src_start[2]);
            let dst = out.index(dst_start[0] + z, dst_start[1] + y, dst_start[2]);
            out.data[dst..dst + span[2]].copy_from_slice(&v.data[src..src + span[2]]);
        }
    }
    Ok(out)
}
