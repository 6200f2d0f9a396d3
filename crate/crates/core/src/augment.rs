//! Patch-level 3D augmentations and positive-pair sampling.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::rng::{self, RngHandle};
use crate::volume::{Dims, Volume};

pub const SCALE_LIMITS: [f32; 2] = [0.7, 1.3];
pub const SHIFT_LIMITS: [f32; 2] = [-0.2, 0.2];
pub const NOISE_SIGMA_MAX: f32 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AxisPair {
    DH,
    DW,
    HW,
}

impl AxisPair {
    pub const ALL: [AxisPair; 3] = [AxisPair::DH, AxisPair::DW, AxisPair::HW];

    fn axes(self) -> (usize, usize) {
        match self {
            AxisPair::DH => (0, 1),
            AxisPair::DW => (0, 2),
            AxisPair::HW => (1, 2),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Rotate,
    IntensityDistort,
    Identity,
    GaussianNoise,
    GaussianBlur,
    Sobel,
}

impl Family {
    pub const ALL: [Family; 6] = [
        Family::Rotate,
        Family::IntensityDistort,
        Family::Identity,
        Family::GaussianNoise,
        Family::GaussianBlur,
        Family::Sobel,
    ];
}

/// Enabled families and the ranges their parameters are drawn from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub families: Vec<Family>,
    pub scale: [f32; 2],
    pub shift: [f32; 2],
    pub noise_sigma: [f32; 2],
    pub blur_sigma: [f32; 2],
    pub blur_radius: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            families: Family::ALL.to_vec(),
            scale: SCALE_LIMITS,
            shift: SHIFT_LIMITS,
            noise_sigma: [0.02, NOISE_SIGMA_MAX],
            blur_sigma: [0.5, 1.5],
            blur_radius: 2,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        let within = |r: [f32; 2], lim: [f32; 2]| r[0] <= r[1] && r[0] >= lim[0] && r[1] <= lim[1];
        if self.families.is_empty() {
            return Err(Error::Config("augment.families must not be empty".into()));
        }
        if !within(self.scale, SCALE_LIMITS) || !within(self.shift, SHIFT_LIMITS) {
            return Err(Error::Config("augment scale/shift ranges exceed [0.7,1.3] / [-0.2,0.2]".into()));
        }
        if !(self.noise_sigma[0] > 0.0 && within(self.noise_sigma, [0.0, NOISE_SIGMA_MAX])) {
            return Err(Error::Config("augment.noise_sigma must lie in (0, 0.2]".into()));
        }
        if !(self.blur_sigma[0] > 0.0 && self.blur_sigma[0] <= self.blur_sigma[1]) {
            return Err(Error::Config("augment.blur_sigma must be a positive range".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum AugmentationOp {
    Rotate3d { axes: AxisPair, quarter_turns: u8 },
    IntensityDistort { scale: f32, shift: f32 },
    Identity,
    GaussianNoise { sigma: f32, seed: u64 },
    GaussianBlur { sigma: f32, radius: usize },
    Sobel3d,
}

impl AugmentationOp {
    pub fn apply(&self, patch: &Volume) -> Result<Volume> {
        match *self {
            AugmentationOp::Rotate3d { axes, quarter_turns } => rotate3d(patch, axes, quarter_turns),
            AugmentationOp::IntensityDistort { scale, shift } => intensity_distort(patch, scale, shift),
            AugmentationOp::Identity => Ok(patch.clone()),
            AugmentationOp::GaussianNoise { sigma, seed } => gaussian_noise(patch, sigma, &mut rng::stream(seed, &[])),
            AugmentationOp::GaussianBlur { sigma, radius } => gaussian_blur(patch, sigma, radius),
            AugmentationOp::Sobel3d => sobel3d(patch),
        }
    }
}

/// Two ops applied in order: `second(first(x))`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompositeAugmentation {
    pub first: AugmentationOp,
    pub second: AugmentationOp,
}

impl CompositeAugmentation {
    pub fn apply(&self, patch: &Volume) -> Result<Volume> {
        self.second.apply(&self.first.apply(patch)?)
    }
}

/// Exact rotation by `quarter_turns * 90°` in the plane of `axes`.
pub fn rotate3d(patch: &Volume, axes: AxisPair, quarter_turns: u8) -> Result<Volume> {
    if quarter_turns > 3 {
        return Err(Error::Param(format!("quarter_turns {quarter_turns} not in 0..=3")));
    }
    let dims = patch.dims();
    let (a, b) = axes.axes();
    if quarter_turns % 2 == 1 && dims[a] != dims[b] {
        return Err(dim_err!("odd quarter turns need equal extents on the rotation plane, got {dims:?}"));
    }
    if quarter_turns == 0 {
        return Ok(patch.clone());
    }
    let (na, nb) = (dims[a], dims[b]);
    let mut out = Vec::with_capacity(patch.voxels().len());
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            for x in 0..dims[2] {
                let mut p = [z, y, x];
                let (i, j) = (p[a], p[b]);
                // inverse map from output (i, j) to the source position
                let (si, sj) = match quarter_turns {
                    1 => (na - 1 - j, i),
                    2 => (na - 1 - i, nb - 1 - j),
                    _ => (j, nb - 1 - i),
                };
                p[a] = si;
                p[b] = sj;
                out.push(patch.get(p[0], p[1], p[2]));
            }
        }
    }
    Volume::new(dims, out)
}

pub fn intensity_distort(patch: &Volume, scale: f32, shift: f32) -> Result<Volume> {
    if !(SCALE_LIMITS[0]..=SCALE_LIMITS[1]).contains(&scale) || !(SHIFT_LIMITS[0]..=SHIFT_LIMITS[1]).contains(&shift) {
        return Err(Error::Param(format!("intensity distortion scale {scale} / shift {shift} out of range")));
    }
    let v = patch.voxels().iter().map(|&x| (scale * x + shift).clamp(0.0, 1.0)).collect();
    Volume::new(patch.dims(), v)
}

pub fn gaussian_noise<R: Rng + ?Sized>(patch: &Volume, sigma: f32, rng: &mut R) -> Result<Volume> {
    if !(sigma > 0.0 && sigma <= NOISE_SIGMA_MAX) {
        return Err(Error::Param(format!("noise sigma {sigma} outside (0, 0.2]")));
    }
    let v = patch
        .voxels()
        .iter()
        .map(|&x| {
            let n: f32 = StandardNormal.sample(rng);
            (x + sigma * n).clamp(0.0, 1.0)
        })
        .collect();
    Volume::new(patch.dims(), v)
}

/// Normalized 1D Gaussian taps for offsets `-radius..=radius`.
pub fn gaussian_kernel(sigma: f32, radius: usize) -> Vec<f32> {
    let r = radius as i64;
    let w: Vec<f64> = (-r..=r)
        .map(|t| (-(t * t) as f64 / (2.0 * (sigma as f64).powi(2))).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.iter().map(|&x| (x / s) as f32).collect()
}

/// Correlates `taps` (centred) along one axis with edge replication.
fn filter_axis(src: &[f32], dims: Dims, axis: usize, taps: &[f32]) -> Vec<f32> {
    let r = (taps.len() / 2) as i64;
    let strides = [dims[1] * dims[2], dims[2], 1];
    let n = dims[axis] as i64;
    let mut out = vec![0.0f32; src.len()];
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            for x in 0..dims[2] {
                let p = [z, y, x];
                let base = z * strides[0] + y * strides[1] + x - p[axis] * strides[axis];
                let mut acc = 0.0f32;
                for (k, &w) in taps.iter().enumerate() {
                    let q = (p[axis] as i64 + k as i64 - r).clamp(0, n - 1) as usize;
                    acc += w * src[base + q * strides[axis]];
                }
                out[z * strides[0] + y * strides[1] + x] = acc;
            }
        }
    }
    out
}

pub fn gaussian_blur(patch: &Volume, sigma: f32, radius: usize) -> Result<Volume> {
    if !(sigma > 0.0) {
        return Err(Error::Param(format!("blur sigma {sigma} must be > 0")));
    }
    let k = gaussian_kernel(sigma, radius);
    let mut v = patch.voxels().to_vec();
    for axis in 0..3 {
        v = filter_axis(&v, patch.dims(), axis, &k);
    }
    Volume::new(patch.dims(), v)
}

/// Unscaled Sobel gradient magnitude: derivative `[-1, 0, 1]` along one axis,
/// smoothing `[1, 2, 1]` along the other two, edge-replicated.
pub fn sobel3d_magnitude(patch: &Volume) -> Result<Vec<f32>> {
    let dims = patch.dims();
    if dims.iter().any(|&d| d < 3) {
        return Err(dim_err!("sobel3d needs every extent >= 3, got {dims:?}"));
    }
    const SMOOTH: [f32; 3] = [1.0, 2.0, 1.0];
    const DERIV: [f32; 3] = [-1.0, 0.0, 1.0];
    let mut mag2 = vec![0.0f32; patch.voxels().len()];
    for d in 0..3 {
        let mut g = patch.voxels().to_vec();
        for axis in 0..3 {
            g = filter_axis(&g, dims, axis, if axis == d { &DERIV } else { &SMOOTH });
        }
        mag2.iter_mut().zip(&g).for_each(|(m, &v)| *m += v * v);
    }
    Ok(mag2.into_iter().map(f32::sqrt).collect())
}

/// Sobel gradient magnitude rescaled to `[0, 1]` by its maximum.
pub fn sobel3d(patch: &Volume) -> Result<Volume> {
    let mag = sobel3d_magnitude(patch)?;
    let max = mag.iter().copied().fold(0.0f32, f32::max);
    let v = mag.iter().map(|&m| if max > 0.0 { m / max } else { 0.0 }).collect();
    Volume::new(patch.dims(), v)
}

fn uniform(r: &mut RngHandle, range: [f32; 2]) -> f32 {
    if range[0] == range[1] {
        range[0]
    } else {
        r.random_range(range[0]..=range[1])
    }
}

/// Draws one op: family uniform over the enabled set, parameters from the
/// configured ranges. Rotations use a nonzero number of quarter turns.
pub fn sample_op(r: &mut RngHandle, cfg: &AugmentConfig, dims: Dims) -> AugmentationOp {
    match cfg.families[r.random_range(0..cfg.families.len())] {
        Family::Rotate => {
            let axes = AxisPair::ALL[r.random_range(0..3)];
            let (a, b) = axes.axes();
            let quarter_turns = if dims[a] == dims[b] { r.random_range(1..=3) } else { 2 };
            AugmentationOp::Rotate3d { axes, quarter_turns }
        }
        Family::IntensityDistort => AugmentationOp::IntensityDistort {
            scale: uniform(r, cfg.scale),
            shift: uniform(r, cfg.shift),
        },
        Family::Identity => AugmentationOp::Identity,
        Family::GaussianNoise => AugmentationOp::GaussianNoise {
            sigma: uniform(r, cfg.noise_sigma),
            seed: r.random(),
        },
        Family::GaussianBlur => AugmentationOp::GaussianBlur {
            sigma: uniform(r, cfg.blur_sigma),
            radius: cfg.blur_radius,
        },
        Family::Sobel => AugmentationOp::Sobel3d,
    }
}

pub fn sample_composite(r: &mut RngHandle, cfg: &AugmentConfig, dims: Dims) -> CompositeAugmentation {
    let first = sample_op(r, cfg, dims);
    let second = sample_op(r, cfg, dims);
    CompositeAugmentation { first, second }
}

/// Two independently augmented views of one patch.
pub fn sample_pair(patch: &Volume, cfg: &AugmentConfig, r: &mut RngHandle) -> Result<(Volume, Volume)> {
    let a = sample_composite(r, cfg, patch.dims());
    let b = sample_composite(r, cfg, patch.dims());
    Ok((a.apply(patch)?, b.apply(patch)?))
}
