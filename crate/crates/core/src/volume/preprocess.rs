use serde::{Deserialize, Serialize};

use super::{num_voxels, Dims, LabelVolume, Volume};
use crate::error::{dim_err, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CropConfig {
    /// Voxels added on every side of the tight box before clamping.
    pub margin: usize,
    /// Intensity threshold used when no labels are supplied; the volume mean
    /// when unset.
    pub threshold: Option<f32>,
    /// Take the foreground from the labels when they are supplied. When
    /// false, labels are only cropped alongside the volume.
    pub use_labels: bool,
}

impl Default for CropConfig {
    fn default() -> Self {
        Self { margin: 1, threshold: None, use_labels: true }
    }
}

/// Half-open voxel box `lo..hi` per axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BoundingBox {
    pub lo: [usize; 3],
    pub hi: [usize; 3],
}

impl BoundingBox {
    pub fn dims(&self) -> Dims {
        std::array::from_fn(|a| self.hi[a] - self.lo[a])
    }
}

fn crop_buf<T: Copy>(src: &[T], dims: Dims, b: &BoundingBox) -> Vec<T> {
    let mut out = Vec::with_capacity(num_voxels(b.dims()));
    for z in b.lo[0]..b.hi[0] {
        for y in b.lo[1]..b.hi[1] {
            let row = (z * dims[1] + y) * dims[2];
            out.extend_from_slice(&src[row + b.lo[2]..row + b.hi[2]]);
        }
    }
    out
}

/// Crops to the tightest box around the foreground, grown by `margin` and
/// clamped to the volume. Foreground is any nonzero label when labels are
/// given, else intensity above the threshold.
pub fn bounding_box_crop(
    volume: &Volume,
    labels: Option<&LabelVolume>,
    cfg: &CropConfig,
) -> Result<(Volume, Option<LabelVolume>, BoundingBox)> {
    let dims = volume.dims();
    if let Some(l) = labels {
        if l.dims() != dims {
            return Err(dim_err!("label dims {:?} differ from volume dims {dims:?}", l.dims()));
        }
    }
    let threshold = cfg.threshold.unwrap_or(volume.mean() as f32);
    let mut lo = dims;
    let mut hi = [0usize; 3];
    let mut any = false;
    let mut i = 0;
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            for x in 0..dims[2] {
                let fg = match labels.filter(|_| cfg.use_labels) {
                    Some(l) => l.labels()[i] != 0,
                    None => volume.voxels()[i] > threshold,
                };
                if fg {
                    any = true;
                    for (a, p) in [z, y, x].into_iter().enumerate() {
                        lo[a] = lo[a].min(p);
                        hi[a] = hi[a].max(p + 1);
                    }
                }
                i += 1;
            }
        }
    }
    if !any {
        return Err(Error::Degenerate("no foreground voxel to crop around".into()));
    }
    let bbox = BoundingBox {
        lo: std::array::from_fn(|a| lo[a].saturating_sub(cfg.margin)),
        hi: std::array::from_fn(|a| (hi[a] + cfg.margin).min(dims[a])),
    };
    let mut cropped = Volume::new(bbox.dims(), crop_buf(volume.voxels(), dims, &bbox))?;
    cropped.spacing = volume.spacing;
    let cropped_labels = labels
        .map(|l| LabelVolume::new(bbox.dims(), crop_buf(l.labels(), dims, &bbox), l.num_classes()))
        .transpose()?;
    Ok((cropped, cropped_labels, bbox))
}

/// Source sample positions for half-pixel-centred (align-corners false)
/// resampling: `(i0, i1, weight of i1)` per output index.
fn axis_weights(src: usize, dst: usize) -> Vec<(usize, usize, f32)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, (s - i0 as f64) as f32)
        })
        .collect()
}

pub fn resize_trilinear(volume: &Volume, target: Dims) -> Result<Volume> {
    if target.contains(&0) {
        return Err(dim_err!("target dims {target:?} must all be >= 1"));
    }
    let src = volume.dims();
    if src == target {
        return Ok(volume.clone());
    }
    let [wz, wy, wx] = [0, 1, 2].map(|a| axis_weights(src[a], target[a]));
    let at = |z: usize, y: usize, x: usize| volume.get(z, y, x);
    let mut out = Vec::with_capacity(num_voxels(target));
    for &(z0, z1, fz) in &wz {
        for &(y0, y1, fy) in &wy {
            for &(x0, x1, fx) in &wx {
                let lerp = |a: f32, b: f32, t: f32| a + (b - a) * t;
                let c00 = lerp(at(z0, y0, x0), at(z0, y0, x1), fx);
                let c01 = lerp(at(z0, y1, x0), at(z0, y1, x1), fx);
                let c10 = lerp(at(z1, y0, x0), at(z1, y0, x1), fx);
                let c11 = lerp(at(z1, y1, x0), at(z1, y1, x1), fx);
                out.push(lerp(lerp(c00, c01, fy), lerp(c10, c11, fy), fz));
            }
        }
    }
    let mut v = Volume::new(target, out)?;
    v.spacing = volume.spacing;
    Ok(v)
}

/// Nearest-neighbour resampling; output labels are always copied from the source.
pub fn resize_nearest(labels: &LabelVolume, target: Dims) -> Result<LabelVolume> {
    if target.contains(&0) {
        return Err(dim_err!("target dims {target:?} must all be >= 1"));
    }
    let src = labels.dims();
    let idx = |a: usize| -> Vec<usize> {
        (0..target[a])
            .map(|o| (((o as f64 + 0.5) * src[a] as f64 / target[a] as f64).floor() as usize).min(src[a] - 1))
            .collect()
    };
    let (iz, iy, ix) = (idx(0), idx(1), idx(2));
    let mut out = Vec::with_capacity(num_voxels(target));
    for &z in &iz {
        for &y in &iy {
            for &x in &ix {
                out.push(labels.get(z, y, x));
            }
        }
    }
    LabelVolume::new(target, out, labels.num_classes())
}

/// Rescales intensities to `[0, 1]`; a constant volume maps to zeros.
pub fn minmax_normalize(volume: &Volume) -> Volume {
    let (lo, hi) = volume
        .voxels()
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let range = hi - lo;
    let vox = volume
        .voxels()
        .iter()
        .map(|&v| if range > 0.0 { ((v - lo) / range).clamp(0.0, 1.0) } else { 0.0 })
        .collect();
    let mut v = Volume::new(volume.dims(), vox).expect("same dims");
    v.spacing = volume.spacing;
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{generate_phantom, PhantomSpec};

    #[test]
    fn single_voxel_crops_to_one_voxel() {
        let mut v = Volume::filled([8, 8, 8], 0.0);
        let i = v.index(4, 4, 4);
        v.voxels_mut()[i] = 1.0;
        let (c, _, b) = bounding_box_crop(&v, None, &CropConfig { margin: 0, ..Default::default() }).unwrap();
        assert_eq!(c.dims(), [1, 1, 1]);
        assert_eq!(b.lo, [4, 4, 4]);
        assert_eq!(c.voxels(), &[1.0]);
    }

    #[test]
    fn all_foreground_is_unchanged() {
        let v = Volume::filled([3, 4, 5], 1.0);
        let l = LabelVolume::new([3, 4, 5], vec![1; 60], 2).unwrap();
        let (c, cl, _) = bounding_box_crop(&v, Some(&l), &CropConfig::default()).unwrap();
        assert_eq!(c, v);
        assert_eq!(cl.unwrap(), l);
    }

    #[test]
    fn no_foreground_is_degenerate() {
        let v = Volume::filled([4, 4, 4], 0.5);
        assert!(matches!(bounding_box_crop(&v, None, &CropConfig::default()), Err(Error::Degenerate(_))));
    }

    #[test]
    fn phantom_crop_matches_analytic_organ_box() {
        for seed in 0..8 {
            let spec = PhantomSpec { dims: [24, 24, 24], seed, ..Default::default() };
            let (v, l, g) = generate_phantom(&spec).unwrap();
            for margin in [0usize, 1, 2] {
                let (_, _, b) = bounding_box_crop(&v, Some(&l), &CropConfig { margin, ..Default::default() }).unwrap();
                for a in 0..3 {
                    let (lo, hi) = g.organ.voxel_extent(a);
                    let lo = (lo - margin as i64).max(0) as usize;
                    let hi = ((hi + 1 + margin as i64) as usize).min(24);
                    assert_eq!((b.lo[a], b.hi[a]), (lo, hi), "seed {seed} axis {a}");
                }
            }
        }
    }

    #[test]
    fn resize_identity_and_constant() {
        let v = Volume::new([2, 3, 4], (0..24).map(|i| i as f32).collect()).unwrap();
        assert_eq!(resize_trilinear(&v, [2, 3, 4]).unwrap(), v);
        let c = Volume::filled([3, 5, 2], 0.25);
        let r = resize_trilinear(&c, [7, 4, 9]).unwrap();
        assert!(r.voxels().iter().all(|&x| (x - 0.25).abs() < 1e-7));
    }

    #[test]
    fn upsampled_ramp_is_linear() {
        // ramp along W: value = x; align-corners-false sample of output o is
        // at s = (o + 0.5) / 2 - 0.5, exact wherever s lies inside [0, n-1].
        let n = 6;
        let v = Volume::new([1, 1, n], (0..n).map(|x| x as f32).collect()).unwrap();
        let r = resize_trilinear(&v, [1, 1, 2 * n]).unwrap();
        for o in 0..2 * n {
            let s = (o as f64 + 0.5) / 2.0 - 0.5;
            let expect = s.clamp(0.0, (n - 1) as f64);
            assert!((r.voxels()[o] as f64 - expect).abs() < 1e-5, "o={o}");
        }
    }

    #[test]
    fn nearest_never_invents_classes() {
        let l = LabelVolume::new([2, 2, 2], vec![0, 2, 2, 0, 0, 0, 2, 2], 3).unwrap();
        let r = resize_nearest(&l, [5, 3, 7]).unwrap();
        assert!(r.labels().iter().all(|&c| c == 0 || c == 2));
        assert_eq!(resize_nearest(&l, [2, 2, 2]).unwrap(), l);
    }
}
