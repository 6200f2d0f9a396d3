//! Synthetic ellipsoid phantoms with a deliberately imbalanced label mix.
//!
//! A phantom is a "body" ellipsoid of background tissue surrounded by air,
//! an "organ" ellipsoid (class 1) inside the body, and optionally a smaller
//! "tumor" ellipsoid (class 2) clipped to the organ.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{num_voxels, Dims, LabelVolume, Volume};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSpec {
    pub dims: Dims,
    /// 2 (background/organ) or 3 (background/organ/tumor).
    pub num_classes: u8,
    /// Body semi-axes as a fraction of each half-extent; 0 fills the volume.
    pub body_radius_frac: f64,
    /// Organ semi-axis range as a fraction of the smallest extent.
    pub organ_radius: [f64; 2],
    /// Tumor semi-axis range as a fraction of the smallest extent.
    pub tumor_radius: [f64; 2],
    pub tumor_probability: f64,
    pub air_intensity: f32,
    pub class_means: Vec<f32>,
    pub class_noise: Vec<f32>,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            dims: [16, 16, 16],
            num_classes: 3,
            body_radius_frac: 0.9,
            organ_radius: [0.2, 0.32],
            tumor_radius: [0.1, 0.16],
            tumor_probability: 0.8,
            air_intensity: 0.0,
            class_means: vec![0.3, 0.55, 0.8],
            class_noise: vec![0.1, 0.1, 0.1],
            seed: 0,
        }
    }
}

/// Axis-aligned ellipsoid with an integer voxel center.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ellipsoid {
    pub center: [i64; 3],
    pub radii: [f64; 3],
}

impl Ellipsoid {
    pub fn contains(&self, p: [usize; 3]) -> bool {
        (0..3)
            .map(|a| {
                let d = (p[a] as f64 - self.center[a] as f64) / self.radii[a];
                d * d
            })
            .sum::<f64>()
            <= 1.0
    }

    /// Inclusive voxel extent along `axis`: `[c - floor(r), c + floor(r)]`.
    pub fn voxel_extent(&self, axis: usize) -> (i64, i64) {
        let r = self.radii[axis].floor() as i64;
        (self.center[axis] - r, self.center[axis] + r)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomGeometry {
    pub body: Option<Ellipsoid>,
    pub organ: Ellipsoid,
    pub tumor: Option<Ellipsoid>,
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Spec(m));
        if !(2..=3).contains(&self.num_classes) {
            return err(format!("num_classes must be 2 or 3, got {}", self.num_classes));
        }
        let nc = self.num_classes as usize;
        if self.class_means.len() != nc || self.class_noise.len() != nc {
            return err("class_means/class_noise must have one entry per class".into());
        }
        if self.class_noise.iter().any(|&s| !(s >= 0.0 && s.is_finite())) {
            return err("class noise must be finite and >= 0".into());
        }
        let [lo, hi] = self.organ_radius;
        if !(lo > 0.0 && lo <= hi) {
            return err(format!("invalid organ radius range {:?}", self.organ_radius));
        }
        let [tlo, thi] = self.tumor_radius;
        if nc == 3 && !(tlo > 0.0 && tlo <= thi && thi < lo) {
            return err(format!("tumor radius range {:?} must be positive and below organ minimum {lo}", self.tumor_radius));
        }
        if !(0.0..=1.0).contains(&self.tumor_probability) {
            return err("tumor_probability must lie in [0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.body_radius_frac) {
            return err("body_radius_frac must lie in [0, 1]".into());
        }
        let min_dim = *self.dims.iter().min().expect("3 dims") as f64;
        let r_max = hi * min_dim;
        if self.dims.contains(&0) || 2.0 * r_max.ceil() + 3.0 > min_dim {
            return err(format!("dims {:?} cannot hold an organ of radius {r_max:.2}", self.dims));
        }
        Ok(())
    }
}

/// Deterministic per `spec.seed`.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<(Volume, LabelVolume, PhantomGeometry)> {
    spec.validate()?;
    let mut r = rng::stream(spec.seed, &[0x7068_616e]);
    let dims = spec.dims;
    let min_dim = *dims.iter().min().expect("3 dims") as f64;

    let body = (spec.body_radius_frac > 0.0).then(|| Ellipsoid {
        center: dims.map(|d| (d / 2) as i64),
        radii: dims.map(|d| spec.body_radius_frac * d as f64 / 2.0),
    });

    let organ_radii: [f64; 3] =
        std::array::from_fn(|_| r.random_range(spec.organ_radius[0]..=spec.organ_radius[1]) * min_dim);
    let organ_center: [i64; 3] = std::array::from_fn(|a| {
        let reach = organ_radii[a].ceil() as i64 + 1;
        let (lo, hi) = (reach, dims[a] as i64 - 1 - reach);
        // keep the organ near the body center so it stays within the body
        let mid = dims[a] as i64 / 2;
        let slack = body
            .map(|b| ((b.radii[a] - organ_radii[a]) / 3f64.sqrt()).floor().max(0.0) as i64)
            .unwrap_or(i64::MAX / 4);
        let (lo, hi) = (lo.max(mid - slack), hi.min(mid + slack));
        if lo >= hi {
            lo.min(hi).max(reach)
        } else {
            r.random_range(lo..=hi)
        }
    });
    let organ = Ellipsoid { center: organ_center, radii: organ_radii };

    let tumor = if spec.num_classes >= 3 && r.random::<f64>() < spec.tumor_probability {
        let radii: [f64; 3] = std::array::from_fn(|a| {
            (r.random_range(spec.tumor_radius[0]..=spec.tumor_radius[1]) * min_dim).min(0.7 * organ_radii[a])
        });
        let center: [i64; 3] = std::array::from_fn(|a| {
            let span = 0.5 * (organ_radii[a] - radii[a]);
            organ_center[a] + (r.random_range(-1.0..=1.0) * span).round() as i64
        });
        Some(Ellipsoid { center, radii })
    } else {
        None
    };

    let n = num_voxels(dims);
    let mut labels = vec![0u8; n];
    let mut inside_body = vec![true; n];
    let mut i = 0;
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            for x in 0..dims[2] {
                let p = [z, y, x];
                if let Some(b) = &body {
                    inside_body[i] = b.contains(p);
                }
                if organ.contains(p) {
                    labels[i] = if tumor.is_some_and(|t| t.contains(p)) { 2 } else { 1 };
                }
                i += 1;
            }
        }
    }

    let noise: Vec<Normal<f32>> = spec
        .class_noise
        .iter()
        .map(|&s| Normal::new(0.0, s).expect("validated noise"))
        .collect();
    let voxels = labels
        .iter()
        .zip(&inside_body)
        .map(|(&l, &inside)| {
            let c = l as usize;
            let base = if c == 0 && !inside { spec.air_intensity } else { spec.class_means[c] };
            base + noise[c].sample(&mut r)
        })
        .collect();

    let volume = Volume::new(dims, voxels)?;
    let labels = LabelVolume::new(dims, labels, spec.num_classes)?;
    Ok((volume, labels, PhantomGeometry { body, organ, tumor }))
}
