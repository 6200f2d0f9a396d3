//! Volumetric scans, voxel annotations and their preprocessing.

mod io;
mod patches;
mod phantom;
mod preprocess;
mod subset;

pub use io::{
    load_dataset, load_labels, load_manifest, load_volume, save_labels, save_manifest, save_volume, ManifestEntry,
    VolumeHeader,
};
pub use patches::{reassemble_patches, split_patches, PatchingConfig};
pub use phantom::{generate_phantom, Ellipsoid, PhantomGeometry, PhantomSpec};
pub use preprocess::{
    bounding_box_crop, minmax_normalize, resize_nearest, resize_trilinear, BoundingBox, CropConfig,
};
pub use subset::{subset_fraction, subset_indices, train_test_split};

use crate::error::{dim_err, Error, Result};

/// `(D, H, W)` extents.
pub type Dims = [usize; 3];

pub fn num_voxels(dims: Dims) -> usize {
    dims.iter().product()
}

/// A 3D scalar field of intensities, row-major with W fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    dims: Dims,
    voxels: Vec<f32>,
    pub spacing: Option<[f32; 3]>,
}

impl Volume {
    pub fn new(dims: Dims, voxels: Vec<f32>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(dim_err!("volume dims {dims:?} must all be >= 1"));
        }
        if voxels.len() != num_voxels(dims) {
            return Err(dim_err!("volume dims {dims:?} need {} voxels, got {}", num_voxels(dims), voxels.len()));
        }
        if !voxels.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric("volume contains non-finite voxels".into()));
        }
        Ok(Self { dims, voxels, spacing: None })
    }

    pub fn filled(dims: Dims, value: f32) -> Self {
        Self::new(dims, vec![value; num_voxels(dims)]).expect("valid dims")
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn voxels(&self) -> &[f32] {
        &self.voxels
    }

    pub fn voxels_mut(&mut self) -> &mut [f32] {
        &mut self.voxels
    }

    pub fn into_voxels(self) -> Vec<f32> {
        self.voxels
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[2] + x
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> f32 {
        self.voxels[self.index(z, y, x)]
    }

    pub fn sum(&self) -> f64 {
        self.voxels.iter().map(|&v| v as f64).sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.voxels.len() as f64
    }
}

/// Voxel-wise class indices in `[0, num_classes)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelVolume {
    dims: Dims,
    labels: Vec<u8>,
    num_classes: u8,
}

impl LabelVolume {
    pub fn new(dims: Dims, labels: Vec<u8>, num_classes: u8) -> Result<Self> {
        if dims.contains(&0) {
            return Err(dim_err!("label dims {dims:?} must all be >= 1"));
        }
        if labels.len() != num_voxels(dims) {
            return Err(dim_err!("label dims {dims:?} need {} voxels, got {}", num_voxels(dims), labels.len()));
        }
        if num_classes == 0 {
            return Err(Error::Param("num_classes must be >= 1".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Param(format!("label {bad} not below num_classes {num_classes}")));
        }
        Ok(Self { dims, labels, num_classes })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn num_classes(&self) -> u8 {
        self.num_classes
    }

    pub fn count(&self, class: u8) -> usize {
        self.labels.iter().filter(|&&l| l == class).count()
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> u8 {
        self.labels[(z * self.dims[1] + y) * self.dims[2] + x]
    }
}

/// One scan with its optional annotation.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub volume: Volume,
    pub labels: Option<LabelVolume>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constructors_validate() {
        assert!(Volume::new([2, 2, 2], vec![0.0; 8]).is_ok());
        assert!(Volume::new([2, 0, 2], vec![]).is_err());
        assert!(Volume::new([1, 1, 2], vec![0.0, f32::NAN]).is_err());
        assert!(LabelVolume::new([1, 1, 2], vec![0, 3], 3).is_err());
        assert!(LabelVolume::new([1, 1, 2], vec![0, 2], 3).is_ok());
    }
}
