use serde::{Deserialize, Serialize};

use super::{Dims, Volume};
use crate::error::{dim_err, Result};

/// How each scan is tiled into non-overlapping patches, and how many scans
/// make up one contrastive batch.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchingConfig {
    pub grid: [usize; 3],
    pub scans_per_batch: usize,
}

impl PatchingConfig {
    /// Patches per scan.
    pub fn patches_per_scan(&self) -> usize {
        self.grid.iter().product()
    }

    /// Source patches per batch (`scans * patches`).
    pub fn batch_patches(&self) -> usize {
        self.scans_per_batch * self.patches_per_scan()
    }

    pub fn patch_dims(&self, volume: Dims) -> Result<Dims> {
        if self.grid.contains(&0) {
            return Err(dim_err!("patch grid {:?} must be >= 1 on every axis", self.grid));
        }
        if (0..3).any(|a| !volume[a].is_multiple_of(self.grid[a])) {
            return Err(dim_err!("volume dims {volume:?} not divisible by grid {:?}", self.grid));
        }
        Ok(std::array::from_fn(|a| volume[a] / self.grid[a]))
    }
}

/// Tiles a volume into `grid` patches ordered row-major by grid index.
pub fn split_patches(volume: &Volume, grid: [usize; 3]) -> Result<Vec<Volume>> {
    let cfg = PatchingConfig { grid, scans_per_batch: 1 };
    let p = cfg.patch_dims(volume.dims())?;
    let mut out = Vec::with_capacity(cfg.patches_per_scan());
    for gz in 0..grid[0] {
        for gy in 0..grid[1] {
            for gx in 0..grid[2] {
                let mut vox = Vec::with_capacity(p.iter().product());
                for z in 0..p[0] {
                    for y in 0..p[1] {
                        let start = volume.index(gz * p[0] + z, gy * p[1] + y, gx * p[2]);
                        vox.extend_from_slice(&volume.voxels()[start..start + p[2]]);
                    }
                }
                out.push(Volume::new(p, vox)?);
            }
        }
    }
    Ok(out)
}

/// Inverse of [`split_patches`].
pub fn reassemble_patches(patches: &[Volume], grid: [usize; 3]) -> Result<Volume> {
    let count: usize = grid.iter().product();
    if patches.len() != count || count == 0 {
        return Err(dim_err!("grid {grid:?} needs {count} patches, got {}", patches.len()));
    }
    let p = patches[0].dims();
    if patches.iter().any(|q| q.dims() != p) {
        return Err(dim_err!("patches must share dims"));
    }
    let dims: Dims = std::array::from_fn(|a| p[a] * grid[a]);
    let mut out = Volume::filled(dims, 0.0);
    for (k, patch) in patches.iter().enumerate() {
        let (gz, gy, gx) = (k / (grid[1] * grid[2]), (k / grid[2]) % grid[1], k % grid[2]);
        for z in 0..p[0] {
            for y in 0..p[1] {
                let start = out.index(gz * p[0] + z, gy * p[1] + y, gx * p[2]);
                let src = &patch.voxels()[(z * p[1] + y) * p[2]..][..p[2]];
                out.voxels_mut()[start..start + p[2]].copy_from_slice(src);
            }
        }
    }
    Ok(out)
}
