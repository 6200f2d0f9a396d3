//! Monte-Carlo dropout sampling of a trained network.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::DropoutMode;
use crate::contrastive::DropoutPlan;
use crate::error::{dim_err, Error, Result};
use crate::rng;
use crate::segment::UNet;
use crate::volume::{num_voxels, Dims, Volume};

/// `T` stochastic probability maps over `C` classes for one volume.
#[derive(Clone, Debug, PartialEq)]
pub struct EnsemblePrediction {
    dims: Dims,
    num_classes: usize,
    /// Each entry is a flattened `[C, D, H, W]` probability volume.
    samples: Vec<Vec<f32>>,
    pub enc_rate: f64,
    pub dec_rate: f64,
    pub master_seed: u64,
}

impl EnsemblePrediction {
    pub fn new(dims: Dims, num_classes: usize, samples: Vec<Vec<f32>>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Param("ensemble needs at least one sample".into()));
        }
        if num_classes == 0 {
            return Err(dim_err!("ensemble needs at least one class"));
        }
        let v = num_voxels(dims);
        for (t, s) in samples.iter().enumerate() {
            if s.len() != num_classes * v {
                return Err(dim_err!("sample {t} has {} values, expected {}", s.len(), num_classes * v));
            }
            for j in 0..v {
                let sum: f64 = (0..num_classes).map(|c| s[c * v + j] as f64).sum();
                if (sum - 1.0).abs() > 1e-4 {
                    return Err(Error::Param(format!("sample {t} voxel {j}: probabilities sum to {sum}")));
                }
            }
        }
        Ok(Self { dims, num_classes, samples, enc_rate: 0.0, dec_rate: 0.0, master_seed: 0 })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_voxels(&self) -> usize {
        num_voxels(self.dims)
    }

    /// Number of samples `T`.
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn sample(&self, t: usize) -> &[f32] {
        &self.samples[t]
    }

    #[inline]
    pub fn prob(&self, t: usize, class: usize, voxel: usize) -> f32 {
        self.samples[t][class * self.num_voxels() + voxel]
    }

    /// Most probable class of sample `t` at `voxel`; ties go to the lower index.
    pub fn argmax(&self, t: usize, voxel: usize) -> usize {
        let mut best = 0;
        for c in 1..self.num_classes {
            if self.prob(t, c, voxel) > self.prob(t, best, voxel) {
                best = c;
            }
        }
        best
    }

    /// Returns the ensemble with its samples reordered by `order`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        Self { samples: order.iter().map(|&t| self.samples[t].clone()).collect(), ..self.clone() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McConfig {
    /// Number of stochastic forward passes `T`.
    pub samples: usize,
    pub enc_rate: f64,
    pub dec_rate: f64,
    pub seed: u64,
}

impl Default for McConfig {
    fn default() -> Self {
        Self { samples: 100, enc_rate: 0.3, dec_rate: 0.0, seed: 0 }
    }
}

impl McConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return Err(Error::Config("mc.samples must be >= 1".into()));
        }
        for (name, r) in [("enc_rate", self.enc_rate), ("dec_rate", self.dec_rate)] {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::Config(format!("mc.{name} {r} outside [0, 1)")));
            }
        }
        Ok(())
    }
}

/// Deterministic single forward pass with all dropout disabled.
pub fn predict_deterministic(net: &UNet, volume: &Volume) -> Result<EnsemblePrediction> {
    let mut r = rng::stream(0, &[]);
    let p = net.predict(volume, &mut DropoutPlan::off(&mut r))?;
    EnsemblePrediction::new(volume.dims(), net.spec.num_classes, vec![p])
}

/// `T` forward passes with dropout active; sample `t` draws its masks from
/// a stream keyed by `(seed, t)`, so results do not depend on scheduling.
pub fn mc_sample(net: &UNet, volume: &Volume, cfg: &McConfig) -> Result<EnsemblePrediction> {
    cfg.validate()?;
    let samples = (0..cfg.samples)
        .into_par_iter()
        .map(|t| {
            let mut r = rng::stream(cfg.seed, &[t as u64]);
            let mut plan = DropoutPlan {
                mode: DropoutMode::McInference,
                encoder_rate: cfg.enc_rate,
                decoder_rate: cfg.dec_rate,
                rng: &mut r,
            };
            net.predict(volume, &mut plan)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut ens = EnsemblePrediction::new(volume.dims(), net.spec.num_classes, samples)?;
    ens.enc_rate = cfg.enc_rate;
    ens.dec_rate = cfg.dec_rate;
    ens.master_seed = cfg.seed;
    Ok(ens)
}
