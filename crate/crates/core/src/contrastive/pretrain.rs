use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::encoder::{encoder_forward, head_forward, DropoutPlan, EncoderSpec, ProjectionHeadSpec};
use super::ntxent::ntxent_loss;
use crate::augment::{sample_pair, AugmentConfig};
use crate::autodiff::{Tape, Tensor};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};
use crate::params::ParamStore;
use crate::rng;
use crate::volume::{minmax_normalize, split_patches, Dims, PatchingConfig, Volume};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub temperature: f64,
    pub epochs: usize,
    pub scans_per_batch: usize,
    pub grid: [usize; 3],
    /// Output channels per encoder stage.
    pub encoder: Vec<usize>,
    pub head: ProjectionHeadSpec,
    pub seed: u64,
    pub optimizer: AdamConfig,
}

impl PretrainConfig {
    pub fn patching(&self) -> PatchingConfig {
        PatchingConfig { grid: self.grid, scans_per_batch: self.scans_per_batch }
    }

    pub fn encoder_spec(&self, volume_dims: Dims) -> Result<EncoderSpec> {
        let spec = EncoderSpec {
            stages: self.encoder.clone(),
            in_channels: 1,
            patch_dims: self.patching().patch_dims(volume_dims)?,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!("pretrain.temperature {} must be > 0", self.temperature)));
        }
        if self.scans_per_batch == 0 {
            return Err(Error::Config("pretrain.scans_per_batch must be >= 1".into()));
        }
        self.head.validate()
    }
}

pub struct PretrainOutcome {
    pub checkpoint: Checkpoint,
    /// Mean batch loss per epoch.
    pub loss_history: Vec<f64>,
    pub encoder: EncoderSpec,
}

pub fn init_pretrain_params(encoder: &EncoderSpec, head: &ProjectionHeadSpec, seed: u64) -> ParamStore {
    let mut r = rng::stream(seed, &[0x696e_6974]);
    let mut params = ParamStore::new();
    encoder.init(&mut params, &mut r);
    head.init(encoder.feature_dim(), &mut params, &mut r);
    params
}

/// Splits each scan into patches, min-max normalizes every patch, and draws
/// two augmented views per patch. Returns `[2N, 1, pd, ph, pw]` with the
/// views of source patch `m` at rows `2m` and `2m + 1`.
pub fn build_contrastive_batch(
    scans: &[&Volume],
    grid: [usize; 3],
    augment: &AugmentConfig,
    seed: u64,
    epoch: usize,
    step: usize,
) -> Result<Tensor<f32>> {
    let mut data = Vec::new();
    let mut count = 0;
    let mut pdims = [0; 3];
    for scan in scans {
        for patch in split_patches(scan, grid)? {
            pdims = patch.dims();
            let patch = minmax_normalize(&patch);
            let mut r = rng::stream(seed, &[0x0061_7567, epoch as u64, step as u64, count as u64]);
            let (a, b) = sample_pair(&patch, augment, &mut r)?;
            data.extend_from_slice(a.voxels());
            data.extend_from_slice(b.voxels());
            count += 1;
        }
    }
    Tensor::new(vec![2 * count, 1, pdims[0], pdims[1], pdims[2]], data)
}

/// Contrastive pretraining on unlabeled scans (all of the same dims).
pub fn pretrain(scans: &[Volume], cfg: &PretrainConfig, augment: &AugmentConfig) -> Result<PretrainOutcome> {
    cfg.validate()?;
    augment.validate()?;
    let first = scans.first().ok_or_else(|| Error::Param("pretraining needs at least one scan".into()))?;
    if scans.iter().any(|s| s.dims() != first.dims()) {
        return Err(Error::Param("pretraining scans must share dims".into()));
    }
    let encoder = cfg.encoder_spec(first.dims())?;
    let mut params = init_pretrain_params(&encoder, &cfg.head, cfg.seed);
    let mut opt = Adam::new(cfg.optimizer);
    let m = cfg.scans_per_batch.min(scans.len());
    let batches = scans.len() / m;
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..scans.len()).collect();
        order.shuffle(&mut rng::stream(cfg.seed, &[0x6570_6f63, epoch as u64]));
        let mut epoch_loss = 0.0;
        for step in 0..batches {
            let chosen: Vec<&Volume> = order[step * m..(step + 1) * m].iter().map(|&i| &scans[i]).collect();
            let batch = build_contrastive_batch(&chosen, cfg.grid, augment, cfg.seed, epoch, step)?;
            let mut tape = Tape::<f32>::new();
            let bound = params.bind(&mut tape, |_| true);
            let x = tape.constant(batch);
            let mut unused = rng::stream(0, &[]);
            let enc = encoder_forward(&encoder, &mut tape, &bound, x, &mut DropoutPlan::off(&mut unused))?;
            let z = head_forward(&mut tape, &bound, enc.bottleneck)?;
            let loss = ntxent_loss(&mut tape, z, cfg.temperature)?;
            let value = tape.value(loss).data()[0] as f64;
            if !value.is_finite() {
                return Err(Error::Numeric(format!("pretraining loss diverged at epoch {epoch}, step {step}")));
            }
            tape.backward(loss)?;
            let grads = params.collect_grads(&tape, &bound);
            opt.step(&mut params, &grads, |_| false);
            epoch_loss += value;
        }
        history.push(epoch_loss / batches as f64);
    }

    let meta = serde_json::json!({
        "kind": "pretrain",
        "encoder": encoder,
        "head": cfg.head,
        "temperature": cfg.temperature,
    });
    Ok(PretrainOutcome {
        checkpoint: Checkpoint::new(meta, params),
        loss_history: history,
        encoder,
    })
}
