//! Supervised fine-tuning on a labelled subset.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::dice::{dice_loss, onehot, DiceSpec, DEFAULT_SMOOTHING};
use super::unet::UNet;
use crate::autodiff::{DropoutMode, Tape, Tensor};
use crate::contrastive::{is_encoder_param, DropoutPlan};
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};
use crate::rng;
use crate::volume::{subset_indices, Sample};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    pub epochs: usize,
    /// Leading epochs during which encoder weights stay fixed.
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub enc_dropout: f64,
    pub dec_dropout: f64,
    pub smoothing: f64,
    pub class_weights: Option<Vec<f64>>,
    /// Initialize the output bias to the (add-one smoothed) log class
    /// frequencies of the training subset. Without it the softmax tends to
    /// saturate on the dominant class within a few steps.
    pub prior_bias: bool,
    pub seed: u64,
    pub optimizer: AdamConfig,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            warmup_epochs: 5,
            batch_size: 2,
            enc_dropout: 0.3,
            dec_dropout: 0.0,
            smoothing: DEFAULT_SMOOTHING,
            class_weights: None,
            prior_bias: true,
            seed: 0,
            optimizer: AdamConfig::default(),
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("finetune.batch_size must be >= 1".into()));
        }
        for (name, r) in [("enc_dropout", self.enc_dropout), ("dec_dropout", self.dec_dropout)] {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::Config(format!("finetune.{name} {r} outside [0, 1)")));
            }
        }
        Ok(())
    }
}

pub struct FinetuneOutcome {
    pub unet: UNet,
    /// Mean batch loss per epoch.
    pub loss_history: Vec<f64>,
    /// Indices into the labelled set that were used for training.
    pub subset: Vec<usize>,
}

/// Trains `unet` with dice loss on a `fraction` of `labelled`. The subset
/// depends only on `(labelled.len(), fraction, cfg.seed)`.
pub fn finetune(mut unet: UNet, labelled: &[Sample], fraction: f64, cfg: &FinetuneConfig) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    let dice = DiceSpec { num_classes: unet.spec.num_classes, smoothing: cfg.smoothing, class_weights: cfg.class_weights.clone() };
    dice.validate()?;
    let subset = subset_indices(labelled.len(), fraction, rng::derive_seed(cfg.seed, &[0x7375_6273]))?;
    let mut prepared = Vec::with_capacity(subset.len());
    for &i in &subset {
        let s = &labelled[i];
        let labels = s.labels.as_ref().ok_or_else(|| Error::Param(format!("training sample {i} has no labels")))?;
        if s.volume.dims() != unet.spec.input_dims || labels.dims() != unet.spec.input_dims {
            return Err(Error::Dimension(format!(
                "sample {i} dims {:?} differ from network input {:?}",
                s.volume.dims(),
                unet.spec.input_dims
            )));
        }
        prepared.push((s.volume.voxels(), onehot(labels, dice.num_classes)?));
    }

    let [d, h, w] = unet.spec.input_dims;
    let c = dice.num_classes;
    if cfg.prior_bias {
        let mut counts = vec![1.0; c];
        for &i in &subset {
            let labels = labelled[i].labels.as_ref().expect("checked above");
            for (k, n) in counts.iter_mut().enumerate() {
                *n += labels.count(k as u8) as f64;
            }
        }
        let total: f64 = counts.iter().sum();
        unet.set_output_prior(&counts.iter().map(|n| n / total).collect::<Vec<_>>())?;
    }
    let mut opt = Adam::new(cfg.optimizer);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let frozen = epoch < cfg.warmup_epochs;
        let trainable = |n: &str| !(frozen && is_encoder_param(n));
        let mut order: Vec<usize> = (0..prepared.len()).collect();
        order.shuffle(&mut rng::stream(cfg.seed, &[0x6570_6f63, epoch as u64]));
        let mut epoch_loss = 0.0;
        let batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        for (step, batch) in batches.iter().enumerate() {
            let mut x = Vec::with_capacity(batch.len() * d * h * w);
            let mut t = Vec::with_capacity(batch.len() * c * d * h * w);
            for &k in *batch {
                x.extend_from_slice(prepared[k].0);
                t.extend_from_slice(prepared[k].1.data());
            }
            let n = batch.len();
            let mut tape = Tape::<f32>::new();
            let bound = unet.params.bind(&mut tape, trainable);
            let xv = tape.constant(Tensor::new(vec![n, 1, d, h, w], x)?);
            let tv = tape.constant(Tensor::new(vec![n, c, d, h, w], t)?);
            let mut r = rng::stream(cfg.seed, &[0x6472_6f70, epoch as u64, step as u64]);
            let mut plan = DropoutPlan {
                mode: DropoutMode::Train,
                encoder_rate: cfg.enc_dropout,
                decoder_rate: cfg.dec_dropout,
                rng: &mut r,
            };
            let probs = unet.forward(&mut tape, &bound, xv, &mut plan)?;
            let loss = dice_loss(&mut tape, probs, tv, &dice)?;
            let value = tape.value(loss).data()[0] as f64;
            if !value.is_finite() {
                return Err(Error::Numeric(format!("fine-tuning loss diverged at epoch {epoch}, step {step}")));
            }
            tape.backward(loss)?;
            let grads = unet.params.collect_grads(&tape, &bound);
            opt.step(&mut unet.params, &grads, |n| !trainable(n));
            epoch_loss += value;
        }
        history.push(epoch_loss / batches.len().max(1) as f64);
    }
    Ok(FinetuneOutcome { unet, loss_history: history, subset })
}
