//! 3D-CNN encoder and the dense projection head used during pretraining.

use serde::{Deserialize, Serialize};

use crate::autodiff::{DropoutMode, Real, Tape, Var};
use crate::error::{dim_err, Result};
use crate::params::{he_normal, Bound, ParamStore};
use crate::autodiff::Tensor;
use crate::rng::RngHandle;
use crate::volume::Dims;

pub const KERNEL: usize = 3;
pub const POOL: usize = 2;

/// Stack of `conv3x3x3 -> relu -> [dropout] -> maxpool2` stages.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSpec {
    /// Output channels of each stage.
    pub stages: Vec<usize>,
    pub in_channels: usize,
    /// Spatial dims the encoder sees during pretraining.
    pub patch_dims: Dims,
}

impl EncoderSpec {
    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() || self.stages.contains(&0) || self.in_channels == 0 {
            return Err(dim_err!("encoder needs >= 1 stage with nonzero channels"));
        }
        let div = POOL.pow(self.stages.len() as u32);
        if self.patch_dims.iter().any(|&d| d % div != 0 || d == 0) {
            return Err(dim_err!("patch dims {:?} not divisible by 2^{}", self.patch_dims, self.stages.len()));
        }
        Ok(())
    }

    /// Spatial dims after the last pooling.
    pub fn bottleneck_dims(&self, input: Dims) -> Dims {
        let div = POOL.pow(self.stages.len() as u32);
        input.map(|d| d / div)
    }

    /// Length of the flattened encoder output for `patch_dims` inputs.
    pub fn feature_dim(&self) -> usize {
        self.stages.last().copied().unwrap_or(0) * self.bottleneck_dims(self.patch_dims).iter().product::<usize>()
    }

    pub fn stage_in(&self, s: usize) -> usize {
        if s == 0 {
            self.in_channels
        } else {
            self.stages[s - 1]
        }
    }

    pub fn init(&self, params: &mut ParamStore, rng: &mut RngHandle) {
        for (s, &out) in self.stages.iter().enumerate() {
            let cin = self.stage_in(s);
            let fan_in = cin * KERNEL.pow(3);
            params.insert(format!("enc.{s}.weight"), he_normal(vec![out, cin, KERNEL, KERNEL, KERNEL], fan_in, rng));
            params.insert(format!("enc.{s}.bias"), Tensor::zeros(vec![out]));
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectionHeadSpec {
    pub hidden_dim: usize,
    pub output_dim: usize,
}

impl ProjectionHeadSpec {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.output_dim < 2 {
            return Err(dim_err!("projection head needs hidden_dim >= 1 and output_dim >= 2"));
        }
        Ok(())
    }

    pub fn init(&self, feature_dim: usize, params: &mut ParamStore, rng: &mut RngHandle) {
        params.insert("head.0.weight", he_normal(vec![feature_dim, self.hidden_dim], feature_dim, rng));
        params.insert("head.0.bias", Tensor::zeros(vec![self.hidden_dim]));
        params.insert("head.1.weight", he_normal(vec![self.hidden_dim, self.output_dim], self.hidden_dim, rng));
        params.insert("head.1.bias", Tensor::zeros(vec![self.output_dim]));
    }
}

pub fn is_encoder_param(name: &str) -> bool {
    name.starts_with("enc.")
}

/// Dropout placement and randomness for one forward pass.
pub struct DropoutPlan<'a> {
    pub mode: DropoutMode,
    pub encoder_rate: f64,
    pub decoder_rate: f64,
    pub rng: &'a mut RngHandle,
}

impl<'a> DropoutPlan<'a> {
    pub fn off(rng: &'a mut RngHandle) -> Self {
        Self { mode: DropoutMode::Off, encoder_rate: 0.0, decoder_rate: 0.0, rng }
    }
}

pub struct EncoderOutput {
    /// Pooled output of the last stage.
    pub bottleneck: Var,
    /// Pre-pooling activations of every stage, shallowest first.
    pub skips: Vec<Var>,
}

pub fn encoder_forward<T: Real>(
    spec: &EncoderSpec,
    tape: &mut Tape<T>,
    params: &Bound,
    input: Var,
    dropout: &mut DropoutPlan<'_>,
) -> Result<EncoderOutput> {
    let mut x = input;
    let mut skips = Vec::with_capacity(spec.stages.len());
    for s in 0..spec.stages.len() {
        let w = params.get(&format!("enc.{s}.weight"))?;
        let b = params.get(&format!("enc.{s}.bias"))?;
        let c = tape.conv3d(x, w, b, 1, KERNEL / 2)?;
        let r = tape.relu(c)?;
        let d = tape.dropout(r, dropout.encoder_rate, dropout.rng, dropout.mode)?;
        skips.push(d);
        x = tape.maxpool3d(d, POOL)?;
    }
    Ok(EncoderOutput { bottleneck: x, skips })
}

/// Flattens the encoder output and maps it to the latent space.
pub fn head_forward<T: Real>(tape: &mut Tape<T>, params: &Bound, features: Var) -> Result<Var> {
    let n = tape.shape(features)[0];
    let f = tape.value(features).len() / n;
    let flat = tape.reshape(features, vec![n, f])?;
    let h = tape.dense(flat, params.get("head.0.weight")?, params.get("head.0.bias")?)?;
    let h = tape.relu(h)?;
    tape.dense(h, params.get("head.1.weight")?, params.get("head.1.bias")?)
}
