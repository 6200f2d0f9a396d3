//! Encoder-decoder segmentation network with skip connections.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Real, Tape, Tensor, Var};
use crate::checkpoint::Checkpoint;
use crate::contrastive::{encoder_forward, is_encoder_param, DropoutPlan, EncoderSpec, KERNEL, POOL};
use crate::error::{dim_err, Error, Result};
use crate::params::{he_normal, Bound, ParamStore};
use crate::rng;
use crate::volume::{Dims, Volume};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UNetSpec {
    pub encoder: EncoderSpec,
    pub num_classes: usize,
    /// Spatial dims of the full-volume input.
    pub input_dims: Dims,
}

impl UNetSpec {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.num_classes < 2 {
            return Err(dim_err!("segmentation needs >= 2 classes"));
        }
        let div = POOL.pow(self.encoder.stages.len() as u32);
        if self.input_dims.iter().any(|&d| d == 0 || d % div != 0) {
            return Err(dim_err!("input dims {:?} not divisible by 2^{}", self.input_dims, self.encoder.stages.len()));
        }
        Ok(())
    }

    /// Output channels of decoder stage `s` (stages are numbered like the
    /// encoder level they merge with).
    pub fn decoder_out(&self, s: usize) -> usize {
        self.encoder.stages[s.saturating_sub(1)]
    }

    /// Input channels of decoder stage `s`: upsampled features plus the skip.
    pub fn decoder_in(&self, s: usize) -> usize {
        let stages = &self.encoder.stages;
        let below = if s + 1 == stages.len() { stages[s] } else { self.decoder_out(s + 1) };
        below + stages[s]
    }

    pub fn init_decoder(&self, params: &mut ParamStore, rng: &mut rng::RngHandle) {
        for s in (0..self.encoder.stages.len()).rev() {
            let (cin, cout) = (self.decoder_in(s), self.decoder_out(s));
            params.insert(format!("dec.{s}.weight"), he_normal(vec![cout, cin, KERNEL, KERNEL, KERNEL], cin * KERNEL.pow(3), rng));
            params.insert(format!("dec.{s}.bias"), Tensor::zeros(vec![cout]));
        }
        let c0 = self.decoder_out(0);
        params.insert("dec.out.weight", he_normal(vec![self.num_classes, c0, 1, 1, 1], c0, rng));
        params.insert("dec.out.bias", Tensor::zeros(vec![self.num_classes]));
    }
}

/// Where the encoder weights of a fresh network come from.
pub enum UNetInit<'a> {
    Random { seed: u64 },
    /// Encoder copied from a checkpoint; decoder freshly initialized.
    Pretrained { checkpoint: &'a Checkpoint, seed: u64 },
}

#[derive(Clone, Debug)]
pub struct UNet {
    pub spec: UNetSpec,
    pub params: ParamStore,
}

impl UNet {
    pub fn build(spec: UNetSpec, init: UNetInit<'_>) -> Result<Self> {
        spec.validate()?;
        let seed = match init {
            UNetInit::Random { seed } | UNetInit::Pretrained { seed, .. } => seed,
        };
        let mut r = rng::stream(seed, &[0x756e_6574]);
        let mut params = ParamStore::new();
        spec.encoder.init(&mut params, &mut r);
        spec.init_decoder(&mut params, &mut r);
        if let UNetInit::Pretrained { checkpoint, .. } = init {
            let names: Vec<String> = params.iter().map(|(n, _)| n.to_string()).filter(|n| is_encoder_param(n)).collect();
            for name in names {
                let src = checkpoint
                    .params
                    .get(&name)
                    .ok_or_else(|| Error::Checkpoint(format!("checkpoint lacks encoder parameter {name}")))?;
                let dst = params.get_mut(&name).expect("just initialized");
                if src.shape() != dst.shape() {
                    return Err(Error::Checkpoint(format!(
                        "{name}: checkpoint shape {:?} does not match network {:?}",
                        src.shape(),
                        dst.shape()
                    )));
                }
                *dst = src.clone();
            }
        }
        Ok(Self { spec, params })
    }

    /// Rebuilds a network saved with [`UNet::to_checkpoint`].
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let spec: UNetSpec = serde_json::from_value(ckpt.meta.get("unet").cloned().unwrap_or_default())
            .map_err(|e| Error::Checkpoint(format!("checkpoint has no usable network description: {e}")))?;
        let reference = Self::build(spec.clone(), UNetInit::Random { seed: 0 })?;
        for (name, t) in reference.params.iter() {
            match ckpt.params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                Some(p) => return Err(Error::Checkpoint(format!("{name}: shape {:?}, expected {:?}", p.shape(), t.shape()))),
                None => return Err(Error::Checkpoint(format!("missing parameter {name}"))),
            }
        }
        Ok(Self { spec, params: ckpt.params.clone() })
    }

    /// Sets the output bias to log class frequencies so the untrained
    /// network already predicts the class prior.
    pub fn set_output_prior(&mut self, frequencies: &[f64]) -> Result<()> {
        if frequencies.len() != self.spec.num_classes || frequencies.iter().any(|&f| !(f > 0.0)) {
            return Err(Error::Param("output prior needs one positive frequency per class".into()));
        }
        let bias = frequencies.iter().map(|f| f.ln() as f32).collect();
        *self.params.get_mut("dec.out.bias").expect("built network") = Tensor::new(vec![frequencies.len()], bias)?;
        Ok(())
    }

    pub fn to_checkpoint(&self, extra: serde_json::Value) -> Checkpoint {
        let meta = serde_json::json!({ "kind": "unet", "unet": self.spec, "training": extra });
        Checkpoint::new(meta, self.params.clone())
    }

    /// Class probabilities `[N, C, D, H, W]` for input `[N, 1, D, H, W]`.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, bound: &Bound, input: Var, dropout: &mut DropoutPlan<'_>) -> Result<Var> {
        let enc = encoder_forward(&self.spec.encoder, tape, bound, input, dropout)?;
        let mut x = enc.bottleneck;
        for s in (0..self.spec.encoder.stages.len()).rev() {
            let up = tape.upsample3d(x, POOL)?;
            let cat = tape.concat_channels(up, enc.skips[s])?;
            let w = bound.get(&format!("dec.{s}.weight"))?;
            let b = bound.get(&format!("dec.{s}.bias"))?;
            let c = tape.conv3d(cat, w, b, 1, KERNEL / 2)?;
            let r = tape.relu(c)?;
            x = tape.dropout(r, dropout.decoder_rate, dropout.rng, dropout.mode)?;
        }
        let logits = tape.conv3d(x, bound.get("dec.out.weight")?, bound.get("dec.out.bias")?, 1, 0)?;
        tape.softmax_channels(logits)
    }

    /// Probabilities `[C, D, H, W]` (flattened) for one preprocessed volume.
    pub fn predict(&self, volume: &Volume, dropout: &mut DropoutPlan<'_>) -> Result<Vec<f32>> {
        if volume.dims() != self.spec.input_dims {
            return Err(dim_err!("volume dims {:?} differ from network input {:?}", volume.dims(), self.spec.input_dims));
        }
        let [d, h, w] = volume.dims();
        let mut tape = Tape::<f32>::new();
        let bound = self.params.bind(&mut tape, |_| false);
        let x = tape.constant(Tensor::new(vec![1, 1, d, h, w], volume.voxels().to_vec())?);
        let y = self.forward(&mut tape, &bound, x, dropout)?;
        Ok(tape.take_value(y).into_data())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> UNetSpec {
        UNetSpec {
            encoder: EncoderSpec { stages: vec![2, 4], in_channels: 1, patch_dims: [4, 4, 4] },
            num_classes: 3,
            input_dims: [4, 4, 8],
        }
    }

    #[test]
    fn channel_bookkeeping() {
        let s = UNetSpec { encoder: EncoderSpec { stages: vec![8, 16, 32], in_channels: 1, patch_dims: [8; 3] }, ..spec() };
        assert_eq!((s.decoder_in(2), s.decoder_out(2)), (64, 16));
        assert_eq!((s.decoder_in(1), s.decoder_out(1)), (32, 8));
        assert_eq!((s.decoder_in(0), s.decoder_out(0)), (16, 8));
    }

    #[test]
    fn forward_gives_distributions() {
        let net = UNet::build(spec(), UNetInit::Random { seed: 3 }).unwrap();
        let vol = Volume::new([4, 4, 8], (0..128).map(|i| (i % 7) as f32 / 7.0).collect()).unwrap();
        let mut r = rng::stream(0, &[]);
        let p = net.predict(&vol, &mut DropoutPlan::off(&mut r)).unwrap();
        assert_eq!(p.len(), 3 * 128);
        for j in 0..128 {
            let s: f32 = (0..3).map(|c| p[c * 128 + j]).sum();
            assert!((s - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn pretrained_encoder_copied_exactly() {
        let mut donor = ParamStore::new();
        spec().encoder.init(&mut donor, &mut rng::stream(99, &[]));
        let ckpt = Checkpoint::new(serde_json::json!({}), donor.clone());
        let net = UNet::build(spec(), UNetInit::Pretrained { checkpoint: &ckpt, seed: 1 }).unwrap();
        for (name, t) in donor.iter() {
            assert_eq!(net.params.get(name).unwrap().data(), t.data());
        }
        let bad = Checkpoint::new(serde_json::json!({}), ParamStore::new());
        assert!(matches!(UNet::build(spec(), UNetInit::Pretrained { checkpoint: &bad, seed: 1 }), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn checkpoint_roundtrip() {
        let net = UNet::build(spec(), UNetInit::Random { seed: 5 }).unwrap();
        let back = UNet::from_checkpoint(&Checkpoint::from_bytes(&net.to_checkpoint(serde_json::json!({})).to_bytes().unwrap()).unwrap()).unwrap();
        assert_eq!(back.spec, net.spec);
        assert_eq!(back.params, net.params);
    }
}
