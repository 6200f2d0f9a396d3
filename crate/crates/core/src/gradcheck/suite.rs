//! The standard set of gradient checks: every differentiable op, the fused
//! losses, and a small U-Net trained end to end on the dice loss.

use rand::Rng;
use serde::Serialize;

use super::{gradcheck, weighted_sum, Fragment, GradcheckConfig};
use crate::autodiff::{softmax_channels_raw, DropoutMode, Real, Tape, Tensor, Var};
use crate::contrastive::{ntxent_loss, DropoutPlan, EncoderSpec};
use crate::error::{Error, Result};
use crate::params::Bound;
use crate::rng;
use crate::segment::{dice_loss, DiceSpec, UNet, UNetInit, UNetSpec};

/// Tolerance on the max relative error of single ops and fused losses.
pub const OP_TOLERANCE: f64 = 1e-3;
/// Tolerance for the whole network at 8³.
pub const END_TO_END_TOLERANCE: f64 = 1e-2;

#[derive(Clone, Debug, Serialize)]
pub struct CaseResult {
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub probes: usize,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.probes > 0 && self.max_rel_error < self.tolerance
    }
}

pub const CASES: &[&str] = &[
    "conv3d_same",
    "conv3d_strided",
    "conv3d_pointwise",
    "maxpool",
    "upsample",
    "relu",
    "softmax",
    "reshape",
    "dropout",
    "dense",
    "concat_mul",
    "ntxent_t0.05",
    "ntxent_t0.1",
    "ntxent_t0.5",
    "dice",
    "unet_dice_8",
];

fn random(shape: Vec<usize>, seed: u64) -> Result<Tensor<f32>> {
    let mut r = rng::stream(seed, &[]);
    let n = shape.iter().product();
    Ok(Tensor::new(shape, (0..n).map(|_| r.random_range(-1.0f32..1.0)).collect())?.with_grad())
}

/// Softmax over random logits, so channel columns are distributions.
fn random_probs(shape: Vec<usize>, seed: u64, grad: bool) -> Result<Tensor<f32>> {
    let logits = random(shape.clone(), seed)?;
    let mut t = Tensor::new(shape.clone(), softmax_channels_raw(&shape, logits.data()))?;
    t.requires_grad = grad;
    Ok(t)
}

struct Conv {
    stride: usize,
    padding: usize,
}

impl Fragment for Conv {
    fn eval<T: Real>(&self, tape: &mut Tape<T>, x: &[Var]) -> Result<Var> {
        let y = tape.conv3d(x[0], x[1], x[2], self.stride, self.padding)?;
        weighted_sum(tape, y, 1)
    }
}

// Fragments are generic over precision, so each unary op gets its own type.
macro_rules! unary_fragment {
    ($name:ident, |$tape:ident, $x:ident| $body:expr) => {
        struct $name;
        impl Fragment for $name {
            fn eval<T: Real>(&self, $tape: &mut Tape<T>, inputs: &[Var]) -> Result<Var> {
                let $x = inputs[0];
                let y = $body?;
                weighted_sum($tape, y, 2)
            }
        }
    };
}

unary_fragment!(Pool, |tape, x| tape.maxpool3d(x, 2));
unary_fragment!(Upsample, |tape, x| tape.upsample3d(x, 2));
unary_fragment!(Relu, |tape, x| tape.relu(x));
unary_fragment!(Softmax, |tape, x| tape.softmax_channels(x));
unary_fragment!(Reshape, |tape, x| tape.reshape(x, vec![6, 8]));
unary_fragment!(Dropout, |tape, x| {
    // Same seed on every evaluation, so the mask is fixed.
    let mut r = rng::stream(11, &[]);
    tape.dropout(x, 0.4, &mut r, DropoutMode::Train)
});

struct Dense;

impl Fragment for Dense {
    fn eval<T: Real>(&self, tape: &mut Tape<T>, x: &[Var]) -> Result<Var> {
        let y = tape.dense(x[0], x[1], x[2])?;
        weighted_sum(tape, y, 3)
    }
}

struct ConcatMul;

impl Fragment for ConcatMul {
    fn eval<T: Real>(&self, tape: &mut Tape<T>, x: &[Var]) -> Result<Var> {
        let c = tape.concat_channels(x[0], x[1])?;
        let m = tape.mul(c, x[2])?;
        weighted_sum(tape, m, 4)
    }
}

struct NtXent(f64);

impl Fragment for NtXent {
    fn eval<T: Real>(&self, tape: &mut Tape<T>, x: &[Var]) -> Result<Var> {
        ntxent_loss(tape, x[0], self.0)
    }
}

struct Dice(DiceSpec);

impl Fragment for Dice {
    fn eval<T: Real>(&self, tape: &mut Tape<T>, x: &[Var]) -> Result<Var> {
        dice_loss(tape, x[0], x[1], &self.0)
    }
}

/// Input volume and every network parameter are gradcheck inputs.
struct EndToEnd {
    net: UNet,
    target: Tensor<f32>,
}

impl Fragment for EndToEnd {
    fn eval<T: Real>(&self, tape: &mut Tape<T>, x: &[Var]) -> Result<Var> {
        let bound: Bound = self.net.params.iter().zip(&x[1..]).map(|((n, _), &v)| (n.to_string(), v)).collect();
        let mut r = rng::stream(0, &[]);
        let probs = self.net.forward(tape, &bound, x[0], &mut DropoutPlan::off(&mut r))?;
        let target = tape.constant(self.target.cast());
        dice_loss(tape, probs, target, &DiceSpec::new(self.net.spec.num_classes))
    }
}

fn finish<F: Fragment>(name: &str, f: &F, inputs: &[Tensor<f32>], cfg: &GradcheckConfig, tolerance: f64) -> Result<CaseResult> {
    let rep = gradcheck(f, inputs, cfg)?;
    Ok(CaseResult { name: name.into(), max_rel_error: rep.max_rel_error, tolerance, probes: rep.probes.len() })
}

/// Runs one named case from [`CASES`].
pub fn run_case(name: &str) -> Result<CaseResult> {
    let cfg = GradcheckConfig::default();
    match name {
        "conv3d_same" => {
            let x = [random(vec![2, 3, 5, 4, 6], 1)?, random(vec![4, 3, 3, 3, 3], 2)?, random(vec![4], 3)?];
            finish(name, &Conv { stride: 1, padding: 1 }, &x, &cfg, OP_TOLERANCE)
        }
        "conv3d_strided" => {
            let x = [random(vec![1, 2, 7, 6, 5], 4)?, random(vec![3, 2, 3, 2, 3], 5)?, random(vec![3], 6)?];
            finish(name, &Conv { stride: 2, padding: 0 }, &x, &cfg, OP_TOLERANCE)
        }
        "conv3d_pointwise" => {
            let x = [random(vec![2, 4, 3, 3, 3], 7)?, random(vec![2, 4, 1, 1, 1], 8)?, random(vec![2], 9)?];
            finish(name, &Conv { stride: 1, padding: 0 }, &x, &cfg, OP_TOLERANCE)
        }
        "maxpool" => finish(name, &Pool, &[random(vec![2, 3, 4, 6, 4], 10)?], &cfg, OP_TOLERANCE),
        "upsample" => finish(name, &Upsample, &[random(vec![1, 2, 2, 3, 2], 11)?], &cfg, OP_TOLERANCE),
        "relu" => finish(name, &Relu, &[random(vec![3, 4, 5], 12)?], &cfg, OP_TOLERANCE),
        "softmax" => finish(name, &Softmax, &[random(vec![2, 4, 3, 2, 2], 13)?], &cfg, OP_TOLERANCE),
        "reshape" => finish(name, &Reshape, &[random(vec![2, 3, 8], 14)?], &cfg, OP_TOLERANCE),
        "dropout" => finish(name, &Dropout, &[random(vec![4, 5, 6], 15)?], &cfg, OP_TOLERANCE),
        "dense" => {
            let x = [random(vec![5, 7], 16)?, random(vec![7, 3], 17)?, random(vec![3], 18)?];
            finish(name, &Dense, &x, &cfg, OP_TOLERANCE)
        }
        "concat_mul" => {
            let x = [random(vec![2, 1, 2, 3, 2], 19)?, random(vec![2, 3, 2, 3, 2], 20)?, random(vec![2, 4, 2, 3, 2], 21)?];
            finish(name, &ConcatMul, &x, &cfg, OP_TOLERANCE)
        }
        "ntxent_t0.05" | "ntxent_t0.1" | "ntxent_t0.5" => {
            let tau: f64 = name["ntxent_t".len()..].parse().expect("case name holds tau");
            let seed = 30 + (tau * 100.0) as u64;
            finish(name, &NtXent(tau), &[random(vec![8, 6], seed)?], &cfg, OP_TOLERANCE)
        }
        "dice" => {
            let x = [random_probs(vec![2, 3, 3, 2, 2], 40, true)?, random_probs(vec![2, 3, 3, 2, 2], 41, false)?];
            let spec = DiceSpec { class_weights: Some(vec![1.0, 2.0, 2.0]), ..DiceSpec::new(3) };
            finish(name, &Dice(spec), &x, &cfg, OP_TOLERANCE)
        }
        "unet_dice_8" => {
            let spec = UNetSpec {
                encoder: EncoderSpec { stages: vec![2, 4], in_channels: 1, patch_dims: [4; 3] },
                num_classes: 3,
                input_dims: [8; 3],
            };
            let net = UNet::build(spec, UNetInit::Random { seed: 2 })?;
            let target = random_probs(vec![1, 3, 8, 8, 8], 50, false)?;
            let mut inputs = vec![random(vec![1, 1, 8, 8, 8], 51)?];
            inputs.extend(net.params.iter().map(|(_, t)| t.clone().with_grad()));
            let cfg = GradcheckConfig { probes_per_input: 12, ..cfg };
            finish(name, &EndToEnd { net, target }, &inputs, &cfg, END_TO_END_TOLERANCE)
        }
        other => Err(Error::Config(format!("unknown gradcheck case {other:?}"))),
    }
}

pub fn run_all() -> Result<Vec<CaseResult>> {
    CASES.iter().map(|c| run_case(c)).collect()
}
