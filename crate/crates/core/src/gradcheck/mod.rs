//! Central finite-difference checks of tape gradients.
//!
//! The analytic gradient comes from the `f32` tape. The numeric side re-runs
//! the same fragment instantiated at `f64`, so rounding in the forward pass
//! does not swamp the difference quotient.

use rand::seq::index::sample;
use rand::Rng;

use crate::autodiff::{Real, Tape, Tensor, Var};
use crate::error::{dim_err, Result};
use crate::rng;

pub mod suite;

/// A scalar-valued differentiable computation, evaluable at any precision.
pub trait Fragment {
    fn eval<T: Real>(&self, tape: &mut Tape<T>, inputs: &[Var]) -> Result<Var>;
}

#[derive(Clone, Copy, Debug)]
pub struct GradcheckConfig {
    pub eps: f64,
    /// Coordinates probed per gradient-requiring input; all when smaller.
    pub probes_per_input: usize,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-6,
            probes_per_input: 64,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct Probe {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl Probe {
    pub fn rel_error(&self) -> f64 {
        let denom = self.analytic.abs().max(self.numeric.abs()).max(1e-8);
        (self.analytic - self.numeric).abs() / denom
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    pub probes: Vec<Probe>,
}

impl GradcheckReport {
    pub fn worst(&self) -> Option<&Probe> {
        self.probes
            .iter()
            .max_by(|a, b| a.rel_error().total_cmp(&b.rel_error()))
    }
}

fn eval_at<F: Fragment>(fragment: &F, inputs: &[Tensor<f64>]) -> Result<f64> {
    let mut tape = Tape::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = fragment.eval(&mut tape, &vars)?;
    let v = tape.value(out);
    if !v.is_scalar() {
        return Err(dim_err!("gradcheck fragment must return a scalar, got {:?}", v.shape()));
    }
    Ok(v.data()[0])
}

/// Returns the maximum over probed coordinates of
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn gradcheck<F: Fragment>(fragment: &F, inputs: &[Tensor<f32>], cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let mut tape = Tape::<f32>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = fragment.eval(&mut tape, &vars)?;
    tape.backward(out)?;

    let mut wide: Vec<Tensor<f64>> = inputs.iter().map(Tensor::cast).collect();
    let mut picker = rng::stream(cfg.seed, &[0x6772_6164]);
    let mut report = GradcheckReport::default();
    for (k, t) in inputs.iter().enumerate() {
        if !t.requires_grad {
            continue;
        }
        let analytic = tape.grad(vars[k]).map(<[f32]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]);
        let coords: Vec<usize> = if t.len() <= cfg.probes_per_input {
            (0..t.len()).collect()
        } else {
            let mut c = sample(&mut picker, t.len(), cfg.probes_per_input).into_vec();
            c.sort_unstable();
            c
        };
        for idx in coords {
            let orig = wide[k].data()[idx];
            wide[k].data_mut()[idx] = orig + cfg.eps;
            let plus = eval_at(fragment, &wide)?;
            wide[k].data_mut()[idx] = orig - cfg.eps;
            let minus = eval_at(fragment, &wide)?;
            wide[k].data_mut()[idx] = orig;
            let probe = Probe {
                input: k,
                index: idx,
                analytic: analytic[idx] as f64,
                numeric: (plus - minus) / (2.0 * cfg.eps),
            };
            report.max_rel_error = report.max_rel_error.max(probe.rel_error());
            report.probes.push(probe);
        }
    }
    Ok(report)
}

/// Reduces a tensor to a scalar with fixed pseudo-random weights so every
/// output element receives a distinct upstream gradient.
pub fn weighted_sum<T: Real>(tape: &mut Tape<T>, v: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(v).to_vec();
    let mut r = rng::stream(seed, &[0x7773]);
    let n = tape.value(v).len();
    let w: Vec<T> = (0..n).map(|_| T::from_f64_lossy(r.random_range(-1.0..1.0))).collect();
    let w = tape.constant(Tensor::new(shape, w)?);
    let p = tape.mul(v, w)?;
    tape.sum(p)
}
