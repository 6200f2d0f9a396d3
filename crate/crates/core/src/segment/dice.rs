//! Smoothed, class-averaged soft dice loss.

use serde::{Deserialize, Serialize};

use crate::autodiff::{CustomOp, Real, Tape, Tensor, Var};
use crate::error::{dim_err, Error, Result};
use crate::volume::LabelVolume;

pub const DEFAULT_SMOOTHING: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiceSpec {
    pub num_classes: usize,
    pub smoothing: f64,
    /// Per-class multipliers, renormalized to mean 1. Uniform when `None`.
    pub class_weights: Option<Vec<f64>>,
}

impl DiceSpec {
    pub fn new(num_classes: usize) -> Self {
        Self { num_classes, smoothing: DEFAULT_SMOOTHING, class_weights: None }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::Param("dice needs at least one class".into()));
        }
        if !(self.smoothing > 0.0) {
            return Err(Error::Param(format!("dice smoothing {} must be > 0", self.smoothing)));
        }
        if let Some(w) = &self.class_weights {
            if w.len() != self.num_classes || w.iter().any(|&x| !(x > 0.0 && x.is_finite())) {
                return Err(Error::Param("dice class weights must be positive, one per class".into()));
            }
        }
        Ok(())
    }

    /// Weights scaled to mean 1.
    pub fn normalized_weights(&self) -> Vec<f64> {
        match &self.class_weights {
            None => vec![1.0; self.num_classes],
            Some(w) => {
                let mean = w.iter().sum::<f64>() / w.len() as f64;
                w.iter().map(|x| x / mean).collect()
            }
        }
    }
}

/// `[C, D, H, W]` indicator tensor of a label volume.
pub fn onehot(labels: &LabelVolume, num_classes: usize) -> Result<Tensor<f32>> {
    let [d, h, w] = labels.dims();
    let v = d * h * w;
    let mut data = vec![0.0f32; num_classes * v];
    for (j, &l) in labels.labels().iter().enumerate() {
        let l = l as usize;
        if l >= num_classes {
            return Err(Error::Param(format!("label {l} not below {num_classes} classes")));
        }
        data[l * v + j] = 1.0;
    }
    Tensor::new(vec![num_classes, d, h, w], data)
}

/// Splits `[C, ...]` or `[N, C, ...]` into (batch, classes, voxels).
fn layout(shape: &[usize], num_classes: usize) -> Result<(usize, usize, usize)> {
    match shape.len() {
        4 if shape[0] == num_classes => Ok((1, shape[0], shape[1..].iter().product())),
        5 if shape[1] == num_classes => Ok((shape[0], shape[1], shape[2..].iter().product())),
        _ => Err(dim_err!("dice expects [C,D,H,W] or [N,C,D,H,W] with C={num_classes}, got {shape:?}")),
    }
}

struct DiceOp<T: Real> {
    /// Per (sample, class): (2 * intersection + s, denominator).
    terms: Vec<(T, T)>,
    weights: Vec<T>,
    layout: (usize, usize, usize),
}

impl<T: Real> CustomOp<T> for DiceOp<T> {
    fn name(&self) -> &'static str {
        "dice"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad_out: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        if !needs[0] {
            return vec![None, None];
        }
        let (n, c, v) = self.layout;
        let target = inputs[1].data();
        let norm = grad_out[0] / T::from_usize(n * c).expect("count");
        let two = T::from_f64_lossy(2.0);
        let mut g = vec![T::zero(); n * c * v];
        for b in 0..n {
            for i in 0..c {
                let (num, den) = self.terms[b * c + i];
                let k = -self.weights[i] * norm / (den * den);
                let base = (b * c + i) * v;
                for j in 0..v {
                    g[base + j] = k * (two * target[base + j] * den - num);
                }
            }
        }
        vec![Some(g), None]
    }
}

/// `-(1/C) * sum_i w_i (2 sum_j Y_ij T_ij + s) / (sum_j Y_ij + sum_j T_ij + s)`,
/// averaged over the batch axis when present.
pub fn dice_loss<T: Real>(tape: &mut Tape<T>, probs: Var, target: Var, spec: &DiceSpec) -> Result<Var> {
    spec.validate()?;
    let shape = tape.shape(probs).to_vec();
    if tape.shape(target) != shape.as_slice() {
        return Err(dim_err!("dice probs {shape:?} and target {:?} differ", tape.shape(target)));
    }
    let (n, c, v) = layout(&shape, spec.num_classes)?;
    let (y, t) = (tape.value(probs).data(), tape.value(target).data());
    for b in 0..n {
        for j in 0..v {
            let s: f64 = (0..c).map(|i| y[(b * c + i) * v + j].to_f64_lossy()).sum();
            if (s - 1.0).abs() > 1e-4 {
                return Err(Error::Param(format!("probabilities sum to {s} at voxel {j}, expected 1")));
            }
        }
    }
    let s = T::from_f64_lossy(spec.smoothing);
    let two = T::from_f64_lossy(2.0);
    let weights: Vec<T> = spec.normalized_weights().into_iter().map(T::from_f64_lossy).collect();
    let mut terms = Vec::with_capacity(n * c);
    let mut total = T::zero();
    for b in 0..n {
        for i in 0..c {
            let base = (b * c + i) * v;
            let (yr, tr) = (&y[base..base + v], &t[base..base + v]);
            let inter: T = yr.iter().zip(tr).map(|(&a, &b)| a * b).sum();
            let den = yr.iter().copied().sum::<T>() + tr.iter().copied().sum::<T>() + s;
            let num = two * inter + s;
            total += weights[i] * num / den;
            terms.push((num, den));
        }
    }
    let loss = -total / T::from_usize(n * c).expect("count");
    let op = DiceOp { terms, weights, layout: (n, c, v) };
    tape.custom(vec![probs, target], Tensor::scalar(loss), Box::new(op))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eval(probs: Vec<f64>, target: Vec<f64>, shape: Vec<usize>, spec: &DiceSpec) -> Result<f64> {
        let mut tape = Tape::<f64>::new();
        let p = tape.leaf(Tensor::new(shape.clone(), probs)?);
        let t = tape.constant(Tensor::new(shape, target)?);
        let l = dice_loss(&mut tape, p, t, spec)?;
        Ok(tape.value(l).data()[0])
    }

    #[test]
    fn onehot_layout() {
        let l = LabelVolume::new([1, 1, 2], vec![2, 0], 3).unwrap();
        let t = onehot(&l, 3).unwrap();
        assert_eq!(t.shape(), &[3, 1, 1, 2]);
        assert_eq!(t.data(), &[0.0, 1.0, 0.0, 0.0, 1.0, 0.0]);
        assert!(onehot(&l, 2).is_err());
    }

    #[test]
    fn perfect_overlap_is_minus_one() {
        let t = vec![1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0];
        let v = eval(t.clone(), t, vec![2, 1, 2, 2], &DiceSpec::new(2)).unwrap();
        assert!((v + 1.0).abs() < 1e-12);
    }

    #[test]
    fn disjoint_closed_form() {
        // prediction all class 0, truth all class 1, M = 4 voxels
        let p = vec![1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0];
        let t = vec![0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0];
        let s = 1e-5;
        let v = eval(p, t, vec![2, 1, 2, 2], &DiceSpec::new(2)).unwrap();
        assert!((v - (-s / (4.0 + s))).abs() < 1e-12);
    }

    #[test]
    fn unnormalized_probs_rejected() {
        let p = vec![0.6, 0.6];
        let t = vec![1.0, 0.0];
        assert!(matches!(eval(p, t, vec![2, 1, 1, 1], &DiceSpec::new(2)), Err(Error::Param(_))));
    }

    #[test]
    fn uniform_weights_equal_unweighted() {
        let p = vec![0.7, 0.2, 0.3, 0.8];
        let t = vec![1.0, 0.0, 0.0, 1.0];
        let a = eval(p.clone(), t.clone(), vec![2, 1, 1, 2], &DiceSpec::new(2)).unwrap();
        let spec = DiceSpec { class_weights: Some(vec![3.0, 3.0]), ..DiceSpec::new(2) };
        let b = eval(p, t, vec![2, 1, 1, 2], &spec).unwrap();
        assert_eq!(a, b);
    }
}
