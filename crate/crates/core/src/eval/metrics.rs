use crate::error::{dim_err, Result};
use crate::volume::LabelVolume;

/// Hard-label dice `2|P ∩ T| / (|P| + |T|)` for one class; 1 when both
/// masks are empty.
pub fn dice_score(pred: &LabelVolume, truth: &LabelVolume, class: u8) -> Result<f64> {
    if pred.dims() != truth.dims() {
        return Err(dim_err!("prediction dims {:?} differ from truth {:?}", pred.dims(), truth.dims()));
    }
    let (mut inter, mut p, mut t) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.labels().iter().zip(truth.labels()) {
        let (ia, ib) = (a == class, b == class);
        inter += (ia && ib) as usize;
        p += ia as usize;
        t += ib as usize;
    }
    if p + t == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (p + t) as f64)
}

/// Dice of every class `0..num_classes`.
pub fn class_dice(pred: &LabelVolume, truth: &LabelVolume, num_classes: usize) -> Result<Vec<f64>> {
    (0..num_classes).map(|c| dice_score(pred, truth, c as u8)).collect()
}

/// Mean over foreground classes (index >= 1).
pub fn mean_foreground(per_class: &[f64]) -> f64 {
    let fg = &per_class[1.min(per_class.len())..];
    if fg.is_empty() {
        return f64::NAN;
    }
    fg.iter().sum::<f64>() / fg.len() as f64
}
