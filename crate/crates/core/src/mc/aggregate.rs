//! Voxel-wise reductions of an ensemble to a single label map, and
//! percentile heatmaps.

use serde::{Deserialize, Serialize};

use super::ensemble::EnsemblePrediction;
use crate::error::{Error, Result};
use crate::volume::{LabelVolume, Volume};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "protocol", rename_all = "snake_case", deny_unknown_fields)]
pub enum AggregationProtocol {
    Majority,
    WeightedMajority { weights: Vec<f64> },
    Borda,
    UnionPerClass {
        class_x: usize,
        #[serde(default = "default_fallback")]
        fallback: Box<AggregationProtocol>,
    },
}

fn default_fallback() -> Box<AggregationProtocol> {
    Box::new(AggregationProtocol::Majority)
}

impl AggregationProtocol {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Majority => "majority",
            Self::WeightedMajority { .. } => "weighted_majority",
            Self::Borda => "borda",
            Self::UnionPerClass { .. } => "union",
        }
    }
}

/// Index of the largest score; ties go to the lowest index.
fn first_max<T: PartialOrd + Copy>(scores: &[T]) -> usize {
    let mut best = 0;
    for (c, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = c;
        }
    }
    best
}

fn label_volume(ens: &EnsemblePrediction, labels: Vec<u8>) -> Result<LabelVolume> {
    LabelVolume::new(ens.dims(), labels, ens.num_classes() as u8)
}

fn check_label_range(ens: &EnsemblePrediction) -> Result<()> {
    if ens.num_classes() > u8::MAX as usize + 1 {
        return Err(Error::Param(format!("{} classes do not fit a label volume", ens.num_classes())));
    }
    Ok(())
}

/// Per-voxel vote counts of every class.
fn votes(ens: &EnsemblePrediction, voxel: usize, counts: &mut [u32]) {
    counts.fill(0);
    for t in 0..ens.len() {
        counts[ens.argmax(t, voxel)] += 1;
    }
}

pub fn aggregate_majority(ens: &EnsemblePrediction) -> Result<LabelVolume> {
    check_label_range(ens)?;
    let mut counts = vec![0u32; ens.num_classes()];
    let labels = (0..ens.num_voxels())
        .map(|j| {
            votes(ens, j, &mut counts);
            first_max(&counts) as u8
        })
        .collect();
    label_volume(ens, labels)
}

pub fn aggregate_weighted_majority(ens: &EnsemblePrediction, weights: &[f64]) -> Result<LabelVolume> {
    check_label_range(ens)?;
    if weights.len() != ens.num_classes() {
        return Err(Error::Param(format!("{} weights for {} classes", weights.len(), ens.num_classes())));
    }
    if weights.iter().any(|&w| !(w >= 0.0 && w.is_finite())) {
        return Err(Error::Param("majority weights must be finite and >= 0".into()));
    }
    let mut counts = vec![0u32; ens.num_classes()];
    let mut scores = vec![0.0f64; ens.num_classes()];
    let labels = (0..ens.num_voxels())
        .map(|j| {
            votes(ens, j, &mut counts);
            for (s, (&n, &w)) in scores.iter_mut().zip(counts.iter().zip(weights)) {
                *s = n as f64 * w;
            }
            first_max(&scores) as u8
        })
        .collect();
    label_volume(ens, labels)
}

/// Each sample awards `C-1, ..., 0` points to the classes in decreasing
/// probability order (equal probabilities: lower index ranks higher).
pub fn aggregate_borda(ens: &EnsemblePrediction) -> Result<LabelVolume> {
    check_label_range(ens)?;
    let c = ens.num_classes();
    let mut points = vec![0u64; c];
    let labels = (0..ens.num_voxels())
        .map(|j| {
            points.fill(0);
            for t in 0..ens.len() {
                for a in 0..c {
                    let pa = ens.prob(t, a, j);
                    let rank = (0..c).filter(|&b| {
                        let pb = ens.prob(t, b, j);
                        pb > pa || (pb == pa && b < a)
                    });
                    points[a] += (c - 1 - rank.count()) as u64;
                }
            }
            first_max(&points) as u8
        })
        .collect();
    label_volume(ens, labels)
}

/// `class_x` wherever any sample predicts it, `fallback` elsewhere.
pub fn aggregate_union(ens: &EnsemblePrediction, class_x: usize, fallback: &AggregationProtocol) -> Result<LabelVolume> {
    if class_x >= ens.num_classes() {
        return Err(Error::Param(format!("class_x {class_x} not below {} classes", ens.num_classes())));
    }
    if matches!(fallback, AggregationProtocol::UnionPerClass { .. }) {
        return Err(Error::Param("union fallback cannot itself be a union".into()));
    }
    let base = aggregate(ens, fallback)?;
    let labels = base
        .labels()
        .iter()
        .enumerate()
        .map(|(j, &l)| if (0..ens.len()).any(|t| ens.argmax(t, j) == class_x) { class_x as u8 } else { l })
        .collect();
    label_volume(ens, labels)
}

pub fn aggregate(ens: &EnsemblePrediction, protocol: &AggregationProtocol) -> Result<LabelVolume> {
    match protocol {
        AggregationProtocol::Majority => aggregate_majority(ens),
        AggregationProtocol::WeightedMajority { weights } => aggregate_weighted_majority(ens, weights),
        AggregationProtocol::Borda => aggregate_borda(ens),
        AggregationProtocol::UnionPerClass { class_x, fallback } => aggregate_union(ens, *class_x, fallback),
    }
}

/// 1-based nearest-rank position of the `p`-th percentile among `t` values.
pub fn nearest_rank(p: f64, t: usize) -> usize {
    let r = (p * t as f64 / 100.0 - 1e-9).ceil();
    (r.max(1.0) as usize).min(t)
}

/// Voxel-wise `p`-th percentile (nearest rank) of the class-`class_c`
/// probabilities across samples.
pub fn percentile_heatmap(ens: &EnsemblePrediction, class_c: usize, p: f64) -> Result<Volume> {
    if !(0.0..=100.0).contains(&p) {
        return Err(Error::Param(format!("percentile {p} outside [0, 100]")));
    }
    if class_c >= ens.num_classes() {
        return Err(Error::Param(format!("class {class_c} not below {} classes", ens.num_classes())));
    }
    let k = nearest_rank(p, ens.len()) - 1;
    let mut buf = vec![0.0f32; ens.len()];
    let voxels = (0..ens.num_voxels())
        .map(|j| {
            for (t, b) in buf.iter_mut().enumerate() {
                *b = ens.prob(t, class_c, j);
            }
            *buf.select_nth_unstable_by(k, f32::total_cmp).1
        })
        .collect();
    Volume::new(ens.dims(), voxels)
}

/// Binary PPM (P6) of axial slice `z`: probability mapped blue (0) to red
/// (1), voxels of `truth_class` in `truth` painted black.
pub fn render_slice_ppm(heat: &Volume, z: usize, truth: Option<(&LabelVolume, u8)>) -> Result<Vec<u8>> {
    let [d, h, w] = heat.dims();
    if z >= d {
        return Err(Error::Param(format!("slice {z} outside depth {d}")));
    }
    if let Some((t, _)) = truth {
        if t.dims() != heat.dims() {
            return Err(Error::Dimension(format!("truth dims {:?} differ from heatmap {:?}", t.dims(), heat.dims())));
        }
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            let j = (z * h + y) * w + x;
            if truth.is_some_and(|(t, c)| t.labels()[j] == c) {
                out.extend_from_slice(&[0, 0, 0]);
                continue;
            }
            let v = heat.voxels()[j].clamp(0.0, 1.0);
            out.extend_from_slice(&[(255.0 * v).round() as u8, 0, (255.0 * (1.0 - v)).round() as u8]);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Single-voxel ensemble from per-sample class distributions.
    fn voxel(samples: &[&[f32]]) -> EnsemblePrediction {
        EnsemblePrediction::new([1, 1, 1], samples[0].len(), samples.iter().map(|s| s.to_vec()).collect()).unwrap()
    }

    fn hard(class: usize, c: usize) -> Vec<f32> {
        (0..c).map(|k| if k == class { 1.0 } else { 0.0 }).collect()
    }

    fn votes_for(classes: &[usize], c: usize) -> EnsemblePrediction {
        let s: Vec<Vec<f32>> = classes.iter().map(|&k| hard(k, c)).collect();
        voxel(&s.iter().map(Vec::as_slice).collect::<Vec<_>>())
    }

    fn only(l: LabelVolume) -> u8 {
        l.labels()[0]
    }

    #[test]
    fn majority_votes_and_ties() {
        assert_eq!(only(aggregate_majority(&votes_for(&[1, 1, 2], 3)).unwrap()), 1);
        assert_eq!(only(aggregate_majority(&votes_for(&[2, 1], 3)).unwrap()), 1);
        // argmax tie inside one sample goes to the lower class
        assert_eq!(only(aggregate_majority(&voxel(&[&[0.2, 0.4, 0.4]])).unwrap()), 1);
    }

    #[test]
    fn weighted_majority_hand_case() {
        let ens = votes_for(&[0, 0, 0, 1, 1], 3);
        assert_eq!(only(aggregate_weighted_majority(&ens, &[1.0, 2.0, 1.0]).unwrap()), 1);
        assert_eq!(only(aggregate_weighted_majority(&ens, &[1.0, 1.0, 1.0]).unwrap()), 0);
        assert!(aggregate_weighted_majority(&ens, &[1.0, -1.0, 1.0]).is_err());
        assert!(aggregate_weighted_majority(&ens, &[1.0, 1.0]).is_err());
    }

    #[test]
    fn borda_hand_case() {
        let ens = voxel(&[&[0.5, 0.3, 0.2], &[0.1, 0.2, 0.7]]);
        assert_eq!(only(aggregate_borda(&ens).unwrap()), 0);
        let ens = voxel(&[&[0.5, 0.3, 0.2], &[0.1, 0.6, 0.3]]);
        assert_eq!(only(aggregate_borda(&ens).unwrap()), 1);
    }

    #[test]
    fn union_any_vote_wins() {
        let ens = votes_for(&[0, 0, 0, 0, 2], 3);
        let l = aggregate_union(&ens, 2, &AggregationProtocol::Majority).unwrap();
        assert_eq!(only(l), 2);
        let l = aggregate_union(&ens, 1, &AggregationProtocol::Majority).unwrap();
        assert_eq!(only(l), 0);
        let nested = AggregationProtocol::UnionPerClass { class_x: 1, fallback: default_fallback() };
        assert!(aggregate_union(&ens, 2, &nested).is_err());
        assert!(aggregate_union(&ens, 3, &AggregationProtocol::Majority).is_err());
    }

    #[test]
    fn nearest_rank_positions() {
        assert_eq!(nearest_rank(50.0, 3), 2);
        assert_eq!(nearest_rank(0.0, 7), 1);
        assert_eq!(nearest_rank(100.0, 7), 7);
        assert_eq!(nearest_rank(5.0, 20), 1);
        assert_eq!(nearest_rank(95.0, 20), 19);
    }

    #[test]
    fn heatmap_hand_case() {
        let ens = voxel(&[&[0.9, 0.1], &[0.8, 0.2], &[0.1, 0.9]]);
        let at = |p| percentile_heatmap(&ens, 1, p).unwrap().voxels()[0];
        assert_eq!(at(50.0), 0.2);
        assert_eq!(at(0.0), 0.1);
        assert_eq!(at(100.0), 0.9);
        assert!(percentile_heatmap(&ens, 1, 101.0).is_err());
    }

    #[test]
    fn protocol_json_shape() {
        let p: AggregationProtocol = serde_json::from_str(r#"{"protocol":"union_per_class","class_x":2}"#).unwrap();
        assert_eq!(p, AggregationProtocol::UnionPerClass { class_x: 2, fallback: default_fallback() });
        let w: AggregationProtocol = serde_json::from_str(r#"{"protocol":"weighted_majority","weights":[1,2,2]}"#).unwrap();
        assert_eq!(w.name(), "weighted_majority");
    }

    #[test]
    fn ppm_layout() {
        let heat = Volume::new([1, 1, 2], vec![0.0, 1.0]).unwrap();
        let truth = LabelVolume::new([1, 1, 2], vec![0, 2], 3).unwrap();
        let img = render_slice_ppm(&heat, 0, None).unwrap();
        assert_eq!(&img[..11], b"P6\n2 1\n255\n");
        assert_eq!(&img[11..], &[0, 0, 255, 255, 0, 0]);
        let img = render_slice_ppm(&heat, 0, Some((&truth, 2))).unwrap();
        assert_eq!(&img[11..], &[0, 0, 255, 0, 0, 0]);
    }
}
