//! Experiment harnesses: label-fraction, dropout-placement and aggregation
//! comparisons on a held-out test set.

use serde::{Deserialize, Serialize};

use super::metrics::class_dice;
use super::report::{ExperimentReport, ExperimentRow};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::mc::{aggregate, aggregate_majority, mc_sample, predict_deterministic, AggregationProtocol, EnsemblePrediction, McConfig};
use crate::rng;
use crate::segment::{finetune, FinetuneConfig, UNet, UNetInit, UNetSpec};
use crate::volume::{LabelVolume, Sample};

pub const DEFAULT_FRACTIONS: [f64; 5] = [0.05, 0.10, 0.25, 0.50, 1.00];
pub const DEFAULT_RATES: [f64; 3] = [0.1, 0.3, 0.5];

fn truth(s: &Sample) -> Result<&LabelVolume> {
    s.labels.as_ref().ok_or_else(|| Error::Param("test sample has no labels".into()))
}

/// Mean per-class dice over the test set for predictions from `predict`.
pub fn evaluate(test: &[Sample], num_classes: usize, mut predict: impl FnMut(usize, &Sample) -> Result<LabelVolume>) -> Result<Vec<f64>> {
    if test.is_empty() {
        return Err(Error::Param("empty test set".into()));
    }
    let mut acc = vec![0.0; num_classes];
    for (k, s) in test.iter().enumerate() {
        let pred = predict(k, s)?;
        for (a, d) in acc.iter_mut().zip(class_dice(&pred, truth(s)?, num_classes)?) {
            *a += d;
        }
    }
    Ok(acc.into_iter().map(|a| a / test.len() as f64).collect())
}

/// MC seed of the `k`-th test volume; shared by every configuration that
/// is compared on the same seed.
pub fn volume_seed(seed: u64, k: usize) -> u64 {
    rng::derive_seed(seed, &[0x0076_6f6c, k as u64])
}

pub fn deterministic_dice(net: &UNet, test: &[Sample]) -> Result<Vec<f64>> {
    evaluate(test, net.spec.num_classes, |_, s| aggregate_majority(&predict_deterministic(net, &s.volume)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FractionSweep {
    pub fractions: Vec<f64>,
    /// One fine-tuning run per (seed, fraction, arm); the seed drives the
    /// subset, decoder initialization, shuffling and dropout masks.
    pub seeds: Vec<u64>,
}

/// Pretrained-init vs random-init fine-tuning at each label fraction.
/// Both arms of a (seed, fraction) cell see the same subset.
pub fn fraction_sweep(
    sweep: &FractionSweep,
    spec: &UNetSpec,
    pretrained: &Checkpoint,
    finetune_cfg: &FinetuneConfig,
    labelled: &[Sample],
    test: &[Sample],
) -> Result<ExperimentReport> {
    let mut report = ExperimentReport::default();
    for &seed in &sweep.seeds {
        for &fraction in &sweep.fractions {
            for arm in ["pretrained", "baseline"] {
                let (init, warmup) = if arm == "pretrained" {
                    (UNetInit::Pretrained { checkpoint: pretrained, seed }, finetune_cfg.warmup_epochs)
                } else {
                    (UNetInit::Random { seed }, 0)
                };
                let net = UNet::build(spec.clone(), init)?;
                let cfg = FinetuneConfig { seed, warmup_epochs: warmup, ..finetune_cfg.clone() };
                let out = finetune(net, labelled, fraction, &cfg)?;
                report.push(ExperimentRow {
                    experiment_id: "fraction_sweep".into(),
                    arm: arm.into(),
                    fraction: Some(fraction),
                    enc_rate: 0.0,
                    dec_rate: 0.0,
                    protocol: "deterministic".into(),
                    per_class: deterministic_dice(&out.unet, test)?,
                    seed,
                });
            }
        }
    }
    Ok(report)
}

/// Majority-vote MC dice with dropout on the encoder only, the decoder
/// only, or both, at each rate; plus the deterministic prediction.
pub fn dropout_config_sweep(net: &UNet, test: &[Sample], samples: usize, rates: &[f64], seed: u64) -> Result<ExperimentReport> {
    let row = |arm: &str, enc_rate: f64, dec_rate: f64, protocol: &str, per_class| ExperimentRow {
        experiment_id: "dropout_sweep".into(),
        arm: arm.into(),
        fraction: None,
        enc_rate,
        dec_rate,
        protocol: protocol.into(),
        per_class,
        seed,
    };
    let mut report = ExperimentReport::default();
    report.push(row("none", 0.0, 0.0, "deterministic", deterministic_dice(net, test)?));
    for (arm, enc, dec) in [("encoder", 1.0, 0.0), ("decoder", 0.0, 1.0), ("both", 1.0, 1.0)] {
        for &rate in rates {
            let (enc_rate, dec_rate) = (enc * rate, dec * rate);
            let dice = evaluate(test, net.spec.num_classes, |k, s| {
                let cfg = McConfig { samples, enc_rate, dec_rate, seed: volume_seed(seed, k) };
                aggregate_majority(&mc_sample(net, &s.volume, &cfg)?)
            })?;
            report.push(row(arm, enc_rate, dec_rate, "majority", dice));
        }
    }
    Ok(report)
}

/// The given protocols evaluated on one shared ensemble per test volume.
pub fn aggregation_sweep(net: &UNet, test: &[Sample], mc: &McConfig, protocols: &[AggregationProtocol]) -> Result<ExperimentReport> {
    let ensembles: Vec<EnsemblePrediction> = test
        .iter()
        .enumerate()
        .map(|(k, s)| mc_sample(net, &s.volume, &McConfig { seed: volume_seed(mc.seed, k), ..mc.clone() }))
        .collect::<Result<_>>()?;
    let mut report = ExperimentReport::default();
    for p in protocols {
        let dice = evaluate(test, net.spec.num_classes, |k, _| aggregate(&ensembles[k], p))?;
        report.push(ExperimentRow {
            experiment_id: "aggregation_sweep".into(),
            arm: "mc".into(),
            fraction: None,
            enc_rate: mc.enc_rate,
            dec_rate: mc.dec_rate,
            protocol: p.name().into(),
            per_class: dice,
            seed: mc.seed,
        });
    }
    Ok(report)
}

/// Majority, weighted majority with `weights`, Borda, and union on `class_x`.
pub fn standard_protocols(weights: Vec<f64>, class_x: usize) -> Vec<AggregationProtocol> {
    vec![
        AggregationProtocol::Majority,
        AggregationProtocol::WeightedMajority { weights },
        AggregationProtocol::Borda,
        AggregationProtocol::UnionPerClass { class_x, fallback: Box::new(AggregationProtocol::Majority) },
    ]
}
