//! Dice metrics, experiment reports, and the comparison harnesses.

mod metrics;
mod report;
mod sweeps;

pub use metrics::{class_dice, dice_score, mean_foreground};
pub use report::{ExperimentReport, ExperimentRow, CSV_HEADER};
pub use sweeps::{
    aggregation_sweep, deterministic_dice, dropout_config_sweep, evaluate, fraction_sweep, standard_protocols,
    volume_seed, FractionSweep, DEFAULT_FRACTIONS, DEFAULT_RATES,
};
