//! Monte-Carlo dropout ensembles and their aggregation.

mod aggregate;
mod ensemble;

pub use aggregate::{
    aggregate, aggregate_borda, aggregate_majority, aggregate_union, aggregate_weighted_majority, nearest_rank,
    percentile_heatmap, render_slice_ppm, AggregationProtocol,
};
pub use ensemble::{mc_sample, predict_deterministic, EnsemblePrediction, McConfig};
