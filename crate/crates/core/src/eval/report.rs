use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use super::metrics::mean_foreground;
use crate::error::{Error, Result};

pub const CSV_HEADER: &str = "experiment_id,arm,fraction,enc_rate,dec_rate,protocol,class,dice,seed";

/// One evaluated configuration: per-class dice averaged over the test set.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExperimentRow {
    pub experiment_id: String,
    pub arm: String,
    pub fraction: Option<f64>,
    pub enc_rate: f64,
    pub dec_rate: f64,
    pub protocol: String,
    pub per_class: Vec<f64>,
    pub seed: u64,
}

impl ExperimentRow {
    /// Average dice over foreground classes; background is excluded because
    /// it saturates near 1 on every reasonable prediction.
    pub fn mean_fg(&self) -> f64 {
        mean_foreground(&self.per_class)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ExperimentReport {
    pub rows: Vec<ExperimentRow>,
}

impl ExperimentReport {
    pub fn push(&mut self, row: ExperimentRow) {
        self.rows.push(row);
    }

    pub fn extend(&mut self, other: ExperimentReport) {
        self.rows.extend(other.rows);
    }

    pub fn find(&self, pred: impl Fn(&ExperimentRow) -> bool) -> Option<&ExperimentRow> {
        self.rows.iter().find(|r| pred(r))
    }

    /// One line per class plus a `mean_fg` line for every row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let fraction = r.fraction.map(|f| format!("{f}")).unwrap_or_default();
            let classes = r.per_class.iter().enumerate().map(|(c, &d)| (c.to_string(), d));
            for (class, dice) in classes.chain(std::iter::once(("mean_fg".to_string(), r.mean_fg()))) {
                writeln!(
                    out,
                    "{},{},{},{},{},{},{},{:.6},{}",
                    r.experiment_id, r.arm, fraction, r.enc_rate, r.dec_rate, r.protocol, class, dice, r.seed
                )
                .expect("writing to a String");
            }
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_lines_per_class() {
        let mut rep = ExperimentReport::default();
        rep.push(ExperimentRow {
            experiment_id: "fraction_sweep".into(),
            arm: "baseline".into(),
            fraction: Some(0.05),
            enc_rate: 0.0,
            dec_rate: 0.0,
            protocol: "deterministic".into(),
            per_class: vec![0.99, 0.5, 0.25],
            seed: 3,
        });
        let csv = rep.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], CSV_HEADER);
        assert_eq!(lines.len(), 5);
        assert_eq!(lines[2], "fraction_sweep,baseline,0.05,0,0,deterministic,1,0.500000,3");
        assert_eq!(lines[4], "fraction_sweep,baseline,0.05,0,0,deterministic,mean_fg,0.375000,3");
    }
}
