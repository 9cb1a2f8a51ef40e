//! Training loops, CSV logging, and the desk-scale experiments behind the
//! CLI: synthetic quadratic recovery, the robustness comparison, and the
//! MNIST image run.

mod checkpoint;
mod mnist;
mod network;
mod synthetic;

pub use checkpoint::{load_network, save_network};
pub use mnist::{
    locate_mnist, run_mnist, run_mnist_with_data, MnistOutcome, MnistRunConfig, MNIST_FILES,
};
pub use network::{build_lenet, LenetConfig, NetStepStats, NetworkTrainer, TuckerVariant};
pub use synthetic::{
    run_lambda_sweep, run_robustness, run_synthetic, run_tau_sweep, slope_loglog, NoisyQuadratic,
    OptimizerKind, RobustnessOutcome, SweepPoint, SyntheticOutcome, SyntheticRun,
};

use std::path::Path;

use crate::Result;

/// One logged optimizer step.
#[derive(Debug, Clone)]
pub struct TrainRecord {
    pub step: usize,
    pub loss: f64,
    pub test_metric: Option<f64>,
    /// Per-layer, per-mode ranks.
    pub ranks: Vec<Vec<usize>>,
    pub compression_rate: f64,
    pub projected_grad_norm: f64,
    pub wall_ms: u64,
}

/// Fixed CSV header; one row per optimizer step.
pub const CSV_HEADER: [&str; 7] = [
    "step",
    "loss",
    "test_metric",
    "ranks",
    "compression_rate",
    "projected_grad_norm",
    "wall_ms",
];

/// Renders ranks as `r1xr2x...;r1x...` (one group per layer); keeps the CSV
/// comma-free.
pub fn ranks_field(ranks: &[Vec<usize>]) -> String {
    ranks
        .iter()
        .map(|layer| {
            layer
                .iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join("x")
        })
        .collect::<Vec<_>>()
        .join(";")
}

/// Writes records as RFC-4180 CSV.
pub fn write_csv(path: &Path, records: &[TrainRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(Box::new)?;
    w.write_record(CSV_HEADER).map_err(Box::new)?;
    for r in records {
        w.write_record(&[
            r.step.to_string(),
            format!("{:.12e}", r.loss),
            r.test_metric.map(|m| format!("{m:.6}")).unwrap_or_default(),
            ranks_field(&r.ranks),
            format!("{:.6}", r.compression_rate),
            format!("{:.12e}", r.projected_grad_norm),
            r.wall_ms.to_string(),
        ])
        .map_err(Box::new)?;
    }
    w.flush()?;
    Ok(())
}

/// Reduce-on-plateau tracker over evaluation windows (lower metric is
/// better). `observe` returns the learning-rate multiplier to apply, 1.0 when
/// the rate should stay.
#[derive(Debug, Clone)]
pub struct PlateauTracker {
    factor: f64,
    patience: usize,
    best: f64,
    stale: usize,
}

impl PlateauTracker {
    pub fn new(factor: f64, patience: usize) -> Self {
        Self {
            factor,
            patience,
            best: f64::INFINITY,
            stale: 0,
        }
    }

    pub fn observe(&mut self, metric: f64) -> f64 {
        if metric < self.best {
            self.best = metric;
            self.stale = 0;
            1.0
        } else {
            self.stale += 1;
            if self.stale >= self.patience {
                self.stale = 0;
                self.factor
            } else {
                1.0
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_schema_is_stable() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.csv");
        let records = vec![
            TrainRecord {
                step: 0,
                loss: 1.25,
                test_metric: None,
                ranks: vec![vec![2, 3, 4], vec![5, 6]],
                compression_rate: 0.5,
                projected_grad_norm: 0.25,
                wall_ms: 3,
            },
            TrainRecord {
                step: 1,
                loss: 0.5,
                test_metric: Some(0.93),
                ranks: vec![vec![2, 3, 3], vec![5, 6]],
                compression_rate: 0.55,
                projected_grad_norm: 0.125,
                wall_ms: 2,
            },
        ];
        write_csv(&path, &records).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "step,loss,test_metric,ranks,compression_rate,projected_grad_norm,wall_ms"
        );
        assert_eq!(text.lines().count(), 3);
        assert!(text.contains("2x3x4;5x6"));

        // Parses back as valid CSV with one record per step.
        let mut rd = csv::Reader::from_path(&path).unwrap();
        let rows: Vec<csv::StringRecord> = rd.records().map(|r| r.unwrap()).collect();
        assert_eq!(rows.len(), 2);
        assert_eq!(&rows[1][3], "2x3x3;5x6");
    }

    #[test]
    fn plateau_tracker_fires_after_patience() {
        let mut t = PlateauTracker::new(0.1, 2);
        assert_eq!(t.observe(1.0), 1.0);
        assert_eq!(t.observe(0.9), 1.0); // improvement
        assert_eq!(t.observe(0.95), 1.0); // stale 1
        assert_eq!(t.observe(0.91), 0.1); // stale 2 -> reduce
        assert_eq!(t.observe(0.5), 1.0); // new best resets
    }
}
