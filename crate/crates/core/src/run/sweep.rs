use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::config::{ExploreScheme, RunConfig};
use super::train::{cmd_train, MetricRow};
use crate::error::{Error, Result};

pub const SUMMARY_FILE: &str = "summary.csv";

/// Values to try per axis; an empty axis keeps the base configuration's
/// value. A temperature axis switches exploration to the top-k scheme.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepGrid {
    pub layers: Vec<usize>,
    pub ffn_dim: Vec<usize>,
    pub dropout: Vec<f64>,
    pub temperature: Vec<f64>,
}

impl SweepGrid {
    pub fn is_empty(&self) -> bool {
        self.layers.is_empty() && self.ffn_dim.is_empty() && self.dropout.is_empty() && self.temperature.is_empty()
    }

    /// Cartesian product in row-major order (layers slowest).
    pub fn cells(&self, base: &RunConfig) -> Result<Vec<RunConfig>> {
        if self.is_empty() {
            return Err(Error::Usage("sweep grid has no values".into()));
        }
        fn axis<T: Copy>(v: &[T], base: T) -> Vec<T> {
            if v.is_empty() {
                vec![base]
            } else {
                v.to_vec()
            }
        }
        let mut out = Vec::new();
        for &l in &axis(&self.layers, base.comm.num_layers) {
            for &f in &axis(&self.ffn_dim, base.comm.ffn_dim) {
                for &d in &axis(&self.dropout, base.comm.dropout) {
                    for &t in &axis(&self.temperature, base.exploration.temperature) {
                        let mut c = base.clone();
                        c.comm.num_layers = l;
                        c.comm.ffn_dim = f;
                        c.comm.dropout = d;
                        c.exploration.temperature = t;
                        if !self.temperature.is_empty() {
                            c.exploration.scheme = ExploreScheme::TopK;
                        }
                        out.push(c);
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Area under a piecewise-linear curve given as `(x, y)` points sorted by x.
pub fn trapezoid_auc(points: &[(f64, f64)]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
        .sum()
}

/// Seed-averaged learning curve, aligned by evaluation round.
pub fn mean_curve(per_seed: &[Vec<MetricRow>]) -> Vec<(f64, f64)> {
    let rounds = per_seed.iter().map(Vec::len).min().unwrap_or(0);
    let k = per_seed.len() as f64;
    (0..rounds)
        .map(|i| {
            let x = per_seed.iter().map(|r| r[i].env_step as f64).sum::<f64>() / k;
            let y = per_seed.iter().map(|r| r[i].mean_test_return).sum::<f64>() / k;
            (x, y)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub cell: usize,
    pub layers: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub temperature: f64,
    pub auc: f64,
    pub final_return: f64,
    pub out_dir: PathBuf,
}

/// Runs every grid cell as a full `train` under `<out>/cell_<i>` and writes
/// a summary table next to them.
pub fn cmd_sweep(base: &RunConfig, grid: &SweepGrid) -> Result<Vec<CellSummary>> {
    let cells = grid.cells(base)?;
    for c in &cells {
        c.validate()?;
    }
    let root = base.resolved_out_dir();
    let mut summary = Vec::with_capacity(cells.len());
    for (i, mut cell) in cells.into_iter().enumerate() {
        cell.out_dir = root.join(format!("cell_{i:03}"));
        let report = cmd_train(&cell, false)?;
        let per_seed: Vec<Vec<MetricRow>> = report.rows.into_iter().map(|(_, r)| r).collect();
        let curve = mean_curve(&per_seed);
        summary.push(CellSummary {
            cell: i,
            layers: cell.comm.num_layers,
            ffn_dim: cell.comm.ffn_dim,
            dropout: cell.comm.dropout,
            temperature: cell.exploration.temperature,
            auc: trapezoid_auc(&curve),
            final_return: curve.last().map_or(0.0, |p| p.1),
            out_dir: report.out_dir,
        });
    }
    std::fs::create_dir_all(&root)?;
    let mut w = csv::Writer::from_path(root.join(SUMMARY_FILE)).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    for s in &summary {
        w.serialize(s).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    w.flush()?;
    Ok(summary)
}
