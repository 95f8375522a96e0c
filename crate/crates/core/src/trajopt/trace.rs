//! Per-iteration convergence record of the ADMM solvers.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    /// Task objective of the dynamics-block trajectory.
    pub cost: f64,
    pub r_ik: f64,
    pub r_j: f64,
    pub r_u: f64,
    pub r_f: f64,
    pub cumulative_ddp_iters: usize,
    pub wall_ms: f64,
}

impl TraceRow {
    pub fn max_residual(&self) -> f64 {
        self.r_ik.max(self.r_j).max(self.r_u).max(self.r_f)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConvergenceTrace {
    pub rows: Vec<TraceRow>,
}

impl ConvergenceTrace {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn last(&self) -> Option<&TraceRow> {
        self.rows.last()
    }

    /// Cumulative DDP iterations at the first row with every residual `<= tol`.
    pub fn ddp_iters_to(&self, tol: f64) -> Option<usize> {
        self.rows
            .iter()
            .find(|r| r.max_residual() <= tol)
            .map(|r| r.cumulative_ddp_iters)
    }

    /// Same trace without wall-clock times, for reproducibility comparisons.
    pub fn without_timing(&self) -> Self {
        Self {
            rows: self
                .rows
                .iter()
                .map(|r| TraceRow { wall_ms: 0.0, ..*r })
                .collect(),
        }
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for row in &self.rows {
            w.serialize(row).map_err(|e| csv_error("trace", &e))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R, source_name: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let rows = r
            .deserialize()
            .collect::<std::result::Result<Vec<TraceRow>, _>>()
            .map_err(|e| csv_error(source_name, &e))?;
        Ok(Self { rows })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?, &path.display().to_string())
    }
}

pub(crate) fn csv_error(source_name: &str, e: &csv::Error) -> Error {
    Error::Csv {
        source_name: source_name.to_string(),
        line: e.position().map(|p| p.line()).unwrap_or(0),
        message: e.to_string(),
    }
}
