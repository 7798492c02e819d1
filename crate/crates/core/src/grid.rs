//! Space-time grids and sampled solution fields.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Discretized domain: fixed x-nodes, t-nodes and the mobility ratios the
/// grid is used with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub x: Vec<f64>,
    pub t: Vec<f64>,
    pub mobilities: Vec<f64>,
}

impl GridSpec {
    /// Uniform grid on `[0, x_max] × [0, t_max]`.
    pub fn uniform(x_max: f64, dx: f64, t_max: f64, dt: f64) -> Result<Self> {
        Ok(Self {
            x: uniform_nodes(0.0, x_max, dx, "x")?,
            t: uniform_nodes(0.0, t_max, dt, "t")?,
            mobilities: Vec::new(),
        })
    }

    pub fn with_mobilities(mut self, mobilities: Vec<f64>) -> Result<Self> {
        if let Some(bad) = mobilities.iter().find(|m| !(m.is_finite() && **m > 0.0)) {
            return Err(Error::InvalidInput(format!("mobility ratio must be > 0, got {bad}")));
        }
        self.mobilities = mobilities;
        Ok(self)
    }

    /// Number of x-nodes, `N + 1`.
    pub fn n_x(&self) -> usize {
        self.x.len()
    }

    /// Number of t-nodes, `T + 1`.
    pub fn n_t(&self) -> usize {
        self.t.len()
    }

    /// Spacing of the first x interval.
    pub fn dx(&self) -> f64 {
        self.x[1] - self.x[0]
    }

    pub fn dt(&self) -> f64 {
        self.t[1] - self.t[0]
    }
}

fn uniform_nodes(start: f64, end: f64, step: f64, axis: &str) -> Result<Vec<f64>> {
    if !(step.is_finite() && step > 0.0 && end.is_finite() && end > start) {
        return Err(Error::InvalidInput(format!(
            "{axis}-axis needs end > start and a positive step (start {start}, end {end}, step {step})"
        )));
    }
    let intervals = ((end - start) / step).round();
    if ((intervals * step) - (end - start)).abs() > 1e-9 * (end - start).max(1.0) {
        return Err(Error::InvalidInput(format!(
            "{axis}-axis step {step} does not divide the interval [{start}, {end}]"
        )));
    }
    let n = intervals as usize;
    Ok((0..=n).map(|i| start + i as f64 * step).collect())
}

/// Saturation sampled on a grid for one mobility ratio, stored row-major
/// with one row per t-node.
#[derive(Debug, Clone, PartialEq)]
pub struct SolutionField {
    pub mobility: f64,
    pub x: Vec<f64>,
    pub t: Vec<f64>,
    values: Vec<f64>,
}

impl SolutionField {
    pub fn new(mobility: f64, x: Vec<f64>, t: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if values.len() != x.len() * t.len() {
            return Err(Error::InvalidInput(format!(
                "field holds {} values, grid has {}×{} nodes",
                values.len(),
                t.len(),
                x.len()
            )));
        }
        Ok(Self {
            mobility,
            x,
            t,
            values,
        })
    }

    pub fn at(&self, time_index: usize, x_index: usize) -> f64 {
        self.values[time_index * self.x.len() + x_index]
    }

    /// The saturation profile at `t[time_index]`.
    pub fn row(&self, time_index: usize) -> &[f64] {
        let n = self.x.len();
        &self.values[time_index * n..(time_index + 1) * n]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}
