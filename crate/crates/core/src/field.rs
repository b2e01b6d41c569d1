use std::sync::Arc;

use crate::error::{Error, Result};
use crate::grid::ExtensionGrid;

/// Values at every node of an extension grid, in the grid's flat node order.
#[derive(Debug, Clone)]
pub struct ScalarField {
    pub grid: Arc<ExtensionGrid>,
    pub values: Vec<f64>,
}

/// Values on the trace slice `y = 0`.
#[derive(Debug, Clone)]
pub struct TraceField {
    pub grid: Arc<ExtensionGrid>,
    pub values: Vec<f64>,
}

fn check_finite(values: &[f64], what: &str) -> Result<()> {
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::param(what, format!("non-finite value at index {i}")));
    }
    Ok(())
}

impl ScalarField {
    pub fn new(grid: Arc<ExtensionGrid>, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.node_count() {
            return Err(Error::param(
                "values",
                format!("expected {} node values, got {}", grid.node_count(), values.len()),
            ));
        }
        check_finite(&values, "values")?;
        Ok(ScalarField { grid, values })
    }

    pub fn zeros(grid: Arc<ExtensionGrid>) -> Self {
        let n = grid.node_count();
        ScalarField { grid, values: vec![0.0; n] }
    }

    /// Sample `f(x1, x2, y)` at every node.
    pub fn from_fn(grid: Arc<ExtensionGrid>, f: impl Fn(f64, f64, f64) -> f64) -> Self {
        let tl = grid.trace_len();
        let mut values = Vec::with_capacity(grid.node_count());
        for j in 0..grid.ny() {
            let y = grid.y_nodes[j];
            for t in 0..tl {
                let [x1, x2] = grid.trace_point(t);
                values.push(f(x1, x2, y));
            }
        }
        ScalarField { grid, values }
    }

    pub fn layer(&self, j: usize) -> &[f64] {
        let tl = self.grid.trace_len();
        &self.values[j * tl..(j + 1) * tl]
    }

    pub fn trace(&self) -> TraceField {
        TraceField {
            grid: self.grid.clone(),
            values: self.layer(0).to_vec(),
        }
    }
}

impl TraceField {
    pub fn new(grid: Arc<ExtensionGrid>, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.trace_len() {
            return Err(Error::param(
                "values",
                format!("expected {} trace values, got {}", grid.trace_len(), values.len()),
            ));
        }
        check_finite(&values, "values")?;
        Ok(TraceField { grid, values })
    }

    pub fn zeros(grid: Arc<ExtensionGrid>) -> Self {
        let n = grid.trace_len();
        TraceField { grid, values: vec![0.0; n] }
    }

    pub fn from_fn(grid: Arc<ExtensionGrid>, f: impl Fn(f64, f64) -> f64) -> Self {
        let values = (0..grid.trace_len())
            .map(|t| {
                let [x1, x2] = grid.trace_point(t);
                f(x1, x2)
            })
            .collect();
        TraceField { grid, values }
    }

    /// Linear (1D) or bilinear (2D) interpolation; points outside the grid are clamped.
    pub fn interpolate(&self, p: [f64; 2]) -> f64 {
        let g = &self.grid;
        let nx = g.nx();
        let h = g.spacing();
        let locate = |x: f64| -> (usize, usize, f64) {
            let s = (x + g.half_width()) / h;
            if g.is_periodic() {
                let s = s.rem_euclid(nx as f64);
                let i = (s.floor() as usize).min(nx - 1);
                (i, (i + 1) % nx, s - i as f64)
            } else {
                let s = s.clamp(0.0, (nx - 1) as f64);
                let i = (s.floor() as usize).min(nx - 2);
                (i, i + 1, s - i as f64)
            }
        };
        let (a0, a1, fa) = locate(p[0]);
        if g.trace_dim() == 1 {
            return (1.0 - fa) * self.values[a0] + fa * self.values[a1];
        }
        let (b0, b1, fb) = locate(p[1]);
        let v = |i: usize, k: usize| self.values[i + nx * k];
        (1.0 - fb) * ((1.0 - fa) * v(a0, b0) + fa * v(a1, b0))
            + fb * ((1.0 - fa) * v(a0, b1) + fa * v(a1, b1))
    }
}
