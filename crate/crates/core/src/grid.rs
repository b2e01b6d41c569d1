//! Tensor-product mesh of the truncated half-space `[-L, L]^n x [0, Y]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Layout of the trace axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceTopology {
    /// Nodes at both ends of every axis, spacing `2L / (nx - 1)`.
    Bounded,
    /// Wrap-around axes without a duplicated end node, spacing `2L / nx`.
    Periodic,
}

/// Parameters needed to rebuild a grid; this is what artifacts store.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub trace_dim: usize,
    pub half_width: f64,
    pub height: f64,
    pub nx: usize,
    pub ny: usize,
    pub alpha: f64,
    pub grading: f64,
    pub topology: TraceTopology,
}

impl GridSpec {
    pub fn build(&self) -> Result<ExtensionGrid> {
        ExtensionGrid::new(*self)
    }
}

/// Node `(t, j)` has flat index `j * trace_len + t`, where `t = i1 + nx * i2`
/// indexes the trace slice. Layer `j = 0` is the trace hyperplane `y = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtensionGrid {
    spec: GridSpec,
    pub y_nodes: Vec<f64>,
    pub beta: f64,
    spacing: f64,
}

pub fn build_extension_grid(
    n: usize,
    half_width: f64,
    height: f64,
    nx: usize,
    ny: usize,
    alpha: f64,
    grading: f64,
) -> Result<ExtensionGrid> {
    ExtensionGrid::new(GridSpec {
        trace_dim: n,
        half_width,
        height,
        nx,
        ny,
        alpha,
        grading,
        topology: TraceTopology::Bounded,
    })
}

impl ExtensionGrid {
    pub fn new(spec: GridSpec) -> Result<Self> {
        if !(spec.trace_dim == 1 || spec.trace_dim == 2) {
            return Err(Error::param("n", format!("trace dimension must be 1 or 2, got {}", spec.trace_dim)));
        }
        if !(spec.alpha > 0.0 && spec.alpha < 1.0) {
            return Err(Error::param("alpha", format!("order must lie in (0, 1), got {}", spec.alpha)));
        }
        if !(spec.half_width > 0.0 && spec.half_width.is_finite()) {
            return Err(Error::param("half_width", "must be positive"));
        }
        if !(spec.height > 0.0 && spec.height.is_finite()) {
            return Err(Error::param("height", "must be positive"));
        }
        if spec.nx < 8 {
            return Err(Error::param("nx", format!("at least 8 nodes per axis required, got {}", spec.nx)));
        }
        if spec.ny < 8 {
            return Err(Error::param("ny", format!("at least 8 nodes in y required, got {}", spec.ny)));
        }
        if !(spec.grading >= 1.0 && spec.grading.is_finite()) {
            return Err(Error::param("grading", format!("must be >= 1, got {}", spec.grading)));
        }
        let last = (spec.ny - 1) as f64;
        let mut y_nodes: Vec<f64> = (0..spec.ny)
            .map(|j| spec.height * (j as f64 / last).powf(spec.grading))
            .collect();
        y_nodes[spec.ny - 1] = spec.height;
        let spacing = match spec.topology {
            TraceTopology::Bounded => 2.0 * spec.half_width / (spec.nx - 1) as f64,
            TraceTopology::Periodic => 2.0 * spec.half_width / spec.nx as f64,
        };
        Ok(ExtensionGrid {
            beta: 1.0 - 2.0 * spec.alpha,
            spec,
            y_nodes,
            spacing,
        })
    }

    pub fn spec(&self) -> GridSpec {
        self.spec
    }
    pub fn trace_dim(&self) -> usize {
        self.spec.trace_dim
    }
    pub fn half_width(&self) -> f64 {
        self.spec.half_width
    }
    pub fn height(&self) -> f64 {
        self.spec.height
    }
    pub fn nx(&self) -> usize {
        self.spec.nx
    }
    pub fn ny(&self) -> usize {
        self.spec.ny
    }
    pub fn alpha(&self) -> f64 {
        self.spec.alpha
    }
    pub fn grading(&self) -> f64 {
        self.spec.grading
    }
    pub fn topology(&self) -> TraceTopology {
        self.spec.topology
    }
    pub fn is_periodic(&self) -> bool {
        self.spec.topology == TraceTopology::Periodic
    }

    /// Trace node spacing `h`.
    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn trace_len(&self) -> usize {
        self.spec.nx.pow(self.spec.trace_dim as u32)
    }

    pub fn node_count(&self) -> usize {
        self.trace_len() * self.spec.ny
    }

    pub fn node_index(&self, trace: usize, layer: usize) -> usize {
        layer * self.trace_len() + trace
    }

    /// Per-axis indices of a trace node (`i2 = 0` in one dimension).
    pub fn trace_indices(&self, t: usize) -> [usize; 2] {
        [t % self.spec.nx, t / self.spec.nx]
    }

    pub fn trace_flat(&self, idx: [usize; 2]) -> usize {
        idx[0] + self.spec.nx * idx[1]
    }

    pub fn axis_coord(&self, i: usize) -> f64 {
        -self.spec.half_width + i as f64 * self.spacing
    }

    /// Coordinates of trace node `t`; the second entry is 0 in one dimension.
    pub fn trace_point(&self, t: usize) -> [f64; 2] {
        let [i1, i2] = self.trace_indices(t);
        let x2 = if self.spec.trace_dim == 2 { self.axis_coord(i2) } else { 0.0 };
        [self.axis_coord(i1), x2]
    }

    /// True for nodes on the lateral boundary of a bounded trace.
    pub fn is_lateral_boundary(&self, t: usize) -> bool {
        if self.is_periodic() {
            return false;
        }
        let last = self.spec.nx - 1;
        let [i1, i2] = self.trace_indices(t);
        i1 == 0 || i1 == last || (self.spec.trace_dim == 2 && (i2 == 0 || i2 == last))
    }

    /// Length of the dual interval of node `i` along one trace axis.
    pub fn axis_dual_length(&self, i: usize) -> f64 {
        if !self.is_periodic() && (i == 0 || i == self.spec.nx - 1) {
            0.5 * self.spacing
        } else {
            self.spacing
        }
    }

    /// Measure of the dual trace cell of node `t`.
    pub fn trace_cell_measure(&self, t: usize) -> f64 {
        let [i1, i2] = self.trace_indices(t);
        let mut m = self.axis_dual_length(i1);
        if self.spec.trace_dim == 2 {
            m *= self.axis_dual_length(i2);
        }
        m
    }

    /// Measure of one full interior trace cell, `h^n`.
    pub fn cell_measure(&self) -> f64 {
        self.spacing.powi(self.spec.trace_dim as i32)
    }

    /// Dual interval of layer `j` in y, clipped to `[0, Y]`.
    pub fn dual_y_span(&self, j: usize) -> (f64, f64) {
        let y = &self.y_nodes;
        let lo = if j == 0 { 0.0 } else { 0.5 * (y[j - 1] + y[j]) };
        let hi = if j + 1 == y.len() { y[j] } else { 0.5 * (y[j] + y[j + 1]) };
        (lo, hi)
    }

    /// `int y^beta dy` over the dual interval of layer `j`.
    pub fn layer_weight(&self, j: usize) -> f64 {
        let (a, b) = self.dual_y_span(j);
        weight_integral(self.beta, a, b)
    }

    /// Conductance per unit trace area of the y-edge between layers `j` and `j + 1`.
    pub fn y_edge_conductance(&self, j: usize) -> f64 {
        let (a, b) = (self.y_nodes[j], self.y_nodes[j + 1]);
        weight_integral(self.beta, a, b) / ((b - a) * (b - a))
    }
}

fn weight_integral(beta: f64, a: f64, b: f64) -> f64 {
    let p = beta + 1.0;
    (b.powf(p) - a.powf(p)) / p
}

/// Exact average of `t^beta` over `[a, b]`.
pub fn node_weight(beta: f64, a: f64, b: f64) -> Result<f64> {
    if beta <= -1.0 || !beta.is_finite() {
        return Err(Error::param("beta", format!("weight y^{beta} is not integrable at 0")));
    }
    if !(a >= 0.0 && b > a) {
        return Err(Error::param("cell_span", format!("need 0 <= a < b, got [{a}, {b}]")));
    }
    Ok(weight_integral(beta, a, b) / (b - a))
}
