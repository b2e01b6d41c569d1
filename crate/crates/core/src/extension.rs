//! Weighted extension problem `-div(y^beta grad v) = 0` on the truncated half-space.
//!
//! The discretization is vertex-centred finite volumes: every node owns a dual
//! box, and every grid edge carries a conductance equal to the exact integral
//! of `y^beta` over the dual face divided by the edge length. The resulting
//! matrix is symmetric with nonpositive off-diagonals and zero row sums.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{ScalarField, TraceField};
use crate::grid::{ExtensionGrid, GridSpec, TraceTopology};
use crate::linalg::{self, CgOptions};
use crate::par;
use crate::transforms::{PeriodicTransform, SineTransform};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LateralBc {
    /// Dirichlet data on the lateral faces (zero unless outer values are given).
    Zero,
    /// Zero flux through the lateral faces.
    Reflect,
    /// Wrap-around trace axes; requires a periodic grid.
    Periodic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopBc {
    Zero,
    ZeroFlux,
}

/// Boundary data for a Dirichlet solve.
#[derive(Debug, Clone)]
pub struct DirichletSpec {
    pub trace_values: TraceField,
    pub fixed_mask: Vec<bool>,
    pub lateral_bc: LateralBc,
    pub top_bc: TopBc,
    /// Values used on Dirichlet lateral and top faces instead of zero.
    pub outer_values: Option<ScalarField>,
}

impl DirichletSpec {
    /// Trace fully prescribed, zero lateral and top data.
    pub fn full_trace(trace: TraceField, lateral_bc: LateralBc, top_bc: TopBc) -> Self {
        let n = trace.values.len();
        DirichletSpec {
            trace_values: trace,
            fixed_mask: vec![true; n],
            lateral_bc,
            top_bc,
            outer_values: None,
        }
    }

    fn validate(&self, grid: &ExtensionGrid) -> Result<()> {
        if self.fixed_mask.len() != grid.trace_len() {
            return Err(Error::param("fixed_mask", "length differs from the trace node count"));
        }
        if !self.fixed_mask.iter().any(|&b| b) {
            return Err(Error::param("fixed_mask", "at least one trace node must be prescribed"));
        }
        if self.trace_values.values.len() != grid.trace_len() {
            return Err(Error::param("trace_values", "length differs from the trace node count"));
        }
        for (i, (&f, &v)) in self.fixed_mask.iter().zip(&self.trace_values.values).enumerate() {
            if f && !v.is_finite() {
                return Err(Error::param("trace_values", format!("non-finite prescribed value at node {i}")));
            }
        }
        check_lateral(grid, self.lateral_bc)?;
        if let Some(o) = &self.outer_values {
            if o.values.len() != grid.node_count() {
                return Err(Error::param("outer_values", "length differs from the node count"));
            }
        }
        Ok(())
    }
}

fn check_lateral(grid: &ExtensionGrid, lateral: LateralBc) -> Result<()> {
    match (lateral, grid.topology()) {
        (LateralBc::Periodic, TraceTopology::Periodic) => Ok(()),
        (LateralBc::Periodic, _) => Err(Error::param("lateral_bc", "periodic conditions need a periodic grid")),
        (_, TraceTopology::Periodic) => Err(Error::param("lateral_bc", "a periodic grid needs periodic conditions")),
        _ => Ok(()),
    }
}

/// Matrix-free weighted finite-volume operator with natural boundary
/// conditions on every face. Dirichlet conditions are imposed by the solvers.
#[derive(Debug, Clone)]
pub struct DiscreteOperator {
    pub grid: Arc<ExtensionGrid>,
    layer_weight: Vec<f64>,
    y_conductance: Vec<f64>,
    diagonal: Vec<f64>,
}

pub fn assemble_weighted_operator(grid: Arc<ExtensionGrid>) -> DiscreteOperator {
    DiscreteOperator::new(grid)
}

impl DiscreteOperator {
    pub fn new(grid: Arc<ExtensionGrid>) -> Self {
        let ny = grid.ny();
        let layer_weight = (0..ny).map(|j| grid.layer_weight(j)).collect();
        let y_conductance = (0..ny - 1).map(|j| grid.y_edge_conductance(j)).collect();
        let mut op = DiscreteOperator {
            grid,
            layer_weight,
            y_conductance,
            diagonal: Vec::new(),
        };
        let mut diag = vec![0.0; op.grid.node_count()];
        op.for_each_edge(|p, q, c| {
            diag[p] += c;
            diag[q] += c;
        });
        op.diagonal = diag;
        op
    }

    pub fn diagonal(&self) -> &[f64] {
        &self.diagonal
    }

    /// Neighbour of trace node `t` one step forward along `axis`, if any.
    fn forward_neighbour(&self, t: usize, axis: usize) -> Option<usize> {
        let g = &self.grid;
        let nx = g.nx();
        let mut idx = g.trace_indices(t);
        if g.is_periodic() {
            idx[axis] = (idx[axis] + 1) % nx;
        } else if idx[axis] + 1 < nx {
            idx[axis] += 1;
        } else {
            return None;
        }
        Some(g.trace_flat(idx))
    }

    fn backward_neighbour(&self, t: usize, axis: usize) -> Option<usize> {
        let g = &self.grid;
        let nx = g.nx();
        let mut idx = g.trace_indices(t);
        if g.is_periodic() {
            idx[axis] = (idx[axis] + nx - 1) % nx;
        } else if idx[axis] > 0 {
            idx[axis] -= 1;
        } else {
            return None;
        }
        Some(g.trace_flat(idx))
    }

    /// Trace-direction conductance per unit layer weight for an edge along `axis` at node `t`.
    fn x_factor(&self, t: usize, axis: usize) -> f64 {
        let g = &self.grid;
        let h = g.spacing();
        if g.trace_dim() == 1 {
            1.0 / h
        } else {
            let other = g.trace_indices(t)[1 - axis];
            g.axis_dual_length(other) / h
        }
    }

    /// Visit each edge once as `(p, q, conductance)`.
    pub fn for_each_edge(&self, mut f: impl FnMut(usize, usize, f64)) {
        let g = &self.grid;
        let tl = g.trace_len();
        for j in 0..g.ny() {
            let w = self.layer_weight[j];
            for t in 0..tl {
                for axis in 0..g.trace_dim() {
                    if let Some(s) = self.forward_neighbour(t, axis) {
                        f(j * tl + t, j * tl + s, w * self.x_factor(t, axis));
                    }
                }
                if j + 1 < g.ny() {
                    let c = g.trace_cell_measure(t) * self.y_conductance[j];
                    f(j * tl + t, (j + 1) * tl + t, c);
                }
            }
        }
    }

    /// Like [`Self::for_each_edge`], restricted to edges whose midpoint may lie
    /// in the box `[lower, upper]` (coordinates `[x1, x2, y]`). Bounded grids only.
    fn for_each_edge_in(&self, lower: [f64; 3], upper: [f64; 3], mut f: impl FnMut(usize, usize, f64)) {
        let g = &self.grid;
        let tl = g.trace_len();
        let h = g.spacing();
        let last = g.nx() - 1;
        let index = |x: f64, up: bool| {
            let s = (x + g.half_width()) / h;
            let i = if up { s.ceil() + 1.0 } else { s.floor() - 1.0 };
            i.clamp(0.0, last as f64) as usize
        };
        let (a1, b1) = (index(lower[0], false), index(upper[0], true));
        let (a2, b2) = if g.trace_dim() == 2 { (index(lower[1], false), index(upper[1], true)) } else { (0, 0) };
        let j_end = g.y_nodes.iter().position(|&y| y > upper[2]).map_or(g.ny(), |j| j + 1);
        let j_start = g.y_nodes.iter().position(|&y| y >= lower[2]).unwrap_or(g.ny()).saturating_sub(1);
        for j in j_start..j_end {
            let w = self.layer_weight[j];
            for i2 in a2..=b2 {
                for i1 in a1..=b1 {
                    let t = g.trace_flat([i1, i2]);
                    for axis in 0..g.trace_dim() {
                        if let Some(s) = self.forward_neighbour(t, axis) {
                            f(j * tl + t, j * tl + s, w * self.x_factor(t, axis));
                        }
                    }
                    if j + 1 < g.ny() {
                        let c = g.trace_cell_measure(t) * self.y_conductance[j];
                        f(j * tl + t, (j + 1) * tl + t, c);
                    }
                }
            }
        }
    }

    /// Row `(t, j)` of `A u`.
    fn apply_row(&self, u: &[f64], t: usize, j: usize) -> f64 {
        let g = &self.grid;
        let tl = g.trace_len();
        let p = j * tl + t;
        let up = u[p];
        let mut acc = 0.0;
        let w = self.layer_weight[j];
        for axis in 0..g.trace_dim() {
            let c = w * self.x_factor(t, axis);
            if let Some(s) = self.forward_neighbour(t, axis) {
                acc += c * (up - u[j * tl + s]);
            }
            if let Some(s) = self.backward_neighbour(t, axis) {
                acc += c * (up - u[j * tl + s]);
            }
        }
        let m = g.trace_cell_measure(t);
        if j > 0 {
            acc += m * self.y_conductance[j - 1] * (up - u[p - tl]);
        }
        if j + 1 < g.ny() {
            acc += m * self.y_conductance[j] * (up - u[p + tl]);
        }
        acc
    }

    pub fn apply(&self, u: &[f64], out: &mut [f64]) {
        let tl = self.grid.trace_len();
        par::for_each_chunk_mut(out, tl, |j, layer| {
            for (t, o) in layer.iter_mut().enumerate() {
                *o = self.apply_row(u, t, j);
            }
        });
    }

    /// `u^T A u`.
    pub fn energy(&self, u: &[f64]) -> f64 {
        let mut au = vec![0.0; u.len()];
        self.apply(u, &mut au);
        linalg::dot(u, &au)
    }

    pub fn layer_weight(&self, j: usize) -> f64 {
        self.layer_weight[j]
    }

    pub fn y_conductance(&self, j: usize) -> f64 {
        self.y_conductance[j]
    }
}

/// Node mask and values of all Dirichlet nodes implied by `spec`.
fn dirichlet_nodes(grid: &ExtensionGrid, spec: &DirichletSpec) -> (Vec<bool>, Vec<f64>) {
    let tl = grid.trace_len();
    let ny = grid.ny();
    let mut fixed = vec![false; grid.node_count()];
    let mut values = vec![0.0; grid.node_count()];
    let outer = |p: usize| spec.outer_values.as_ref().map_or(0.0, |o| o.values[p]);
    for j in 0..ny {
        for t in 0..tl {
            let p = j * tl + t;
            let lateral = spec.lateral_bc == LateralBc::Zero && grid.is_lateral_boundary(t);
            let top = spec.top_bc == TopBc::Zero && j == ny - 1;
            if j == 0 && spec.fixed_mask[t] {
                fixed[p] = true;
                values[p] = spec.trace_values.values[t];
            } else if lateral || top {
                fixed[p] = true;
                values[p] = outer(p);
            }
        }
    }
    (fixed, values)
}

/// Solve the weighted problem with the Dirichlet data of `spec`.
pub fn solve_dirichlet(op: &DiscreteOperator, spec: &DirichletSpec, tol: f64) -> Result<ScalarField> {
    spec.validate(&op.grid)?;
    if !(tol > 0.0) {
        return Err(Error::param("tol", "must be positive"));
    }
    let (fixed, values) = dirichlet_nodes(&op.grid, spec);
    solve_with_fixed_nodes(op, &fixed, &values, None, tol)
}

/// Solve `A v = 0` on the free nodes with `v = values` wherever `fixed` is set.
///
/// CG with a y-line tridiagonal preconditioner: the graded layers make the
/// y-couplings dominant near the trace, and exact line solves absorb them.
pub fn solve_with_fixed_nodes(
    op: &DiscreteOperator,
    fixed: &[bool],
    values: &[f64],
    guess: Option<&[f64]>,
    tol: f64,
) -> Result<ScalarField> {
    let g = &op.grid;
    let n = g.node_count();
    let tl = g.trace_len();
    let ny = g.ny();
    let mut base = vec![0.0; n];
    for p in 0..n {
        if fixed[p] {
            base[p] = values[p];
        }
    }
    let mut rhs = vec![0.0; n];
    op.apply(&base, &mut rhs);
    for p in 0..n {
        rhs[p] = if fixed[p] { 0.0 } else { -rhs[p] };
    }
    let apply = |x: &[f64], out: &mut [f64]| {
        op.apply(x, out);
        for p in 0..n {
            if fixed[p] {
                out[p] = 0.0;
            }
        }
    };
    let precondition = |r: &[f64], z: &mut [f64]| {
        let cols: Vec<Vec<f64>> = par::map_range(tl, |t| {
            let m = g.trace_cell_measure(t);
            let mut lower = vec![0.0; ny];
            let mut diag = vec![0.0; ny];
            let mut upper = vec![0.0; ny];
            let mut rhs = vec![0.0; ny];
            for j in 0..ny {
                let p = j * tl + t;
                if fixed[p] {
                    diag[j] = 1.0;
                    continue;
                }
                diag[j] = op.diagonal[p];
                rhs[j] = r[p];
                if j > 0 && !fixed[p - tl] {
                    lower[j] = -m * op.y_conductance[j - 1];
                }
                if j + 1 < ny && !fixed[p + tl] {
                    upper[j] = -m * op.y_conductance[j];
                }
            }
            linalg::solve_tridiagonal(&lower, &diag, &upper, &mut rhs);
            rhs
        });
        for (t, col) in cols.iter().enumerate() {
            for j in 0..ny {
                z[j * tl + t] = col[j];
            }
        }
    };
    let mut x = vec![0.0; n];
    if let Some(g0) = guess {
        for p in 0..n {
            if !fixed[p] {
                x[p] = g0[p];
            }
        }
    }
    let bnorm = linalg::norm(&rhs);
    if bnorm > 0.0 {
        linalg::conjugate_gradient(apply, precondition, &rhs, &mut x, CgOptions { tol, max_iter: 50_000 })?;
    }
    for p in 0..n {
        if fixed[p] {
            x[p] = values[p];
        }
    }
    ScalarField::new(op.grid.clone(), x)
}

/// Tridiagonal rows of one separable mode in y, for unknowns `j >= 1`:
/// `(G_{j-1/2} + G_{j+1/2} + k2 W_j) f_j - G_{j-1/2} f_{j-1} - G_{j+1/2} f_{j+1}`.
fn mode_rows(grid: &ExtensionGrid, top: TopBc, kappa2: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let ny = grid.ny();
    let unknowns = match top {
        TopBc::Zero => ny - 2,
        TopBc::ZeroFlux => ny - 1,
    };
    let mut lower = vec![0.0; unknowns];
    let mut diag = vec![0.0; unknowns];
    let mut upper = vec![0.0; unknowns];
    for k in 0..unknowns {
        let j = k + 1;
        let below = grid.y_edge_conductance(j - 1);
        let above = if j + 1 < ny { grid.y_edge_conductance(j) } else { 0.0 };
        diag[k] = below + above + kappa2 * grid.layer_weight(j);
        lower[k] = -below;
        upper[k] = -above;
    }
    (lower, diag, upper)
}

/// y-profile of one separable mode with unit trace value (`f_0 = 1`).
pub fn mode_profile(grid: &ExtensionGrid, top: TopBc, kappa2: f64) -> Vec<f64> {
    let (lower, diag, upper) = mode_rows(grid, top, kappa2);
    let mut rhs = vec![0.0; diag.len()];
    rhs[0] = grid.y_edge_conductance(0);
    linalg::solve_tridiagonal(&lower, &diag, &upper, &mut rhs);
    let mut phi = Vec::with_capacity(grid.ny());
    phi.push(1.0);
    phi.extend_from_slice(&rhs);
    phi.resize(grid.ny(), 0.0);
    phi
}

/// Dirichlet-to-Neumann energy per unit trace area of one separable mode.
///
/// Solved for the defect `1 - f` rather than `f` itself: on strongly graded
/// grids `f_1` agrees with 1 to more digits than a double carries, and the
/// flux `G_{1/2} (1 - f_1)` would cancel catastrophically.
pub fn mode_dtn(grid: &ExtensionGrid, top: TopBc, kappa2: f64) -> f64 {
    let (lower, diag, upper) = mode_rows(grid, top, kappa2);
    let n = diag.len();
    let mut rhs: Vec<f64> = (0..n).map(|k| kappa2 * grid.layer_weight(k + 1)).collect();
    if top == TopBc::Zero {
        rhs[n - 1] += grid.y_edge_conductance(grid.ny() - 2);
    }
    linalg::solve_tridiagonal(&lower, &diag, &upper, &mut rhs);
    kappa2 * grid.layer_weight(0) + grid.y_edge_conductance(0) * rhs[0]
}

/// Eigenvalue of the one-dimensional second difference for angle `theta`.
fn stencil_eigenvalue(theta: f64, h: f64) -> f64 {
    (2.0 - 2.0 * theta.cos()) / (h * h)
}

/// Exact discrete extension of a fully prescribed trace by separation of
/// variables. Supports zero (bounded) and periodic lateral conditions.
pub fn extend_separable(grid: &Arc<ExtensionGrid>, lateral: LateralBc, top: TopBc, trace: &[f64]) -> Result<ScalarField> {
    check_lateral(grid, lateral)?;
    let tl = grid.trace_len();
    let ny = grid.ny();
    let nx = grid.nx();
    let h = grid.spacing();
    let dim = grid.trace_dim();
    let mut values = vec![0.0; grid.node_count()];
    match lateral {
        LateralBc::Zero => {
            let big_n = nx - 1;
            let m = big_n - 1;
            let st = SineTransform::new(big_n);
            let lam: Vec<f64> = (1..big_n)
                .map(|k| stencil_eigenvalue(std::f64::consts::PI * k as f64 / big_n as f64, h))
                .collect();
            let modes = m.pow(dim as u32);
            let mut coef = vec![0.0; modes];
            for q in 0..modes {
                let (a, b) = (q % m, q / m);
                let t = if dim == 1 { a + 1 } else { grid.trace_flat([a + 1, b + 1]) };
                coef[q] = trace[t];
            }
            if dim == 1 { st.apply(&mut coef) } else { st.apply_2d(&mut coef) }
            let scale = (2.0 / big_n as f64).powi(dim as i32);
            let profiles: Vec<Vec<f64>> = par::map_range(modes, |q| {
                let k2 = if dim == 1 { lam[q] } else { lam[q % m] + lam[q / m] };
                mode_profile(grid, top, k2)
            });
            let layers: Vec<Vec<f64>> = par::map_range(ny, |j| {
                let mut buf: Vec<f64> = (0..modes).map(|q| coef[q] * profiles[q][j] * scale).collect();
                if dim == 1 { st.apply(&mut buf) } else { st.apply_2d(&mut buf) }
                buf
            });
            for (j, layer) in layers.iter().enumerate() {
                for q in 0..modes {
                    let (a, b) = (q % m, q / m);
                    let t = if dim == 1 { a + 1 } else { grid.trace_flat([a + 1, b + 1]) };
                    values[j * tl + t] = layer[q];
                }
            }
        }
        LateralBc::Periodic => {
            let ft = PeriodicTransform::new(nx);
            let hat = ft.forward(trace, dim);
            let lam: Vec<f64> = (0..nx)
                .map(|k| stencil_eigenvalue(2.0 * std::f64::consts::PI * k as f64 / nx as f64, h))
                .collect();
            let profiles: Vec<Vec<f64>> = par::map_range(tl, |q| {
                let k2 = if dim == 1 { lam[q] } else { lam[q % nx] + lam[q / nx] };
                mode_profile(grid, top, k2)
            });
            let layers: Vec<Vec<f64>> = par::map_range(ny, |j| {
                let buf = (0..tl).map(|q| hat[q] * profiles[q][j]).collect();
                ft.inverse_real(buf, dim)
            });
            for (j, layer) in layers.iter().enumerate() {
                values[j * tl..(j + 1) * tl].copy_from_slice(layer);
            }
        }
        LateralBc::Reflect => {
            return Err(Error::Unsupported("separable extension with reflecting lateral faces".into()));
        }
    }
    ScalarField::new(grid.clone(), values)
}

/// Exact discrete Dirichlet-to-Neumann map of the trace for zero lateral data.
///
/// In the sine basis the map is diagonal with entries `h^n e(kappa^2)`, so the
/// dense matrix is a multilevel Toeplitz-minus-Hankel matrix
/// `S_ab = T(a - b) - T(a + b)` whose symbol table `T` comes from one FFT.
/// Indices refer to full trace nodes; lateral boundary nodes carry no unknown.
#[derive(Debug, Clone)]
pub struct TraceOperator {
    pub grid: Arc<ExtensionGrid>,
    pub top: TopBc,
    big_n: usize,
    mode_energy: Vec<f64>,
    table: Vec<f64>,
    sine: SineTransform,
}

impl TraceOperator {
    pub fn new(grid: Arc<ExtensionGrid>, top: TopBc) -> Result<Self> {
        check_lateral(&grid, LateralBc::Zero)?;
        let dim = grid.trace_dim();
        let big_n = grid.nx() - 1;
        let m = big_n - 1;
        let h = grid.spacing();
        let lam: Vec<f64> = (1..big_n)
            .map(|k| stencil_eigenvalue(std::f64::consts::PI * k as f64 / big_n as f64, h))
            .collect();
        let modes = m.pow(dim as u32);
        let area = grid.cell_measure();
        let mode_energy: Vec<f64> = par::map_range(modes, |q| {
            let k2 = if dim == 1 { lam[q] } else { lam[q % m] + lam[q / m] };
            area * mode_dtn(&grid, top, k2)
        });
        let len = 2 * big_n;
        let ft = PeriodicTransform::new(len);
        let mut ext = vec![0.0; len.pow(dim as u32)];
        let fold = |k: usize| -> [usize; 2] { [k, len - k] };
        if dim == 1 {
            for k in 1..big_n {
                for i in fold(k) {
                    ext[i] = mode_energy[k - 1];
                }
            }
        } else {
            for k2 in 1..big_n {
                for k1 in 1..big_n {
                    let e = mode_energy[(k1 - 1) + m * (k2 - 1)];
                    for i1 in fold(k1) {
                        for i2 in fold(k2) {
                            ext[i1 + len * i2] = e;
                        }
                    }
                }
            }
        }
        let hat = ft.forward(&ext, dim);
        let scale = 1.0 / (len as f64).powi(dim as i32);
        let table = hat.iter().map(|c| c.re * scale).collect();
        Ok(TraceOperator {
            grid,
            top,
            big_n,
            mode_energy,
            table,
            sine: SineTransform::new(big_n),
        })
    }

    /// Energies `h^n e(kappa^2)` of the sine modes, in transform order.
    pub fn mode_energies(&self) -> &[f64] {
        &self.mode_energy
    }

    fn symbol(&self, m1: usize, m2: usize) -> f64 {
        self.table[m1 + 2 * self.big_n * m2]
    }

    /// Matrix entry between interior trace nodes `a` and `b`.
    pub fn entry(&self, a: usize, b: usize) -> f64 {
        let g = &self.grid;
        let [a1, a2] = g.trace_indices(a);
        let [b1, b2] = g.trace_indices(b);
        let d1 = a1.abs_diff(b1);
        let s1 = a1 + b1;
        if g.trace_dim() == 1 {
            return self.symbol(d1, 0) - self.symbol(s1, 0);
        }
        let d2 = a2.abs_diff(b2);
        let s2 = a2 + b2;
        self.symbol(d1, d2) - self.symbol(s1, d2) - self.symbol(d1, s2) + self.symbol(s1, s2)
    }

    fn interior_slots(&self) -> Vec<usize> {
        let g = &self.grid;
        let m = self.big_n - 1;
        if g.trace_dim() == 1 {
            (1..=m).collect()
        } else {
            (0..m * m).map(|q| g.trace_flat([q % m + 1, q / m + 1])).collect()
        }
    }

    /// `S u` for a full trace vector; lateral boundary entries of the result are 0.
    pub fn apply(&self, u: &[f64]) -> Vec<f64> {
        let slots = self.interior_slots();
        let dim = self.grid.trace_dim();
        let mut buf: Vec<f64> = slots.iter().map(|&t| u[t]).collect();
        if dim == 1 { self.sine.apply(&mut buf) } else { self.sine.apply_2d(&mut buf) }
        let scale = (2.0 / self.big_n as f64).powi(dim as i32);
        for (b, e) in buf.iter_mut().zip(&self.mode_energy) {
            *b *= e * scale;
        }
        if dim == 1 { self.sine.apply(&mut buf) } else { self.sine.apply_2d(&mut buf) }
        let mut out = vec![0.0; u.len()];
        for (&t, v) in slots.iter().zip(buf) {
            out[t] = v;
        }
        out
    }

    /// Minimal extension energy of a trace, `u^T S u`.
    pub fn energy(&self, u: &[f64]) -> f64 {
        linalg::dot(u, &self.apply(u))
    }
}

/// `(A v)` on the trace layer divided by the dual cell measure: the
/// conservative discrete conormal flux `-y^beta dv/dy` at `y = 0`.
pub fn trace_flux_density(op: &DiscreteOperator, v: &ScalarField) -> TraceField {
    let g = &op.grid;
    let values = (0..g.trace_len())
        .map(|t| op.apply_row(&v.values, t, 0) / g.trace_cell_measure(t))
        .collect();
    TraceField { grid: g.clone(), values }
}

/// `(-Delta)^alpha u` recovered from the extension `v` of `u`.
///
/// Uses the conservative trace flux instead of extrapolating `y^beta v_y` from
/// interior layers: the flux of the first dual cell is exact for the discrete
/// problem and stays accurate for every `beta`, while layer extrapolation
/// loses accuracy for `alpha > 1/2` where `v_y` has an `O(y^{2 - 2 alpha})`
/// correction. The flux is divided by the extension constant so that the
/// result carries the `|xi|^{2 alpha}` normalization of the Fourier symbol.
pub fn fractional_laplacian_via_flux(op: &DiscreteOperator, v: &ScalarField) -> TraceField {
    let mut flux = trace_flux_density(op, v);
    let d = extension_constant(op.grid.alpha());
    for f in &mut flux.values {
        *f /= d;
    }
    flux
}

/// Subdomain of the extension grid; an edge belongs to a region when its midpoint does.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Region {
    All,
    /// Axis-aligned box with bounds `[x1, x2, y]`.
    Box { lower: [f64; 3], upper: [f64; 3] },
    /// Half ball of the extension space centred at a trace point.
    HalfBall { center: [f64; 2], radius: f64 },
}

impl Region {
    /// Axis-aligned bounding box `[x1, x2, y]`, if the region is bounded.
    fn bounds(&self) -> Option<([f64; 3], [f64; 3])> {
        match *self {
            Region::All => None,
            Region::Box { lower, upper } => Some((lower, upper)),
            Region::HalfBall { center, radius } => Some((
                [center[0] - radius, center[1] - radius, 0.0],
                [center[0] + radius, center[1] + radius, radius],
            )),
        }
    }

    fn contains(&self, p: [f64; 3]) -> bool {
        match *self {
            Region::All => true,
            Region::Box { lower, upper } => (0..3).all(|k| p[k] >= lower[k] && p[k] <= upper[k]),
            Region::HalfBall { center, radius } => {
                let d2 = (p[0] - center[0]).powi(2) + (p[1] - center[1]).powi(2) + p[2] * p[2];
                d2 <= radius * radius
            }
        }
    }
}

/// Position of node `p` as `[x1, x2, y]` (x2 = 0 in one dimension).
fn node_position(grid: &ExtensionGrid, p: usize) -> [f64; 3] {
    let tl = grid.trace_len();
    let [x1, x2] = grid.trace_point(p % tl);
    [x1, x2, grid.y_nodes[p / tl]]
}

fn edge_midpoint(grid: &ExtensionGrid, p: usize, q: usize) -> [f64; 3] {
    let a = node_position(grid, p);
    let b = node_position(grid, q);
    let h = grid.spacing();
    let mut mid = [0.0; 3];
    for k in 0..3 {
        let mut d = b[k] - a[k];
        // Periodic wrap: the edge is the short one.
        if k < 2 && d.abs() > 1.5 * h {
            d = -d.signum() * h;
        }
        mid[k] = a[k] + 0.5 * d;
    }
    mid
}

/// `int_region y^beta |grad v|^2`, summed edge by edge.
pub fn weighted_dirichlet_energy(op: &DiscreteOperator, v: &ScalarField, region: Region) -> f64 {
    let g = &op.grid;
    let mut acc = 0.0;
    let mut visit = |p: usize, q: usize, c: f64| {
        if region == Region::All || region.contains(edge_midpoint(g, p, q)) {
            let d = v.values[p] - v.values[q];
            acc += c * d * d;
        }
    };
    match region.bounds() {
        Some((lower, upper)) if !g.is_periodic() => op.for_each_edge_in(lower, upper, visit),
        _ => op.for_each_edge(&mut visit),
    }
    acc
}

/// Bilinear form `sum_edges c (u_p - u_q)(w_p - w_q)`.
pub fn bilinear_form(op: &DiscreteOperator, u: &[f64], w: &[f64]) -> f64 {
    let mut acc = 0.0;
    op.for_each_edge(|p, q, c| acc += c * (u[p] - u[q]) * (w[p] - w[q]));
    acc
}

fn unit_sphere_area(n: usize) -> f64 {
    match n {
        1 => 2.0,
        2 => 2.0 * std::f64::consts::PI,
        _ => f64::NAN,
    }
}

/// Poisson kernel `q y^{2 alpha} / (|x|^2 + y^2)^{(n + 2 alpha)/2}` with `q`
/// fixed by unit mass on every horizontal slice.
#[derive(Debug, Clone, Copy)]
pub struct PoissonKernel {
    pub dim: usize,
    pub alpha: f64,
    pub constant: f64,
}

impl PoissonKernel {
    pub fn new(dim: usize, alpha: f64) -> Result<Self> {
        if !(dim == 1 || dim == 2) {
            return Err(Error::param("n", "trace dimension must be 1 or 2"));
        }
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::param("alpha", "order must lie in (0, 1)"));
        }
        // With r = tan(theta) the radial mass integral becomes
        // int_0^{pi/2} sin^{n-1} cos^{2 alpha - 1}. Split at pi/4; on the upper
        // half reflect theta -> pi/2 - theta and substitute s = w^{1/(2 alpha)},
        // which cancels the sin^{2 alpha - 1} endpoint singularity exactly.
        let n1 = dim as i32 - 1;
        let quarter = std::f64::consts::FRAC_PI_4;
        let f = |th: f64| th.sin().powi(n1) * th.cos().powf(2.0 * alpha - 1.0);
        let a = quadrature::double_exponential::integrate(f, 0.0, quarter, 1e-15).integral;
        let m = 1.0 / (2.0 * alpha);
        let g = |w: f64| {
            if w <= 0.0 {
                return m;
            }
            let s = w.powf(m);
            // w^{m-1} sin(s)^{2 alpha - 1} = (sin(s)/s)^{2 alpha - 1}, since s^{2 alpha - 1} = w^{1 - m}.
            m * (s.sin() / s).powf(2.0 * alpha - 1.0) * s.cos().powi(n1)
        };
        let b = quadrature::double_exponential::integrate(g, 0.0, quarter.powf(2.0 * alpha), 1e-15).integral;
        let mass = unit_sphere_area(dim) * (a + b);
        Ok(PoissonKernel { dim, alpha, constant: 1.0 / mass })
    }

    pub fn eval(&self, x: &[f64], y: f64) -> f64 {
        let r2: f64 = x.iter().map(|v| v * v).sum();
        self.constant * y.powf(2.0 * self.alpha) / (r2 + y * y).powf(0.5 * (self.dim as f64 + 2.0 * self.alpha))
    }
}

pub fn poisson_kernel(x: &[f64], y: f64, n: usize, alpha: f64) -> Result<f64> {
    if !(y > 0.0) {
        return Err(Error::param("y", "height must be positive"));
    }
    if x.len() != n {
        return Err(Error::param("x", format!("point has {} coordinates, expected {n}", x.len())));
    }
    Ok(PoissonKernel::new(n, alpha)?.eval(x, y))
}

/// Convolution of a decaying trace with the Poisson kernel at height `y`.
///
/// When `y` is below four trace spacings the kernel is not resolved by the
/// trace grid, so the data are linearly interpolated onto a subdivided grid
/// first (up to 64 subdivisions in 1D, 8 per axis in 2D).
pub fn extend_by_kernel(u: &TraceField, y: f64) -> Result<TraceField> {
    let g = &u.grid;
    if !(y > 0.0) {
        return Err(Error::param("y", "height must be positive"));
    }
    let kernel = PoissonKernel::new(g.trace_dim(), g.alpha())?;
    let h = g.spacing();
    let cap = if g.trace_dim() == 1 { 64 } else { 8 };
    let sub = ((4.0 * h / y).ceil() as usize).clamp(1, cap);
    let hs = h / sub as f64;
    let l = g.half_width();
    let fine_axis: Vec<f64> = if g.is_periodic() {
        (0..g.nx() * sub).map(|i| -l + i as f64 * hs).collect()
    } else {
        (0..(g.nx() - 1) * sub + 1).map(|i| -l + i as f64 * hs).collect()
    };
    let edge_weight = |i: usize, len: usize| -> f64 {
        if !g.is_periodic() && (i == 0 || i + 1 == len) { 0.5 * hs } else { hs }
    };
    let nf = fine_axis.len();
    let sources: Vec<([f64; 2], f64)> = if g.trace_dim() == 1 {
        (0..nf)
            .map(|i| {
                let p = [fine_axis[i], 0.0];
                (p, edge_weight(i, nf) * u.interpolate(p))
            })
            .filter(|s| s.1 != 0.0)
            .collect()
    } else {
        let mut v = Vec::new();
        for k in 0..nf {
            for i in 0..nf {
                let p = [fine_axis[i], fine_axis[k]];
                let w = edge_weight(i, nf) * edge_weight(k, nf) * u.interpolate(p);
                if w != 0.0 {
                    v.push((p, w));
                }
            }
        }
        v
    };
    let dim = g.trace_dim();
    let values = par::map_range(g.trace_len(), |t| {
        let x = g.trace_point(t);
        sources
            .iter()
            .map(|(p, w)| {
                let d = [x[0] - p[0], x[1] - p[1]];
                w * kernel.eval(&d[..dim], y)
            })
            .sum()
    });
    Ok(TraceField { grid: g.clone(), values })
}

fn constant_cache() -> &'static Mutex<HashMap<u64, f64>> {
    static CACHE: OnceLock<Mutex<HashMap<u64, f64>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

/// Constant `d` with `int y^beta |grad v|^2 = d int |xi|^{2 alpha} |u_hat|^2`
/// for the decaying extension `v` of `u`.
///
/// Measured as the Dirichlet-to-Neumann energy of the unit frequency on three
/// nested graded y-grids with Richardson extrapolation; cached per `alpha`.
pub fn extension_constant(alpha: f64) -> f64 {
    let key = alpha.to_bits();
    if let Some(&d) = constant_cache().lock().unwrap().get(&key) {
        return d;
    }
    let level = |ny: usize| {
        let grid = ExtensionGrid::new(GridSpec {
            trace_dim: 1,
            half_width: 1.0,
            height: 40.0,
            nx: 8,
            ny,
            alpha,
            grading: 3.0,
            topology: TraceTopology::Bounded,
        })
        .expect("valid calibration grid");
        mode_dtn(&grid, TopBc::ZeroFlux, 1.0)
    };
    let e1 = level(1 << 13);
    let e2 = level(1 << 14);
    let e3 = level(1 << 15);
    let d12 = e1 - e2;
    let d23 = e2 - e3;
    let d = if d23 != 0.0 && d12 / d23 > 1.2 {
        let ratio = d12 / d23;
        e3 - d23 / (ratio - 1.0)
    } else {
        e3
    };
    constant_cache().lock().unwrap().insert(key, d);
    d
}
