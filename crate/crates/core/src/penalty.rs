//! Penalized design functional and its minimization over positivity sets.
//!
//! For a candidate positivity set `P` of trace nodes the trace is `phi` on the
//! fixed region `D`, free on `P \ D` and zero elsewhere. The smallest extension
//! energy over the free values is a quadratic minimization with the exact
//! trace operator `S`: `S_FF u_F = -(S u_0)_F`. Every candidate set is
//! therefore evaluated exactly, without iterating an extension solver.

use std::sync::{Arc, OnceLock};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extension::{extend_separable, solve_with_fixed_nodes, weighted_dirichlet_energy, DiscreteOperator, LateralBc, Region, TopBc, TraceOperator};
use crate::field::{ScalarField, TraceField};
use crate::grid::ExtensionGrid;
use crate::linalg::{self, CgOptions, GrowingCholesky};
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PenaltyParams {
    pub eps: f64,
    pub omega: f64,
}

impl PenaltyParams {
    pub fn new(eps: f64, omega: f64) -> Result<Self> {
        if !(eps > 0.0 && eps.is_finite()) {
            return Err(Error::param("eps", format!("must be positive, got {eps}")));
        }
        if !(omega > 0.0 && omega.is_finite()) {
            return Err(Error::param("omega", format!("must be positive, got {omega}")));
        }
        Ok(PenaltyParams { eps, omega })
    }
}

/// Volume price: slope `1/eps` above the budget, `eps` below, zero at the budget.
pub fn f_eps(s: f64, p: &PenaltyParams) -> f64 {
    if s >= p.omega {
        (s - p.omega) / p.eps
    } else {
        p.eps * (s - p.omega)
    }
}

/// Data shared by every configuration of one design problem.
#[derive(Debug)]
pub struct DesignProblem {
    pub grid: Arc<ExtensionGrid>,
    pub top: TopBc,
    pub fixed_region: Vec<bool>,
    pub phi: TraceField,
    pub omega: f64,
    /// Solver tolerance; the positivity threshold defaults to ten times this.
    pub tol: f64,
    pub trace_op: TraceOperator,
    theta_pos: f64,
    operator: OnceLock<DiscreteOperator>,
}

impl DesignProblem {
    pub fn new(grid: Arc<ExtensionGrid>, top: TopBc, fixed_region: Vec<bool>, phi: TraceField, omega: f64, tol: f64) -> Result<Self> {
        if grid.is_periodic() {
            return Err(Error::param("grid", "design problems need a bounded trace"));
        }
        let tl = grid.trace_len();
        if fixed_region.len() != tl || phi.values.len() != tl {
            return Err(Error::param("fixed_region", "length differs from the trace node count"));
        }
        if (0..tl).any(|t| fixed_region[t] && grid.is_lateral_boundary(t)) {
            return Err(Error::param("fixed_region", "fixed region touches the lateral boundary"));
        }
        if (0..tl).any(|t| fixed_region[t] && phi.values[t] < 0.0) {
            return Err(Error::param("phi", "boundary datum must be nonnegative on the fixed region"));
        }
        if !(tol > 0.0 && tol < 1e-3) {
            return Err(Error::param("tol", "must lie in (0, 1e-3)"));
        }
        let admissible: f64 = (0..tl)
            .filter(|&t| !fixed_region[t] && !grid.is_lateral_boundary(t))
            .map(|t| grid.trace_cell_measure(t))
            .sum();
        if !(omega > 0.0 && omega <= admissible) {
            return Err(Error::param("omega", format!("must lie in (0, {admissible}], got {omega}")));
        }
        let trace_op = TraceOperator::new(grid.clone(), top)?;
        Ok(DesignProblem {
            grid,
            top,
            fixed_region,
            phi,
            omega,
            tol,
            trace_op,
            theta_pos: 10.0 * tol,
            operator: OnceLock::new(),
        })
    }

    /// Replace the positivity threshold; it must lie in `[tol, 1e-2]`.
    pub fn with_theta_pos(mut self, theta: f64) -> Result<Self> {
        if !(theta >= self.tol && theta <= 1e-2) {
            return Err(Error::param("theta_pos", format!("must lie in [tol, 1e-2], got {theta}")));
        }
        self.theta_pos = theta;
        Ok(self)
    }

    /// Trace values above this count as positive.
    pub fn theta_pos(&self) -> f64 {
        self.theta_pos
    }

    pub fn operator(&self) -> &DiscreteOperator {
        self.operator.get_or_init(|| DiscreteOperator::new(self.grid.clone()))
    }

    pub fn params(&self, eps: f64) -> Result<PenaltyParams> {
        PenaltyParams::new(eps, self.omega)
    }

    /// Nodes that may change sign: interior and outside the fixed region.
    pub fn is_movable(&self, t: usize) -> bool {
        !self.fixed_region[t] && !self.grid.is_lateral_boundary(t)
    }

    /// Volume of `mask` outside the fixed region.
    pub fn mask_volume(&self, mask: &[bool]) -> f64 {
        (0..mask.len())
            .filter(|&t| mask[t] && !self.fixed_region[t])
            .map(|t| self.grid.trace_cell_measure(t))
            .sum()
    }

    /// The fixed region together with every node where `phi` is positive there.
    pub fn base_mask(&self) -> Vec<bool> {
        let th = self.theta_pos();
        (0..self.fixed_region.len())
            .map(|t| self.fixed_region[t] && self.phi.values[t] > th)
            .collect()
    }

    fn trace_neighbours(&self, t: usize) -> Vec<usize> {
        let g = &self.grid;
        let nx = g.nx();
        let [i1, i2] = g.trace_indices(t);
        let mut out = Vec::with_capacity(4);
        if i1 > 0 {
            out.push(g.trace_flat([i1 - 1, i2]));
        }
        if i1 + 1 < nx {
            out.push(g.trace_flat([i1 + 1, i2]));
        }
        if g.trace_dim() == 2 {
            if i2 > 0 {
                out.push(g.trace_flat([i1, i2 - 1]));
            }
            if i2 + 1 < nx {
                out.push(g.trace_flat([i1, i2 + 1]));
            }
        }
        out
    }
}

/// A candidate design: trace values, their positivity set and an extension.
#[derive(Debug, Clone)]
pub struct Configuration {
    pub problem: Arc<DesignProblem>,
    pub trace: TraceField,
    pub positivity: Vec<bool>,
    extension: OnceLock<ScalarField>,
    explicit_extension: bool,
}

impl Configuration {
    /// Configuration whose extension is the minimal-energy extension of `values`.
    pub fn from_trace(problem: Arc<DesignProblem>, values: Vec<f64>) -> Result<Self> {
        let trace = TraceField::new(problem.grid.clone(), values)?;
        let th = problem.theta_pos();
        for t in 0..trace.values.len() {
            let v = trace.values[t];
            if v < -th {
                return Err(Error::param("trace", format!("negative value {v} at node {t}")));
            }
            if problem.fixed_region[t] && (v - problem.phi.values[t]).abs() > 1e-9 * (1.0 + v.abs()) {
                return Err(Error::param("trace", format!("trace differs from phi on the fixed region at node {t}")));
            }
            if problem.grid.is_lateral_boundary(t) && v.abs() > th {
                return Err(Error::param("trace", format!("nonzero value on the lateral boundary at node {t}")));
            }
        }
        let mut trace = trace;
        for v in &mut trace.values {
            *v = v.max(0.0);
        }
        let positivity = trace.values.iter().map(|&v| v > th).collect();
        Ok(Configuration {
            problem,
            trace,
            positivity,
            extension: OnceLock::new(),
            explicit_extension: false,
        })
    }

    /// Configuration carrying a given extension field; its trace slice becomes the trace.
    pub fn with_extension(problem: Arc<DesignProblem>, extension: ScalarField) -> Result<Self> {
        let mut c = Self::from_trace(problem, extension.layer(0).to_vec())?;
        c.extension = OnceLock::from(extension);
        c.explicit_extension = true;
        Ok(c)
    }

    pub fn grid(&self) -> &Arc<ExtensionGrid> {
        &self.problem.grid
    }

    pub fn extension(&self) -> &ScalarField {
        self.extension.get_or_init(|| {
            extend_separable(&self.problem.grid, LateralBc::Zero, self.problem.top, &self.trace.values)
                .expect("design grids are bounded")
        })
    }

    /// `int y^beta |grad v|^2` of this configuration's extension.
    pub fn dirichlet_energy(&self) -> f64 {
        if self.explicit_extension {
            weighted_dirichlet_energy(self.problem.operator(), self.extension(), Region::All)
        } else {
            self.problem.trace_op.energy(&self.trace.values)
        }
    }
}

pub fn positivity_volume(c: &Configuration) -> f64 {
    c.problem.mask_volume(&c.positivity)
}

/// `int y^beta |grad v|^2 + f_eps(volume)`.
pub fn energy_i_eps(c: &Configuration, p: &PenaltyParams) -> f64 {
    c.dirichlet_energy() + f_eps(positivity_volume(c), p)
}

/// Exact solution of the trace problem for one positivity set.
struct SetSolution {
    /// Full trace vector.
    u: Vec<f64>,
    su: Vec<f64>,
    energy: f64,
    free: Vec<usize>,
    factor: Option<DMatrix<f64>>,
}

/// Sets with more free nodes than this are solved by CG instead of Cholesky.
const DENSE_LIMIT: usize = 2500;

fn solve_set(problem: &DesignProblem, mask: &[bool]) -> Result<SetSolution> {
    let op = &problem.trace_op;
    let tl = mask.len();
    let mut u0 = vec![0.0; tl];
    for t in 0..tl {
        if problem.fixed_region[t] {
            u0[t] = problem.phi.values[t];
        }
    }
    let free: Vec<usize> = (0..tl).filter(|&t| mask[t] && problem.is_movable(t)).collect();
    let su0 = op.apply(&u0);
    let rhs: Vec<f64> = free.iter().map(|&t| -su0[t]).collect();
    let mut u = u0;
    let mut factor = None;
    if !free.is_empty() {
        let xf = if free.len() <= DENSE_LIMIT {
            let k = free.len();
            let m = DMatrix::from_fn(k, k, |a, b| op.entry(free[a], free[b]));
            let chol = m
                .cholesky()
                .ok_or_else(|| Error::Infeasible("trace operator block is not positive definite".into()))?;
            let x = chol.solve(&DVector::from_vec(rhs));
            factor = Some(chol.l());
            x.as_slice().to_vec()
        } else {
            let diag: Vec<f64> = free.iter().map(|&t| op.entry(t, t)).collect();
            let apply = |x: &[f64], out: &mut [f64]| {
                let mut full = vec![0.0; tl];
                for (k, &t) in free.iter().enumerate() {
                    full[t] = x[k];
                }
                let s = op.apply(&full);
                for (k, &t) in free.iter().enumerate() {
                    out[k] = s[t];
                }
            };
            let mut x = vec![0.0; free.len()];
            linalg::conjugate_gradient(
                apply,
                |r, z| {
                    for k in 0..r.len() {
                        z[k] = r[k] / diag[k];
                    }
                },
                &rhs,
                &mut x,
                CgOptions { tol: problem.tol * 1e-2, max_iter: 20_000 },
            )?;
            x
        };
        for (k, &t) in free.iter().enumerate() {
            u[t] = xf[k].max(0.0);
        }
    }
    let su = op.apply(&u);
    let energy = linalg::dot(&u, &su);
    Ok(SetSolution { u, su, energy, free, factor })
}

fn forward_substitute(l: &DMatrix<f64>, b: &[f64], start: usize) -> Vec<f64> {
    let n = b.len();
    let mut w = vec![0.0; n];
    for i in start..n {
        let mut s = b[i];
        for k in start..i {
            s -= l[(i, k)] * w[k];
        }
        w[i] = s / l[(i, i)];
    }
    w
}

/// One candidate single-node change of the positivity set.
#[derive(Debug, Clone, Copy)]
struct Move {
    node: usize,
    advance: bool,
    delta: f64,
}

fn candidate_moves(problem: &DesignProblem, mask: &[bool], sol: &SetSolution, p: &PenaltyParams) -> Vec<Move> {
    let op = &problem.trace_op;
    let tl = mask.len();
    let volume = problem.mask_volume(mask);
    let f0 = f_eps(volume, p);
    let mut advance = Vec::new();
    let mut retreat = Vec::new();
    for t in 0..tl {
        if !problem.is_movable(t) {
            continue;
        }
        let touches_other = problem.trace_neighbours(t).iter().any(|&s| mask[s] != mask[t]);
        if !touches_other {
            continue;
        }
        if mask[t] {
            retreat.push(t);
        } else {
            advance.push(t);
        }
    }
    let position: std::collections::HashMap<usize, usize> = sol.free.iter().enumerate().map(|(k, &t)| (t, k)).collect();
    let mut moves: Vec<Move> = par::map_slice(&advance, |&t| {
        let g = sol.su[t];
        let sjj = op.entry(t, t);
        let k_eff = match &sol.factor {
            Some(l) => {
                let col: Vec<f64> = sol.free.iter().map(|&f| op.entry(f, t)).collect();
                let w = forward_substitute(l, &col, 0);
                (sjj - linalg::dot(&w, &w)).max(1e-300)
            }
            // Upper bound on the effective stiffness; keeps the release estimate conservative.
            None => sjj,
        };
        let de = -g * g / k_eff;
        let dv = problem.grid.trace_cell_measure(t);
        Move { node: t, advance: true, delta: de + f_eps(volume + dv, p) - f0 }
    });
    moves.extend(par::map_slice(&retreat, |&t| {
        let ut = sol.u[t];
        let inv_diag = match &sol.factor {
            Some(l) => {
                let k = position[&t];
                let mut e = vec![0.0; sol.free.len()];
                e[k] = 1.0;
                let w = forward_substitute(l, &e, k);
                linalg::dot(&w[k..], &w[k..])
            }
            // Lower bound on the inverse diagonal; keeps the cost estimate conservative.
            None => 1.0 / op.entry(t, t),
        };
        let de = ut * ut / inv_diag;
        let dv = problem.grid.trace_cell_measure(t);
        Move { node: t, advance: false, delta: de + f_eps(volume - dv, p) - f0 }
    }));
    moves
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitStrategy {
    /// Start from an explicit mask (the fixed region is always added).
    FromMask { mask: Vec<bool> },
    /// Random interval (1D) or random dilation radius (2D) around the fixed region.
    Random { seed: u64 },
    /// Smallest dilation of the fixed region whose volume reaches the budget.
    Dilation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinimizeOptions {
    pub max_outer: usize,
    pub init: InitStrategy,
}

impl Default for MinimizeOptions {
    fn default() -> Self {
        MinimizeOptions { max_outer: 2000, init: InitStrategy::Dilation }
    }
}

/// Distance from every trace node to the fixed region.
fn distance_to_fixed(problem: &DesignProblem) -> Vec<f64> {
    let g = &problem.grid;
    let fixed: Vec<[f64; 2]> = (0..g.trace_len())
        .filter(|&t| problem.fixed_region[t])
        .map(|t| g.trace_point(t))
        .collect();
    par::map_range(g.trace_len(), |t| {
        let p = g.trace_point(t);
        fixed
            .iter()
            .map(|q| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt())
            .fold(f64::INFINITY, f64::min)
    })
}

fn dilation_mask(problem: &DesignProblem, dist: &[f64], radius: f64) -> Vec<bool> {
    let mut mask = problem.base_mask();
    for t in 0..mask.len() {
        if problem.is_movable(t) && dist[t] <= radius {
            mask[t] = true;
        }
    }
    mask
}

fn initial_mask(problem: &DesignProblem, init: &InitStrategy) -> Result<Vec<bool>> {
    let g = &problem.grid;
    let mut mask = match init {
        InitStrategy::FromMask { mask } => {
            if mask.len() != g.trace_len() {
                return Err(Error::param("init.mask", "length differs from the trace node count"));
            }
            mask.iter().enumerate().map(|(t, &m)| m && problem.is_movable(t)).collect()
        }
        InitStrategy::Dilation => {
            let dist = distance_to_fixed(problem);
            let mut radii: Vec<f64> = (0..g.trace_len()).filter(|&t| problem.is_movable(t)).map(|t| dist[t]).collect();
            radii.sort_by(|a, b| a.partial_cmp(b).unwrap());
            radii.dedup();
            let mut chosen = dilation_mask(problem, &dist, 0.0);
            for r in radii {
                chosen = dilation_mask(problem, &dist, r);
                if problem.mask_volume(&chosen) >= problem.omega {
                    break;
                }
            }
            chosen
        }
        InitStrategy::Random { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            let dist = distance_to_fixed(problem);
            if g.trace_dim() == 1 {
                let fixed: Vec<usize> = (0..g.trace_len()).filter(|&t| problem.fixed_region[t]).collect();
                let (a, b) = (fixed[0], fixed[fixed.len() - 1]);
                let l = rng.gen_range(1..=a);
                let r = rng.gen_range(b..=g.nx() - 2);
                (0..g.trace_len()).map(|t| t >= l && t <= r && problem.is_movable(t)).collect()
            } else {
                let radius = rng.gen_range(0.0..0.5 * g.half_width());
                dilation_mask(problem, &dist, radius)
            }
        }
    };
    for (t, m) in problem.base_mask().into_iter().enumerate() {
        if m {
            mask[t] = true;
        }
    }
    Ok(mask)
}

fn configuration_from_solution(problem: &Arc<DesignProblem>, sol: &SetSolution) -> Result<Configuration> {
    Configuration::from_trace(problem.clone(), sol.u.clone())
}

fn mask_of(sol: &SetSolution, problem: &DesignProblem) -> Vec<bool> {
    let th = problem.theta_pos();
    sol.u.iter().map(|&v| v > th).collect()
}

fn fixed_data_is_zero(problem: &DesignProblem) -> bool {
    (0..problem.fixed_region.len()).all(|t| !problem.fixed_region[t] || problem.phi.values[t] <= problem.theta_pos())
}

/// Outcome of the iterative minimizer.
#[derive(Debug, Clone)]
pub struct MinimizeReport {
    pub configuration: Configuration,
    pub energy: f64,
    pub outer_iterations: usize,
    /// Penalized energy after every accepted step, starting with the initial set.
    pub trajectory: Vec<f64>,
}

/// Descent over positivity sets by single-node advances and retreats.
///
/// At each outer step the exact change of the penalized energy is computed for
/// every node on the boundary of the current set: advancing a zero node
/// releases `g^2 / K` of extension energy (`g` its conormal flux, `K` its
/// Schur stiffness) and costs the volume price; retreating a positive node
/// costs `u^2 / (S_FF^{-1})_jj` and saves the price. All improving moves are
/// tried together, grouped by equal gain so symmetric moves stay together;
/// if the combination fails to descend, the batch is halved. The loop ends
/// when no single move improves the energy.
pub fn minimize_iterative(problem: &Arc<DesignProblem>, params: &PenaltyParams, opts: &MinimizeOptions) -> Result<MinimizeReport> {
    if fixed_data_is_zero(problem) {
        let cfg = Configuration::from_trace(problem.clone(), vec![0.0; problem.grid.trace_len()])?;
        let energy = energy_i_eps(&cfg, params);
        return Ok(MinimizeReport { configuration: cfg, energy, outer_iterations: 0, trajectory: vec![energy] });
    }
    let mut mask = initial_mask(problem, &opts.init)?;
    let mut sol = solve_set(problem, &mask)?;
    mask = mask_of(&sol, problem);
    let mut current = sol.energy + f_eps(problem.mask_volume(&mask), params);
    let mut trajectory = vec![current];
    for outer in 0..opts.max_outer {
        let mut moves: Vec<Move> = candidate_moves(problem, &mask, &sol, params)
            .into_iter()
            .filter(|m| m.delta < -1e-13 * current.abs().max(1e-300))
            .collect();
        if moves.is_empty() {
            let cfg = configuration_from_solution(problem, &sol)?;
            return Ok(MinimizeReport { configuration: cfg, energy: current, outer_iterations: outer, trajectory });
        }
        moves.sort_by(|a, b| a.delta.partial_cmp(&b.delta).unwrap().then(a.node.cmp(&b.node)));
        let mut groups: Vec<Vec<Move>> = Vec::new();
        for m in moves {
            match groups.last_mut() {
                Some(gr) if (gr[0].delta - m.delta).abs() <= 1e-9 * gr[0].delta.abs() => gr.push(m),
                _ => groups.push(vec![m]),
            }
        }
        let mut take = groups.len();
        let mut accepted = None;
        loop {
            let mut trial = mask.clone();
            for m in groups[..take].iter().flatten() {
                trial[m.node] = m.advance;
            }
            let tsol = solve_set(problem, &trial)?;
            let tmask = mask_of(&tsol, problem);
            let energy = tsol.energy + f_eps(problem.mask_volume(&tmask), params);
            if energy < current - 1e-14 * current.abs() {
                accepted = Some((tsol, tmask, energy));
                break;
            }
            if take == 1 {
                break;
            }
            take = take.div_ceil(2);
        }
        if accepted.is_none() && groups[0].len() > 1 {
            let m = groups[0][0];
            let mut trial = mask.clone();
            trial[m.node] = m.advance;
            let tsol = solve_set(problem, &trial)?;
            let tmask = mask_of(&tsol, problem);
            let energy = tsol.energy + f_eps(problem.mask_volume(&tmask), params);
            if energy < current {
                accepted = Some((tsol, tmask, energy));
            }
        }
        match accepted {
            Some((s, m, e)) => {
                sol = s;
                mask = m;
                current = e;
                trajectory.push(e);
            }
            None => {
                // Predicted gains did not materialize: the set is stationary up to rounding.
                let cfg = configuration_from_solution(problem, &sol)?;
                return Ok(MinimizeReport { configuration: cfg, energy: current, outer_iterations: outer, trajectory });
            }
        }
    }
    Err(Error::MaskNotStationary { iterations: opts.max_outer, trajectory })
}

/// Maximal runs of consecutive fixed-region nodes in a 1D trace.
fn fixed_intervals(problem: &DesignProblem) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = None;
    for t in 0..problem.fixed_region.len() {
        match (problem.fixed_region[t], start) {
            (true, None) => start = Some(t),
            (false, Some(s)) => {
                out.push((s, t - 1));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push((s, problem.fixed_region.len() - 1));
    }
    out
}

#[derive(Debug, Clone, Copy)]
struct Candidate {
    energy: f64,
    volume: f64,
    /// Leftmost positive node, for tie-breaking.
    left: usize,
    /// Nodes `[l1, r1]` and, for split sets, `[l2, r2]`.
    bounds: [usize; 4],
}

fn better(a: &Candidate, b: &Candidate) -> bool {
    let tol = 1e-12 * a.energy.abs().max(b.energy.abs()).max(1e-300);
    if (a.energy - b.energy).abs() > tol {
        return a.energy < b.energy;
    }
    if a.volume != b.volume {
        return a.volume < b.volume;
    }
    a.left < b.left
}

/// Energies of `prefix + tail[..k]` for `k = 0..=tail.len()`, by growing one
/// Cholesky factor of `S_FF` node by node. `E = E_0 - |L^{-1} b|^2`.
fn scan_energies(op: &TraceOperator, su0: &[f64], e0: f64, prefix: &[usize], tail: &[usize]) -> Vec<f64> {
    let mut chol = GrowingCholesky::new();
    let mut nodes: Vec<usize> = Vec::with_capacity(prefix.len() + tail.len());
    let mut w_norm2 = 0.0;
    let mut w: Vec<f64> = Vec::new();
    let push = |t: usize, nodes: &mut Vec<usize>, chol: &mut GrowingCholesky, w: &mut Vec<f64>, w_norm2: &mut f64| {
        let coupling: Vec<f64> = nodes.iter().map(|&s| op.entry(s, t)).collect();
        let row = chol.push(&coupling, op.entry(t, t)).expect("trace operator is positive definite").to_vec();
        let k = row.len() - 1;
        let b = -su0[t];
        let wk = (b - linalg::dot(&row[..k], &w[..k])) / row[k];
        w.push(wk);
        *w_norm2 += wk * wk;
        nodes.push(t);
    };
    for &t in prefix {
        push(t, &mut nodes, &mut chol, &mut w, &mut w_norm2);
    }
    let mut out = Vec::with_capacity(tail.len() + 1);
    out.push(e0 - w_norm2);
    for &t in tail {
        push(t, &mut nodes, &mut chol, &mut w, &mut w_norm2);
        out.push(e0 - w_norm2);
    }
    out
}

/// Exhaustive minimization over interval positivity sets of a 1D trace.
///
/// Candidates are all intervals containing the fixed interval, or, for two
/// fixed intervals, one interval around both or two disjoint intervals around
/// each. Energies along each family come from one growing Cholesky factor.
/// Ties go to the smaller volume, then to the leftmost set. The split family
/// is quartic in the node count and meant for coarse grids.
pub fn minimize_bruteforce_1d(problem: &Arc<DesignProblem>, params: &PenaltyParams) -> Result<Configuration> {
    let g = &problem.grid;
    if g.trace_dim() != 1 {
        return Err(Error::Unsupported("exhaustive search is one-dimensional".into()));
    }
    if fixed_data_is_zero(problem) {
        return Configuration::from_trace(problem.clone(), vec![0.0; g.trace_len()]);
    }
    let intervals = fixed_intervals(problem);
    let op = &problem.trace_op;
    let tl = g.trace_len();
    let h = g.spacing();
    let mut u0 = vec![0.0; tl];
    for t in 0..tl {
        if problem.fixed_region[t] {
            u0[t] = problem.phi.values[t];
        }
    }
    let su0 = op.apply(&u0);
    let e0 = linalg::dot(&u0, &su0);
    let fixed_count = problem.fixed_region.iter().filter(|&&b| b).count();
    let last = g.nx() - 2;
    let volume_of = |positive: usize| (positive - fixed_count) as f64 * h;
    let best_of = |cands: Vec<Candidate>| -> Option<Candidate> {
        cands.into_iter().fold(None, |acc: Option<Candidate>, c| match acc {
            Some(b) if !better(&c, &b) => Some(b),
            _ => Some(c),
        })
    };
    let mut all: Vec<Candidate> = Vec::new();
    match intervals.as_slice() {
        [(a, b)] => {
            let (a, b) = (*a, *b);
            let right: Vec<usize> = (b + 1..=last).collect();
            let per_left = par::map_range(a, |k| {
                let l = a - k;
                let prefix: Vec<usize> = (l..a).collect();
                let energies = scan_energies(op, &su0, e0, &prefix, &right);
                let cands: Vec<Candidate> = energies
                    .iter()
                    .enumerate()
                    .map(|(extra, &e)| {
                        let r = b + extra;
                        let vol = volume_of(r - l + 1);
                        Candidate { energy: e + f_eps(vol, params), volume: vol, left: l, bounds: [l, r, 0, 0] }
                    })
                    .collect();
                best_of(cands)
            });
            all.extend(per_left.into_iter().flatten());
        }
        [(a1, b1), (a2, b2)] => {
            let (a1, b1, a2, b2) = (*a1, *b1, *a2, *b2);
            // One interval around both fixed intervals.
            let right: Vec<usize> = (b2 + 1..=last).collect();
            let merged = par::map_range(a1, |k| {
                let l = a1 - k;
                let mut prefix: Vec<usize> = (l..a1).collect();
                prefix.extend((b1 + 1)..a2);
                let energies = scan_energies(op, &su0, e0, &prefix, &right);
                let cands = energies
                    .iter()
                    .enumerate()
                    .map(|(extra, &e)| {
                        let r = b2 + extra;
                        let vol = volume_of(r - l + 1);
                        Candidate { energy: e + f_eps(vol, params), volume: vol, left: l, bounds: [l, r, 0, 0] }
                    })
                    .collect();
                best_of(cands)
            });
            all.extend(merged.into_iter().flatten());
            // Two disjoint intervals with at least one zero node between them.
            let mut outer = Vec::new();
            for l1 in 1..=a1 {
                for r1 in b1..a2 {
                    for l2 in (r1 + 2)..=a2 {
                        outer.push((l1, r1, l2));
                    }
                }
            }
            let split = par::map_slice(&outer, |&(l1, r1, l2)| {
                let mut prefix: Vec<usize> = (l1..a1).collect();
                prefix.extend((b1 + 1)..=r1);
                prefix.extend(l2..a2);
                let energies = scan_energies(op, &su0, e0, &prefix, &right);
                let cands = energies
                    .iter()
                    .enumerate()
                    .map(|(extra, &e)| {
                        let r2 = b2 + extra;
                        let vol = volume_of((r1 - l1 + 1) + (r2 - l2 + 1));
                        Candidate { energy: e + f_eps(vol, params), volume: vol, left: l1, bounds: [l1, r1, l2, r2] }
                    })
                    .collect();
                best_of(cands)
            });
            all.extend(split.into_iter().flatten());
        }
        _ => {
            return Err(Error::Unsupported(
                "exhaustive search needs one fixed interval or two fixed intervals".into(),
            ))
        }
    }
    let best = best_of(all).ok_or_else(|| Error::Infeasible("no admissible candidate".into()))?;
    let [l1, r1, l2, r2] = best.bounds;
    let mask: Vec<bool> = (0..tl)
        .map(|t| (t >= l1 && t <= r1) || (r2 > 0 && t >= l2 && t <= r2))
        .collect();
    let sol = solve_set(problem, &mask)?;
    configuration_from_solution(problem, &sol)
}

/// Minimal extension energy with the trace fixed to `phi` on the fixed region,
/// free on `mask` and zero elsewhere; also returns the trace.
pub fn set_energy(problem: &DesignProblem, mask: &[bool]) -> Result<(f64, Vec<f64>)> {
    let sol = solve_set(problem, mask)?;
    Ok((sol.energy, sol.u))
}

/// Replace the extension inside the half ball of radius `radius` about the
/// trace point `center` by the weighted-harmonic function with the same values
/// on the spherical boundary. The flat part of the boundary carries no
/// condition (zero conormal flux), matching an even reflection across the
/// trace. Fixed-region nodes keep their data.
pub fn harmonic_replacement(c: &Configuration, center: [f64; 2], radius: f64) -> Result<Configuration> {
    let g = c.grid();
    if !(radius > 0.0) {
        return Err(Error::param("radius", "must be positive"));
    }
    let problem = &c.problem;
    let v = c.extension();
    let tl = g.trace_len();
    let ny = g.ny();
    let mut fixed = vec![true; g.node_count()];
    let mut inside = 0usize;
    for j in 0..ny {
        let y = g.y_nodes[j];
        for t in 0..tl {
            let [x1, x2] = g.trace_point(t);
            let r2 = (x1 - center[0]).powi(2) + (x2 - center[1]).powi(2) + y * y;
            let boundary = g.is_lateral_boundary(t)
                || (problem.top == TopBc::Zero && j == ny - 1)
                || (j == 0 && problem.fixed_region[t]);
            if r2 < radius * radius && !boundary {
                fixed[j * tl + t] = false;
                inside += 1;
            }
        }
    }
    if inside == 0 {
        return Ok(c.clone());
    }
    let solved = solve_with_fixed_nodes(problem.operator(), &fixed, &v.values, Some(&v.values), problem.tol)?;
    Configuration::with_extension(problem.clone(), solved)
}

/// Normalization of the mollifier `exp(-1 / (1 - t^2))` to unit mass on `[0, 1]`.
fn profile_constant() -> f64 {
    static C: OnceLock<f64> = OnceLock::new();
    *C.get_or_init(|| {
        let f = |t: f64| if t < 1.0 { (-1.0 / (1.0 - t * t)).exp() } else { 0.0 };
        1.0 / quadrature::double_exponential::integrate(f, 0.0, 1.0, 1e-15).integral
    })
}

/// Smooth bump on `[0, 1)` with unit integral, vanishing to all orders at 1.
pub fn bump_profile(t: f64) -> f64 {
    let t = t.abs();
    if t >= 1.0 {
        0.0
    } else {
        profile_constant() * (-1.0 / (1.0 - t * t)).exp()
    }
}

pub fn bump_profile_derivative(t: f64) -> f64 {
    let t = t.abs();
    if t >= 1.0 {
        0.0
    } else {
        bump_profile(t) * (-2.0 * t / ((1.0 - t * t) * (1.0 - t * t)))
    }
}

/// `sup |rho'|` over `[0, 1]`, by dense sampling.
pub fn bump_profile_max_slope() -> f64 {
    static M: OnceLock<f64> = OnceLock::new();
    *M.get_or_init(|| (0..20_000).map(|k| bump_profile_derivative(k as f64 / 20_000.0).abs()).fold(0.0, f64::max))
}

/// One localized push along a free-boundary normal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bump {
    pub center: [f64; 2],
    /// Unit normal pointing into the positivity set.
    pub normal: [f64; 2],
    /// `+1` moves points along the normal (the positivity set recedes),
    /// `-1` against it (the set grows).
    pub sign: f64,
}

/// Domain perturbation `X -> X + sign * gamma * r * rho(|X - x_i| / r) * nu_i`
/// on balls of radius `r` about each centre in the extension space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub bumps: Vec<Bump>,
    pub radius: f64,
    pub amplitude: f64,
}

impl PerturbationSpec {
    pub fn validate(&self) -> Result<()> {
        if self.bumps.is_empty() {
            return Err(Error::param("bumps", "at least one centre is required"));
        }
        if !(self.radius > 0.0) {
            return Err(Error::param("radius", "must be positive"));
        }
        if !(self.amplitude >= 0.0) {
            return Err(Error::param("amplitude", "must be nonnegative"));
        }
        for b in &self.bumps {
            let n = (b.normal[0].powi(2) + b.normal[1].powi(2)).sqrt();
            if (n - 1.0).abs() > 1e-9 {
                return Err(Error::param("normal", "normals must have unit length"));
            }
        }
        for i in 0..self.bumps.len() {
            for k in i + 1..self.bumps.len() {
                let (a, b) = (self.bumps[i].center, self.bumps[k].center);
                let d = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
                if self.radius >= d / 100.0 {
                    return Err(Error::param("radius", format!("must be below dist/100 = {}", d / 100.0)));
                }
            }
        }
        if self.amplitude * bump_profile_max_slope() >= 1.0 {
            return Err(Error::param("amplitude", "amplitude times sup |rho'| must stay below 1"));
        }
        let violates = (0..=2000).any(|k| {
            let t = k as f64 / 2000.0;
            self.amplitude * bump_profile(t) > 1.0 - t + 1e-12
        });
        if violates {
            return Err(Error::param("amplitude", "amplitude * rho(t) must not exceed 1 - t"));
        }
        Ok(())
    }

    /// Image of a point `[x1, x2, y]` (x2 = 0 in 1D).
    pub fn map_point(&self, p: [f64; 3]) -> [f64; 3] {
        let mut q = p;
        for b in &self.bumps {
            let d = distance3(p, b.center);
            let s = b.sign * self.amplitude * self.radius * bump_profile(d / self.radius);
            q[0] += s * b.normal[0];
            q[1] += s * b.normal[1];
        }
        q
    }

    /// `det D P` at a point: `1 + sign gamma rho'(|z|/r) <z, nu> / |z|` inside each ball.
    pub fn jacobian_determinant(&self, p: [f64; 3]) -> f64 {
        for b in &self.bumps {
            let d = distance3(p, b.center);
            if d < self.radius && d > 0.0 {
                let z = [p[0] - b.center[0], p[1] - b.center[1]];
                let dot = z[0] * b.normal[0] + z[1] * b.normal[1];
                return 1.0 + b.sign * self.amplitude * bump_profile_derivative(d / self.radius) * dot / d;
            }
        }
        1.0
    }

    /// Preimage of a trace point under the map, by fixed-point iteration.
    pub fn inverse_trace_point(&self, x: [f64; 2]) -> [f64; 2] {
        let mut z = x;
        for _ in 0..200 {
            let mut next = x;
            for b in &self.bumps {
                let d = distance3([z[0], z[1], 0.0], b.center);
                let s = b.sign * self.amplitude * self.radius * bump_profile(d / self.radius);
                next[0] -= s * b.normal[0];
                next[1] -= s * b.normal[1];
            }
            let change = (next[0] - z[0]).abs() + (next[1] - z[1]).abs();
            z = next;
            if change < 1e-15 * (1.0 + x[0].abs() + x[1].abs()) {
                break;
            }
        }
        z
    }
}

fn nearest_trace_node(g: &ExtensionGrid, z: [f64; 2]) -> usize {
    let h = g.spacing();
    let last = (g.nx() - 1) as f64;
    let idx = |v: f64| ((v + g.half_width()) / h).round().clamp(0.0, last) as usize;
    let i2 = if g.trace_dim() == 2 { idx(z[1]) } else { 0 };
    g.trace_flat([idx(z[0]), i2])
}

fn distance3(p: [f64; 3], c: [f64; 2]) -> f64 {
    ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2) + p[2] * p[2]).sqrt()
}

/// Transported configuration `v(P(X)) = u(X)` on the trace, resampled with
/// linear interpolation; the positivity set and volume are recomputed.
pub fn perturb_configuration(c: &Configuration, spec: &PerturbationSpec) -> Result<Configuration> {
    spec.validate()?;
    let g = c.grid();
    let problem = &c.problem;
    for t in 0..g.trace_len() {
        if !problem.fixed_region[t] {
            continue;
        }
        let p = g.trace_point(t);
        if spec.bumps.iter().any(|b| distance3([p[0], p[1], 0.0], b.center) < spec.radius) {
            return Err(Error::param("centers", "perturbation balls must not meet the fixed region"));
        }
    }
    if spec.amplitude == 0.0 {
        return Ok(c.clone());
    }
    let values = par::map_range(g.trace_len(), |t| {
        if problem.fixed_region[t] || g.is_lateral_boundary(t) {
            return c.trace.values[t];
        }
        let x = g.trace_point(t);
        let inside = spec.bumps.iter().any(|b| distance3([x[0], x[1], 0.0], b.center) < spec.radius);
        if !inside {
            return c.trace.values[t];
        }
        // The positivity set is transported as a union of cells, so the
        // free boundary sits on cell faces and inward and outward pushes
        // of equal height move it by the same number of cells.
        let z = spec.inverse_trace_point(x);
        if c.positivity[nearest_trace_node(g, z)] {
            c.trace.interpolate(z).max(problem.theta_pos() * 2.0)
        } else {
            0.0
        }
    });
    Configuration::from_trace(problem.clone(), values)
}
