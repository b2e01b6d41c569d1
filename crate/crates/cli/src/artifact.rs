//! Self-describing field container.
//!
//! Layout: the 8-byte magic `FDFIELD1`, a little-endian `u32` header length,
//! a compact JSON header, then `len` little-endian `f64` values in the grid's
//! flat node order (row-major over the trace, layer by layer in `y`).

use std::path::Path;
use std::sync::Arc;

use fracdesign::extension::TopBc;
use fracdesign::field::{ScalarField, TraceField};
use fracdesign::grid::{ExtensionGrid, GridSpec};
use fracdesign::penalty::{Configuration, DesignProblem};
use fracdesign::{Error, Result};
use serde::{Deserialize, Serialize};

pub const MAGIC: &[u8; 8] = b"FDFIELD1";
pub const VERSION: u32 = 1;
const PREFIX: usize = MAGIC.len() + 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldKind {
    /// Values on the trace slice only.
    Trace,
    /// Values at every node of the extension grid.
    Extension,
}

/// Problem data needed to rebuild a [`Configuration`] from a stored field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignHeader {
    pub omega: f64,
    pub top_bc: TopBc,
    pub tol: f64,
    pub theta_pos: f64,
    /// Penalization strength the field was computed at, if any.
    pub eps: Option<f64>,
    /// Trace indices of the fixed region.
    pub fixed_nodes: Vec<usize>,
    /// Boundary datum at `fixed_nodes`.
    pub fixed_values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArtifactHeader {
    pub version: u32,
    pub kind: FieldKind,
    pub grid: GridSpec,
    pub alpha: f64,
    pub beta: f64,
    pub len: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub design: Option<DesignHeader>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldArtifact {
    pub header: ArtifactHeader,
    pub values: Vec<f64>,
}

fn schema(offset: usize, field: &str, reason: impl Into<String>) -> Error {
    Error::Schema { offset, field: field.into(), reason: reason.into() }
}

fn header_for(grid: &ExtensionGrid, kind: FieldKind, len: usize) -> ArtifactHeader {
    ArtifactHeader {
        version: VERSION,
        kind,
        grid: grid.spec(),
        alpha: grid.alpha(),
        beta: grid.beta,
        len,
        design: None,
    }
}

impl DesignHeader {
    pub fn from_problem(problem: &DesignProblem, eps: Option<f64>) -> Self {
        let fixed_nodes: Vec<usize> = (0..problem.fixed_region.len()).filter(|&t| problem.fixed_region[t]).collect();
        let fixed_values = fixed_nodes.iter().map(|&t| problem.phi.values[t]).collect();
        DesignHeader {
            omega: problem.omega,
            top_bc: problem.top,
            tol: problem.tol,
            theta_pos: problem.theta_pos(),
            eps,
            fixed_nodes,
            fixed_values,
        }
    }

    pub fn build_problem(&self, grid: Arc<ExtensionGrid>) -> Result<DesignProblem> {
        let tl = grid.trace_len();
        if self.fixed_nodes.len() != self.fixed_values.len() {
            return Err(schema(0, "design.fixed_values", "length differs from design.fixed_nodes"));
        }
        let mut fixed = vec![false; tl];
        let mut phi = vec![0.0; tl];
        for (&t, &v) in self.fixed_nodes.iter().zip(&self.fixed_values) {
            if t >= tl {
                return Err(schema(0, "design.fixed_nodes", format!("index {t} outside a trace of {tl} nodes")));
            }
            fixed[t] = true;
            phi[t] = v;
        }
        let phi = TraceField::new(grid.clone(), phi)?;
        DesignProblem::new(grid, self.top_bc, fixed, phi, self.omega, self.tol)?.with_theta_pos(self.theta_pos)
    }
}

impl FieldArtifact {
    pub fn from_trace(field: &TraceField) -> Self {
        FieldArtifact {
            header: header_for(&field.grid, FieldKind::Trace, field.values.len()),
            values: field.values.clone(),
        }
    }

    pub fn from_extension(field: &ScalarField) -> Self {
        FieldArtifact {
            header: header_for(&field.grid, FieldKind::Extension, field.values.len()),
            values: field.values.clone(),
        }
    }

    /// Store a configuration together with its problem data.
    pub fn from_configuration(c: &Configuration, kind: FieldKind, eps: Option<f64>) -> Self {
        let mut a = match kind {
            FieldKind::Trace => Self::from_trace(&c.trace),
            FieldKind::Extension => Self::from_extension(c.extension()),
        };
        a.header.design = Some(DesignHeader::from_problem(&c.problem, eps));
        a
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        let mut out = Vec::with_capacity(PREFIX + header.len() + 8 * self.values.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() {
            return Err(schema(bytes.len(), "magic", "file shorter than the magic number"));
        }
        if &bytes[..MAGIC.len()] != MAGIC {
            return Err(schema(0, "magic", "not a field artifact"));
        }
        if bytes.len() < PREFIX {
            return Err(schema(bytes.len(), "header_len", "truncated header length"));
        }
        let header_len = u32::from_le_bytes(bytes[MAGIC.len()..PREFIX].try_into().unwrap()) as usize;
        let data_start = PREFIX + header_len;
        if bytes.len() < data_start {
            return Err(schema(
                bytes.len(),
                "header",
                format!("header declares {header_len} bytes but only {} remain", bytes.len() - PREFIX),
            ));
        }
        let header: ArtifactHeader = serde_json::from_slice(&bytes[PREFIX..data_start]).map_err(|e| {
            // The header is written on one line, so the column is the byte offset.
            schema(PREFIX + e.column().saturating_sub(1), "header", e.to_string())
        })?;
        if header.version != VERSION {
            return Err(schema(PREFIX, "version", format!("unsupported version {}", header.version)));
        }
        let grid = header.grid.build().map_err(|e| schema(PREFIX, "grid", e.to_string()))?;
        if header.alpha != grid.alpha() {
            return Err(schema(PREFIX, "alpha", "differs from grid.alpha"));
        }
        if (header.beta - grid.beta).abs() > 1e-15 {
            return Err(schema(PREFIX, "beta", format!("expected {} for this alpha", grid.beta)));
        }
        let expected = match header.kind {
            FieldKind::Trace => grid.trace_len(),
            FieldKind::Extension => grid.node_count(),
        };
        if header.len != expected {
            return Err(schema(PREFIX, "len", format!("{:?} field on this grid has {expected} values", header.kind)));
        }
        let data = &bytes[data_start..];
        if data.len() != 8 * header.len {
            return Err(schema(
                data_start + data.len().min(8 * header.len),
                "data",
                format!("expected {} bytes of values, found {}", 8 * header.len, data.len()),
            ));
        }
        let values: Vec<f64> = data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(schema(data_start + 8 * i, "data", format!("non-finite value at index {i}")));
        }
        Ok(FieldArtifact { header, values })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn grid(&self) -> Result<Arc<ExtensionGrid>> {
        Ok(Arc::new(self.header.grid.build()?))
    }

    pub fn to_trace(&self) -> Result<TraceField> {
        let grid = self.grid()?;
        match self.header.kind {
            FieldKind::Trace => TraceField::new(grid, self.values.clone()),
            FieldKind::Extension => Ok(ScalarField::new(grid, self.values.clone())?.trace()),
        }
    }

    /// Rebuild the stored configuration and the `eps` it was computed at.
    pub fn to_configuration(&self) -> Result<(Configuration, Option<f64>)> {
        let design = self
            .header
            .design
            .as_ref()
            .ok_or_else(|| schema(PREFIX, "design", "artifact carries no design block"))?;
        let grid = self.grid()?;
        let problem = Arc::new(design.build_problem(grid.clone())?);
        let c = match self.header.kind {
            FieldKind::Trace => Configuration::from_trace(problem, self.values.clone())?,
            FieldKind::Extension => Configuration::with_extension(problem, ScalarField::new(grid, self.values.clone())?)?,
        };
        Ok((c, design.eps))
    }
}

/// Trace values as CSV with columns `x` (1D) or `x1,x2` (2D) and `value`.
pub fn trace_csv(field: &TraceField) -> String {
    let g = &field.grid;
    let mut out = String::from(if g.trace_dim() == 1 { "x,value\n" } else { "x1,x2,value\n" });
    for (t, v) in field.values.iter().enumerate() {
        let p = g.trace_point(t);
        if g.trace_dim() == 1 {
            out.push_str(&format!("{:.17e},{:.17e}\n", p[0], v));
        } else {
            out.push_str(&format!("{:.17e},{:.17e},{:.17e}\n", p[0], p[1], v));
        }
    }
    out
}
