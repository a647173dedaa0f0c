//! Snapshot and diagnostics output.
//!
//! Snapshots use the legacy ASCII unstructured-grid format (tet cells,
//! per-point velocity vectors, per-cell strain scalars). Floats are
//! printed with Rust's shortest round-trip formatting, so writing and
//! re-reading a snapshot reproduces every value bit for bit.
//!
//! Diagnostics go to a CSV with a fixed header; each row is flushed as it
//! is written so partial runs still leave usable output.

use std::fs::File;
use std::io::{BufWriter, Write as IoWrite};
use std::path::Path;

use nalgebra::Vector3;

use crate::dynamics::{DeformableBody, StepDiagnostics};
use crate::error::{Error, Result};
use crate::material::corotated_strain;
use crate::mesh::deformation_gradient;

/// Mesh, per-point velocity, and per-cell strain at one instant.
#[derive(Debug, Clone, PartialEq)]
pub struct VtkSnapshot {
    pub points: Vec<Vector3<f64>>,
    pub cells: Vec<[usize; 4]>,
    /// One per point; may be empty when the file carries no velocity.
    pub velocities: Vec<Vector3<f64>>,
    /// One per cell; may be empty when the file carries no strain.
    pub strains: Vec<f64>,
}

/// Capture a deformable body: current positions, velocities, and the
/// Frobenius norm of each element's corotated strain.
pub fn snapshot_deformable(body: &DeformableBody) -> VtkSnapshot {
    let n = body.mesh.n_vertices();
    let mut points = Vec::with_capacity(n);
    let mut velocities = Vec::with_capacity(n);
    for i in 0..n {
        points.push(Vector3::new(body.q[3 * i], body.q[3 * i + 1], body.q[3 * i + 2]));
        velocities.push(Vector3::new(body.v[3 * i], body.v[3 * i + 1], body.v[3 * i + 2]));
    }
    let strains = (0..body.mesh.n_elements())
        .map(|e| {
            let f = deformation_gradient(&body.mesh, &body.geom, e, &body.q);
            corotated_strain(&f, body.state.rotation(e)).norm()
        })
        .collect();
    VtkSnapshot {
        points,
        cells: body.mesh.elements().to_vec(),
        velocities,
        strains,
    }
}

/// Write a snapshot. The `title` lands on the format's free-text line.
pub fn write_vtk(path: &Path, snap: &VtkSnapshot, title: &str) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "# vtk DataFile Version 3.0")?;
    writeln!(w, "{title}")?;
    writeln!(w, "ASCII")?;
    writeln!(w, "DATASET UNSTRUCTURED_GRID")?;
    writeln!(w, "POINTS {} double", snap.points.len())?;
    for p in &snap.points {
        writeln!(w, "{} {} {}", p.x, p.y, p.z)?;
    }
    writeln!(w, "CELLS {} {}", snap.cells.len(), 5 * snap.cells.len())?;
    for c in &snap.cells {
        writeln!(w, "4 {} {} {} {}", c[0], c[1], c[2], c[3])?;
    }
    writeln!(w, "CELL_TYPES {}", snap.cells.len())?;
    for _ in &snap.cells {
        writeln!(w, "10")?;
    }
    if !snap.velocities.is_empty() {
        writeln!(w, "POINT_DATA {}", snap.velocities.len())?;
        writeln!(w, "VECTORS velocity double")?;
        for v in &snap.velocities {
            writeln!(w, "{} {} {}", v.x, v.y, v.z)?;
        }
    }
    if !snap.strains.is_empty() {
        writeln!(w, "CELL_DATA {}", snap.strains.len())?;
        writeln!(w, "SCALARS strain double 1")?;
        writeln!(w, "LOOKUP_TABLE default")?;
        for s in &snap.strains {
            writeln!(w, "{s}")?;
        }
    }
    w.flush()?;
    Ok(())
}

struct Tokens<'a> {
    iter: std::str::SplitWhitespace<'a>,
    path: String,
}

impl<'a> Tokens<'a> {
    fn next(&mut self, what: &str) -> Result<&'a str> {
        self.iter.next().ok_or_else(|| Error::Parse {
            path: self.path.clone(),
            message: format!("unexpected end of file while reading {what}"),
        })
    }

    fn usize(&mut self, what: &str) -> Result<usize> {
        let tok = self.next(what)?;
        tok.parse().map_err(|_| Error::Parse {
            path: self.path.clone(),
            message: format!("expected an integer for {what}, got {tok:?}"),
        })
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        let tok = self.next(what)?;
        tok.parse().map_err(|_| Error::Parse {
            path: self.path.clone(),
            message: format!("expected a number for {what}, got {tok:?}"),
        })
    }

    fn error(&self, message: String) -> Error {
        Error::Parse {
            path: self.path.clone(),
            message,
        }
    }
}

/// Read a snapshot written by [`write_vtk`] (or any ASCII tet grid in the
/// same format). Only tetrahedral cells are accepted; velocity vectors and
/// strain scalars are picked up when present, other data arrays are
/// skipped.
pub fn read_vtk(path: &Path) -> Result<VtkSnapshot> {
    let content = std::fs::read_to_string(path)?;
    let mut lines = content.lines();
    let header = lines.next().unwrap_or("");
    if !header.starts_with("# vtk DataFile") {
        return Err(Error::Parse {
            path: path.display().to_string(),
            message: format!("not a snapshot file: first line {header:?}"),
        });
    }
    let _title = lines.next();
    match lines.next().map(str::trim) {
        Some("ASCII") => {}
        other => {
            return Err(Error::Parse {
                path: path.display().to_string(),
                message: format!("only ASCII encoding is supported, got {other:?}"),
            })
        }
    }
    match lines.next().map(str::trim) {
        Some("DATASET UNSTRUCTURED_GRID") => {}
        other => {
            return Err(Error::Parse {
                path: path.display().to_string(),
                message: format!("expected an unstructured grid, got {other:?}"),
            })
        }
    }
    let rest: String = lines.collect::<Vec<_>>().join("\n");
    let mut t = Tokens {
        iter: rest.split_whitespace(),
        path: path.display().to_string(),
    };

    let mut points = Vec::new();
    let mut cells: Vec<[usize; 4]> = Vec::new();
    let mut velocities = Vec::new();
    let mut strains = Vec::new();
    // arrays are sized by the most recent POINT_DATA / CELL_DATA header
    let mut current_data_n = 0usize;

    while let Some(keyword) = t.iter.next() {
        match keyword {
            "POINTS" => {
                let n = t.usize("point count")?;
                let _ty = t.next("point type")?;
                points.reserve(n);
                for _ in 0..n {
                    let x = t.f64("point coordinate")?;
                    let y = t.f64("point coordinate")?;
                    let z = t.f64("point coordinate")?;
                    points.push(Vector3::new(x, y, z));
                }
            }
            "CELLS" => {
                let m = t.usize("cell count")?;
                let _total = t.usize("cell list size")?;
                cells.reserve(m);
                for _ in 0..m {
                    let k = t.usize("cell arity")?;
                    if k != 4 {
                        return Err(t.error(format!("only 4-vertex cells are supported, got {k}")));
                    }
                    let mut c = [0usize; 4];
                    for v in &mut c {
                        *v = t.usize("cell vertex")?;
                    }
                    cells.push(c);
                }
            }
            "CELL_TYPES" => {
                let m = t.usize("cell type count")?;
                for _ in 0..m {
                    let ty = t.usize("cell type")?;
                    if ty != 10 {
                        return Err(
                            t.error(format!("only tetrahedral cells (type 10) are supported, got {ty}"))
                        );
                    }
                }
            }
            "POINT_DATA" => current_data_n = t.usize("point data count")?,
            "CELL_DATA" => current_data_n = t.usize("cell data count")?,
            "VECTORS" => {
                let name = t.next("vector array name")?;
                let _ty = t.next("vector type")?;
                let n = current_data_n;
                let mut vals = Vec::with_capacity(n);
                for _ in 0..n {
                    let x = t.f64("vector component")?;
                    let y = t.f64("vector component")?;
                    let z = t.f64("vector component")?;
                    vals.push(Vector3::new(x, y, z));
                }
                if name == "velocity" {
                    velocities = vals;
                }
            }
            "SCALARS" => {
                let name = t.next("scalar array name")?;
                let _ty = t.next("scalar type")?;
                // optional component count, then the LOOKUP_TABLE pair
                let mut tok = t.next("scalar layout")?;
                if tok != "LOOKUP_TABLE" {
                    tok = t.next("LOOKUP_TABLE")?;
                }
                if tok != "LOOKUP_TABLE" {
                    return Err(t.error(format!("expected LOOKUP_TABLE, got {tok:?}")));
                }
                let _table = t.next("lookup table name")?;
                let n = current_data_n;
                let mut vals = Vec::with_capacity(n);
                for _ in 0..n {
                    vals.push(t.f64("scalar value")?);
                }
                if name == "strain" {
                    strains = vals;
                }
            }
            other => {
                return Err(t.error(format!("unsupported section {other:?}")));
            }
        }
    }
    if !velocities.is_empty() && velocities.len() != points.len() {
        return Err(Error::Parse {
            path: path.display().to_string(),
            message: format!(
                "velocity count {} does not match point count {}",
                velocities.len(),
                points.len()
            ),
        });
    }
    Ok(VtkSnapshot {
        points,
        cells,
        velocities,
        strains,
    })
}

/// Column layout of the diagnostics CSV.
pub const CSV_HEADER: &str =
    "step,time,kinetic,elastic,dissipated,n_constraints,solver_iters,grad_norm,wall_ms";

/// Streaming CSV writer for per-step diagnostics.
pub struct DiagnosticsWriter {
    w: BufWriter<File>,
}

impl DiagnosticsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "{CSV_HEADER}")?;
        w.flush()?;
        Ok(DiagnosticsWriter { w })
    }

    /// Append one row and flush it.
    pub fn write_step(&mut self, d: &StepDiagnostics) -> Result<()> {
        writeln!(
            self.w,
            "{},{},{},{},{},{},{},{},{}",
            d.step,
            d.time,
            d.kinetic_energy,
            d.elastic_energy,
            d.dissipated_energy,
            d.n_constraints,
            d.solver_iterations,
            d.grad_norm,
            d.wall_ms
        )?;
        self.w.flush()?;
        Ok(())
    }
}

/// Streaming CSV writer for the per-iteration solver trace
/// (`step,iteration,cost,grad_norm` rows).
pub struct SolverTraceWriter {
    w: BufWriter<File>,
}

impl SolverTraceWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "step,iteration,cost,grad_norm")?;
        w.flush()?;
        Ok(SolverTraceWriter { w })
    }

    pub fn write_step(&mut self, d: &StepDiagnostics) -> Result<()> {
        for (i, (c, g)) in d.solver_costs.iter().zip(&d.solver_grad_norms).enumerate() {
            writeln!(self.w, "{},{},{},{}", d.step, i, c, g)?;
        }
        self.w.flush()?;
        Ok(())
    }
}
