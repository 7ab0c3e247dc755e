//! Deterministic CSV tables and legacy VTK snapshots.
//!
//! Every number is written with 17 significant digits (`{:.16e}`), so files
//! are loss-free and byte-identical across reruns on one platform. The CSV
//! formats come with readers that invert the writers exactly; VTK is
//! write-only and targets stock viewers.

use std::path::Path;

use crate::assembly::{FEFunction, Space};
use crate::mesh::MovedMesh;
use crate::timestepper::StepDiagnostics;
use crate::verification::{ErrorReport, ErrorRow};
use crate::{Error, Result};

/// Header of the study table; the column order is part of the interface.
pub const ERRORS_HEADER: &str = "tau,l2_error,h1_error,order_l2,order_h1,runtime_s";

/// Header of the per-step diagnostics table.
pub const DIAGNOSTICS_HEADER: &str =
    "step,t,solver_iterations,solver_residual,divergence_residual,kinetic_energy,mean_multiplier";

/// First line of every VTK snapshot.
pub const VTK_HEADER: &str = "# vtk DataFile Version 3.0";

fn num(v: f64) -> String {
    format!("{v:.16e}")
}

/// Render a convergence report as CSV. Each row carries the order fitted
/// against the previous row; the first row has no predecessor and gets NaN.
pub fn errors_csv(report: &ErrorReport) -> String {
    let mut s = String::with_capacity(128 * (report.rows.len() + 1));
    s.push_str(ERRORS_HEADER);
    s.push('\n');
    for (i, row) in report.rows.iter().enumerate() {
        let order_l2 = if i == 0 { f64::NAN } else { report.orders_l2[i - 1] };
        let order_h1 = if i == 0 { f64::NAN } else { report.orders_h1[i - 1] };
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            num(row.tau),
            num(row.l2_error),
            num(row.h1_error),
            num(order_l2),
            num(order_h1),
            num(row.runtime_s),
        ));
    }
    s
}

/// Parse an `errors.csv` body back into rows and order columns (NaN for the
/// first row's orders, as written).
pub fn read_errors_csv(text: &str) -> Result<(Vec<ErrorRow>, Vec<f64>, Vec<f64>)> {
    let mut lines = text.lines();
    expect_header(lines.next(), ERRORS_HEADER)?;
    let mut rows = Vec::new();
    let mut orders_l2 = Vec::new();
    let mut orders_h1 = Vec::new();
    for (i, line) in lines.enumerate() {
        let f = split_row(line, 6, i + 2)?;
        rows.push(ErrorRow {
            tau: parse_field(f[0], i + 2)?,
            l2_error: parse_field(f[1], i + 2)?,
            h1_error: parse_field(f[2], i + 2)?,
            runtime_s: parse_field(f[5], i + 2)?,
        });
        if i > 0 {
            orders_l2.push(parse_field(f[3], i + 2)?);
            orders_h1.push(parse_field(f[4], i + 2)?);
        }
    }
    Ok((rows, orders_l2, orders_h1))
}

/// Render per-step diagnostics as CSV.
pub fn diagnostics_csv(diagnostics: &[StepDiagnostics]) -> String {
    let mut s = String::with_capacity(128 * (diagnostics.len() + 1));
    s.push_str(DIAGNOSTICS_HEADER);
    s.push('\n');
    for d in diagnostics {
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            d.step,
            num(d.t),
            d.solver_iterations,
            num(d.solver_residual),
            num(d.divergence_residual),
            num(d.kinetic_energy),
            num(d.mean_multiplier),
        ));
    }
    s
}

/// Parse a `diagnostics.csv` body back into step records.
pub fn read_diagnostics_csv(text: &str) -> Result<Vec<StepDiagnostics>> {
    let mut lines = text.lines();
    expect_header(lines.next(), DIAGNOSTICS_HEADER)?;
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let f = split_row(line, 7, i + 2)?;
        let integer = |tok: &str| -> Result<usize> {
            tok.parse().map_err(|_| {
                Error::InvalidInput(format!("csv line {}: expected an integer, got '{tok}'", i + 2))
            })
        };
        out.push(StepDiagnostics {
            step: integer(f[0])?,
            t: parse_field(f[1], i + 2)?,
            solver_iterations: integer(f[2])?,
            solver_residual: parse_field(f[3], i + 2)?,
            divergence_residual: parse_field(f[4], i + 2)?,
            kinetic_energy: parse_field(f[5], i + 2)?,
            mean_multiplier: parse_field(f[6], i + 2)?,
        });
    }
    Ok(out)
}

fn expect_header(line: Option<&str>, want: &str) -> Result<()> {
    match line {
        Some(got) if got == want => Ok(()),
        Some(got) => Err(Error::InvalidInput(format!(
            "csv header mismatch: expected '{want}', got '{got}'"
        ))),
        None => Err(Error::InvalidInput("empty csv document".into())),
    }
}

fn split_row(line: &str, want: usize, lineno: usize) -> Result<Vec<&str>> {
    let fields: Vec<&str> = line.split(',').collect();
    if fields.len() != want {
        return Err(Error::InvalidInput(format!(
            "csv line {lineno}: expected {want} fields, got {}",
            fields.len()
        )));
    }
    Ok(fields)
}

fn parse_field(tok: &str, lineno: usize) -> Result<f64> {
    tok.parse().map_err(|_| {
        Error::InvalidInput(format!("csv line {lineno}: expected a number, got '{tok}'"))
    })
}

/// Render a legacy ASCII VTK unstructured-grid snapshot of the moved mesh.
///
/// `fields` may hold at most one velocity and one pressure function, both
/// living on `mesh`; velocity is written as point vectors, pressure as point
/// scalars (quadratic velocity and linear pressure restrict to vertex values
/// directly). An empty list gives a geometry-only file.
pub fn vtk_snapshot(mesh: &MovedMesh, fields: &[&FEFunction]) -> Result<String> {
    let nv = mesh.vertices.len();
    let mut velocity = None;
    let mut pressure = None;
    for f in fields {
        if f.mesh_id != mesh.base.id() {
            return Err(Error::InvalidInput(
                "vtk export: field lives on a different mesh".into(),
            ));
        }
        if (f.t - mesh.t).abs() > 1e-12 * (1.0 + mesh.t.abs()) {
            return Err(Error::InvalidInput(format!(
                "vtk export: field at t = {} on a mesh at t = {}",
                f.t, mesh.t
            )));
        }
        let slot = match f.space {
            Space::Velocity => &mut velocity,
            Space::Pressure => &mut pressure,
        };
        if slot.replace(*f).is_some() {
            return Err(Error::InvalidInput(
                "vtk export: more than one field of the same kind".into(),
            ));
        }
    }

    let mut s = String::new();
    s.push_str(VTK_HEADER);
    s.push('\n');
    s.push_str(&format!("moving-domain snapshot at t = {:?}\n", mesh.t));
    s.push_str("ASCII\nDATASET UNSTRUCTURED_GRID\n");
    s.push_str(&format!("POINTS {nv} double\n"));
    for v in &mesh.vertices {
        s.push_str(&format!("{} {} 0.0\n", num(v.x), num(v.y)));
    }
    let nt = mesh.base.triangles.len();
    s.push_str(&format!("CELLS {nt} {}\n", 4 * nt));
    for tri in &mesh.base.triangles {
        s.push_str(&format!("3 {} {} {}\n", tri[0], tri[1], tri[2]));
    }
    s.push_str(&format!("CELL_TYPES {nt}\n"));
    for _ in 0..nt {
        s.push_str("5\n");
    }
    if velocity.is_some() || pressure.is_some() {
        s.push_str(&format!("POINT_DATA {nv}\n"));
    }
    if let Some(u) = velocity {
        s.push_str("VECTORS velocity double\n");
        for i in 0..nv {
            s.push_str(&format!("{} {} 0.0\n", num(u.dofs[2 * i]), num(u.dofs[2 * i + 1])));
        }
    }
    if let Some(p) = pressure {
        s.push_str("SCALARS pressure double 1\nLOOKUP_TABLE default\n");
        for i in 0..nv {
            s.push_str(&format!("{}\n", num(p.dofs[i])));
        }
    }
    Ok(s)
}

/// Write text to a file, naming the path on failure.
pub fn write_text(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|source| Error::Write {
        path: path.display().to_string(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flowmap::VelocityField;
    use crate::mesh::{build_disk_mesh, move_mesh};
    use crate::transforms::PointwiseField;
    use crate::Vec2;
    use std::sync::Arc;

    fn report() -> ErrorReport {
        ErrorReport {
            description: "table test".into(),
            rows: vec![
                ErrorRow { tau: 0.1, l2_error: 2e-2, h1_error: 9e-2, runtime_s: 0.5 },
                ErrorRow { tau: 0.05, l2_error: 1e-2, h1_error: 5e-2, runtime_s: 1.0 },
            ],
            orders_l2: vec![1.0],
            orders_h1: vec![0.848],
            spatial_floor_l2: 1e-4,
            spatial_floor_h1: 1e-3,
            valid: true,
        }
    }

    #[test]
    fn errors_csv_round_trips_bytewise() {
        let csv = errors_csv(&report());
        assert!(csv.starts_with(ERRORS_HEADER));
        let (rows, ol2, oh1) = read_errors_csv(&csv).unwrap();
        let again = errors_csv(&ErrorReport {
            rows,
            orders_l2: ol2,
            orders_h1: oh1,
            ..report()
        });
        assert_eq!(csv, again);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[1].contains("NaN"), "first row has no order: {}", lines[1]);
    }

    #[test]
    fn diagnostics_csv_round_trips_bytewise() {
        let diags = vec![
            StepDiagnostics {
                step: 1,
                t: 0.1,
                solver_iterations: 1,
                solver_residual: 3.2e-15,
                divergence_residual: 4.1e-13,
                kinetic_energy: 0.25,
                mean_multiplier: -1.9e-17,
            },
            StepDiagnostics {
                step: 2,
                t: 0.2,
                solver_iterations: 1,
                solver_residual: 2.9e-15,
                divergence_residual: 3.8e-13,
                kinetic_energy: 0.21,
                mean_multiplier: 2.2e-17,
            },
        ];
        let csv = diagnostics_csv(&diags);
        let back = read_diagnostics_csv(&csv).unwrap();
        assert_eq!(csv, diagnostics_csv(&back));
    }

    #[test]
    fn csv_headers_are_enforced_on_read() {
        let err = read_errors_csv("tau,l2\n").unwrap_err();
        assert!(err.to_string().contains("header mismatch"), "{err}");
        let err = read_diagnostics_csv("").unwrap_err();
        assert!(err.to_string().contains("empty"), "{err}");
        let bad = format!("{ERRORS_HEADER}\n1,2,3\n");
        let err = read_errors_csv(&bad).unwrap_err();
        assert!(err.to_string().contains("expected 6 fields"), "{err}");
    }

    #[test]
    fn vtk_snapshot_has_exact_header_and_counts() {
        let base = Arc::new(build_disk_mesh(0.4).unwrap());
        let mesh =
            move_mesh(base.clone(), &VelocityField::rigid_rotation(0.5), 0.3, 30, 2.0).unwrap();
        let exact = PointwiseField::new(mesh.t, |x| Ok(Vec2::new(x.y, -x.x)));
        let u = FEFunction::interpolate_velocity(&mesh, &exact).unwrap();
        let p = FEFunction::zero_pressure(&mesh);
        let vtk = vtk_snapshot(&mesh, &[&u, &p]).unwrap();

        let lines: Vec<&str> = vtk.lines().collect();
        assert_eq!(lines[0], "# vtk DataFile Version 3.0");
        assert_eq!(lines[2], "ASCII");
        assert_eq!(lines[3], "DATASET UNSTRUCTURED_GRID");
        let nv = mesh.vertices.len();
        assert_eq!(lines[4], format!("POINTS {nv} double"));
        let cells_at = 5 + nv;
        let nt = base.triangles.len();
        assert_eq!(lines[cells_at], format!("CELLS {nt} {}", 4 * nt));
        assert!(vtk.contains(&format!("POINT_DATA {nv}\nVECTORS velocity double\n")));
        assert!(vtk.contains("SCALARS pressure double 1\nLOOKUP_TABLE default\n"));

        // Moved vertex coordinates, not reference ones.
        let first = lines[5].split(' ').collect::<Vec<_>>();
        assert_eq!(first.len(), 3);
        let x: f64 = first[0].parse().unwrap();
        let y: f64 = first[1].parse().unwrap();
        assert!((x - mesh.vertices[0].x).abs() < 1e-15);
        assert!((y - mesh.vertices[0].y).abs() < 1e-15);
        assert_eq!(first[2], "0.0");

        // Determinism and the geometry-only variant.
        assert_eq!(vtk, vtk_snapshot(&mesh, &[&u, &p]).unwrap());
        let bare = vtk_snapshot(&mesh, &[]).unwrap();
        assert!(!bare.contains("POINT_DATA"));
        assert!(bare.lines().count() >= 5 + nv + 1 + nt + 1 + nt);
    }

    #[test]
    fn vtk_snapshot_rejects_mismatched_fields() {
        let base = Arc::new(build_disk_mesh(0.5).unwrap());
        let mesh = MovedMesh::at_rest(base.clone());
        let other = Arc::new(build_disk_mesh(0.5).unwrap());
        let stray = FEFunction::zero_pressure(&MovedMesh::at_rest(other));
        let err = vtk_snapshot(&mesh, &[&stray]).unwrap_err();
        assert!(err.to_string().contains("different mesh"), "{err}");

        let p1 = FEFunction::zero_pressure(&mesh);
        let p2 = FEFunction::zero_pressure(&mesh);
        let err = vtk_snapshot(&mesh, &[&p1, &p2]).unwrap_err();
        assert!(err.to_string().contains("more than one"), "{err}");
    }

    #[test]
    fn write_text_names_the_path_on_failure() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("no-such-dir").join("x.csv");
        let err = write_text(&path, "data").unwrap_err();
        assert!(err.to_string().contains("no-such-dir"), "{err}");
        let ok = dir.path().join("x.csv");
        write_text(&ok, "data").unwrap();
        assert_eq!(std::fs::read_to_string(&ok).unwrap(), "data");
    }
}
