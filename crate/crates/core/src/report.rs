//! Convergence tables (CSV/JSON) and VTU field output.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use crate::adapt::IterationRecord;
use crate::fespace::FeSpace;
use crate::mesh::QuadMesh;
use crate::{Error, Result};

pub const CSV_HEADER: &str =
    "iter,dofs_primal,dofs_dual,J_uh,err_exact,eta,eta_max,ieff,cells_refined,cells_coarsened,seconds";

/// Convergence history with derived rate columns.
#[derive(Clone, Debug, serde::Serialize)]
pub struct RunReport {
    /// Echo of the resolved run configuration.
    pub config: serde_json::Value,
    pub records: Vec<IterationRecord>,
    /// Rate in mesh size h between consecutive levels
    /// (−2·log error ratio / log dof ratio); `None` where undefined.
    pub rates: Vec<Option<f64>>,
}

impl RunReport {
    pub fn new(config: serde_json::Value, records: Vec<IterationRecord>) -> Self {
        let rates = std::iter::once(None)
            .chain(records.windows(2).map(|w| rate_in_h(&w[0], &w[1])))
            .collect();
        RunReport { config, records, rates }
    }
}

/// Convergence rate in h between two levels: −2·ln(e₂/e₁)/ln(n₂/n₁).
pub fn rate_in_h(a: &IterationRecord, b: &IterationRecord) -> Option<f64> {
    rate_in_dofs(a, b).map(|r| 2.0 * r)
}

/// Convergence rate in dof count: −ln(e₂/e₁)/ln(n₂/n₁); ≈ 1 for an O(h²)
/// method in 2D.
pub fn rate_in_dofs(a: &IterationRecord, b: &IterationRecord) -> Option<f64> {
    let (e1, e2) = (a.err_exact?, b.err_exact?);
    if e1 <= 0.0 || e2 <= 0.0 || a.dofs_primal == b.dofs_primal {
        return None;
    }
    let ratio = (e2 / e1).ln() / (b.dofs_primal as f64 / a.dofs_primal as f64).ln();
    Some(-ratio)
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.12e}"),
        None => String::new(),
    }
}

fn fmt_opt_usize(v: Option<usize>) -> String {
    match v {
        Some(x) => x.to_string(),
        None => String::new(),
    }
}

/// Writes the iteration history as CSV (one row per iteration).
pub fn write_csv(records: &[IterationRecord], path: &Path) -> Result<()> {
    let mut text = String::new();
    text.push_str(CSV_HEADER);
    text.push('\n');
    for r in records {
        let _ = writeln!(
            text,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.iteration,
            r.dofs_primal,
            fmt_opt_usize(r.dofs_dual),
            fmt_opt(r.j_uh),
            fmt_opt(r.err_exact),
            fmt_opt(r.eta),
            fmt_opt(r.eta_max),
            fmt_opt(r.ieff),
            r.cells_refined,
            r.cells_coarsened,
            fmt_opt(r.seconds),
        );
    }
    std::fs::write(path, text).map_err(Error::io(path.display().to_string()))
}

/// Parses a CSV written by [`write_csv`].
pub fn read_csv(path: &Path) -> Result<Vec<IterationRecord>> {
    let text =
        std::fs::read_to_string(path).map_err(Error::io(path.display().to_string()))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == CSV_HEADER => {}
        other => {
            return Err(Error::InvalidArgument(format!(
                "unexpected CSV header in {}: {:?}",
                path.display(),
                other
            )))
        }
    }
    let parse_f = |s: &str| -> Result<Option<f64>> {
        if s.is_empty() {
            Ok(None)
        } else {
            s.parse().map(Some).map_err(|e| {
                Error::InvalidArgument(format!("bad float field {s:?}: {e}"))
            })
        }
    };
    let parse_u = |s: &str| -> Result<usize> {
        s.parse()
            .map_err(|e| Error::InvalidArgument(format!("bad integer field {s:?}: {e}")))
    };
    let mut out = Vec::new();
    for line in lines {
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 11 {
            return Err(Error::InvalidArgument(format!(
                "expected 11 CSV fields, got {}: {line:?}",
                f.len()
            )));
        }
        out.push(IterationRecord {
            iteration: parse_u(f[0])?,
            dofs_primal: parse_u(f[1])?,
            dofs_dual: if f[2].is_empty() { None } else { Some(parse_u(f[2])?) },
            j_uh: parse_f(f[3])?,
            err_exact: parse_f(f[4])?,
            eta: parse_f(f[5])?,
            eta_max: parse_f(f[6])?,
            ieff: parse_f(f[7])?,
            cells_refined: parse_u(f[8])?,
            cells_coarsened: parse_u(f[9])?,
            seconds: parse_f(f[10])?,
        });
    }
    Ok(out)
}

/// Writes the full report (config echo, records, rates) as JSON.
pub fn write_json(report: &RunReport, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(report)
        .map_err(|e| Error::InvalidArgument(format!("report serialization failed: {e}")))?;
    std::fs::write(path, text).map_err(Error::io(path.display().to_string()))
}

/// Nodal field values at the four corners of every active cell, in VTK quad
/// order (x0y0, x1y0, x1y1, x0y1).
pub fn sample_corners(space: &FeSpace, coeffs: &[f64]) -> Vec<[f64; 4]> {
    const CORNERS: [[f64; 2]; 4] = [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]];
    (0..space.mesh.n_active())
        .map(|pos| {
            let mut vals = [0.0; 4];
            for (k, c) in CORNERS.iter().enumerate() {
                vals[k] = space.evaluate_field(coeffs, pos, *c).value;
            }
            vals
        })
        .collect()
}

/// Writes an XML VTU file with one quadrilateral per active cell (corner
/// point data per field, cell data per indicator field).
pub fn write_vtu(
    mesh: &QuadMesh,
    point_fields: &[(String, Vec<[f64; 4]>)],
    cell_fields: &[(String, Vec<f64>)],
    path: &Path,
) -> Result<()> {
    write_vtu_impl(mesh, point_fields, cell_fields, false, path)
}

/// As [`write_vtu`], but each active cell is split once into 2×2 output
/// quads; `point_fields` must hold 4 sub-quads of corner values per cell in
/// quadrant order. Used for higher-order solution snapshots.
pub fn write_vtu_subdivided(
    mesh: &QuadMesh,
    point_fields: &[(String, Vec<[f64; 4]>)],
    cell_fields: &[(String, Vec<f64>)],
    path: &Path,
) -> Result<()> {
    write_vtu_impl(mesh, point_fields, cell_fields, true, path)
}

/// Corner samples per output sub-quad for the subdivided writer: 4 entries
/// per active cell, quadrant order (q & 1 → x half, q >> 1 → y half).
pub fn sample_corners_subdivided(space: &FeSpace, coeffs: &[f64]) -> Vec<[f64; 4]> {
    let mut out = Vec::with_capacity(4 * space.mesh.n_active());
    for pos in 0..space.mesh.n_active() {
        for q in 0..4 {
            let ox = 0.5 * (q & 1) as f64;
            let oy = 0.5 * (q >> 1) as f64;
            let corners =
                [[ox, oy], [ox + 0.5, oy], [ox + 0.5, oy + 0.5], [ox, oy + 0.5]];
            let mut vals = [0.0; 4];
            for (k, c) in corners.iter().enumerate() {
                vals[k] = space.evaluate_field(coeffs, pos, *c).value;
            }
            out.push(vals);
        }
    }
    out
}

fn write_vtu_impl(
    mesh: &QuadMesh,
    point_fields: &[(String, Vec<[f64; 4]>)],
    cell_fields: &[(String, Vec<f64>)],
    subdivided: bool,
    path: &Path,
) -> Result<()> {
    let per_cell = if subdivided { 4 } else { 1 };
    let n_cells = mesh.n_active() * per_cell;
    let n_points = 4 * n_cells;
    for (name, data) in point_fields {
        if data.len() != n_cells {
            return Err(Error::InvalidArgument(format!(
                "point field {name:?} has {} quads, expected {n_cells}",
                data.len()
            )));
        }
    }
    for (name, data) in cell_fields {
        if data.len() != mesh.n_active() {
            return Err(Error::InvalidArgument(format!(
                "cell field {name:?} has {} values, expected {}",
                data.len(),
                mesh.n_active()
            )));
        }
    }

    let mut xml = String::new();
    xml.push_str("<?xml version=\"1.0\"?>\n");
    xml.push_str(
        "<VTKFile type=\"UnstructuredGrid\" version=\"0.1\" byte_order=\"LittleEndian\">\n",
    );
    xml.push_str("  <UnstructuredGrid>\n");
    let _ = writeln!(
        xml,
        "    <Piece NumberOfPoints=\"{n_points}\" NumberOfCells=\"{n_cells}\">"
    );

    xml.push_str("      <Points>\n");
    xml.push_str(
        "        <DataArray type=\"Float64\" NumberOfComponents=\"3\" format=\"ascii\">\n",
    );
    for &id in mesh.active_cells() {
        let r = mesh.cell_rect(id);
        let sub_rects: Vec<crate::mesh::Rect> = if subdivided {
            (0..4).map(|q| r.quadrant(q)).collect()
        } else {
            vec![r]
        };
        for sr in sub_rects {
            let corners =
                [(sr.x0, sr.y0), (sr.x1, sr.y0), (sr.x1, sr.y1), (sr.x0, sr.y1)];
            for (x, y) in corners {
                let _ = writeln!(xml, "          {x:.16e} {y:.16e} 0");
            }
        }
    }
    xml.push_str("        </DataArray>\n      </Points>\n");

    xml.push_str("      <Cells>\n");
    xml.push_str("        <DataArray type=\"Int64\" Name=\"connectivity\" format=\"ascii\">\n");
    for c in 0..n_cells {
        let base = 4 * c;
        let _ = writeln!(xml, "          {} {} {} {}", base, base + 1, base + 2, base + 3);
    }
    xml.push_str("        </DataArray>\n");
    xml.push_str("        <DataArray type=\"Int64\" Name=\"offsets\" format=\"ascii\">\n");
    for c in 0..n_cells {
        let _ = writeln!(xml, "          {}", 4 * (c + 1));
    }
    xml.push_str("        </DataArray>\n");
    xml.push_str("        <DataArray type=\"UInt8\" Name=\"types\" format=\"ascii\">\n");
    for _ in 0..n_cells {
        xml.push_str("          9\n");
    }
    xml.push_str("        </DataArray>\n      </Cells>\n");

    xml.push_str("      <PointData>\n");
    for (name, data) in point_fields {
        let _ = writeln!(
            xml,
            "        <DataArray type=\"Float64\" Name=\"{name}\" format=\"ascii\">"
        );
        for quad in data {
            for v in quad {
                let _ = writeln!(xml, "          {v:.16e}");
            }
        }
        xml.push_str("        </DataArray>\n");
    }
    xml.push_str("      </PointData>\n");

    xml.push_str("      <CellData>\n");
    for (name, data) in cell_fields {
        let _ = writeln!(
            xml,
            "        <DataArray type=\"Float64\" Name=\"{name}\" format=\"ascii\">"
        );
        for v in data {
            for _ in 0..per_cell {
                let _ = writeln!(xml, "          {v:.16e}");
            }
        }
        xml.push_str("        </DataArray>\n");
    }
    xml.push_str("      </CellData>\n");

    xml.push_str("    </Piece>\n  </UnstructuredGrid>\n</VTKFile>\n");

    let mut file = std::io::BufWriter::new(
        std::fs::File::create(path).map_err(Error::io(path.display().to_string()))?,
    );
    file.write_all(xml.as_bytes())
        .map_err(Error::io(path.display().to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fespace::build_space;
    use crate::mesh::{MarkSet, Rect};
    use std::sync::Arc;

    fn record(i: usize, dofs: usize, err: Option<f64>) -> IterationRecord {
        IterationRecord {
            iteration: i,
            dofs_primal: dofs,
            dofs_dual: Some(2 * dofs),
            j_uh: Some(0.123456789012345),
            err_exact: err,
            eta: Some(-1.5e-4),
            eta_max: Some(3.0e-5),
            ieff: err.map(|_| 1.01),
            cells_refined: 7,
            cells_coarsened: 1,
            seconds: None,
        }
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.csv");
        let records =
            vec![record(0, 81, Some(2.86363e-1)), record(1, 289, Some(1.43181e-1))];
        write_csv(&records, &path).unwrap();
        let parsed = read_csv(&path).unwrap();
        assert_eq!(parsed.len(), 2);
        for (a, b) in records.iter().zip(&parsed) {
            assert_eq!(a.iteration, b.iteration);
            assert_eq!(a.dofs_primal, b.dofs_primal);
            assert_eq!(a.dofs_dual, b.dofs_dual);
            let close = |x: Option<f64>, y: Option<f64>| match (x, y) {
                (None, None) => true,
                (Some(x), Some(y)) => (x - y).abs() <= 1e-12 * x.abs().max(1.0),
                _ => false,
            };
            assert!(close(a.j_uh, b.j_uh));
            assert!(close(a.err_exact, b.err_exact));
            assert!(close(a.eta, b.eta));
            assert!(close(a.ieff, b.ieff));
            assert!(a.seconds.is_none() && b.seconds.is_none());
        }
    }

    #[test]
    fn csv_empty_run_and_missing_optionals() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.csv");
        write_csv(&[], &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, format!("{CSV_HEADER}\n"));

        let path = dir.path().join("noerr.csv");
        write_csv(&[record(0, 81, None)], &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let row = text.lines().nth(1).unwrap();
        let fields: Vec<&str> = row.split(',').collect();
        assert_eq!(fields[4], "");
        assert_eq!(fields[7], "", "ieff must be empty when the exact error is absent");
        let parsed = read_csv(&path).unwrap();
        assert!(parsed[0].err_exact.is_none() && parsed[0].ieff.is_none());
    }

    #[test]
    fn rates() {
        // err ~ dofs^-1 <=> rate 1 in dofs, 2 in h.
        let a = record(0, 100, Some(1.0e-2));
        let b = record(1, 400, Some(2.5e-3));
        assert!((rate_in_dofs(&a, &b).unwrap() - 1.0).abs() < 1e-12);
        assert!((rate_in_h(&a, &b).unwrap() - 2.0).abs() < 1e-12);
        let c = record(2, 400, None);
        assert!(rate_in_dofs(&b, &c).is_none());
        let report = RunReport::new(serde_json::json!({}), vec![a, b]);
        assert_eq!(report.rates.len(), 2);
        assert!(report.rates[0].is_none());
        assert!(report.rates[1].is_some());
    }

    #[test]
    fn vtu_single_cell_constant() {
        let mesh = QuadMesh::new_uniform(Rect::new(0.0, 0.0, 1.0, 1.0), 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("one.vtu");
        write_vtu(
            &mesh,
            &[("u".into(), vec![[1.0; 4]])],
            &[("eta".into(), vec![0.0])],
            &path,
        )
        .unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("NumberOfPoints=\"4\""));
        assert!(text.contains("NumberOfCells=\"1\""));
        assert!(text.contains("Name=\"u\""));
    }

    fn parse_data_array(text: &str, name: &str) -> Vec<f64> {
        let marker = format!("Name=\"{name}\"");
        let start = text.find(&marker).unwrap();
        let body_start = text[start..].find('>').unwrap() + start + 1;
        let body_end = text[body_start..].find("</DataArray>").unwrap() + body_start;
        text[body_start..body_end]
            .split_whitespace()
            .map(|t| t.parse().unwrap())
            .collect()
    }

    #[test]
    fn vtu_cell_data_round_trip_on_hanging_mesh() {
        let mesh = QuadMesh::new_uniform(Rect::new(0.0, 0.0, 1.0, 1.0), 2).unwrap();
        let marks = MarkSet { refine: [0].into_iter().collect(), coarsen: Default::default() };
        let (mesh, _) = mesh.refine_and_coarsen(&marks).unwrap();
        assert_eq!(mesh.n_active(), 7);
        let mesh = Arc::new(mesh);
        let space = build_space(mesh.clone(), 1);
        let coeffs: Vec<f64> =
            (0..space.n_nodes()).map(|n| space.node_coords()[n][0]).collect();
        let corners = sample_corners(&space, &coeffs);
        let eta: Vec<f64> = (0..7).map(|i| (i as f64) * 0.125 - 0.3).collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("seven.vtu");
        write_vtu(&mesh, &[("u".into(), corners)], &[("eta".into(), eta.clone())], &path)
            .unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("NumberOfCells=\"7\""));
        let parsed = parse_data_array(&text, "eta");
        assert_eq!(parsed.len(), 7);
        for (a, b) in eta.iter().zip(&parsed) {
            assert!((a - b).abs() < 1e-12);
        }
        // Point data: u = x at every written corner.
        let pu = parse_data_array(&text, "u");
        assert_eq!(pu.len(), 28);
    }

    #[test]
    fn vtu_subdivided_quad_counts() {
        let mesh = Arc::new(QuadMesh::new_uniform(Rect::new(0.0, 0.0, 1.0, 1.0), 2).unwrap());
        let space = build_space(mesh.clone(), 2);
        let coeffs: Vec<f64> =
            (0..space.n_nodes()).map(|n| space.node_coords()[n][1]).collect();
        let corners = sample_corners_subdivided(&space, &coeffs);
        assert_eq!(corners.len(), 16);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub.vtu");
        write_vtu_subdivided(
            &mesh,
            &[("u".into(), corners)],
            &[("eta".into(), vec![1.0; 4])],
            &path,
        )
        .unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("NumberOfCells=\"16\""));
    }

    #[test]
    fn vtu_field_length_mismatch_rejected() {
        let mesh = QuadMesh::new_uniform(Rect::new(0.0, 0.0, 1.0, 1.0), 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.vtu");
        assert!(write_vtu(&mesh, &[("u".into(), vec![[0.0; 4]; 3])], &[], &path).is_err());
    }
}
