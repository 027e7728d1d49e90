//! Lagrange Q_p finite element spaces on the quadrilateral mesh.
//!
//! Nodes are tensor-product equispaced Lagrange points. Global continuity is
//! maintained through hanging-node constraints: the unknown at a hanging node
//! is expressed as the coarse-side trace polynomial evaluated at its
//! location. Node positions on shared edges are generated bitwise-identically
//! from both sides (bisection midpoints where possible) so they can be keyed
//! by their coordinate bits.

use std::collections::HashMap;
use std::sync::Arc;

use crate::mesh::{QuadMesh, Rect, Side, SIDES};
use crate::{Error, Result};

/// Tensor Gauss-Legendre quadrature on the reference square [0,1]^2.
#[derive(Clone, Debug)]
pub struct QuadratureRule {
    pub points_1d: Vec<f64>,
    pub weights_1d: Vec<f64>,
    pub points: Vec<[f64; 2]>,
    pub weights: Vec<f64>,
}

/// Gauss-Legendre nodes and weights on [0,1], computed by Newton iteration
/// on the Legendre polynomial.
pub fn gauss_legendre_1d(q: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(q >= 1);
    let n = q;
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n {
        // Initial guess on (-1,1).
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        for _ in 0..100 {
            // Legendre P_n and derivative by recurrence.
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        let (mut p0, mut p1) = (1.0, x);
        for k in 2..=n {
            let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
            p0 = p1;
            p1 = p2;
        }
        let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        // Map from (-1,1) to (0,1); reverse so nodes ascend.
        nodes[n - 1 - i] = 0.5 * (x + 1.0);
        weights[n - 1 - i] = 0.5 * w;
    }
    if n == 1 {
        nodes[0] = 0.5;
        weights[0] = 1.0;
    }
    (nodes, weights)
}

/// Tensor Gauss-Legendre rule with `q` points per axis.
pub fn make_quadrature(q: usize) -> QuadratureRule {
    let (points_1d, weights_1d) = gauss_legendre_1d(q);
    let mut points = Vec::with_capacity(q * q);
    let mut weights = Vec::with_capacity(q * q);
    for j in 0..q {
        for i in 0..q {
            points.push([points_1d[i], points_1d[j]]);
            weights.push(weights_1d[i] * weights_1d[j]);
        }
    }
    QuadratureRule { points_1d, weights_1d, points, weights }
}

/// Value and reference derivatives of one shape function at one point.
#[derive(Clone, Copy, Debug, Default)]
pub struct ShapeValue {
    pub value: f64,
    /// d/dx̂1, d/dx̂2
    pub grad: [f64; 2],
    /// d²/dx̂1², d²/dx̂2², d²/dx̂1dx̂2
    pub hess: [f64; 3],
}

/// 1D Lagrange basis on a given node set, evaluated with first and second
/// derivatives by incremental products.
#[derive(Clone, Debug)]
struct Lagrange1d {
    nodes: Vec<f64>,
}

impl Lagrange1d {
    fn new(nodes: Vec<f64>) -> Self {
        Lagrange1d { nodes }
    }

    /// (value, d/dt, d²/dt²) of basis `i` at `t`.
    fn eval(&self, i: usize, t: f64) -> (f64, f64, f64) {
        let ti = self.nodes[i];
        let (mut v, mut d1, mut d2) = (1.0, 0.0, 0.0);
        for (k, &tk) in self.nodes.iter().enumerate() {
            if k == i {
                continue;
            }
            let inv = 1.0 / (ti - tk);
            let f = (t - tk) * inv;
            // (v, v', v'') <- (v*f, v'*f + v*f', v''*f + 2 v'*f')
            d2 = d2 * f + 2.0 * d1 * inv;
            d1 = d1 * f + v * inv;
            v *= f;
        }
        (v, d1, d2)
    }
}

/// Reference Q_p element on [0,1]^2 with tensor equispaced Lagrange nodes.
#[derive(Clone, Debug)]
pub struct ReferenceElement {
    pub degree: usize,
    basis_1d: Lagrange1d,
}

impl ReferenceElement {
    pub fn new(degree: usize) -> Self {
        assert!(degree >= 1, "degree must be at least 1");
        let p = degree;
        let nodes = (0..=p).map(|i| i as f64 / p as f64).collect();
        ReferenceElement { degree, basis_1d: Lagrange1d::new(nodes) }
    }

    pub fn n_nodes(&self) -> usize {
        (self.degree + 1) * (self.degree + 1)
    }

    /// Reference coordinates of local node `i` (lexicographic x-fastest).
    pub fn node_ref_coords(&self, i: usize) -> [f64; 2] {
        let p = self.degree;
        let (ix, iy) = (i % (p + 1), i / (p + 1));
        [ix as f64 / p as f64, iy as f64 / p as f64]
    }

    /// Value and reference derivatives of shape function `i` at `xhat`.
    pub fn shape_eval(&self, i: usize, xhat: [f64; 2]) -> Result<ShapeValue> {
        if i >= self.n_nodes() {
            return Err(Error::InvalidArgument(format!(
                "shape index {i} out of range for degree {}",
                self.degree
            )));
        }
        let p = self.degree;
        let (ix, iy) = (i % (p + 1), i / (p + 1));
        let (vx, dx, dxx) = self.basis_1d.eval(ix, xhat[0]);
        let (vy, dy, dyy) = self.basis_1d.eval(iy, xhat[1]);
        Ok(ShapeValue {
            value: vx * vy,
            grad: [dx * vy, vx * dy],
            hess: [dxx * vy, vx * dyy, dx * dy],
        })
    }

    /// All shape values at one point.
    pub fn eval_all(&self, xhat: [f64; 2]) -> Vec<ShapeValue> {
        (0..self.n_nodes()).map(|i| self.shape_eval(i, xhat).unwrap()).collect()
    }

    /// 1D edge basis values at parameter `t` (used for hanging constraints
    /// and edge traces).
    pub fn edge_basis_values(&self, t: f64) -> Vec<f64> {
        (0..=self.degree).map(|i| self.basis_1d.eval(i, t).0).collect()
    }
}

/// Equispaced node coordinates along one axis of a cell, generated so that
/// nodes shared between neighboring cells agree bitwise: even degrees are
/// produced by recursive bisection with midpoints `0.5 * (lo + hi)`.
fn axis_nodes(lo: f64, hi: f64, p: usize) -> Vec<f64> {
    if p % 2 == 0 && p >= 2 {
        let m = 0.5 * (lo + hi);
        let left = axis_nodes(lo, m, p / 2);
        let right = axis_nodes(m, hi, p / 2);
        let mut out = left;
        out.extend_from_slice(&right[1..]);
        out
    } else {
        (0..=p)
            .map(|i| {
                if i == 0 {
                    lo
                } else if i == p {
                    hi
                } else {
                    lo + (hi - lo) * i as f64 / p as f64
                }
            })
            .collect()
    }
}

type NodeKey = (u64, u64);

fn node_key(x: f64, y: f64) -> NodeKey {
    (x.to_bits(), y.to_bits())
}

/// Lagrange Q_p space on a mesh: dof map, hanging-node constraints, and
/// boundary classification. Coefficient vectors have one entry per node
/// (including constrained nodes, whose entries hold the resolved values).
#[derive(Clone, Debug)]
pub struct FeSpace {
    pub mesh: Arc<QuadMesh>,
    pub degree: usize,
    pub elem: ReferenceElement,
    /// Per active cell position: (p+1)^2 global node ids, lexicographic.
    cell_nodes: Vec<Vec<usize>>,
    node_coords: Vec<[f64; 2]>,
    /// Hanging constraints resolved to unconstrained master nodes.
    hanging: Vec<Option<Vec<(usize, f64)>>>,
    /// Domain sides each node lies on (empty for interior nodes).
    node_boundary: Vec<Vec<Side>>,
}

impl FeSpace {
    /// Number of global nodes (the reported dof count; constrained hanging
    /// nodes included).
    pub fn n_nodes(&self) -> usize {
        self.node_coords.len()
    }

    pub fn n_constrained(&self) -> usize {
        self.hanging.iter().filter(|h| h.is_some()).count()
    }

    pub fn node_coords(&self) -> &[[f64; 2]] {
        &self.node_coords
    }

    pub fn cell_node_ids(&self, active_pos: usize) -> &[usize] {
        &self.cell_nodes[active_pos]
    }

    pub fn hanging_constraint(&self, node: usize) -> Option<&[(usize, f64)]> {
        self.hanging[node].as_deref()
    }

    pub fn is_constrained(&self, node: usize) -> bool {
        self.hanging[node].is_some()
    }

    pub fn node_boundary_sides(&self, node: usize) -> &[Side] {
        &self.node_boundary[node]
    }

    /// Overwrites constrained entries with the values implied by their
    /// masters, making the nodal vector conforming.
    pub fn apply_hanging_constraints(&self, coeffs: &mut [f64]) {
        for (n, c) in self.hanging.iter().enumerate() {
            if let Some(terms) = c {
                coeffs[n] = terms.iter().map(|&(m, w)| w * coeffs[m]).sum();
            }
        }
    }

    /// Field value, physical gradient and physical second derivatives at a
    /// reference point of an active cell.
    pub fn evaluate_field(
        &self,
        coeffs: &[f64],
        active_pos: usize,
        xhat: [f64; 2],
    ) -> FieldValue {
        let shapes = self.elem.eval_all(xhat);
        let rect = self.cell_rect(active_pos);
        let mut out = FieldValue::default();
        for (loc, &node) in self.cell_nodes[active_pos].iter().enumerate() {
            out.accumulate(coeffs[node], &shapes[loc]);
        }
        out.to_physical(&rect)
    }

    pub fn cell_rect(&self, active_pos: usize) -> Rect {
        let id = self.mesh.active_cells()[active_pos];
        self.mesh.cell_rect(id)
    }

    /// Reference-space basis tables at the given points, for reuse across
    /// cells.
    pub fn tabulate(&self, points: &[[f64; 2]]) -> Vec<Vec<ShapeValue>> {
        points.iter().map(|&p| self.elem.eval_all(p)).collect()
    }
}

/// Value, gradient and second derivatives of a finite element field at a
/// point, in either reference or physical coordinates.
#[derive(Clone, Copy, Debug, Default)]
pub struct FieldValue {
    pub value: f64,
    pub grad: [f64; 2],
    /// dxx, dyy, dxy
    pub hess: [f64; 3],
}

impl FieldValue {
    pub fn accumulate(&mut self, coeff: f64, shape: &ShapeValue) {
        self.value += coeff * shape.value;
        self.grad[0] += coeff * shape.grad[0];
        self.grad[1] += coeff * shape.grad[1];
        self.hess[0] += coeff * shape.hess[0];
        self.hess[1] += coeff * shape.hess[1];
        self.hess[2] += coeff * shape.hess[2];
    }

    /// Chain rule through the diagonal-affine cell map; exact for this
    /// geometry.
    pub fn to_physical(mut self, rect: &Rect) -> FieldValue {
        let (wx, wy) = (rect.width(), rect.height());
        self.grad[0] /= wx;
        self.grad[1] /= wy;
        self.hess[0] /= wx * wx;
        self.hess[1] /= wy * wy;
        self.hess[2] /= wx * wy;
        self
    }

    pub fn laplacian(&self) -> f64 {
        self.hess[0] + self.hess[1]
    }
}

/// Builds the Q_p space on a mesh: node numbering, hanging constraints,
/// boundary classification.
pub fn build_space(mesh: Arc<QuadMesh>, degree: usize) -> FeSpace {
    assert!(degree >= 1, "degree must be at least 1");
    let p = degree;
    let elem = ReferenceElement::new(p);

    let mut node_ids: HashMap<NodeKey, usize> = HashMap::new();
    let mut node_coords: Vec<[f64; 2]> = Vec::new();
    let mut cell_nodes: Vec<Vec<usize>> = Vec::with_capacity(mesh.n_active());

    for &id in mesh.active_cells() {
        let rect = mesh.cell_rect(id);
        let xs = axis_nodes(rect.x0, rect.x1, p);
        let ys = axis_nodes(rect.y0, rect.y1, p);
        let mut nodes = Vec::with_capacity((p + 1) * (p + 1));
        for j in 0..=p {
            for i in 0..=p {
                let key = node_key(xs[i], ys[j]);
                let nid = *node_ids.entry(key).or_insert_with(|| {
                    node_coords.push([xs[i], ys[j]]);
                    node_coords.len() - 1
                });
                nodes.push(nid);
            }
        }
        cell_nodes.push(nodes);
    }

    // Raw hanging constraints: fine-side nodes on hanging interfaces tied to
    // the coarse-side edge trace. Masters may themselves be constrained;
    // resolved below.
    let mut raw: Vec<Option<Vec<(usize, f64)>>> = vec![None; node_coords.len()];
    for (pos, &coarse_id) in mesh.active_cells().iter().enumerate() {
        let coarse_rect = mesh.cell_rect(coarse_id);
        for side in SIDES {
            let nbrs = mesh.neighbors_of(coarse_id, side);
            if nbrs.len() != 2 {
                continue;
            }
            let coarse_edge = edge_node_ids(&cell_nodes[pos], p, side);
            let coarse_edge_set: Vec<usize> = coarse_edge.clone();
            for &fine_id in nbrs {
                let fine_pos = mesh.active_position(fine_id).unwrap();
                let fine_side = opposite(side);
                let fine_edge = edge_node_ids(&cell_nodes[fine_pos], p, fine_side);
                for &node in &fine_edge {
                    if coarse_edge_set.contains(&node) || raw[node].is_some() {
                        continue;
                    }
                    let [x, y] = node_coords[node];
                    let t = match side.axis() {
                        0 => (y - coarse_rect.y0) / coarse_rect.height(),
                        _ => (x - coarse_rect.x0) / coarse_rect.width(),
                    };
                    let vals = elem.edge_basis_values(t);
                    let terms: Vec<(usize, f64)> = coarse_edge
                        .iter()
                        .zip(vals)
                        .filter(|&(_, v)| v.abs() > 1e-14)
                        .map(|(&m, v)| (m, v))
                        .collect();
                    raw[node] = Some(terms);
                }
            }
        }
    }

    // Resolve constraint chains so every master is unconstrained.
    let mut hanging: Vec<Option<Vec<(usize, f64)>>> = vec![None; node_coords.len()];
    for n in 0..node_coords.len() {
        if raw[n].is_some() {
            let mut acc: HashMap<usize, f64> = HashMap::new();
            resolve_constraint(n, 1.0, &raw, &mut acc, 0);
            let mut terms: Vec<(usize, f64)> = acc.into_iter().collect();
            terms.sort_by_key(|&(m, _)| m);
            hanging[n] = Some(terms);
        }
    }

    // Boundary classification by exact coordinate comparison.
    let domain = mesh.domain();
    let node_boundary: Vec<Vec<Side>> = node_coords
        .iter()
        .map(|&[x, y]| {
            let mut sides = Vec::new();
            if x == domain.x0 {
                sides.push(Side::Left);
            }
            if x == domain.x1 {
                sides.push(Side::Right);
            }
            if y == domain.y0 {
                sides.push(Side::Bottom);
            }
            if y == domain.y1 {
                sides.push(Side::Top);
            }
            sides
        })
        .collect();

    FeSpace { mesh, degree, elem, cell_nodes, node_coords, hanging, node_boundary }
}

fn resolve_constraint(
    node: usize,
    weight: f64,
    raw: &[Option<Vec<(usize, f64)>>],
    acc: &mut HashMap<usize, f64>,
    depth: usize,
) {
    assert!(depth < 64, "hanging constraint chain too deep");
    match &raw[node] {
        None => {
            *acc.entry(node).or_insert(0.0) += weight;
        }
        Some(terms) => {
            for &(m, w) in terms {
                resolve_constraint(m, weight * w, raw, acc, depth + 1);
            }
        }
    }
}

fn opposite(side: Side) -> Side {
    match side {
        Side::Left => Side::Right,
        Side::Right => Side::Left,
        Side::Bottom => Side::Top,
        Side::Top => Side::Bottom,
    }
}

/// Local node ids along one side of a cell, ordered by increasing edge
/// coordinate.
fn edge_node_ids(cell_nodes: &[usize], p: usize, side: Side) -> Vec<usize> {
    let stride = p + 1;
    (0..=p)
        .map(|k| match side {
            Side::Left => cell_nodes[k * stride],
            Side::Right => cell_nodes[k * stride + p],
            Side::Bottom => cell_nodes[k],
            Side::Top => cell_nodes[p * stride + k],
        })
        .collect()
}

/// Nodal interpolation between spaces on the same mesh. Embedding into a
/// higher degree reproduces the source exactly; restriction is lossy.
pub fn interpolate(from: &FeSpace, from_coeffs: &[f64], to: &FeSpace) -> Result<Vec<f64>> {
    if !Arc::ptr_eq(&from.mesh, &to.mesh) {
        return Err(Error::InvalidArgument("interpolation requires a shared mesh".into()));
    }
    let mut out = vec![0.0; to.n_nodes()];
    let mut written = vec![false; to.n_nodes()];
    for pos in 0..to.mesh.n_active() {
        let from_shapes_at: Vec<[f64; 2]> =
            (0..to.elem.n_nodes()).map(|i| to.elem.node_ref_coords(i)).collect();
        for (loc, &node) in to.cell_nodes[pos].iter().enumerate() {
            if written[node] {
                continue;
            }
            let xhat = from_shapes_at[loc];
            // Reference-space evaluation of the source on the same cell.
            let shapes = from.elem.eval_all(xhat);
            let mut v = 0.0;
            for (floc, &fnode) in from.cell_nodes[pos].iter().enumerate() {
                v += from_coeffs[fnode] * shapes[floc].value;
            }
            out[node] = v;
            written[node] = true;
        }
    }
    to.apply_hanging_constraints(&mut out);
    Ok(out)
}

/// Locates the active cell containing a point (ties broken by cell order)
/// and returns (active position, reference coords).
pub fn locate_point(mesh: &QuadMesh, x: f64, y: f64) -> Option<(usize, [f64; 2])> {
    for (pos, &id) in mesh.active_cells().iter().enumerate() {
        let r = mesh.cell_rect(id);
        if r.contains(x, y) {
            let (xh, yh) = r.map_to_ref(x, y);
            return Some((pos, [xh, yh]));
        }
    }
    None
}

/// Evaluates a nodal field at an arbitrary point of the domain.
pub fn evaluate_at_point(space: &FeSpace, coeffs: &[f64], x: f64, y: f64) -> Option<f64> {
    locate_point(&space.mesh, x, y).map(|(pos, xhat)| space.evaluate_field(coeffs, pos, xhat).value)
}

/// Connects degrees to the cells of a space: convenience for sizing.
pub fn uniform_dof_count(n: usize, p: usize) -> usize {
    (n * p + 1) * (n * p + 1)
}
