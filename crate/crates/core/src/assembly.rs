//! Assembly of the SUPG-stabilized primal and dual systems and their
//! solution.
//!
//! Primal form: A(u)(φ) + Σ_K δ_K(ℒu, b·∇φ)_K with
//! ℒv = −∇·(ε∇v) + b·∇v + αv. Dual form ("first dualize, then stabilize"):
//! A*(z)(ψ) + Σ_K δ*_K(ℒ*z, −b·∇ψ)_K with the convection sign flipped.
//! Hanging-node constraints and Dirichlet conditions are applied by
//! elimination; solutions are returned as full nodal vectors.

use std::collections::BTreeMap;

use crate::fespace::{FeSpace, FieldValue, QuadratureRule, ShapeValue};
use crate::parallel;
use crate::problem::{BoundaryCondition, FrozenGoal, ProblemSpec};
use crate::{Error, Result};

/// Per-cell SUPG parameters for one discretization degree.
#[derive(Clone, Debug)]
pub struct StabilizationParams {
    pub delta0: f64,
    /// δ_K per active cell.
    pub per_cell: Vec<f64>,
}

/// δ_K = δ₀ · min{ h_K/(p‖b‖_{L∞(K)}), h_K²/(p⁴ε), 1/α_max }, each term
/// omitted where its denominator vanishes; the sup norms are taken over the
/// quadrature points of the cell.
pub fn delta_param(
    rect: &crate::mesh::Rect,
    p: usize,
    problem: &ProblemSpec,
    delta0: f64,
    rule: &QuadratureRule,
) -> f64 {
    let h = rect.diameter();
    let mut b_max = 0.0_f64;
    let mut a_max = 0.0_f64;
    for pt in &rule.points {
        let (x, y) = rect.map_from_ref(pt[0], pt[1]);
        let b = (problem.convection)(x, y);
        b_max = b_max.max((b[0] * b[0] + b[1] * b[1]).sqrt());
        a_max = a_max.max((problem.reaction)(x, y));
    }
    let pf = p as f64;
    let mut delta = f64::INFINITY;
    if b_max > 0.0 {
        delta = delta.min(h / (pf * b_max));
    }
    if problem.epsilon > 0.0 {
        delta = delta.min(h * h / (pf.powi(4) * problem.epsilon));
    }
    if a_max > 0.0 {
        delta = delta.min(1.0 / a_max);
    }
    if delta.is_finite() {
        delta0 * delta
    } else {
        0.0
    }
}

/// δ_K for every active cell of a space.
pub fn stabilization_params(
    space: &FeSpace,
    problem: &ProblemSpec,
    delta0: f64,
    rule: &QuadratureRule,
) -> StabilizationParams {
    let per_cell = parallel::map_indexed(space.mesh.n_active(), |pos| {
        delta_param(&space.cell_rect(pos), space.degree, problem, delta0, rule)
    });
    StabilizationParams { delta0, per_cell }
}

/// Expansion of one global node in terms of free unknowns plus a constant
/// offset (Dirichlet data, possibly through hanging-node combinations).
#[derive(Clone, Debug, Default)]
pub struct Expansion {
    pub terms: Vec<(usize, f64)>,
    pub offset: f64,
}

/// Node classification for one space/problem pair.
#[derive(Clone, Debug)]
pub struct DofMap {
    pub expansions: Vec<Expansion>,
    /// free index -> node id
    pub free_nodes: Vec<usize>,
}

impl DofMap {
    pub fn n_free(&self) -> usize {
        self.free_nodes.len()
    }

    /// Reconstructs the full nodal vector from the free unknowns.
    pub fn expand(&self, free: &[f64]) -> Vec<f64> {
        self.expansions
            .iter()
            .map(|e| e.offset + e.terms.iter().map(|&(f, w)| w * free[f]).sum::<f64>())
            .collect()
    }
}

/// Classifies nodes into free unknowns, Dirichlet nodes (nodal interpolation
/// of g_D; zero when `homogeneous`), and hanging nodes expanded through
/// their masters.
pub fn build_dof_map(space: &FeSpace, problem: &ProblemSpec, homogeneous: bool) -> DofMap {
    let n = space.n_nodes();
    let mut expansions: Vec<Expansion> = vec![Expansion::default(); n];
    let mut free_nodes = Vec::new();
    // Unconstrained nodes first; hanging masters are always unconstrained.
    for node in 0..n {
        if space.is_constrained(node) {
            continue;
        }
        let dirichlet = space
            .node_boundary_sides(node)
            .iter()
            .any(|&s| problem.boundary_condition(s).is_dirichlet());
        if dirichlet {
            let [x, y] = space.node_coords()[node];
            let value = if homogeneous {
                0.0
            } else {
                // Any Dirichlet side the node lies on provides the same g_D
                // trace; use the first.
                let side = space
                    .node_boundary_sides(node)
                    .iter()
                    .copied()
                    .find(|&s| problem.boundary_condition(s).is_dirichlet())
                    .unwrap();
                match problem.boundary_condition(side) {
                    BoundaryCondition::Dirichlet(g) => g(x, y),
                    BoundaryCondition::Neumann => unreachable!(),
                }
            };
            expansions[node] = Expansion { terms: Vec::new(), offset: value };
        } else {
            let f = free_nodes.len();
            free_nodes.push(node);
            expansions[node] = Expansion { terms: vec![(f, 1.0)], offset: 0.0 };
        }
    }
    for node in 0..n {
        let Some(constraint) = space.hanging_constraint(node) else { continue };
        let mut terms: Vec<(usize, f64)> = Vec::new();
        let mut offset = 0.0;
        for &(master, w) in constraint {
            offset += w * expansions[master].offset;
            for &(f, mw) in &expansions[master].terms {
                match terms.iter_mut().find(|(tf, _)| *tf == f) {
                    Some((_, tw)) => *tw += w * mw,
                    None => terms.push((f, w * mw)),
                }
            }
        }
        expansions[node] = Expansion { terms, offset };
    }
    DofMap { expansions, free_nodes }
}

/// Assembled linear system over the free unknowns. The matrix is kept as
/// column maps (column -> row -> value) accumulated in deterministic cell
/// order.
pub struct SparseSystem {
    pub dof_map: DofMap,
    /// columns[j][i] = A_ij
    pub columns: Vec<BTreeMap<usize, f64>>,
    pub rhs: Vec<f64>,
}

impl SparseSystem {
    pub fn n_free(&self) -> usize {
        self.rhs.len()
    }

    pub fn n_nonzeros(&self) -> usize {
        self.columns.iter().map(|c| c.len()).sum()
    }

    /// Dense copy (row-major) for oracle tests; intended for small systems.
    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let n = self.n_free();
        let mut dense = vec![vec![0.0; n]; n];
        for (j, col) in self.columns.iter().enumerate() {
            for (&i, &v) in col {
                dense[i][j] = v;
            }
        }
        dense
    }

    /// MatrixMarket coordinate-format dump (1-based indices).
    pub fn write_matrix_market(&self, path: &std::path::Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(
            std::fs::File::create(path).map_err(Error::io(path.display().to_string()))?,
        );
        let n = self.n_free();
        let write = |out: &mut dyn std::io::Write| -> std::io::Result<()> {
            writeln!(out, "%%MatrixMarket matrix coordinate real general")?;
            writeln!(out, "{} {} {}", n, n, self.n_nonzeros())?;
            for (j, col) in self.columns.iter().enumerate() {
                for (&i, &v) in col {
                    writeln!(out, "{} {} {:.16e}", i + 1, j + 1, v)?;
                }
            }
            Ok(())
        };
        write(&mut out).map_err(Error::io(path.display().to_string()))
    }
}

enum SystemKind<'a> {
    Primal,
    Dual(&'a FrozenGoal),
    /// Dual operator with a constant load density of 1 (raw oracle use).
    DualUnitLoad,
}

impl SystemKind<'_> {
    fn conv_sign(&self) -> f64 {
        match self {
            SystemKind::Primal => 1.0,
            SystemKind::Dual(_) | SystemKind::DualUnitLoad => -1.0,
        }
    }
}

/// Cell-local SUPG matrix and load vector on one cell, over local node
/// indices.
#[allow(clippy::too_many_arguments)]
fn local_system(
    space: &FeSpace,
    problem: &ProblemSpec,
    pos: usize,
    delta: f64,
    rule: &QuadratureRule,
    tab: &[Vec<ShapeValue>],
    kind: &SystemKind<'_>,
) -> (Vec<f64>, Vec<f64>) {
    let n_loc = space.elem.n_nodes();
    let rect = space.cell_rect(pos);
    let area = rect.area();
    let (wx, wy) = (rect.width(), rect.height());
    let eps = problem.epsilon;
    let conv_sign = kind.conv_sign();
    let mut a = vec![0.0; n_loc * n_loc];
    let mut rhs = vec![0.0; n_loc];
    let mut grads = vec![[0.0; 2]; n_loc];
    let mut laps = vec![0.0; n_loc];
    for (q, pt) in rule.points.iter().enumerate() {
        let (x, y) = rect.map_from_ref(pt[0], pt[1]);
        let w = rule.weights[q] * area;
        let b = (problem.convection)(x, y);
        let alpha = (problem.reaction)(x, y);
        let shapes = &tab[q];
        for (l, s) in shapes.iter().enumerate() {
            grads[l] = [s.grad[0] / wx, s.grad[1] / wy];
            laps[l] = s.hess[0] / (wx * wx) + s.hess[1] / (wy * wy);
        }
        let density = match kind {
            SystemKind::Primal => (problem.source)(x, y),
            SystemKind::Dual(goal) => goal.density(pos, *pt, x, y),
            SystemKind::DualUnitLoad => 1.0,
        };
        for i in 0..n_loc {
            let phi_i = shapes[i].value;
            let conv_i = b[0] * grads[i][0] + b[1] * grads[i][1];
            // SUPG test direction: b·∇φ for the primal, −b·∇ψ for the dual.
            let tau_i = conv_sign * conv_i;
            rhs[i] += w * density * (phi_i + delta * tau_i);
            for j in 0..n_loc {
                let phi_j = shapes[j].value;
                let conv_j = b[0] * grads[j][0] + b[1] * grads[j][1];
                let operator_j = -eps * laps[j] + conv_sign * conv_j + alpha * phi_j;
                let galerkin = eps * (grads[j][0] * grads[i][0] + grads[j][1] * grads[i][1])
                    + conv_sign * conv_j * phi_i
                    + alpha * phi_j * phi_i;
                a[i * n_loc + j] += w * (galerkin + delta * operator_j * tau_i);
            }
        }
    }
    (a, rhs)
}

fn assemble(
    space: &FeSpace,
    problem: &ProblemSpec,
    params: &StabilizationParams,
    rule: &QuadratureRule,
    kind: SystemKind<'_>,
) -> SparseSystem {
    let homogeneous = matches!(kind, SystemKind::Dual(_));
    let dof_map = build_dof_map(space, problem, homogeneous);
    let n_free = dof_map.n_free();
    let tab = space.tabulate(&rule.points);
    let n_loc = space.elem.n_nodes();

    let locals = parallel::map_indexed(space.mesh.n_active(), |pos| {
        local_system(space, problem, pos, params.per_cell[pos], rule, &tab, &kind)
    });

    let mut columns: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::new(); n_free];
    let mut rhs = vec![0.0; n_free];
    for (pos, (a, local_rhs)) in locals.iter().enumerate() {
        let nodes = space.cell_node_ids(pos);
        for i in 0..n_loc {
            let ei = &dof_map.expansions[nodes[i]];
            if ei.terms.is_empty() {
                continue;
            }
            // Load minus the known (Dirichlet/offset) part of the row.
            let mut load = local_rhs[i];
            for j in 0..n_loc {
                let off = dof_map.expansions[nodes[j]].offset;
                if off != 0.0 {
                    load -= a[i * n_loc + j] * off;
                }
            }
            for &(fi, wi) in &ei.terms {
                rhs[fi] += wi * load;
                for j in 0..n_loc {
                    let v = a[i * n_loc + j];
                    if v == 0.0 {
                        continue;
                    }
                    for &(fj, wj) in &dof_map.expansions[nodes[j]].terms {
                        *columns[fj].entry(fi).or_insert(0.0) += wi * wj * v;
                    }
                }
            }
        }
    }
    SparseSystem { dof_map, columns, rhs }
}

/// Assembles the SUPG-stabilized primal system on `space`.
pub fn assemble_primal(
    space: &FeSpace,
    problem: &ProblemSpec,
    params: &StabilizationParams,
    rule: &QuadratureRule,
) -> SparseSystem {
    assemble(space, problem, params, rule, SystemKind::Primal)
}

/// Assembles the stabilized dual system on the (higher-order) space, with
/// homogeneous Dirichlet conditions on all primal Dirichlet sides.
pub fn assemble_dual(
    space: &FeSpace,
    problem: &ProblemSpec,
    goal: &FrozenGoal,
    params: &StabilizationParams,
    rule: &QuadratureRule,
) -> SparseSystem {
    assemble(space, problem, params, rule, SystemKind::Dual(goal))
}

/// Drains the per-column maps into compressed sparse column arrays,
/// releasing the map storage column by column (keeps the peak footprint low
/// for large dual systems).
fn drain_to_csc(columns: &mut [BTreeMap<usize, f64>]) -> (Vec<u32>, Vec<u32>, Vec<f64>) {
    let nnz = columns.iter().map(|c| c.len()).sum();
    let mut col_ptr = Vec::with_capacity(columns.len() + 1);
    let mut row_idx = Vec::with_capacity(nnz);
    let mut vals = Vec::with_capacity(nnz);
    col_ptr.push(0u32);
    for col in columns.iter_mut() {
        // BTreeMap iterates in row order, so each column is already sorted.
        for (i, v) in std::mem::take(col) {
            row_idx.push(i as u32);
            vals.push(v);
        }
        col_ptr.push(row_idx.len() as u32);
    }
    (col_ptr, row_idx, vals)
}

/// Direct sparse LU solve over the free unknowns. Consumes the column maps.
pub(crate) fn solve_free(
    columns: &mut [BTreeMap<usize, f64>],
    rhs: &[f64],
) -> Result<Vec<f64>> {
    use faer::prelude::*;
    use faer::sparse::{SparseColMat, SymbolicSparseColMat};

    let n = rhs.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let (col_ptr, row_idx, vals) = drain_to_csc(columns);
    // 32-bit indices keep the factor storage compact for the largest dual
    // systems (n is far below u32::MAX).
    let symbolic = SymbolicSparseColMat::<u32>::new_checked(n, n, col_ptr, None, row_idx);
    let matrix = SparseColMat::<u32, f64>::new(symbolic, vals);
    let lu = matrix
        .sp_lu()
        .map_err(|e| Error::Solver(format!("sparse LU factorization failed: {e:?}")))?;
    let b = faer::Mat::from_fn(n, 1, |i, _| rhs[i]);
    let x = lu.solve(&b);
    drop(lu);
    let sol: Vec<f64> = (0..n).map(|i| x[(i, 0)]).collect();

    // Residual verification.
    let mut res: Vec<f64> = rhs.iter().map(|&v| -v).collect();
    let (symbolic, vals) = matrix.parts();
    let col_ptr = symbolic.col_ptr();
    let row_idx = symbolic.row_idx();
    for j in 0..n {
        let xj = sol[j];
        if xj != 0.0 {
            for k in col_ptr[j] as usize..col_ptr[j + 1] as usize {
                res[row_idx[k] as usize] += vals[k] * xj;
            }
        }
    }
    let rnorm = res.iter().map(|r| r * r).sum::<f64>().sqrt();
    let bnorm = rhs.iter().map(|r| r * r).sum::<f64>().sqrt();
    let rel = if bnorm > 0.0 { rnorm / bnorm } else { rnorm };
    if !rel.is_finite() || rel > 1e-10 {
        return Err(Error::Solver(format!(
            "solution residual too large: |Ax-b|/|b| = {rel:.3e} (n = {n})"
        )));
    }
    Ok(sol)
}

/// Solves the system and reconstructs the full nodal vector (Dirichlet and
/// hanging nodes included).
pub fn solve(system: &SparseSystem) -> Result<Vec<f64>> {
    let mut columns = system.columns.clone();
    let free = solve_free(&mut columns, &system.rhs)?;
    Ok(system.dof_map.expand(&free))
}

/// Like [`solve`], but consumes the system so the matrix storage can be
/// released during factorization (used by the adaptive loop, where the dual
/// system is the dominant allocation).
pub fn solve_consuming(mut system: SparseSystem) -> Result<Vec<f64>> {
    let free = solve_free(&mut system.columns, &system.rhs)?;
    Ok(system.dof_map.expand(&free))
}

/// Unconstrained dense assembly over all nodes (no Dirichlet or hanging
/// elimination). Oracle helper for transpose/symmetry tests on small meshes.
pub fn assemble_dense_raw(
    space: &FeSpace,
    problem: &ProblemSpec,
    params: &StabilizationParams,
    rule: &QuadratureRule,
    dual: bool,
) -> (Vec<Vec<f64>>, Vec<f64>) {
    let n = space.n_nodes();
    let n_loc = space.elem.n_nodes();
    let tab = space.tabulate(&rule.points);
    let mut matrix = vec![vec![0.0; n]; n];
    let mut rhs = vec![0.0; n];
    let kind = if dual { SystemKind::DualUnitLoad } else { SystemKind::Primal };
    for pos in 0..space.mesh.n_active() {
        let (a, local_rhs) =
            local_system(space, problem, pos, params.per_cell[pos], rule, &tab, &kind);
        let nodes = space.cell_node_ids(pos);
        for i in 0..n_loc {
            rhs[nodes[i]] += local_rhs[i];
            for j in 0..n_loc {
                matrix[nodes[i]][nodes[j]] += a[i * n_loc + j];
            }
        }
    }
    (matrix, rhs)
}

/// ρ(u)(w) = F(w) − A(u)(w): the unstabilized weak residual, by cell-wise
/// quadrature. `u` and `w` may live in different spaces on the same mesh.
pub fn weak_residual(
    problem: &ProblemSpec,
    u_space: &FeSpace,
    u: &[f64],
    w_space: &FeSpace,
    w: &[f64],
    rule: &QuadratureRule,
) -> f64 {
    parallel::sum_indexed(u_space.mesh.n_active(), |pos| {
        let rect = u_space.cell_rect(pos);
        let area = rect.area();
        let mut acc = 0.0;
        for (pt, &wq) in rule.points.iter().zip(&rule.weights) {
            let (x, y) = rect.map_from_ref(pt[0], pt[1]);
            let uv: FieldValue = u_space.evaluate_field(u, pos, *pt);
            let wv: FieldValue = w_space.evaluate_field(w, pos, *pt);
            let b = (problem.convection)(x, y);
            let alpha = (problem.reaction)(x, y);
            let a_form = problem.epsilon * (uv.grad[0] * wv.grad[0] + uv.grad[1] * wv.grad[1])
                + (b[0] * uv.grad[0] + b[1] * uv.grad[1]) * wv.value
                + alpha * uv.value * wv.value;
            acc += wq * area * ((problem.source)(x, y) * wv.value - a_form);
        }
        acc
    })
}

/// S(u)(w) = Σ_K δ_K (ℒu − f, b·∇w)_K: the SUPG stabilization form.
pub fn stabilization_form(
    problem: &ProblemSpec,
    params: &StabilizationParams,
    u_space: &FeSpace,
    u: &[f64],
    w_space: &FeSpace,
    w: &[f64],
    rule: &QuadratureRule,
) -> f64 {
    parallel::sum_indexed(u_space.mesh.n_active(), |pos| {
        let delta = params.per_cell[pos];
        if delta == 0.0 {
            return 0.0;
        }
        let rect = u_space.cell_rect(pos);
        let area = rect.area();
        let mut acc = 0.0;
        for (pt, &wq) in rule.points.iter().zip(&rule.weights) {
            let (x, y) = rect.map_from_ref(pt[0], pt[1]);
            let uv = u_space.evaluate_field(u, pos, *pt);
            let wv = w_space.evaluate_field(w, pos, *pt);
            let b = (problem.convection)(x, y);
            let alpha = (problem.reaction)(x, y);
            let strong = -problem.epsilon * uv.laplacian()
                + b[0] * uv.grad[0]
                + b[1] * uv.grad[1]
                + alpha * uv.value
                - (problem.source)(x, y);
            acc += wq * area * delta * strong * (b[0] * wv.grad[0] + b[1] * wv.grad[1]);
        }
        acc
    })
}
