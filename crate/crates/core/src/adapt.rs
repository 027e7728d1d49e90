//! Histogram-based marking, stopping criteria, and the outer adaptive loop.
//!
//! Each iteration: build V^p and V^{p+s} on the current mesh, solve the
//! stabilized primal problem, freeze the goal context, solve the stabilized
//! dual problem in the higher-order space, evaluate the indicators, then
//! either stop or mark and remesh.

use std::sync::Arc;
use std::time::Instant;

use crate::assembly::{assemble_dual, assemble_primal, solve_consuming, stabilization_params};
use crate::estimator::{effectivity, indicators, ErrorIndicators};
use crate::fespace::{build_space, make_quadrature, FeSpace};
use crate::mesh::{MarkSet, QuadMesh};
use crate::problem::{freeze_goal, l2_error, GoalKind, ProblemSpec};
use crate::{Error, Result};

/// Parameters of the adaptive loop.
#[derive(Clone, Debug)]
pub struct AdaptConfig {
    /// Primal polynomial degree.
    pub p: usize,
    /// Dual order increment (dual degree p + s).
    pub s: usize,
    /// Histogram marking parameter.
    pub theta: f64,
    /// Fraction of cells coarsened per iteration.
    pub coarsen_fraction: f64,
    /// SUPG tuning constant δ₀.
    pub delta0: f64,
    /// SUPG tuning constant δ₀* for the dual solve. A smaller value than
    /// δ₀ keeps the dual weights sharp inside layers, which the effectivity
    /// of the estimator depends on for very small ε.
    pub delta0_dual: f64,
    /// Stopping tolerance on η̃_max or |η̃|.
    pub tol: f64,
    pub max_iterations: usize,
    /// Stop after the first iteration reaching this many primal dofs.
    pub max_dofs: usize,
    /// Quadrature points per axis; defaults to p + s + 2.
    pub quad_points: Option<usize>,
    /// Record wall times in the iteration records (off by default so that
    /// reports are bitwise reproducible).
    pub record_timings: bool,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            p: 1,
            s: 1,
            theta: 1.0,
            coarsen_fraction: 0.02,
            delta0: 1.0,
            delta0_dual: 0.1,
            tol: 0.0,
            max_iterations: 10,
            max_dofs: usize::MAX,
            quad_points: None,
            record_timings: false,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.theta <= 0.0 {
            return Err(Error::Config("theta must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.coarsen_fraction) {
            return Err(Error::Config("coarsen fraction must be in [0, 1)".into()));
        }
        if self.max_iterations < 1 {
            return Err(Error::Config("max_iterations must be at least 1".into()));
        }
        if self.p < 1 {
            return Err(Error::Config("polynomial degree must be at least 1".into()));
        }
        if self.s < 1 {
            return Err(Error::Config("dual order increment must be at least 1".into()));
        }
        if self.delta0 < 0.0 {
            return Err(Error::Config("delta0 must be non-negative".into()));
        }
        if self.delta0_dual < 0.0 {
            return Err(Error::Config("delta0_dual must be non-negative".into()));
        }
        if self.tol < 0.0 {
            return Err(Error::Config("tol must be non-negative".into()));
        }
        Ok(())
    }

    pub fn quadrature_points(&self) -> usize {
        self.quad_points.unwrap_or(self.p + self.s + 2)
    }
}

/// One row of the convergence history.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub dofs_primal: usize,
    pub dofs_dual: Option<usize>,
    pub j_uh: Option<f64>,
    /// J(u) − J(u_h) for goal-driven runs; the L² error for global runs.
    pub err_exact: Option<f64>,
    pub eta: Option<f64>,
    pub eta_max: Option<f64>,
    pub ieff: Option<f64>,
    pub cells_refined: usize,
    pub cells_coarsened: usize,
    pub seconds: Option<f64>,
}

/// Marking threshold μ: the θ-scaled mean of |η̃_K|, halved while it
/// exceeds the maximum.
pub fn histogram_threshold(magnitudes: &[f64], theta: f64) -> f64 {
    let eta_max = magnitudes.iter().fold(0.0_f64, |a, &b| a.max(b));
    let mut mu = theta * magnitudes.iter().sum::<f64>() / magnitudes.len() as f64;
    while mu > eta_max {
        mu /= 2.0;
    }
    mu
}

/// Histogram marking (refine cells above the halved-mean threshold, coarsen
/// the smallest few). All-zero indicators yield an empty mark set.
pub fn mark_histogram(
    mesh: &QuadMesh,
    per_cell: &[f64],
    theta: f64,
    coarsen_fraction: f64,
) -> MarkSet {
    assert_eq!(per_cell.len(), mesh.n_active());
    assert!(!per_cell.is_empty());
    let magnitudes: Vec<f64> = per_cell.iter().map(|v| v.abs()).collect();
    let eta_max = magnitudes.iter().fold(0.0_f64, |a, &b| a.max(b));
    let mut marks = MarkSet::default();
    if eta_max == 0.0 {
        return marks;
    }
    let n = magnitudes.len();
    let mu = histogram_threshold(&magnitudes, theta);
    for (pos, &m) in magnitudes.iter().enumerate() {
        if m > mu {
            marks.refine.insert(mesh.active_cells()[pos]);
        }
    }
    let n_coarsen = (coarsen_fraction * n as f64).floor() as usize;
    if n_coarsen > 0 {
        let mut order: Vec<usize> = (0..n)
            .filter(|&pos| !marks.refine.contains(&mesh.active_cells()[pos]))
            .collect();
        // Smallest magnitude first; ties by cell id.
        order.sort_by(|&a, &b| {
            magnitudes[a]
                .total_cmp(&magnitudes[b])
                .then(mesh.active_cells()[a].cmp(&mesh.active_cells()[b]))
        });
        for &pos in order.iter().take(n_coarsen) {
            marks.coarsen.insert(mesh.active_cells()[pos]);
        }
    }
    marks
}

/// Stop iff η̃_max < tol or |η̃| < tol.
pub fn check_stop(ind: &ErrorIndicators, tol: f64) -> bool {
    ind.max_abs < tol || ind.total.abs() < tol
}

/// Borrowed view of one completed iteration, for observers (VTU snapshots,
/// logging).
pub struct IterationView<'a> {
    pub record: &'a IterationRecord,
    pub mesh: &'a Arc<QuadMesh>,
    pub primal: &'a FeSpace,
    pub u_h: &'a [f64],
    pub dual: &'a FeSpace,
    pub z_h: &'a [f64],
    pub indicators: &'a ErrorIndicators,
    /// Primal δ_K per active cell.
    pub deltas: &'a [f64],
}

/// Final state of a completed (or aborted) adaptive run.
pub struct DwrOutcome {
    pub records: Vec<IterationRecord>,
    pub mesh: Arc<QuadMesh>,
    /// Absent when the loop aborted before the first complete iteration.
    pub final_state: Option<FinalState>,
    /// Solver/goal failure that aborted the loop, if any.
    pub failure: Option<Error>,
    /// True when the η̃ stopping test fired (as opposed to hitting the
    /// iteration or dof caps).
    pub converged: bool,
}

pub struct FinalState {
    pub primal: FeSpace,
    pub u_h: Vec<f64>,
    pub dual: FeSpace,
    pub z_h: Vec<f64>,
    pub indicators: ErrorIndicators,
}

/// Runs the goal-driven adaptive loop.
pub fn dwr_loop(
    problem: &ProblemSpec,
    goal_kind: &GoalKind,
    config: &AdaptConfig,
    initial_mesh: QuadMesh,
    mut observer: impl FnMut(&IterationView<'_>),
) -> DwrOutcome {
    let mut mesh = Arc::new(initial_mesh);
    let mut records: Vec<IterationRecord> = Vec::new();
    let mut final_state: Option<FinalState> = None;
    let mut converged = false;
    let rule = make_quadrature(config.quadrature_points());

    for iteration in 0..config.max_iterations {
        let start = Instant::now();
        let primal = build_space(mesh.clone(), config.p);
        let dual = build_space(mesh.clone(), config.p + config.s);
        let params = stabilization_params(&primal, problem, config.delta0, &rule);

        let step = (|| -> Result<(Vec<f64>, Vec<f64>, ErrorIndicators, f64)> {
            let system = assemble_primal(&primal, problem, &params, &rule);
            let u_h = solve_consuming(system)?;
            let goal = freeze_goal(goal_kind, problem, &primal, &u_h, &rule)?;
            let dual_params = stabilization_params(&dual, problem, config.delta0_dual, &rule);
            let dual_system = assemble_dual(&dual, problem, &goal, &dual_params, &rule);
            let z_h = solve_consuming(dual_system)?;
            let ind = indicators(&primal, &u_h, &dual, &z_h, problem, &params, &goal, &rule)?;
            let j_uh = goal.value(&primal, &u_h, &rule);
            Ok((u_h, z_h, ind, j_uh))
        })();
        let (u_h, z_h, ind, j_uh) = match step {
            Ok(v) => v,
            Err(e) => {
                return DwrOutcome { records, mesh, final_state, failure: Some(e), converged };
            }
        };

        let stop = check_stop(&ind, config.tol)
            || iteration + 1 == config.max_iterations
            || primal.n_nodes() >= config.max_dofs;
        let marks = if stop {
            MarkSet::default()
        } else {
            let mut marks =
                mark_histogram(&mesh, &ind.per_cell, config.theta, config.coarsen_fraction);
            if marks.refine.is_empty() {
                // The histogram marked nothing but the estimate is above
                // tolerance: refine globally to keep making progress.
                marks.refine = mesh.active_cells().iter().copied().collect();
                marks.coarsen.clear();
            }
            marks
        };

        let (next_mesh, log) = if stop {
            (None, None)
        } else {
            match mesh.refine_and_coarsen(&marks) {
                Ok((m, log)) => (Some(Arc::new(m)), Some(log)),
                Err(e) => {
                    return DwrOutcome { records, mesh, final_state, failure: Some(e), converged };
                }
            }
        };

        let record = IterationRecord {
            iteration,
            dofs_primal: primal.n_nodes(),
            dofs_dual: Some(dual.n_nodes()),
            j_uh: Some(j_uh),
            err_exact: ind.exact_error,
            eta: Some(ind.total),
            eta_max: Some(ind.max_abs),
            ieff: effectivity(&ind),
            cells_refined: log
                .as_ref()
                .map(|l| l.refined.len() + l.closure_refined.len())
                .unwrap_or(0),
            cells_coarsened: log.as_ref().map(|l| l.coarsened.len()).unwrap_or(0),
            seconds: config.record_timings.then(|| start.elapsed().as_secs_f64()),
        };
        observer(&IterationView {
            record: &record,
            mesh: &mesh,
            primal: &primal,
            u_h: &u_h,
            dual: &dual,
            z_h: &z_h,
            indicators: &ind,
            deltas: &params.per_cell,
        });
        records.push(record);
        final_state = Some(FinalState { primal, u_h, dual, z_h, indicators: ind.clone() });

        if stop {
            converged = check_stop(&ind, config.tol);
            break;
        }
        mesh = next_mesh.unwrap();
    }

    DwrOutcome { records, mesh, final_state, failure: None, converged }
}

/// Global (uniform) refinement loop: primal solves only, recording the L²
/// error per level.
pub fn global_loop(
    problem: &ProblemSpec,
    config: &AdaptConfig,
    initial_mesh: QuadMesh,
    mut observer: impl FnMut(&IterationView<'_>),
) -> DwrOutcome {
    let mut mesh = Arc::new(initial_mesh);
    let mut records = Vec::new();
    let mut final_state = None;
    let rule = make_quadrature(config.quadrature_points());

    for iteration in 0..config.max_iterations {
        let start = Instant::now();
        let primal = build_space(mesh.clone(), config.p);
        let params = stabilization_params(&primal, problem, config.delta0, &rule);
        let step = (|| -> Result<(Vec<f64>, Option<f64>)> {
            let system = assemble_primal(&primal, problem, &params, &rule);
            let u_h = solve_consuming(system)?;
            let err = match problem.exact {
                Some(_) => Some(l2_error(problem, &primal, &u_h, &rule)?),
                None => None,
            };
            Ok((u_h, err))
        })();
        let (u_h, err) = match step {
            Ok(v) => v,
            Err(e) => {
                return DwrOutcome {
                    records,
                    mesh,
                    final_state,
                    failure: Some(e),
                    converged: false,
                };
            }
        };

        let stop = iteration + 1 == config.max_iterations || primal.n_nodes() >= config.max_dofs;
        let n_refined = if stop { 0 } else { mesh.n_active() };
        let record = IterationRecord {
            iteration,
            dofs_primal: primal.n_nodes(),
            dofs_dual: None,
            j_uh: None,
            err_exact: err,
            eta: None,
            eta_max: None,
            ieff: None,
            cells_refined: n_refined,
            cells_coarsened: 0,
            seconds: config.record_timings.then(|| start.elapsed().as_secs_f64()),
        };
        // No dual quantities in a global run: reuse the primal slots so the
        // observer sees a consistent view.
        let empty = ErrorIndicators {
            per_cell: vec![0.0; mesh.n_active()],
            total: 0.0,
            max_abs: 0.0,
            dofs_primal: primal.n_nodes(),
            dofs_dual: 0,
            exact_error: err,
        };
        observer(&IterationView {
            record: &record,
            mesh: &mesh,
            primal: &primal,
            u_h: &u_h,
            dual: &primal,
            z_h: &u_h,
            indicators: &empty,
            deltas: &params.per_cell,
        });
        records.push(record);
        final_state = Some(FinalState {
            primal: primal.clone(),
            u_h: u_h.clone(),
            dual: primal,
            z_h: u_h,
            indicators: empty,
        });
        if stop {
            break;
        }
        let marks = MarkSet {
            refine: mesh.active_cells().iter().copied().collect(),
            coarsen: Default::default(),
        };
        match mesh.refine_and_coarsen(&marks) {
            Ok((m, _)) => mesh = Arc::new(m),
            Err(e) => {
                return DwrOutcome {
                    records,
                    mesh,
                    final_state,
                    failure: Some(e),
                    converged: false,
                };
            }
        }
    }
    DwrOutcome { records, mesh, final_state, failure: None, converged: false }
}
