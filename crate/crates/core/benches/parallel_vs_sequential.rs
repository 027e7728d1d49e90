//! Compares the rayon-parallel and sequential per-cell paths for assembly
//! and indicator evaluation on a moderately sized adapted mesh.

use std::sync::Arc;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use dwrfem::assembly::{assemble_primal, solve, stabilization_params};
use dwrfem::estimator::indicators;
use dwrfem::fespace::{build_space, make_quadrature};
use dwrfem::mesh::{QuadMesh, Rect};
use dwrfem::parallel::set_parallel;
use dwrfem::problem::{self, freeze_goal, GoalKind};

fn bench_mesh() -> Arc<QuadMesh> {
    // 32x32 start, refined once in a band: ~1.9k cells.
    let mesh = QuadMesh::new_uniform(Rect::new(0.0, 0.0, 1.0, 1.0), 32).unwrap();
    let marks = dwrfem::mesh::MarkSet {
        refine: mesh
            .active_cells()
            .iter()
            .copied()
            .filter(|&id| {
                let r = mesh.cell_rect(id);
                (2.0 * r.mid_x() - r.mid_y() - 0.25).abs() < 0.15
            })
            .collect(),
        coarsen: Default::default(),
    };
    Arc::new(mesh.refine_and_coarsen(&marks).unwrap().0)
}

fn bench_assembly(c: &mut Criterion) {
    let mesh = bench_mesh();
    let problem = problem::example2(1e-6).unwrap();
    let rule = make_quadrature(4);
    let space = build_space(mesh, 1);
    let mut group = c.benchmark_group("assemble_primal");
    for (label, parallel) in [("parallel", true), ("sequential", false)] {
        group.bench_with_input(BenchmarkId::from_parameter(label), &parallel, |b, &par| {
            set_parallel(par);
            b.iter(|| {
                let params = stabilization_params(&space, &problem, 1.0, &rule);
                assemble_primal(&space, &problem, &params, &rule)
            });
        });
    }
    group.finish();
    set_parallel(true);
}

fn bench_indicators(c: &mut Criterion) {
    let mesh = bench_mesh();
    let problem = problem::example2(1e-6).unwrap();
    let rule = make_quadrature(5);
    let primal = build_space(mesh.clone(), 1);
    let dual = build_space(mesh, 2);
    let params = stabilization_params(&primal, &problem, 1.0, &rule);
    let system = assemble_primal(&primal, &problem, &params, &rule);
    let u_h = solve(&system).unwrap();
    let goal = freeze_goal(&GoalKind::DomainMean, &problem, &primal, &u_h, &rule).unwrap();
    let dual_params = stabilization_params(&dual, &problem, 1.0, &rule);
    let dual_system = dwrfem::assembly::assemble_dual(&dual, &problem, &goal, &dual_params, &rule);
    let z_h = solve(&dual_system).unwrap();

    let mut group = c.benchmark_group("indicators");
    for (label, parallel) in [("parallel", true), ("sequential", false)] {
        group.bench_with_input(BenchmarkId::from_parameter(label), &parallel, |b, &par| {
            set_parallel(par);
            b.iter(|| {
                indicators(&primal, &u_h, &dual, &z_h, &problem, &params, &goal, &rule).unwrap()
            });
        });
    }
    group.finish();
    set_parallel(true);
}

criterion_group!(benches, bench_assembly, bench_indicators);
criterion_main!(benches);
