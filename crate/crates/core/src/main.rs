//! Command-line entry point: run benchmark/custom configurations and emit
//! reports.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dwrfem::adapt::{dwr_loop, global_loop, DwrOutcome, IterationView};
use dwrfem::assembly::{assemble_primal, stabilization_params};
use dwrfem::config::load_config;
use dwrfem::fespace::make_quadrature;
use dwrfem::report::{
    sample_corners, sample_corners_subdivided, write_csv, write_json, write_vtu,
    write_vtu_subdivided, RunReport,
};
use dwrfem::{Error, Result};

#[derive(Parser)]
#[command(
    name = "dwrfem",
    about = "Adaptive SUPG solver with goal-oriented dual-weighted-residual error control"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute a run configuration and write CSV/JSON/VTU reports.
    Run {
        /// TOML (or JSON) configuration file.
        config: PathBuf,
        /// Override the output directory.
        #[arg(long)]
        output_dir: Option<PathBuf>,
        /// Override the iteration cap.
        #[arg(long)]
        max_iterations: Option<usize>,
        /// Remove the dof cap (full-size benchmark runs).
        #[arg(long)]
        full: bool,
    },
    /// Print the fully resolved configuration without running.
    Describe {
        /// TOML (or JSON) configuration file.
        config: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, output_dir, max_iterations, full } => {
            run(&config, output_dir, max_iterations, full)
        }
        Command::Describe { config } => describe(&config),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Solver(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn describe(path: &Path) -> Result<()> {
    let (config, unknown) = load_config(path)?;
    for key in &unknown {
        eprintln!("warning: unknown configuration key `{key}`");
    }
    print!("{}", config.to_toml());
    Ok(())
}

fn run(
    path: &Path,
    output_dir: Option<PathBuf>,
    max_iterations: Option<usize>,
    full: bool,
) -> Result<()> {
    let (mut config, unknown) = load_config(path)?;
    if let Some(key) = unknown.first() {
        return Err(Error::Config(format!(
            "{}: unknown configuration key `{key}`",
            path.display()
        )));
    }
    if let Some(dir) = output_dir {
        config.output.directory = dir;
    }
    if let Some(n) = max_iterations {
        config.adaptivity.max_iterations = n;
    }
    if full {
        config.adaptivity.max_dofs = 0;
    }
    config.validate()?;

    let problem = config.problem()?;
    let goal = config.goal_kind()?;
    let adapt = config.adapt_config();
    let mesh = config.initial_mesh()?;
    let out_dir = config.output.directory.clone();
    std::fs::create_dir_all(&out_dir).map_err(Error::io(out_dir.display().to_string()))?;

    let write_snapshots = config.output.write_vtu;
    let subdivide = config.discretization.p >= 2;
    let observer = |view: &IterationView<'_>| {
        let record = view.record;
        match (record.eta, record.err_exact) {
            (Some(eta), _) => eprintln!(
                "iter {:>3}: dofs {:>8}  eta {:+.6e}  ieff {}",
                record.iteration,
                record.dofs_primal,
                eta,
                record
                    .ieff
                    .map(|v| format!("{v:.4}"))
                    .unwrap_or_else(|| "-".into()),
            ),
            (None, Some(err)) => eprintln!(
                "iter {:>3}: dofs {:>8}  l2 error {:.6e}",
                record.iteration, record.dofs_primal, err
            ),
            (None, None) => {
                eprintln!("iter {:>3}: dofs {:>8}", record.iteration, record.dofs_primal)
            }
        }
        if write_snapshots {
            let vtu_path = out_dir.join(format!("iter_{:03}.vtu", record.iteration));
            let cell_fields = vec![
                ("eta".to_string(), view.indicators.per_cell.clone()),
                ("delta".to_string(), view.deltas.to_vec()),
            ];
            let result = if subdivide {
                let fields = vec![
                    ("u".to_string(), sample_corners_subdivided(view.primal, view.u_h)),
                    ("z".to_string(), sample_corners_subdivided(view.dual, view.z_h)),
                ];
                write_vtu_subdivided(view.mesh, &fields, &cell_fields, &vtu_path)
            } else {
                let fields = vec![
                    ("u".to_string(), sample_corners(view.primal, view.u_h)),
                    ("z".to_string(), sample_corners(view.dual, view.z_h)),
                ];
                write_vtu(view.mesh, &fields, &cell_fields, &vtu_path)
            };
            if let Err(e) = result {
                eprintln!("warning: could not write {}: {e}", vtu_path.display());
            }
        }
    };

    let outcome: DwrOutcome = match config.adaptivity.mode.as_str() {
        "global" => global_loop(&problem, &adapt, mesh, observer),
        _ => dwr_loop(&problem, &goal, &adapt, mesh, observer),
    };

    // Reports are written even for aborted runs (partial record list).
    let config_echo = serde_json::to_value(&config)
        .map_err(|e| Error::Config(format!("config echo failed: {e}")))?;
    let report = RunReport::new(config_echo, outcome.records.clone());
    write_csv(&report.records, &out_dir.join("history.csv"))?;
    write_json(&report, &out_dir.join("report.json"))?;

    if config.output.dump_matrices {
        if let Some(final_state) = &outcome.final_state {
            let rule = make_quadrature(adapt.quadrature_points());
            let params =
                stabilization_params(&final_state.primal, &problem, adapt.delta0, &rule);
            let system = assemble_primal(&final_state.primal, &problem, &params, &rule);
            system.write_matrix_market(&out_dir.join("primal_matrix.mtx"))?;
        }
    }

    if let Some(failure) = outcome.failure {
        return Err(failure);
    }
    Ok(())
}
