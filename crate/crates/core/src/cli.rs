//! Command-line driver: single runs, convergence studies, the identity
//! check suite, and mesh statistics.
//!
//! The binary delegates to [`run_cli`]; everything else is plumbing around
//! the library described by a configuration file (see the config module for
//! the grammar). Output files land in the configured directory, which the
//! `PIOLA_OUTPUT_DIR` environment variable overrides.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use crate::config::{parse_config, JobConfig};
use crate::export::{diagnostics_csv, errors_csv, vtk_snapshot, write_text};
use crate::flowmap::{integrate_flow, VelocityField};
use crate::mesh::{build_disk_mesh, move_mesh, taylor_hood};
use crate::timestepper::{run as run_solver, Trajectory};
use crate::transforms::{lambda_kernel, PointwiseField};
use crate::verification::{
    appendix_identity_suite, convergence_study_with, error_norms, transport_identity_residual,
};
use crate::{Error, Mat2, Result, Vec2};

/// Moving-domain incompressible-flow solver on flow-map meshes.
#[derive(Parser)]
#[command(name = "piola", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Time-step once through [0, t_end] at the configured step size.
    Run {
        /// Configuration file.
        config: PathBuf,
    },
    /// Run every step size in the list and fit convergence orders.
    Study {
        /// Configuration file; the forcing must be manufactured.
        config: PathBuf,
    },
    /// Check the flow-map, transform and transport identities; exit 1 on
    /// any failure.
    Verify,
    /// Print statistics of the mesh the configuration would build.
    MeshInfo {
        /// Configuration file.
        config: PathBuf,
    },
}

/// Binary entry point: parse the process arguments and execute.
pub fn run_cli() -> i32 {
    run_with_args(std::env::args_os())
}

/// Parse `args` (the first entry is the program name) and execute, printing
/// to stdout/stderr; returns the process exit code.
pub fn run_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
        }
    };
    let outcome = match cli.command {
        Command::Run { config } => cmd_run(&config),
        Command::Study { config } => cmd_study(&config),
        Command::Verify => cmd_verify(),
        Command::MeshInfo { config } => cmd_mesh_info(&config),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

/// Resolve and create the output directory; `PIOLA_OUTPUT_DIR` wins over
/// the configured value.
fn output_dir(job: &JobConfig) -> Result<PathBuf> {
    let dir = match std::env::var_os("PIOLA_OUTPUT_DIR") {
        Some(v) => PathBuf::from(v),
        None => PathBuf::from(&job.output.directory),
    };
    std::fs::create_dir_all(&dir).map_err(|source| Error::Write {
        path: dir.display().to_string(),
        source,
    })?;
    Ok(dir)
}

fn enforce_iteration_cap(trajectory: &Trajectory, cap: usize) -> Result<()> {
    for d in &trajectory.diagnostics {
        if d.solver_iterations > cap {
            return Err(Error::InvalidInput(format!(
                "step {}: solver used {} iterations, above solver.max_iterations = {cap}",
                d.step, d.solver_iterations
            )));
        }
    }
    Ok(())
}

fn cmd_run(path: &Path) -> Result<i32> {
    let job = parse_config(path)?;
    if job.is_study() {
        return Err(Error::Config(
            "time.tau_list has several entries; use the study verb".into(),
        ));
    }
    print!("{}", job.describe());
    let dir = output_dir(&job)?;
    let cfg = job.run_config(job.taus[0]);
    let trajectory = run_solver(&cfg)?;
    enforce_iteration_cap(&trajectory, job.max_iterations)?;

    if job.output.csv {
        let target = dir.join("diagnostics.csv");
        write_text(&target, &diagnostics_csv(&trajectory.diagnostics))?;
        println!("wrote {}", target.display());
    }
    if job.output.vtk_stride > 0 {
        for state in &trajectory.states {
            if state.step % job.output.vtk_stride == 0 {
                let target = dir.join(format!("snapshot_{:06}.vtk", state.step));
                let vtk = vtk_snapshot(
                    &state.mesh,
                    &[state.velocity.as_ref(), state.pressure.as_ref()],
                )?;
                write_text(&target, &vtk)?;
                println!("wrote {}", target.display());
            }
        }
    }

    let fin = trajectory.final_state();
    if let Some(case) = job.case() {
        let (l2, h1) = error_norms(&fin.mesh, &fin.velocity, &case.exact_at(fin.t))?;
        println!("final errors: l2 = {l2:.3e}, h1 = {h1:.3e}");
    }
    let energy = trajectory
        .diagnostics
        .last()
        .map_or(0.0, |d| d.kinetic_energy);
    println!(
        "completed {} step(s) to t = {:?}, kinetic energy {energy:.6e}",
        trajectory.diagnostics.len(),
        fin.t
    );
    Ok(0)
}

fn cmd_study(path: &Path) -> Result<i32> {
    let job = parse_config(path)?;
    let Some(case) = job.case() else {
        return Err(Error::Config(
            "study needs forcing.kind = manufactured:<case> so errors can be \
             measured against an exact solution"
                .into(),
        ));
    };
    print!("{}", job.describe());
    let dir = output_dir(&job)?;
    let template = job.run_config(job.taus[0]);
    let report = convergence_study_with(case, &job.taus, &template)?;

    if job.output.csv {
        let target = dir.join("errors.csv");
        write_text(&target, &errors_csv(&report))?;
        println!("wrote {}", target.display());
    }
    for (i, row) in report.rows.iter().enumerate() {
        let orders = if i == 0 {
            "orders -".to_string()
        } else {
            format!(
                "orders l2 {:.2}, h1 {:.2}",
                report.orders_l2[i - 1],
                report.orders_h1[i - 1]
            )
        };
        println!(
            "tau {:?}: l2 {:.6e}, h1 {:.6e}, {orders}, {:.2} s",
            row.tau, row.l2_error, row.h1_error, row.runtime_s
        );
    }
    println!(
        "spatial floors: l2 {:.3e}, h1 {:.3e}",
        report.spatial_floor_l2, report.spatial_floor_h1
    );
    if !report.valid {
        eprintln!(
            "study invalid: the spatial error is not dominated by the time \
             error; refine domain.mesh_h"
        );
        return Ok(1);
    }
    Ok(0)
}

fn cmd_mesh_info(path: &Path) -> Result<i32> {
    let job = parse_config(path)?;
    let mesh = build_disk_mesh(job.mesh_h)?;
    let dofs = taylor_hood(&mesh);
    println!("target h = {:?}", job.mesh_h);
    println!("longest edge = {:?}", mesh.h);
    println!("vertices = {}", mesh.vertices.len());
    println!("edges = {}", mesh.edges.len());
    println!("triangles = {}", mesh.triangles.len());
    println!("velocity dofs = {}", dofs.n_velocity);
    println!("pressure dofs = {}", dofs.n_pressure);
    println!("boundary velocity dofs = {}", dofs.boundary_velocity.len());
    println!(
        "mesh area = {:?} (disk area = {:?})",
        mesh.area(),
        std::f64::consts::PI
    );
    Ok(0)
}

fn cmd_verify() -> Result<i32> {
    type Check = (&'static str, fn() -> Result<String>);
    let checks: [Check; 6] = [
        ("flow-map closed forms", check_flow_map),
        ("lambda kernel oracles", check_lambda_kernel),
        ("appendix identities", check_appendix),
        ("transport identity", check_transport),
        ("moved-mesh area conservation", check_area_conservation),
        ("saddle-point residuals", check_saddle_residuals),
    ];
    let mut failures = 0usize;
    for (name, check) in checks {
        match check() {
            Ok(detail) => println!("ok   {name}: {detail}"),
            Err(e) => {
                failures += 1;
                println!("FAIL {name}: {e}");
            }
        }
    }
    if failures == 0 {
        println!("all {} checks passed", 6);
        Ok(0)
    } else {
        println!("{failures} of 6 checks failed");
        Ok(1)
    }
}

fn ensure(cond: bool, msg: String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::InvalidInput(msg))
    }
}

/// Deterministic well-spread sample points: a golden-angle spiral.
fn sample_points(n: usize, max_radius: f64) -> Vec<Vec2> {
    (0..n)
        .map(|i| {
            let r = max_radius * ((i as f64 + 0.5) / n as f64).sqrt();
            let a = 2.399_963_229_728_653 * i as f64;
            Vec2::new(r * a.cos(), r * a.sin())
        })
        .collect()
}

fn check_flow_map() -> Result<String> {
    let t = 1.0;
    let substeps = 1000;
    let mut worst: f64 = 0.0;

    let omega = 1.3;
    let rot = VelocityField::rigid_rotation(omega);
    let (s, c) = (omega * t).sin_cos();
    let r = Mat2::new(c, -s, s, c);
    for &x in &sample_points(20, 0.95) {
        let (y, j) = integrate_flow(&rot, x, Mat2::identity(), 0.0, t, substeps, 2.0)?;
        worst = worst.max((y - r * x).norm()).max((j - r).norm());
    }

    let a = Mat2::new(0.0, 0.5, 0.0, 0.0);
    let shear = VelocityField::shear(a)?;
    for &x in &sample_points(20, 0.9) {
        let (y, j) = integrate_flow(&shear, x, Mat2::identity(), 0.0, t, substeps, 2.0)?;
        worst = worst
            .max((y - (x + t * (a * x))).norm())
            .max((j - (Mat2::identity() + t * a)).norm());
    }
    ensure(
        worst <= 1e-8,
        format!("closed-form deviation {worst:.3e} above 1e-8"),
    )?;

    let bump = VelocityField::stream_bump(Vec2::new(0.3, -0.1), 0.9, 0.5, 4)?;
    let mut det_dev: f64 = 0.0;
    for &x in &sample_points(30, 0.95) {
        let (_, j) = integrate_flow(&bump, x, Mat2::identity(), 0.0, t, substeps, 2.0)?;
        det_dev = det_dev.max((j.determinant() - 1.0).abs());
    }
    ensure(
        det_dev <= 1e-8,
        format!("determinant deviation {det_dev:.3e} above 1e-8"),
    )?;
    Ok(format!(
        "closed-form deviation {worst:.3e}, det deviation {det_dev:.3e}"
    ))
}

fn check_lambda_kernel() -> Result<String> {
    let points = sample_points(25, 0.8);

    let rot = lambda_kernel(&VelocityField::rigid_rotation(0.9), 0.7, 70, 2.0)?;
    let mut rot_max: f64 = 0.0;
    for &x in &points {
        let m = rot.eval(x)?;
        rot_max = rot_max.max(m.abs().max());
    }
    ensure(
        rot_max <= 1e-12,
        format!("rotation kernel magnitude {rot_max:.3e} above 1e-12"),
    )?;

    let shear = VelocityField::shear(Mat2::new(0.0, 1.0, 0.0, 0.0))?;
    let kernel = lambda_kernel(&shear, 0.6, 60, 2.0)?;
    let oracle = Mat2::new(0.0, 1.0, 1.0, 0.0);
    let mut shear_max: f64 = 0.0;
    let mut asym: f64 = 0.0;
    for &x in &points {
        let m = kernel.eval(x)?;
        shear_max = shear_max.max((m - oracle).abs().max());
        asym = asym.max((m - m.transpose()).abs().max());
    }
    ensure(
        shear_max <= 1e-8,
        format!("unit-shear kernel deviation {shear_max:.3e} above 1e-8"),
    )?;
    ensure(asym == 0.0, format!("kernel asymmetry {asym:.3e}"))?;
    Ok(format!(
        "rotation magnitude {rot_max:.3e}, unit-shear deviation {shear_max:.3e}"
    ))
}

/// The four field constructors. The identity suite's finite-difference
/// budget is calibrated for these; sharp sums develop large third spatial
/// derivatives of the flow map by t = 1 and need a smaller step than the
/// suite's fixed one, so sums are exercised elsewhere (transport rate check).
fn verify_fields() -> Vec<(&'static str, VelocityField)> {
    vec![
        ("zero", VelocityField::zero()),
        ("rotation", VelocityField::rigid_rotation(0.8)),
        (
            "shear",
            VelocityField::shear(Mat2::new(0.0, 0.3, 0.0, 0.0)).expect("trace-free"),
        ),
        (
            "bump",
            VelocityField::stream_bump(Vec2::new(0.4, 0.1), 1.1, 0.4, 4).expect("valid bump"),
        ),
    ]
}

fn check_appendix() -> Result<String> {
    let points = sample_points(50, 0.85);
    let mut jacobi: f64 = 0.0;
    let mut div: f64 = 0.0;
    for (name, field) in verify_fields() {
        for &t in &[0.1, 0.5, 1.0] {
            let report = appendix_identity_suite(&field, t, &points)?;
            ensure(
                report.pass,
                format!(
                    "{name} at t = {t}: jacobi {:.3e}, push div {:.3e}, pull div {:.3e}, \
                     l2 slack {:.3e}, h1 slack {:.3e}",
                    report.jacobi_max,
                    report.push_divergence_max,
                    report.pull_divergence_max,
                    report.l2_slack(),
                    report.h1_slack()
                ),
            )?;
            jacobi = jacobi.max(report.jacobi_max);
            div = div.max(report.push_divergence_max).max(report.pull_divergence_max);
        }
    }
    Ok(format!(
        "all kinds at t in {{0.1, 0.5, 1.0}}: jacobi max {jacobi:.3e}, divergence max {div:.3e}"
    ))
}

fn check_transport() -> Result<String> {
    let u0 = PointwiseField::from_velocity_field(
        0.0,
        &VelocityField::stream_bump(Vec2::new(0.2, 0.0), 0.6, 1.0, 4)?,
    );
    let v0 = PointwiseField::from_velocity_field(
        0.0,
        &VelocityField::stream_bump(Vec2::new(-0.15, 0.1), 0.7, 0.8, 4)?,
    );

    let mesh = build_disk_mesh(0.25)?;
    let rot = transport_identity_residual(
        &VelocityField::rigid_rotation(1.1),
        &u0,
        &v0,
        0.5,
        1e-3,
        &mesh,
    )?;
    ensure(
        rot <= 1e-10,
        format!("rotation residual {rot:.3e} above 1e-10"),
    )?;

    let field = VelocityField::sum(vec![
        VelocityField::rigid_rotation(0.7),
        VelocityField::stream_bump(Vec2::new(0.5, 0.1), 0.8, 0.3, 4)?,
    ]);
    let coarse_mesh = build_disk_mesh(0.05)?;
    let fine_mesh = build_disk_mesh(0.025)?;
    let coarse = transport_identity_residual(&field, &u0, &v0, 0.5, 1e-3, &coarse_mesh)?;
    let fine = transport_identity_residual(&field, &u0, &v0, 0.5, 5e-4, &fine_mesh)?;
    let bound = 5.0 * (1e-3_f64.powi(2) + 0.05_f64.powi(2));
    ensure(
        coarse <= bound,
        format!("residual {coarse:.3e} above the bound {bound:.3e}"),
    )?;
    ensure(
        fine <= coarse / 3.0,
        format!("no joint-rate shrink: coarse {coarse:.3e}, fine {fine:.3e}"),
    )?;
    Ok(format!(
        "rotation residual {rot:.3e}; joint refinement {coarse:.3e} -> {fine:.3e}"
    ))
}

fn check_area_conservation() -> Result<String> {
    use std::sync::Arc;
    let field = VelocityField::stream_bump(Vec2::new(0.5, 0.0), 1.2, 0.3, 4)?;
    let drift_for = |h: f64| -> Result<f64> {
        let mesh = Arc::new(build_disk_mesh(h)?);
        let reference = mesh.area();
        let mut worst: f64 = 0.0;
        for &t in &[0.25, 0.5, 0.75, 1.0] {
            let moved = move_mesh(mesh.clone(), &field, t, 200, 2.0)?;
            worst = worst.max((moved.area() - reference).abs());
        }
        Ok(worst)
    };
    let coarse = drift_for(0.2)?;
    let fine = drift_for(0.1)?;
    ensure(
        coarse <= 0.5 * 0.2 * 0.2,
        format!("coarse drift {coarse:.3e} above 0.5 h^2"),
    )?;
    let ratio = coarse / fine;
    ensure(
        (3.0..=5.0).contains(&ratio),
        format!("drift ratio {ratio:.2} outside [3, 5] (coarse {coarse:.3e}, fine {fine:.3e})"),
    )?;
    Ok(format!(
        "drift {coarse:.3e} at h = 0.2, {fine:.3e} at h = 0.1 (ratio {ratio:.2})"
    ))
}

fn check_saddle_residuals() -> Result<String> {
    let case = crate::verification::rotation_stokes_case();
    let mut cfg = case.run_config(0.05, 0.1, 0.3);
    cfg.solver_tol = 1e-10;
    let trajectory = run_solver(&cfg)?;
    let mut res: f64 = 0.0;
    let mut div: f64 = 0.0;
    for d in &trajectory.diagnostics {
        res = res.max(d.solver_residual);
        div = div.max(d.divergence_residual);
    }
    ensure(
        res <= 1e-10,
        format!("solver residual {res:.3e} above 1e-10"),
    )?;
    ensure(
        div <= 1e-9,
        format!("divergence residual {div:.3e} above 1e-9"),
    )?;
    Ok(format!("residual max {res:.3e}, divergence max {div:.3e}"))
}
