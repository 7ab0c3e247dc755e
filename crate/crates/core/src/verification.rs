//! Manufactured solutions, error norms, convergence studies, and
//! brute-force checks of the structural identities behind the scheme: the
//! transport identity for the moving inner product, the Jacobi-formula
//! cancellation, and the Piola norm bounds. Everything here is an oracle:
//! closed forms and finite differences that the solver modules must agree
//! with but do not share code with.

use std::sync::Arc;
use std::time::Instant;

use crate::assembly::{barycentric_gradients, element_nodes, p2_gradients, p2_values, FEFunction, Space};
use crate::flowmap::{bump_profile_full, integrate_flow, VelocityField};
use crate::mesh::{build_disk_mesh, quad_point, Mesh, MovedMesh, QUAD_POINTS, QUAD_WEIGHTS};
use crate::timestepper::{blend_state, interpolate_state, run, RunConfig, Trajectory};
use crate::transforms::{
    fd_divergence, invert_jacobian, lambda_kernel, piola_pull, piola_push, FlowMap,
    PointwiseField, TimeField,
};
use crate::{Error, Mat2, Result, Vec2};

/// Hold-all radius used by the verification drivers.
const HOLDALL: f64 = 2.0;

/// RK4 substeps for a flow leg spanning `t` time units.
fn leg_substeps(t: f64) -> usize {
    ((t.abs() * 80.0).ceil() as usize).max(20)
}

/// Counter-clockwise rotation by angle `a`.
fn rotation_matrix(a: f64) -> Mat2 {
    let (s, c) = a.sin_cos();
    Mat2::new(c, -s, s, c)
}

/// Parameters of the stream-function bump `psi = A (1 - |x-c|^2/r^2)^m`.
#[derive(Clone, Copy, Debug)]
pub struct BumpParams {
    /// Bump center.
    pub center: Vec2,
    /// Support radius.
    pub radius: f64,
    /// Stream-function amplitude.
    pub amplitude: f64,
    /// Profile exponent. At least 4 keeps the induced forcing continuous
    /// across the support circle; 2 is fine when the support covers the
    /// whole domain, where the jump never enters.
    pub exponent: u32,
}

impl BumpParams {
    /// The induced divergence-free velocity `u0 = grad^perp psi`.
    pub fn field(&self) -> Result<VelocityField> {
        VelocityField::stream_bump(self.center, self.radius, self.amplitude, self.exponent)
    }

    /// Closed-form vector Laplacian of `u0`. With `s = |d|^2 / r^2` and
    /// `q = 2/r^2`, the scalar Laplacian of `psi` is `2q (s g'' + g')`, and
    /// taking `grad^perp` of it gives
    /// `Delta u0 = q^2 (4 g'' + 2 s g''') (-d_2, d_1)`.
    fn laplacian(&self, x: Vec2) -> Vec2 {
        let d = x - self.center;
        let q = 2.0 / (self.radius * self.radius);
        let s = 0.5 * q * d.norm_squared();
        if s >= 1.0 {
            return Vec2::zeros();
        }
        let (_, _, gpp, gppp) = bump_profile_full(self.amplitude, self.exponent, s);
        let factor = q * q * (4.0 * gpp + 2.0 * s * gppp);
        Vec2::new(-factor * d.y, factor * d.x)
    }
}

/// A chosen exact solution with the forcing that makes it solve the strong
/// problem `du/dt + (V . grad) u - Lap u + grad p = f` on the rotating disk.
#[derive(Clone)]
pub struct ManufacturedCase {
    /// Human-readable label.
    pub description: String,
    /// Domain motion.
    pub w: VelocityField,
    /// Advecting field; `None` means `V = w`.
    pub advection: Option<VelocityField>,
    /// Initial velocity `u_ex(0, .)`.
    pub u0: VelocityField,
    exact: Arc<dyn Fn(f64, Vec2) -> (Vec2, Mat2) + Send + Sync>,
    forcing: TimeField,
}

impl ManufacturedCase {
    /// Exact velocity at `(t, x)`.
    pub fn exact_velocity(&self, t: f64, x: Vec2) -> Vec2 {
        (self.exact)(t, x).0
    }

    /// Snapshot of the exact solution at time `t`, with analytic Jacobian.
    pub fn exact_at(&self, t: f64) -> PointwiseField {
        let value = self.exact.clone();
        let grad = self.exact.clone();
        PointwiseField::with_gradient(t, move |x| Ok(value(t, x).0), move |x| Ok(grad(t, x).1))
    }

    /// The induced forcing.
    pub fn forcing(&self) -> TimeField {
        self.forcing.clone()
    }

    /// Solver configuration reproducing this case.
    pub fn run_config(&self, tau: f64, t_end: f64, mesh_h: f64) -> RunConfig {
        let mut cfg = RunConfig::new(self.w.clone(), tau, t_end, mesh_h);
        cfg.advection = self.advection.clone();
        cfg.u0 = Some(self.u0.clone());
        cfg.forcing = Some(self.forcing.clone());
        cfg
    }
}

/// Manufactured case on the rotating disk: `w` is a rigid rotation with
/// angular velocity `omega`, the exact velocity is the pushforward
/// `u_ex(t, x) = R u0(R^T x)` of a stream-function bump (all compositions
/// closed-form because the flow is a rotation), the exact pressure is
/// `p_ex = x_1 x_2` (zero-mean on every rotated disk), and the forcing is
/// computed pointwise from the strong equation. Pass `advection` to advect
/// with a field different from `w`; `None` gives the Stokes-like case
/// `V = w`.
pub fn make_rotation_case(
    omega: f64,
    bump: BumpParams,
    advection: Option<VelocityField>,
) -> Result<ManufacturedCase> {
    let support = bump.center.norm() + bump.radius;
    if support > 1.0 + 1e-12 {
        return Err(Error::InvalidInput(format!(
            "bump support reaches radius {support:.3}; the exact solution must vanish on the unit circle"
        )));
    }
    let u0_field = bump.field()?;
    let v_field = advection
        .clone()
        .unwrap_or_else(|| VelocityField::rigid_rotation(omega));

    let u0 = u0_field.clone();
    let exact = Arc::new(move |t: f64, x: Vec2| -> (Vec2, Mat2) {
        let r = rotation_matrix(omega * t);
        let y = r.transpose() * x;
        (r * u0.velocity(0.0, y), r * u0.jacobian(0.0, y) * r.transpose())
    });

    let u0 = u0_field.clone();
    let forcing = TimeField::new(move |t, x| {
        let r = rotation_matrix(omega * t);
        let rt = r.transpose();
        let y = rt * x;
        let gen = Mat2::new(0.0, -1.0, 1.0, 0.0);
        let u0y = u0.velocity(0.0, y);
        let du0y = u0.jacobian(0.0, y);
        // d/dt [R(wt) u0(R(-wt) x)] = w G R u0(y) - w R Du0(y) G y with
        // G the rotation generator.
        let dt_u = omega * (gen * (r * u0y)) - omega * (r * (du0y * (gen * y)));
        let du_ex = r * du0y * rt;
        let advect = du_ex * v_field.velocity(t, x);
        let lap = r * bump.laplacian(y);
        let grad_p = Vec2::new(x.y, x.x);
        Ok(dt_u + advect - lap + grad_p)
    });

    Ok(ManufacturedCase {
        description: match &advection {
            None => format!("rotating disk (omega = {omega}), V = w"),
            Some(_) => format!("rotating disk (omega = {omega}), independent advection"),
        },
        w: VelocityField::rigid_rotation(omega),
        advection,
        u0: u0_field,
        exact,
        forcing,
    })
}

/// Sharply localized bump: support strictly inside the disk, exponent high
/// enough that the induced forcing stays continuous across the support
/// circle. The initial velocity of zero-forcing runs driven through the
/// configuration layer.
pub fn standard_bump() -> BumpParams {
    BumpParams {
        center: Vec2::new(0.3, 0.0),
        radius: 0.6,
        amplitude: 1.0,
        exponent: 4,
    }
}

/// Polynomial cap `psi = (1 - |x|^2)^2` supported on the whole disk. The
/// induced velocity is a cubic polynomial, so quadratic elements interpolate
/// it with an error orders of magnitude below that of [`standard_bump`];
/// the convergence cases use it to keep the time error visible on meshes
/// of affordable size.
pub fn polynomial_cap() -> BumpParams {
    BumpParams {
        center: Vec2::new(0.0, 0.0),
        radius: 1.0,
        amplitude: 1.0,
        exponent: 2,
    }
}

/// Standard case with `V = w`: the convection block vanishes. The angular
/// velocity is chosen so that the implicit-Euler time error dominates the
/// residual spatial error over the step sizes a study typically sweeps.
pub fn rotation_stokes_case() -> ManufacturedCase {
    make_rotation_case(4.0, polynomial_cap(), None).expect("standard parameters are valid")
}

/// Standard case with `V != w`: the rotation plus a divergence-free bump,
/// so the convection block is active.
pub fn rotation_oseen_case() -> ManufacturedCase {
    let v = VelocityField::sum(vec![
        VelocityField::rigid_rotation(4.0),
        VelocityField::stream_bump(Vec2::new(-0.2, 0.15), 1.4, 0.5, 4)
            .expect("advection bump parameters are valid"),
    ]);
    make_rotation_case(4.0, polynomial_cap(), Some(v)).expect("standard parameters are valid")
}

/// L2 and H1-seminorm of `uh - exact` by quadrature on the moved mesh. The
/// exact field must carry an analytic Jacobian.
pub fn error_norms(
    mesh: &MovedMesh,
    uh: &FEFunction,
    exact: &PointwiseField,
) -> Result<(f64, f64)> {
    if uh.space != Space::Velocity {
        return Err(Error::InvalidInput("error norms expect a velocity function".into()));
    }
    if uh.mesh_id != mesh.base.id() || (uh.t - mesh.t).abs() > 1e-12 {
        return Err(Error::Mesh(
            "finite element function does not live on the supplied mesh".into(),
        ));
    }
    if !exact.has_jacobian() {
        return Err(Error::InvalidInput(
            "exact field needs an analytic Jacobian for the H1 error".into(),
        ));
    }
    let mut l2 = 0.0;
    let mut h1 = 0.0;
    for tri in 0..mesh.base.triangles.len() {
        let [a, b, c] = mesh.triangle_coords(tri);
        let (grads, area) = barycentric_gradients(a, b, c);
        let nodes = element_nodes(&mesh.base, tri);
        for (l, wq) in QUAD_POINTS.iter().zip(QUAD_WEIGHTS) {
            let x = quad_point(l, a, b, c);
            let vals = p2_values(l);
            let gr = p2_gradients(l, &grads);
            let mut uval = Vec2::zeros();
            let mut ugrad = Mat2::zeros();
            for (k, &n) in nodes.iter().enumerate() {
                let ux = uh.dofs[2 * n];
                let uy = uh.dofs[2 * n + 1];
                uval.x += ux * vals[k];
                uval.y += uy * vals[k];
                ugrad[(0, 0)] += ux * gr[k].x;
                ugrad[(0, 1)] += ux * gr[k].y;
                ugrad[(1, 0)] += uy * gr[k].x;
                ugrad[(1, 1)] += uy * gr[k].y;
            }
            let dv = uval - exact.eval(x)?;
            let dg = ugrad - exact.jacobian(x)?;
            let w = wq * area;
            l2 += w * dv.norm_squared();
            h1 += w * dg.norm_squared();
        }
    }
    Ok((l2.sqrt(), h1.sqrt()))
}

/// One row of a convergence study.
#[derive(Clone, Debug)]
pub struct ErrorRow {
    /// Time step of the run.
    pub tau: f64,
    /// L2 velocity error at the final time.
    pub l2_error: f64,
    /// H1-seminorm velocity error at the final time.
    pub h1_error: f64,
    /// Wall-clock seconds for the run.
    pub runtime_s: f64,
}

/// Errors per time step plus fitted orders and the spatial-dominance guard.
#[derive(Clone, Debug)]
pub struct ErrorReport {
    /// Case label.
    pub description: String,
    /// Rows sorted by decreasing time step.
    pub rows: Vec<ErrorRow>,
    /// `orders_l2[i]` fits rows `i` and `i+1`.
    pub orders_l2: Vec<f64>,
    /// Same for the H1-seminorm errors.
    pub orders_h1: Vec<f64>,
    /// Spatial-error estimate: the intercept of a least-squares linear fit
    /// of error against time step through the last three rows, clamped at
    /// zero. NaN when fewer than three rows are available.
    pub spatial_floor_l2: f64,
    /// Same for the H1-seminorm.
    pub spatial_floor_h1: f64,
    /// True when the spatial floor stays below 10% of the finest measured
    /// errors, so the fitted orders measure the time discretization. Always
    /// false with fewer than three rows: two points cannot separate a
    /// floor from the decay.
    pub valid: bool,
}

/// Experimental orders of convergence: `log(e_i/e_{i+1}) / log(t_i/t_{i+1})`.
/// Scale-invariant in the errors.
pub fn fit_orders(taus: &[f64], errors: &[f64]) -> Vec<f64> {
    assert_eq!(taus.len(), errors.len());
    taus.windows(2)
        .zip(errors.windows(2))
        .map(|(t, e)| (e[0] / e[1]).ln() / (t[0] / t[1]).ln())
        .collect()
}

/// Run the case once per time step at fixed `mesh_h`, measure final-time
/// errors, fit orders, and estimate the residual spatial error from the
/// intercept of the error-versus-tau trend. A report with `valid = false`
/// means the mesh is too coarse (or the tau list too short) for the orders
/// to be trusted; callers must treat that as a failure, not as a pass.
pub fn convergence_study(
    case: &ManufacturedCase,
    taus: &[f64],
    mesh_h: f64,
    t_end: f64,
) -> Result<ErrorReport> {
    if taus.is_empty() {
        return Err(Error::InvalidInput("convergence study needs at least one time step".into()));
    }
    let template = case.run_config(taus[0], t_end, mesh_h);
    convergence_study_with(case, taus, &template)
}

/// [`convergence_study`] with the solver knobs (substeps, hold-all radius,
/// solver tolerance, mesh size, final time) taken from a template
/// configuration; the template's own time step is ignored.
pub fn convergence_study_with(
    case: &ManufacturedCase,
    taus: &[f64],
    template: &RunConfig,
) -> Result<ErrorReport> {
    if taus.is_empty() {
        return Err(Error::InvalidInput("convergence study needs at least one time step".into()));
    }
    let mut ts = taus.to_vec();
    ts.sort_by(|a, b| b.partial_cmp(a).expect("time steps must be comparable"));
    ts.dedup();

    let measure = |tau: f64| -> Result<ErrorRow> {
        let mut cfg = template.clone();
        cfg.tau = tau;
        let start = Instant::now();
        let traj = run(&cfg)?;
        let runtime_s = start.elapsed().as_secs_f64();
        let fin = traj.final_state();
        let exact = case.exact_at(fin.t);
        let (l2_error, h1_error) = error_norms(&fin.mesh, &fin.velocity, &exact)?;
        Ok(ErrorRow { tau, l2_error, h1_error, runtime_s })
    };

    let mut rows = Vec::with_capacity(ts.len());
    for &tau in &ts {
        rows.push(measure(tau)?);
    }
    let finest = rows.last().expect("at least one row").clone();
    let spatial_floor_l2 = intercept_floor(&rows, |r| r.l2_error);
    let spatial_floor_h1 = intercept_floor(&rows, |r| r.h1_error);
    let valid = spatial_floor_l2 <= 0.1 * finest.l2_error
        && spatial_floor_h1 <= 0.1 * finest.h1_error;

    let l2s: Vec<f64> = rows.iter().map(|r| r.l2_error).collect();
    let h1s: Vec<f64> = rows.iter().map(|r| r.h1_error).collect();
    Ok(ErrorReport {
        description: case.description.clone(),
        orders_l2: fit_orders(&ts, &l2s),
        orders_h1: fit_orders(&ts, &h1s),
        rows,
        spatial_floor_l2,
        spatial_floor_h1,
        valid,
    })
}

/// Intercept of a least-squares line through `(tau, error)` over the last
/// three rows, clamped below at zero. Errors behaving like
/// `floor + C * tau` hand back the floor without any extra solves; errors
/// decaying faster than linearly push the intercept negative, which the
/// clamp reports as a zero floor. NaN with fewer than three rows.
fn intercept_floor(rows: &[ErrorRow], error: impl Fn(&ErrorRow) -> f64) -> f64 {
    if rows.len() < 3 {
        return f64::NAN;
    }
    let tail = &rows[rows.len() - 3..];
    let n = tail.len() as f64;
    let (mut st, mut se, mut stt, mut ste) = (0.0, 0.0, 0.0, 0.0);
    for r in tail {
        let e = error(r);
        st += r.tau;
        se += e;
        stt += r.tau * r.tau;
        ste += r.tau * e;
    }
    let slope = (n * ste - st * se) / (n * stt - st * st);
    ((se - slope * st) / n).max(0.0)
}

/// Residual of the transport identity for pushed-forward fields:
/// the time derivative of the moving inner product
/// `b(t) = int_{Omega(t)} (phi_t u0) . (phi_t v0)` must equal
/// `int_{Omega(t)} (phi_t u0) . M(t) (phi_t v0)` with `M` the lambda
/// kernel, because the Piola material derivatives of pushed-forward fields
/// vanish. Both sides are computed by quadrature after changing variables
/// to the reference mesh (the flow has unit determinant), the derivative by
/// a central difference with step `fd_step`. The residual is
/// `O(fd_step^2 + h^2)`; the bound is conservative, because evaluating both
/// sides on the same reference quadrature points makes the identity hold
/// per point, so the quadrature part cancels and the finite-difference
/// truncation dominates whatever remains.
pub fn transport_identity_residual(
    field: &VelocityField,
    u0: &PointwiseField,
    v0: &PointwiseField,
    t: f64,
    fd_step: f64,
    mesh: &Mesh,
) -> Result<f64> {
    if !(fd_step > 0.0) {
        return Err(Error::InvalidInput("finite-difference step must be positive".into()));
    }
    let substeps = leg_substeps(t);
    let kernel = lambda_kernel(field, t, substeps, HOLDALL)?;
    let mut b_plus = 0.0;
    let mut b_minus = 0.0;
    let mut rhs = 0.0;
    for tri in 0..mesh.triangles.len() {
        let [a, b, c] = [
            mesh.vertices[mesh.triangles[tri][0]],
            mesh.vertices[mesh.triangles[tri][1]],
            mesh.vertices[mesh.triangles[tri][2]],
        ];
        let (_, area) = barycentric_gradients(a, b, c);
        for (l, wq) in QUAD_POINTS.iter().zip(QUAD_WEIGHTS) {
            let x = quad_point(l, a, b, c);
            let w = wq * area;
            let u = u0.eval(x)?;
            let v = v0.eval(x)?;
            let (xt, jt) = integrate_flow(field, x, Mat2::identity(), 0.0, t, substeps, HOLDALL)?;
            let (_, jp) = integrate_flow(field, xt, jt, t, t + fd_step, 4, HOLDALL)?;
            let (_, jm) = integrate_flow(field, xt, jt, t, t - fd_step, 4, HOLDALL)?;
            b_plus += w * (jp * u).dot(&(jp * v));
            b_minus += w * (jm * u).dot(&(jm * v));
            let m = kernel.eval(xt)?;
            rhs += w * (jt * u).dot(&(m * (jt * v)));
        }
    }
    Ok(((b_plus - b_minus) / (2.0 * fd_step) - rhs).abs())
}

/// Largest singular value of a 2x2 matrix, from the Frobenius norm and
/// determinant: `smax^2 = (T + sqrt(T^2 - 4 D^2)) / 2` with `T = |m|_F^2`
/// and `D = det m`.
fn spectral_norm(m: Mat2) -> f64 {
    let t = m.norm_squared();
    let d = m.determinant();
    let disc = (t * t - 4.0 * d * d).max(0.0);
    (0.5 * (t + disc.sqrt())).sqrt()
}

/// Results of the brute-force identity suite at one `(field, t)` pair.
#[derive(Clone, Debug)]
pub struct AppendixReport {
    /// Time the identities were checked at.
    pub t: f64,
    /// Largest Jacobi-formula contraction
    /// `sum_{i,k} (DPhi^{-1})_{ki} d_k (DPhi)_{ij}` over sample points and
    /// columns j; zero for unit-determinant flows.
    pub jacobi_max: f64,
    /// Largest FD divergence of the pushed-forward probe field.
    pub push_divergence_max: f64,
    /// Largest FD divergence of the pulled-back probe field.
    pub pull_divergence_max: f64,
    /// Measured `|phi_t u|_{L2}` of the probe field.
    pub l2_lhs: f64,
    /// Its bound `sup |DPhi| * |u|_{L2}`.
    pub l2_rhs: f64,
    /// Measured `|D(phi_t u)|_{L2}`.
    pub h1_lhs: f64,
    /// Its bound `sup|DPhi^{-1}| (sup|D^2 Phi| |u| + sup|DPhi| |Du|)`.
    pub h1_rhs: f64,
    /// All checks within tolerance.
    pub pass: bool,
}

impl AppendixReport {
    /// Slack of the L2 norm bound; nonnegative when the bound holds.
    pub fn l2_slack(&self) -> f64 {
        self.l2_rhs - self.l2_lhs
    }

    /// Slack of the H1 norm bound.
    pub fn h1_slack(&self) -> f64 {
        self.h1_rhs - self.h1_lhs
    }
}

/// Brute-force checks of the structural identities behind the Piola
/// transform at time `t`: divergence preservation of push and pull at the
/// sample points, the Jacobi-formula cancellation there, and the L2/H1
/// norm bounds with suprema taken over the quadrature points of an
/// internal reference mesh (so the bound inequalities hold pointwise on
/// the computed numbers and the slack can only be negative through
/// rounding).
pub fn appendix_identity_suite(
    field: &VelocityField,
    t: f64,
    points: &[Vec2],
) -> Result<AppendixReport> {
    let substeps = leg_substeps(t);
    let map = FlowMap::new(field.clone(), t, substeps, HOLDALL)?;
    let probe_field = VelocityField::stream_bump(Vec2::new(-0.1, 0.2), 0.7, 1.0, 4)
        .expect("probe bump parameters are valid");
    let probe = PointwiseField::from_velocity_field(0.0, &probe_field);

    // (a) divergence preservation of push and pull at the sample points.
    let pushed = piola_push(&map, &probe);
    let pulled = piola_pull(&map, &probe);
    let mut push_divergence_max = 0.0_f64;
    let mut pull_divergence_max = 0.0_f64;
    for &x in points {
        let (xt, _) = map.forward(x)?;
        push_divergence_max = push_divergence_max.max(fd_divergence(&pushed, xt, 1e-5)?.abs());
        pull_divergence_max = pull_divergence_max.max(fd_divergence(&pulled, x, 1e-5)?.abs());
    }

    // (c) Jacobi cancellation via FD of the forward Jacobian.
    let fd = 1e-4;
    let forward_jac = |x: Vec2| -> Result<Mat2> {
        Ok(integrate_flow(field, x, Mat2::identity(), 0.0, t, substeps, HOLDALL)?.1)
    };
    let mut jacobi_max = 0.0_f64;
    for &x in points {
        let f = forward_jac(x)?;
        let finv = invert_jacobian(f);
        let mut df = [Mat2::zeros(); 2];
        for k in 0..2 {
            let mut dx = Vec2::zeros();
            dx[k] = fd;
            df[k] = (forward_jac(x + dx)? - forward_jac(x - dx)?) / (2.0 * fd);
        }
        for j in 0..2 {
            let mut s = 0.0;
            for i in 0..2 {
                for k in 0..2 {
                    s += finv[(k, i)] * df[k][(i, j)];
                }
            }
            jacobi_max = jacobi_max.max(s.abs());
        }
    }

    // (b) norm bounds with same-quadrature-point suprema.
    let mesh = build_disk_mesh(0.15)?;
    let mut u_sq = 0.0;
    let mut du_sq = 0.0;
    let mut push_sq = 0.0;
    let mut dpush_sq = 0.0;
    let mut sup_f = 0.0_f64;
    let mut sup_finv = 0.0_f64;
    let mut sup_d2 = 0.0_f64;
    for tri in 0..mesh.triangles.len() {
        let [a, b, c] = [
            mesh.vertices[mesh.triangles[tri][0]],
            mesh.vertices[mesh.triangles[tri][1]],
            mesh.vertices[mesh.triangles[tri][2]],
        ];
        let (_, area) = barycentric_gradients(a, b, c);
        for (l, wq) in QUAD_POINTS.iter().zip(QUAD_WEIGHTS) {
            let x = quad_point(l, a, b, c);
            let w = wq * area;
            let u = probe.eval(x)?;
            let du = probe.jacobian(x)?;
            let f = forward_jac(x)?;
            let finv = invert_jacobian(f);
            let mut df = [Mat2::zeros(); 2];
            for k in 0..2 {
                let mut dx = Vec2::zeros();
                dx[k] = fd;
                df[k] = (forward_jac(x + dx)? - forward_jac(x - dx)?) / (2.0 * fd);
            }
            // D(phi u) at the image point is (T + F Du) F^{-1} with
            // T_{ik} = sum_j d_k F_{ij} u_j.
            let mut tmat = Mat2::zeros();
            for i in 0..2 {
                for k in 0..2 {
                    tmat[(i, k)] = df[k][(i, 0)] * u.x + df[k][(i, 1)] * u.y;
                }
            }
            let dpush = (tmat + f * du) * finv;
            let d2 = (df[0].norm_squared() + df[1].norm_squared()).sqrt();

            u_sq += w * u.norm_squared();
            du_sq += w * du.norm_squared();
            push_sq += w * (f * u).norm_squared();
            dpush_sq += w * dpush.norm_squared();
            sup_f = sup_f.max(spectral_norm(f));
            sup_finv = sup_finv.max(spectral_norm(finv));
            sup_d2 = sup_d2.max(d2);
        }
    }
    let l2_lhs = push_sq.sqrt();
    let l2_rhs = sup_f * u_sq.sqrt();
    let h1_lhs = dpush_sq.sqrt();
    let h1_rhs = sup_finv * (sup_d2 * u_sq.sqrt() + sup_f * du_sq.sqrt());

    let slack_tol = |rhs: f64| -1e-12 * rhs.max(1.0);
    let pass = jacobi_max <= 1e-6
        && push_divergence_max <= 1e-5
        && pull_divergence_max <= 1e-5
        && l2_rhs - l2_lhs >= slack_tol(l2_rhs)
        && h1_rhs - h1_lhs >= slack_tol(h1_rhs);

    Ok(AppendixReport {
        t,
        jacobi_max,
        push_divergence_max,
        pull_divergence_max,
        l2_lhs,
        l2_rhs,
        h1_lhs,
        h1_rhs,
        pass,
    })
}

/// The deliberately wrong mid-interval interpolant: blends the two
/// neighboring solutions along the same flow legs as
/// [`interpolate_state`](crate::timestepper::interpolate_state) but without
/// the Piola Jacobian factors, so the blend of two divergence-free fields
/// picks up an O(tau) divergence.
pub fn naive_blend_state(trajectory: &Trajectory, t: f64) -> Result<PointwiseField> {
    blend_state(trajectory, t, false)
}

/// Root-mean-square FD divergence of the Piola interpolant and of the
/// naive blend at the given points of the time-`t` domain.
pub fn blend_divergence_comparison(
    trajectory: &Trajectory,
    t: f64,
    points: &[Vec2],
    fd_step: f64,
) -> Result<(f64, f64)> {
    if points.is_empty() {
        return Err(Error::InvalidInput("divergence comparison needs sample points".into()));
    }
    let piola = interpolate_state(trajectory, t)?;
    let naive = naive_blend_state(trajectory, t)?;
    let mut sq_piola = 0.0;
    let mut sq_naive = 0.0;
    for &x in points {
        sq_piola += fd_divergence(&piola, x, fd_step)?.powi(2);
        sq_naive += fd_divergence(&naive, x, fd_step)?.powi(2);
    }
    let n = points.len() as f64;
    Ok(((sq_piola / n).sqrt(), (sq_naive / n).sqrt()))
}
