//! Piola transforms, the transport-form kernel, and material derivatives.
//!
//! The contravariant Piola transform pushes a field `u` on the reference
//! domain forward along the flow,
//!
//! ```text
//! (phi_t u)(x) = DPhi_t(y) u(y),    y = Phi_t^{-1}(x),
//! ```
//!
//! and its inverse pulls back, `phi_{-t} u = DPhi_t^{-1} (u o Phi_t)`. The
//! covariant pair replaces the Jacobian by its inverse transpose. Because
//! every flow here has unit Jacobian determinant, the contravariant
//! transform preserves divergence-free fields in both directions.
//!
//! Differentiating the inner product of two pushed fields in time produces
//! the transport form whose pointwise kernel is
//!
//! ```text
//! M = J^{-T} (J'^T J + J^T J') J^{-1},    J = DPhi_t,  J' = d/dt DPhi_t,
//! ```
//!
//! evaluated at the preimage. Expanding `J' = Dw J` collapses the kernel to
//! `Dw + Dw^T` at the evaluation point, which the tests use as an
//! independent oracle against the composed evaluation implemented here.
//!
//! Everything in this module evaluates points on demand by integrating the
//! flow backward (or forward) per point; batch users such as quadrature
//! loops collect their point sets and reuse the resulting samples.

use std::sync::Arc;

use crate::flowmap::{integrate_flow, VelocityField};
use crate::{Error, Mat2, Result, Vec2};

type VecEval = Arc<dyn Fn(Vec2) -> Result<Vec2> + Send + Sync>;
type MatEval = Arc<dyn Fn(Vec2) -> Result<Mat2> + Send + Sync>;
type TimeEval = Arc<dyn Fn(f64, Vec2) -> Result<Vec2> + Send + Sync>;

/// A vector field frozen at one time, evaluable at arbitrary points, with
/// an optional analytic Jacobian evaluator.
#[derive(Clone)]
pub struct PointwiseField {
    /// Time label; transforms produce fields labelled with their target time.
    pub t: f64,
    value: VecEval,
    gradient: Option<MatEval>,
}

impl PointwiseField {
    /// Field from a value evaluator alone.
    pub fn new(t: f64, value: impl Fn(Vec2) -> Result<Vec2> + Send + Sync + 'static) -> Self {
        PointwiseField {
            t,
            value: Arc::new(value),
            gradient: None,
        }
    }

    /// Field with an analytic Jacobian evaluator alongside the values.
    pub fn with_gradient(
        t: f64,
        value: impl Fn(Vec2) -> Result<Vec2> + Send + Sync + 'static,
        gradient: impl Fn(Vec2) -> Result<Mat2> + Send + Sync + 'static,
    ) -> Self {
        PointwiseField {
            t,
            value: Arc::new(value),
            gradient: Some(Arc::new(gradient)),
        }
    }

    /// Constant field.
    pub fn constant(t: f64, v: Vec2) -> Self {
        PointwiseField::with_gradient(t, move |_| Ok(v), |_| Ok(Mat2::zeros()))
    }

    /// Snapshot of a velocity field at time `t`, with its analytic Jacobian.
    pub fn from_velocity_field(t: f64, field: &VelocityField) -> Self {
        let f1 = field.clone();
        let f2 = field.clone();
        PointwiseField::with_gradient(
            t,
            move |x| Ok(f1.velocity(t, x)),
            move |x| Ok(f2.jacobian(t, x)),
        )
    }

    /// Value at `x`.
    pub fn eval(&self, x: Vec2) -> Result<Vec2> {
        (self.value)(x)
    }

    /// Analytic Jacobian at `x`; errors when the field was built without one.
    pub fn jacobian(&self, x: Vec2) -> Result<Mat2> {
        match &self.gradient {
            Some(g) => g(x),
            None => Err(Error::InvalidInput(
                "field has no Jacobian evaluator".into(),
            )),
        }
    }

    /// Whether an analytic Jacobian evaluator is attached.
    pub fn has_jacobian(&self) -> bool {
        self.gradient.is_some()
    }
}

/// Central finite-difference Jacobian of a pointwise field.
pub fn fd_jacobian(f: &PointwiseField, x: Vec2, step: f64) -> Result<Mat2> {
    let mut m = Mat2::zeros();
    for k in 0..2 {
        let mut dx = Vec2::zeros();
        dx[k] = step;
        let plus = f.eval(x + dx)?;
        let minus = f.eval(x - dx)?;
        let col = (plus - minus) / (2.0 * step);
        m[(0, k)] = col.x;
        m[(1, k)] = col.y;
    }
    Ok(m)
}

/// Central finite-difference divergence of a pointwise field.
pub fn fd_divergence(f: &PointwiseField, x: Vec2, step: f64) -> Result<f64> {
    Ok(fd_jacobian(f, x, step)?.trace())
}

/// Invert a flow Jacobian. The determinant is 1 up to integrator error for
/// every admissible field, so a determinant far from 1 means the matrix did
/// not come from this crate's flows; that is a logic error, not an input
/// error.
pub(crate) fn invert_jacobian(m: Mat2) -> Mat2 {
    let det = m.determinant();
    assert!(
        (det - 1.0).abs() < 0.5,
        "flow Jacobian determinant drifted to {det}; not a unit-determinant flow"
    );
    Mat2::new(m.m22, -m.m12, -m.m21, m.m11) / det
}

/// On-demand access to `Phi_t` and its Jacobian: each call integrates the
/// flow for the queried point, so the handle works at arbitrary points
/// instead of a fixed sample. Optionally restricted to the reference disk,
/// in which case evaluations whose reference-side point leaves the disk
/// report an error.
#[derive(Clone)]
pub struct FlowMap {
    field: VelocityField,
    /// Target time of the map.
    pub t: f64,
    substeps: usize,
    holdall: f64,
    domain_radius: Option<f64>,
}

impl FlowMap {
    /// Map for `Phi_t` integrated with `substeps` RK4 steps over `[0, t]`
    /// inside the hold-all disk.
    pub fn new(field: VelocityField, t: f64, substeps: usize, holdall: f64) -> Result<Self> {
        if substeps == 0 {
            return Err(Error::InvalidInput("substeps must be at least 1".into()));
        }
        Ok(FlowMap {
            field,
            t,
            substeps,
            holdall,
            domain_radius: None,
        })
    }

    /// Enforce that reference-side points lie in the disk of the given
    /// radius, turning evaluation outside the image of the domain into an
    /// error instead of a silent extension.
    pub fn restrict_to_disk(mut self, radius: f64) -> Self {
        self.domain_radius = Some(radius);
        self
    }

    /// The velocity field driving the map.
    pub fn field(&self) -> &VelocityField {
        &self.field
    }

    fn check_reference_point(&self, x0: Vec2, t_query: f64) -> Result<()> {
        if let Some(r) = self.domain_radius {
            if x0.norm() > r + 1e-9 {
                return Err(Error::OutsideMesh {
                    x: x0.x,
                    y: x0.y,
                    t: t_query,
                });
            }
        }
        Ok(())
    }

    /// `(Phi_t(x0), DPhi_t(x0))` for a reference point.
    pub fn forward(&self, x0: Vec2) -> Result<(Vec2, Mat2)> {
        self.check_reference_point(x0, 0.0)?;
        integrate_flow(
            &self.field,
            x0,
            Mat2::identity(),
            0.0,
            self.t,
            self.substeps,
            self.holdall,
        )
    }

    /// `(Phi_t^{-1}(x), DPhi_t(Phi_t^{-1}x)^{-1})` for a point of the moved
    /// domain: integrating the variational equation backward from the
    /// identity returns exactly the inverse Jacobian at the preimage.
    pub fn backward(&self, x: Vec2) -> Result<(Vec2, Mat2)> {
        let (x0, k) = integrate_flow(
            &self.field,
            x,
            Mat2::identity(),
            self.t,
            0.0,
            self.substeps,
            self.holdall,
        )?;
        self.check_reference_point(x0, self.t)?;
        Ok((x0, k))
    }
}

/// Contravariant push `phi_t u`: the returned field lives at `map.t` and
/// evaluates `DPhi_t(y) u(y)` at `y = Phi_t^{-1}(x)`.
pub fn piola_push(map: &FlowMap, u: &PointwiseField) -> PointwiseField {
    let map = map.clone();
    let u = u.clone();
    PointwiseField::new(map.t, move |x| {
        let (x0, k) = map.backward(x)?;
        Ok(invert_jacobian(k) * u.eval(x0)?)
    })
}

/// Contravariant pull `phi_{-t} u`: the returned field lives at time 0 and
/// evaluates `DPhi_t(x0)^{-1} u(Phi_t(x0))`.
pub fn piola_pull(map: &FlowMap, u: &PointwiseField) -> PointwiseField {
    let map = map.clone();
    let u = u.clone();
    PointwiseField::new(0.0, move |x0| {
        let (x, j) = map.forward(x0)?;
        Ok(invert_jacobian(j) * u.eval(x)?)
    })
}

/// Direction of a covariant transform.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TransformDirection {
    /// Reference to moved domain: `phi_{-t}* v = (DPhi_t^{-T} v) o Phi_t^{-1}`.
    Push,
    /// Moved to reference domain: `phi_t* v = DPhi_t^T (v o Phi_t)`.
    Pull,
}

/// Covariant transform in either direction. For rotations the Jacobian is
/// orthogonal and this coincides with the contravariant transform.
pub fn covariant_transform(
    map: &FlowMap,
    v: &PointwiseField,
    direction: TransformDirection,
) -> PointwiseField {
    let map_c = map.clone();
    let v = v.clone();
    match direction {
        TransformDirection::Push => PointwiseField::new(map.t, move |x| {
            let (x0, k) = map_c.backward(x)?;
            // k = DPhi_t^{-1} at the preimage, so k^T is DPhi_t^{-T}.
            Ok(k.transpose() * v.eval(x0)?)
        }),
        TransformDirection::Pull => PointwiseField::new(0.0, move |x0| {
            let (x, j) = map_c.forward(x0)?;
            Ok(j.transpose() * v.eval(x)?)
        }),
    }
}

/// Pointwise kernel of the transport form at a fixed time: a symmetric
/// matrix field on the moved domain.
#[derive(Clone)]
pub struct LambdaKernel {
    map: FlowMap,
}

/// Kernel of the transport form at time `t` for the given flow.
pub fn lambda_kernel(
    field: &VelocityField,
    t: f64,
    substeps: usize,
    holdall: f64,
) -> Result<LambdaKernel> {
    Ok(LambdaKernel {
        map: FlowMap::new(field.clone(), t, substeps, holdall)?,
    })
}

impl LambdaKernel {
    /// Time the kernel is evaluated at.
    pub fn t(&self) -> f64 {
        self.map.t
    }

    /// `M(t, x)` for `x` on the moved domain. Assembled from the flow data
    /// as `J^{-T}(J'^T J + J^T J')J^{-1}` with `J' = Dw J`, then symmetrized
    /// so the algebraic symmetry holds exactly in floating point.
    pub fn eval(&self, x: Vec2) -> Result<Mat2> {
        let (_, k) = self.map.backward(x)?;
        let j = invert_jacobian(k);
        let jdot = self.map.field.jacobian(self.map.t, x) * j;
        let a = j.transpose() * jdot;
        let s = a + a.transpose();
        let m = k.transpose() * s * k;
        Ok(0.5 * (m + m.transpose()))
    }

    /// Kernel at a batch of points; one backward integration per point.
    pub fn eval_batch(&self, points: &[Vec2]) -> Result<Vec<Mat2>> {
        points.iter().map(|&p| self.eval(p)).collect()
    }
}

/// A time-indexed vector field, the argument of material derivatives.
#[derive(Clone)]
pub struct TimeField {
    value: TimeEval,
}

impl TimeField {
    /// Field from a `(t, x)` evaluator.
    pub fn new(value: impl Fn(f64, Vec2) -> Result<Vec2> + Send + Sync + 'static) -> Self {
        TimeField {
            value: Arc::new(value),
        }
    }

    /// The pushed-forward family `u(t) = phi_t u_0`; each evaluation
    /// integrates the flow backward from its own query time.
    pub fn pushed_forward(
        field: VelocityField,
        u0: PointwiseField,
        substeps: usize,
        holdall: f64,
    ) -> Self {
        TimeField::new(move |t, x| {
            let map = FlowMap::new(field.clone(), t, substeps, holdall)?;
            piola_push(&map, &u0).eval(x)
        })
    }

    /// Value at `(t, x)`.
    pub fn eval(&self, t: f64, x: Vec2) -> Result<Vec2> {
        (self.value)(t, x)
    }
}

/// Which material derivative to take.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DerivativeConvention {
    /// Derivative along the flow after pulling back with the Piola
    /// transform: `phi_t d/dt (phi_{-t} u)`.
    Phi,
    /// Plain derivative along trajectories: `d/dt (u o Phi) o Phi^{-1}`.
    W,
}

/// Material derivative of `u` at time `t` by central differencing along
/// trajectories. Both conventions share the two trajectory legs from the
/// evaluation point to `t - fd_step` and `t + fd_step`; the Piola
/// convention additionally weights the leg values with the inverse leg
/// Jacobians, which is algebraically identical to pulling back to time 0
/// and pushing the difference quotient forward again. The legs use four
/// RK4 substeps each, leaving integration error far below the `fd_step^2`
/// truncation of the stencil.
pub fn material_derivative(
    field: &VelocityField,
    u: &TimeField,
    t: f64,
    convention: DerivativeConvention,
    fd_step: f64,
    holdall: f64,
) -> Result<PointwiseField> {
    if !(fd_step > 0.0) {
        return Err(Error::InvalidInput(format!(
            "fd_step must be positive, got {fd_step}"
        )));
    }
    let field = field.clone();
    let u = u.clone();
    Ok(PointwiseField::new(t, move |x| {
        let legs = 4;
        let id = Mat2::identity();
        let (xp, gp) = integrate_flow(&field, x, id, t, t + fd_step, legs, holdall)?;
        let (xm, gm) = integrate_flow(&field, x, id, t, t - fd_step, legs, holdall)?;
        let up = u.eval(t + fd_step, xp)?;
        let um = u.eval(t - fd_step, xm)?;
        let val = match convention {
            DerivativeConvention::W => (up - um) / (2.0 * fd_step),
            DerivativeConvention::Phi => {
                (invert_jacobian(gp) * up - invert_jacobian(gm) * um) / (2.0 * fd_step)
            }
        };
        Ok(val)
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const HOLDALL: f64 = 2.0;

    fn disk_points(n: usize, r_max: f64, seed: u64) -> Vec<Vec2> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pts = Vec::with_capacity(n);
        while pts.len() < n {
            let x = Vec2::new(rng.gen_range(-r_max..r_max), rng.gen_range(-r_max..r_max));
            if x.norm() <= r_max {
                pts.push(x);
            }
        }
        pts
    }

    fn bump_field() -> VelocityField {
        VelocityField::stream_bump(Vec2::new(0.2, -0.1), 0.8, 0.5, 4).unwrap()
    }

    #[test]
    fn transforms_at_time_zero_are_identity() {
        let map = FlowMap::new(bump_field(), 0.0, 1, HOLDALL).unwrap();
        let u = PointwiseField::from_velocity_field(0.0, &bump_field());
        let pushed = piola_push(&map, &u);
        let pulled = piola_pull(&map, &u);
        let cov = covariant_transform(&map, &u, TransformDirection::Push);
        for &p in &disk_points(20, 0.9, 10) {
            let v = u.eval(p).unwrap();
            assert!((pushed.eval(p).unwrap() - v).norm() < 1e-14);
            assert!((pulled.eval(p).unwrap() - v).norm() < 1e-14);
            assert!((cov.eval(p).unwrap() - v).norm() < 1e-14);
        }
    }

    #[test]
    fn rotation_push_of_constant_rotates_the_vector() {
        let map = FlowMap::new(
            VelocityField::rigid_rotation(1.0),
            std::f64::consts::FRAC_PI_2,
            500,
            HOLDALL,
        )
        .unwrap();
        let u = PointwiseField::constant(0.0, Vec2::new(1.0, 0.0));
        let pushed = piola_push(&map, &u);
        for &p in &disk_points(10, 0.8, 11) {
            let v = pushed.eval(p).unwrap();
            assert_abs_diff_eq!(v.x, 0.0, epsilon = 1e-10);
            assert_abs_diff_eq!(v.y, 1.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn shear_push_of_constant_adds_the_sheared_component() {
        // w(x) = (x_2, 0) gives DPhi_1 = [[1,1],[0,1]], so (0,1) pushes to (1,1).
        let f = VelocityField::shear(Mat2::new(0.0, 1.0, 0.0, 0.0)).unwrap();
        let map = FlowMap::new(f, 1.0, 100, 4.0).unwrap();
        let pushed = piola_push(&map, &PointwiseField::constant(0.0, Vec2::new(0.0, 1.0)));
        for &p in &disk_points(10, 0.8, 12) {
            let v = pushed.eval(p).unwrap();
            assert_abs_diff_eq!(v.x, 1.0, epsilon = 1e-12);
            assert_abs_diff_eq!(v.y, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn rotation_pull_of_constant_rotates_backward() {
        let map = FlowMap::new(
            VelocityField::rigid_rotation(1.0),
            std::f64::consts::FRAC_PI_2,
            500,
            HOLDALL,
        )
        .unwrap();
        let pulled = piola_pull(&map, &PointwiseField::constant(0.0, Vec2::new(0.0, 1.0)));
        for &p in &disk_points(10, 0.8, 13) {
            let v = pulled.eval(p).unwrap();
            assert_abs_diff_eq!(v.x, 1.0, epsilon = 1e-10);
            assert_abs_diff_eq!(v.y, 0.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn pull_after_push_recovers_the_field() {
        let map = FlowMap::new(bump_field(), 0.5, 500, HOLDALL).unwrap();
        let u0 = PointwiseField::from_velocity_field(
            0.0,
            &VelocityField::stream_bump(Vec2::new(-0.1, 0.2), 0.9, 0.7, 4).unwrap(),
        );
        let roundtrip = piola_pull(&map, &piola_push(&map, &u0));
        let mut worst = 0.0f64;
        for &p in &disk_points(200, 0.9, 14) {
            let err = (roundtrip.eval(p).unwrap() - u0.eval(p).unwrap()).norm();
            worst = worst.max(err);
        }
        assert!(worst <= 1e-8, "round trip error {worst:.3e}");
    }

    #[test]
    fn covariant_equals_contravariant_for_rotations() {
        let map = FlowMap::new(VelocityField::rigid_rotation(0.8), 0.9, 900, HOLDALL).unwrap();
        let u0 = PointwiseField::from_velocity_field(0.0, &bump_field());
        let contra = piola_push(&map, &u0);
        let cov = covariant_transform(&map, &u0, TransformDirection::Push);
        let mut worst = 0.0f64;
        for &p in &disk_points(50, 0.9, 15) {
            worst = worst.max((contra.eval(p).unwrap() - cov.eval(p).unwrap()).norm());
        }
        assert!(worst <= 1e-10, "max difference {worst:.3e}");
    }

    #[test]
    fn push_preserves_divergence_free_fields() {
        let u0 = PointwiseField::from_velocity_field(
            0.0,
            &VelocityField::stream_bump(Vec2::new(0.1, 0.1), 0.7, 0.6, 4).unwrap(),
        );
        let flow = VelocityField::shear(Mat2::new(0.2, 0.7, 0.3, -0.2)).unwrap();
        let map = FlowMap::new(flow, 0.5, 500, 4.0).unwrap();
        let pushed = piola_push(&map, &u0);
        let pulled = piola_pull(&map, &u0);
        for &p in &disk_points(100, 0.8, 16) {
            assert!(fd_divergence(&pushed, p, 1e-4).unwrap().abs() <= 1e-5);
            assert!(fd_divergence(&pulled, p, 1e-4).unwrap().abs() <= 1e-5);
        }
    }

    #[test]
    fn lambda_kernel_vanishes_for_rotations() {
        for &t in &[0.1, 0.7, 1.3] {
            let k = lambda_kernel(&VelocityField::rigid_rotation(1.3), t, 500, HOLDALL).unwrap();
            for &p in &disk_points(20, 0.9, 17) {
                assert!(k.eval(p).unwrap().norm() <= 1e-12);
            }
        }
    }

    #[test]
    fn lambda_kernel_for_unit_shear_is_the_constant_symmetrizer() {
        let f = VelocityField::shear(Mat2::new(0.0, 1.0, 0.0, 0.0)).unwrap();
        let expect = Mat2::new(0.0, 1.0, 1.0, 0.0);
        for &t in &[0.2, 1.0] {
            let k = lambda_kernel(&f, t, 200, 5.0).unwrap();
            for &p in &disk_points(20, 0.8, 18) {
                assert!((k.eval(p).unwrap() - expect).norm() <= 1e-8);
            }
        }
    }

    #[test]
    fn lambda_kernel_matches_velocity_symmetric_gradient() {
        // Algebraically M = Dw + Dw^T at the evaluation point; the kernel
        // computes it the long way through the flow Jacobians.
        let f = bump_field();
        let k = lambda_kernel(&f, 0.6, 600, HOLDALL).unwrap();
        for &p in &disk_points(30, 0.9, 19) {
            let dw = f.jacobian(0.6, p);
            let m = k.eval(p).unwrap();
            assert!((m - (dw + dw.transpose())).norm() <= 1e-8);
            assert_eq!(m.m12, m.m21);
        }
    }

    #[test]
    fn lambda_kernel_of_zero_field_is_zero() {
        let k = lambda_kernel(&VelocityField::zero(), 1.0, 10, HOLDALL).unwrap();
        assert_eq!(k.eval(Vec2::new(0.3, 0.4)).unwrap(), Mat2::zeros());
    }

    #[test]
    fn phi_derivative_of_pushed_field_vanishes() {
        let flow = bump_field();
        let u0 = PointwiseField::from_velocity_field(
            0.0,
            &VelocityField::stream_bump(Vec2::new(0.0, 0.2), 0.8, 0.4, 4).unwrap(),
        );
        let u = TimeField::pushed_forward(flow.clone(), u0, 400, HOLDALL);
        let d = material_derivative(
            &flow,
            &u,
            0.4,
            DerivativeConvention::Phi,
            1e-3,
            HOLDALL,
        )
        .unwrap();
        for &p in &disk_points(20, 0.8, 20) {
            let v = d.eval(p).unwrap();
            assert!(v.norm() <= 1e-6, "pushed-field derivative {:.3e}", v.norm());
        }
    }

    #[test]
    fn static_field_under_zero_flow_has_zero_derivatives() {
        let flow = VelocityField::zero();
        let u = TimeField::new(|_, x| Ok(Vec2::new(x.y * x.y, -x.x)));
        for conv in [DerivativeConvention::Phi, DerivativeConvention::W] {
            let d = material_derivative(&flow, &u, 0.5, conv, 1e-3, HOLDALL).unwrap();
            for &p in &disk_points(10, 0.9, 21) {
                assert!(d.eval(p).unwrap().norm() <= 1e-13);
            }
        }
    }

    #[test]
    fn convention_difference_matches_analytic_formula() {
        // (phi-convention minus w-convention) applied to any field equals
        // -Dw(t, x) times the field value.
        let flow = bump_field();
        let xi = TimeField::new(|t, x| {
            Ok(Vec2::new(
                (1.0 + 0.3 * t) * x.x * x.x + 0.2 * x.y,
                x.x.sin() + t * x.y,
            ))
        });
        let t = 0.3;
        let d_phi =
            material_derivative(&flow, &xi, t, DerivativeConvention::Phi, 1e-4, HOLDALL).unwrap();
        let d_w =
            material_derivative(&flow, &xi, t, DerivativeConvention::W, 1e-4, HOLDALL).unwrap();
        for &p in &disk_points(30, 0.9, 22) {
            let diff = d_phi.eval(p).unwrap() - d_w.eval(p).unwrap();
            let expect = -flow.jacobian(t, p) * xi.eval(t, p).unwrap();
            let rel = (diff - expect).norm() / expect.norm().max(1e-3);
            assert!(rel <= 1e-5, "difference formula mismatch {rel:.3e}");
        }
    }

    #[test]
    fn material_derivative_rejects_nonpositive_step() {
        let u = TimeField::new(|_, _| Ok(Vec2::zeros()));
        let r = material_derivative(
            &VelocityField::zero(),
            &u,
            0.0,
            DerivativeConvention::W,
            0.0,
            HOLDALL,
        );
        assert!(r.is_err());
    }

    #[test]
    fn analytic_jacobian_matches_finite_differences() {
        let u = PointwiseField::from_velocity_field(0.0, &bump_field());
        for &p in &disk_points(25, 0.9, 23) {
            let fd = fd_jacobian(&u, p, 1e-5).unwrap();
            let exact = u.jacobian(p).unwrap();
            assert!((fd - exact).norm() <= 1e-6 * exact.norm().max(1.0));
        }
    }

    #[test]
    fn restricted_map_rejects_points_with_preimage_outside_the_disk() {
        let map = FlowMap::new(VelocityField::rigid_rotation(1.0), 0.3, 100, HOLDALL)
            .unwrap()
            .restrict_to_disk(1.0);
        let pushed = piola_push(&map, &PointwiseField::constant(0.0, Vec2::new(1.0, 0.0)));
        assert!(pushed.eval(Vec2::new(0.5, 0.0)).is_ok());
        match pushed.eval(Vec2::new(1.4, 0.0)) {
            Err(Error::OutsideMesh { .. }) => {}
            other => panic!("expected outside-mesh error, got {other:?}"),
        }
    }
}
