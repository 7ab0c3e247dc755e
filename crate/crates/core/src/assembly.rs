//! Taylor-Hood finite element assembly on moved meshes.
//!
//! All matrices live on the straight-triangle geometry of a `MovedMesh`:
//! quadratic velocity basis per component (vertices then edge midpoints),
//! linear pressure basis on vertices, and the 7-point degree-5 quadrature
//! rule. Assemblies return `faer` sparse matrices; the update step combines
//! them triplet-wise into one saddle-point system
//!
//! ```text
//! [ A   b^T  0 ] [u ]   [r_u]
//! [ b   0    m ] [p ] = [r_p]
//! [ 0   m^T  0 ] [mu]   [0  ]
//! ```
//!
//! where `b` is whatever constraint block the caller provides (the stepper
//! passes the divergence block scaled by `-tau` so the solved pressure is
//! the physical one) and `m` is the pressure mean-value column fixing the
//! constant-pressure null space. The multiplier row is omitted when the
//! mean vector is empty or zero.

use std::sync::Arc;

use faer::prelude::Solve;
use faer::sparse::linalg::solvers::{Lu, SymbolicLu};
use faer::sparse::{SparseColMat, Triplet};

use crate::mesh::{
    velocity_dof, Mesh, MovedMesh, TriangleLocator, QUAD_POINTS, QUAD_WEIGHTS,
};
use crate::transforms::PointwiseField;
use crate::{Error, Mat2, Result, Vec2};

/// Sparse matrix type used by all assemblies.
pub type SpMat = SparseColMat<usize, f64>;

/// Barycentric gradients and signed area of a straight triangle.
pub(crate) fn barycentric_gradients(a: Vec2, b: Vec2, c: Vec2) -> ([Vec2; 3], f64) {
    let area2 = (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x);
    let inv = 1.0 / area2;
    (
        [
            Vec2::new(b.y - c.y, c.x - b.x) * inv,
            Vec2::new(c.y - a.y, a.x - c.x) * inv,
            Vec2::new(a.y - b.y, b.x - a.x) * inv,
        ],
        0.5 * area2,
    )
}

/// Quadratic basis values at barycentric coordinates, ordered vertices
/// 0, 1, 2 then midpoints of edges (0,1), (1,2), (2,0).
pub(crate) fn p2_values(l: &[f64; 3]) -> [f64; 6] {
    [
        l[0] * (2.0 * l[0] - 1.0),
        l[1] * (2.0 * l[1] - 1.0),
        l[2] * (2.0 * l[2] - 1.0),
        4.0 * l[0] * l[1],
        4.0 * l[1] * l[2],
        4.0 * l[2] * l[0],
    ]
}

/// Gradients of the quadratic basis given barycentric gradients.
pub(crate) fn p2_gradients(l: &[f64; 3], g: &[Vec2; 3]) -> [Vec2; 6] {
    [
        (4.0 * l[0] - 1.0) * g[0],
        (4.0 * l[1] - 1.0) * g[1],
        (4.0 * l[2] - 1.0) * g[2],
        4.0 * (l[0] * g[1] + l[1] * g[0]),
        4.0 * (l[1] * g[2] + l[2] * g[1]),
        4.0 * (l[2] * g[0] + l[0] * g[2]),
    ]
}

/// Global quadratic node indices of triangle `t`: its vertices followed by
/// its edge midpoints.
pub(crate) fn element_nodes(mesh: &Mesh, t: usize) -> [usize; 6] {
    let tri = mesh.triangles[t];
    let te = mesh.triangle_edges[t];
    let nv = mesh.vertices.len();
    [tri[0], tri[1], tri[2], nv + te[0], nv + te[1], nv + te[2]]
}

/// Triplet accumulator for one matrix block.
pub(crate) struct Triplets {
    pub nrows: usize,
    pub ncols: usize,
    pub entries: Vec<Triplet<usize, usize, f64>>,
}

impl Triplets {
    pub(crate) fn new(nrows: usize, ncols: usize) -> Self {
        Triplets {
            nrows,
            ncols,
            entries: Vec::new(),
        }
    }

    pub(crate) fn push(&mut self, row: usize, col: usize, val: f64) {
        self.entries.push(Triplet::new(row, col, val));
    }

    pub(crate) fn scale(mut self, s: f64) -> Self {
        for t in &mut self.entries {
            t.val *= s;
        }
        self
    }

    pub(crate) fn merge(mut self, other: Triplets) -> Self {
        debug_assert_eq!(self.nrows, other.nrows);
        debug_assert_eq!(self.ncols, other.ncols);
        self.entries.extend(other.entries);
        self
    }

    /// Collapse duplicate entries by a stable `(col, row)` sort, summing in
    /// insertion order. Doing this here rather than in the matrix
    /// constructor keeps summation order identical for an entry and its
    /// transpose, so symmetric assemblies stay bitwise symmetric.
    pub(crate) fn compress(&self) -> Vec<Triplet<usize, usize, f64>> {
        let mut sorted = self.entries.clone();
        sorted.sort_by_key(|t| (t.col, t.row));
        let mut out: Vec<Triplet<usize, usize, f64>> = Vec::with_capacity(sorted.len());
        for t in sorted {
            match out.last_mut() {
                Some(last) if last.row == t.row && last.col == t.col => last.val += t.val,
                _ => out.push(t),
            }
        }
        out
    }

    pub(crate) fn to_sparse(&self) -> Result<SpMat> {
        SparseColMat::try_new_from_triplets(self.nrows, self.ncols, &self.compress()).map_err(
            |e| Error::InvalidInput(format!("sparse matrix construction failed: {e:?}")),
        )
    }
}

fn scatter_local(tr: &mut Triplets, nodes: &[usize; 6], local: &[[f64; 6]; 6]) {
    for i in 0..6 {
        for j in 0..6 {
            let v = local[i][j];
            if v != 0.0 {
                for comp in 0..2 {
                    tr.push(
                        velocity_dof(nodes[i], comp),
                        velocity_dof(nodes[j], comp),
                        v,
                    );
                }
            }
        }
    }
}

pub(crate) fn mass_triplets(mesh: &MovedMesh) -> Triplets {
    let n = 2 * mesh.base.num_nodes();
    let mut tr = Triplets::new(n, n);
    for t in 0..mesh.base.triangles.len() {
        let [a, b, c] = mesh.triangle_coords(t);
        let (_, area) = barycentric_gradients(a, b, c);
        let mut local = [[0.0; 6]; 6];
        for (l, w) in QUAD_POINTS.iter().zip(QUAD_WEIGHTS) {
            let vals = p2_values(l);
            let wq = w * area;
            for i in 0..6 {
                for j in 0..6 {
                    // Group the commutative product first so the local
                    // matrix is bitwise symmetric.
                    local[i][j] += wq * (vals[i] * vals[j]);
                }
            }
        }
        scatter_local(&mut tr, &element_nodes(&mesh.base, t), &local);
    }
    tr
}

pub(crate) fn stiffness_triplets(mesh: &MovedMesh) -> Triplets {
    let n = 2 * mesh.base.num_nodes();
    let mut tr = Triplets::new(n, n);
    for t in 0..mesh.base.triangles.len() {
        let [a, b, c] = mesh.triangle_coords(t);
        let (grads, area) = barycentric_gradients(a, b, c);
        let mut local = [[0.0; 6]; 6];
        for (l, w) in QUAD_POINTS.iter().zip(QUAD_WEIGHTS) {
            let gq = p2_gradients(l, &grads);
            let wq = w * area;
            for i in 0..6 {
                for j in 0..6 {
                    local[i][j] += wq * gq[i].dot(&gq[j]);
                }
            }
        }
        scatter_local(&mut tr, &element_nodes(&mesh.base, t), &local);
    }
    tr
}

pub(crate) fn convection_triplets(mesh: &MovedMesh, beta: &PointwiseField) -> Result<Triplets> {
    let n = 2 * mesh.base.num_nodes();
    let mut tr = Triplets::new(n, n);
    for t in 0..mesh.base.triangles.len() {
        let [a, b, c] = mesh.triangle_coords(t);
        let (grads, area) = barycentric_gradients(a, b, c);
        let mut local = [[0.0; 6]; 6];
        for (l, w) in QUAD_POINTS.iter().zip(QUAD_WEIGHTS) {
            let x = l[0] * a + l[1] * b + l[2] * c;
            let bq = beta.eval(x)?;
            let vals = p2_values(l);
            let gq = p2_gradients(l, &grads);
            let wq = w * area;
            for i in 0..6 {
                for j in 0..6 {
                    local[i][j] += wq * bq.dot(&gq[j]) * vals[i];
                }
            }
        }
        scatter_local(&mut tr, &element_nodes(&mesh.base, t), &local);
    }
    Ok(tr)
}

pub(crate) fn div_triplets(mesh: &MovedMesh) -> (Triplets, Vec<f64>) {
    let n_u = 2 * mesh.base.num_nodes();
    let n_p = mesh.base.vertices.len();
    let mut tr = Triplets::new(n_p, n_u);
    let mut mean = vec![0.0; n_p];
    for t in 0..mesh.base.triangles.len() {
        let tri = mesh.base.triangles[t];
        let [a, b, c] = mesh.triangle_coords(t);
        let (grads, area) = barycentric_gradients(a, b, c);
        let nodes = element_nodes(&mesh.base, t);
        let mut local = [[[0.0; 2]; 6]; 3];
        let mut local_mean = [0.0; 3];
        for (l, w) in QUAD_POINTS.iter().zip(QUAD_WEIGHTS) {
            let gq = p2_gradients(l, &grads);
            let wq = w * area;
            for k in 0..3 {
                local_mean[k] += wq * l[k];
                for j in 0..6 {
                    local[k][j][0] += wq * l[k] * gq[j].x;
                    local[k][j][1] += wq * l[k] * gq[j].y;
                }
            }
        }
        for k in 0..3 {
            mean[tri[k]] += local_mean[k];
            for j in 0..6 {
                for comp in 0..2 {
                    let v = local[k][j][comp];
                    if v != 0.0 {
                        tr.push(tri[k], velocity_dof(nodes[j], comp), v);
                    }
                }
            }
        }
    }
    (tr, mean)
}

/// Velocity mass matrix on the moved mesh; symmetric positive definite.
pub fn assemble_mass(mesh: &MovedMesh) -> Result<SpMat> {
    mass_triplets(mesh).to_sparse()
}

/// Velocity stiffness matrix (componentwise Dirichlet form); symmetric
/// positive semidefinite with per-component constants in its kernel.
pub fn assemble_stiffness(mesh: &MovedMesh) -> Result<SpMat> {
    stiffness_triplets(mesh).to_sparse()
}

/// Convection matrix with entries `(i, j) = int (beta . grad basis_j) basis_i`,
/// assembled in non-symmetrized form.
pub fn assemble_convection(mesh: &MovedMesh, beta: &PointwiseField) -> Result<SpMat> {
    convection_triplets(mesh, beta)?.to_sparse()
}

/// Divergence block `B[k, j] = int pressure_k div velocity_j` and the
/// pressure mean-value vector `m[k] = int pressure_k`.
pub fn assemble_div(mesh: &MovedMesh) -> Result<(SpMat, Vec<f64>)> {
    let (tr, mean) = div_triplets(mesh);
    Ok((tr.to_sparse()?, mean))
}

/// Load vector of `f` against the velocity basis.
pub fn assemble_load(mesh: &MovedMesh, f: &PointwiseField) -> Result<Vec<f64>> {
    let mut rhs = vec![0.0; 2 * mesh.base.num_nodes()];
    for t in 0..mesh.base.triangles.len() {
        let [a, b, c] = mesh.triangle_coords(t);
        let (_, area) = barycentric_gradients(a, b, c);
        let nodes = element_nodes(&mesh.base, t);
        let mut local = [[0.0; 2]; 6];
        for (l, w) in QUAD_POINTS.iter().zip(QUAD_WEIGHTS) {
            let x = l[0] * a + l[1] * b + l[2] * c;
            let fq = f.eval(x)?;
            let vals = p2_values(l);
            let wq = w * area;
            for i in 0..6 {
                local[i][0] += wq * vals[i] * fq.x;
                local[i][1] += wq * vals[i] * fq.y;
            }
        }
        for i in 0..6 {
            for comp in 0..2 {
                rhs[velocity_dof(nodes[i], comp)] += local[i][comp];
            }
        }
    }
    Ok(rhs)
}

/// Which discrete space a dof vector belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Space {
    Velocity,
    Pressure,
}

/// A dof vector tied to a space, a time, and the identity of its reference
/// mesh.
#[derive(Clone, Debug)]
pub struct FEFunction {
    /// Space tag.
    pub space: Space,
    /// Time of the mesh the dofs live on.
    pub t: f64,
    /// Identity of the reference mesh.
    pub mesh_id: u64,
    /// Dof values.
    pub dofs: Vec<f64>,
}

impl FEFunction {
    /// Zero velocity function on the mesh.
    pub fn zero_velocity(mesh: &MovedMesh) -> Self {
        FEFunction {
            space: Space::Velocity,
            t: mesh.t,
            mesh_id: mesh.base.id(),
            dofs: vec![0.0; 2 * mesh.base.num_nodes()],
        }
    }

    /// Zero pressure function on the mesh.
    pub fn zero_pressure(mesh: &MovedMesh) -> Self {
        FEFunction {
            space: Space::Pressure,
            t: mesh.t,
            mesh_id: mesh.base.id(),
            dofs: vec![0.0; mesh.base.vertices.len()],
        }
    }

    /// Nodal interpolant of a vector field into the velocity space; values
    /// are taken at the straight-triangle basis nodes.
    pub fn interpolate_velocity(mesh: &MovedMesh, f: &PointwiseField) -> Result<Self> {
        let n = mesh.base.num_nodes();
        let mut dofs = vec![0.0; 2 * n];
        for i in 0..n {
            let v = f.eval(mesh.basis_node_position(i))?;
            dofs[velocity_dof(i, 0)] = v.x;
            dofs[velocity_dof(i, 1)] = v.y;
        }
        Ok(FEFunction {
            space: Space::Velocity,
            t: mesh.t,
            mesh_id: mesh.base.id(),
            dofs,
        })
    }
}

/// Point evaluation of a velocity FE function through triangle location.
#[derive(Clone)]
pub struct VelocitySampler {
    mesh: Arc<MovedMesh>,
    fe: Arc<FEFunction>,
    locator: Arc<TriangleLocator>,
}

impl VelocitySampler {
    /// Build a sampler; the function must be a velocity function on the
    /// same reference mesh and time as `mesh`.
    pub fn new(mesh: Arc<MovedMesh>, fe: Arc<FEFunction>) -> Result<Self> {
        if fe.space != Space::Velocity {
            return Err(Error::InvalidInput(
                "sampler requires a velocity function".into(),
            ));
        }
        if fe.mesh_id != mesh.base.id() || fe.t != mesh.t {
            return Err(Error::Mesh(format!(
                "function (mesh {}, t = {}) does not live on mesh {} at t = {}",
                fe.mesh_id,
                fe.t,
                mesh.base.id(),
                mesh.t
            )));
        }
        let locator = Arc::new(TriangleLocator::build(&mesh.vertices, &mesh.base.triangles));
        Ok(VelocitySampler { mesh, fe, locator })
    }

    fn locate(&self, p: Vec2) -> Result<(usize, [f64; 3])> {
        self.locator
            .locate(&self.mesh.vertices, &self.mesh.base.triangles, p)
            .ok_or(Error::OutsideMesh {
                x: p.x,
                y: p.y,
                t: self.mesh.t,
            })
    }

    /// Velocity value at `p`.
    pub fn eval(&self, p: Vec2) -> Result<Vec2> {
        let (t, l) = self.locate(p)?;
        let vals = p2_values(&l);
        let nodes = element_nodes(&self.mesh.base, t);
        let mut v = Vec2::zeros();
        for i in 0..6 {
            v.x += vals[i] * self.fe.dofs[velocity_dof(nodes[i], 0)];
            v.y += vals[i] * self.fe.dofs[velocity_dof(nodes[i], 1)];
        }
        Ok(v)
    }

    /// Velocity gradient at `p` (row `r`, column `c` holds the derivative
    /// of component `r` along direction `c`).
    pub fn gradient(&self, p: Vec2) -> Result<Mat2> {
        let (t, l) = self.locate(p)?;
        let [a, b, c] = self.mesh.triangle_coords(t);
        let (grads, _) = barycentric_gradients(a, b, c);
        let gq = p2_gradients(&l, &grads);
        let nodes = element_nodes(&self.mesh.base, t);
        let mut m = Mat2::zeros();
        for i in 0..6 {
            let ux = self.fe.dofs[velocity_dof(nodes[i], 0)];
            let uy = self.fe.dofs[velocity_dof(nodes[i], 1)];
            m[(0, 0)] += ux * gq[i].x;
            m[(0, 1)] += ux * gq[i].y;
            m[(1, 0)] += uy * gq[i].x;
            m[(1, 1)] += uy * gq[i].y;
        }
        Ok(m)
    }

    /// Wrap the sampler as a pointwise field with analytic (elementwise)
    /// Jacobian.
    pub fn to_pointwise(&self) -> PointwiseField {
        let s1 = self.clone();
        let s2 = self.clone();
        PointwiseField::with_gradient(self.mesh.t, move |x| s1.eval(x), move |x| s2.gradient(x))
    }
}

/// Mass-matrix product `M(mesh) . u` computed element by element, without
/// forming the matrix.
pub(crate) fn mass_apply(mesh: &MovedMesh, u: &[f64]) -> Vec<f64> {
    let mut r = vec![0.0; u.len()];
    for t in 0..mesh.base.triangles.len() {
        let [a, b, c] = mesh.triangle_coords(t);
        let (_, area) = barycentric_gradients(a, b, c);
        let nodes = element_nodes(&mesh.base, t);
        let mut local = [[0.0; 6]; 6];
        for (l, w) in QUAD_POINTS.iter().zip(QUAD_WEIGHTS) {
            let vals = p2_values(l);
            let wq = w * area;
            for i in 0..6 {
                for j in 0..6 {
                    local[i][j] += wq * (vals[i] * vals[j]);
                }
            }
        }
        for comp in 0..2 {
            for i in 0..6 {
                let mut acc = 0.0;
                for j in 0..6 {
                    acc += local[i][j] * u[velocity_dof(nodes[j], comp)];
                }
                r[velocity_dof(nodes[i], comp)] += acc;
            }
        }
    }
    r
}

/// Right-hand side carrying the previous solution to the next mesh:
/// `M(t_n) u^n`, where the identification of test functions across meshes
/// is the advection of dofs along the flow (the composed test function
/// takes the same dof values on the old mesh's basis).
pub fn cross_mass_rhs(old_mesh: &MovedMesh, u_old: &FEFunction) -> Result<Vec<f64>> {
    if u_old.space != Space::Velocity {
        return Err(Error::InvalidInput(
            "cross-mesh transport needs a velocity function".into(),
        ));
    }
    if u_old.mesh_id != old_mesh.base.id() || u_old.t != old_mesh.t {
        return Err(Error::Mesh(format!(
            "state (mesh {}, t = {}) does not live on mesh {} at t = {}",
            u_old.mesh_id,
            u_old.t,
            old_mesh.base.id(),
            old_mesh.t
        )));
    }
    Ok(mass_apply(old_mesh, &u_old.dofs))
}

/// One assembled saddle-point step: velocity block, constraint block, mean
/// column, right-hand sides, and the boundary dof list.
pub struct SaddleSystem {
    /// Velocity dof count.
    pub n_u: usize,
    /// Pressure dof count.
    pub n_p: usize,
    pub(crate) a: Triplets,
    pub(crate) b: Triplets,
    /// Mean-value column; all-zero disables the multiplier row.
    pub mean: Vec<f64>,
    /// Momentum right-hand side.
    pub rhs_u: Vec<f64>,
    /// Constraint right-hand side.
    pub rhs_p: Vec<f64>,
    /// Velocity dofs pinned to zero by the boundary condition.
    pub boundary: Vec<usize>,
}

impl SaddleSystem {
    /// Empty system of the given dimensions.
    pub fn new(n_u: usize, n_p: usize) -> Self {
        SaddleSystem {
            n_u,
            n_p,
            a: Triplets::new(n_u, n_u),
            b: Triplets::new(n_p, n_u),
            mean: vec![0.0; n_p],
            rhs_u: vec![0.0; n_u],
            rhs_p: vec![0.0; n_p],
            boundary: Vec::new(),
        }
    }

    pub(crate) fn set_a(&mut self, a: Triplets) {
        debug_assert_eq!(a.nrows, self.n_u);
        self.a = a;
    }

    pub(crate) fn set_b(&mut self, b: Triplets) {
        debug_assert_eq!(b.nrows, self.n_p);
        self.b = b;
    }

    /// Add one velocity-block entry (for small hand-built systems).
    pub fn push_a(&mut self, row: usize, col: usize, val: f64) {
        self.a.push(row, col, val);
    }

    /// Add one constraint-block entry (for small hand-built systems).
    pub fn push_b(&mut self, row: usize, col: usize, val: f64) {
        self.b.push(row, col, val);
    }
}

/// Eliminate the boundary velocity dofs: their rows and columns are
/// dropped from the velocity and constraint blocks, replaced by a unit
/// diagonal with zero right-hand side, so the solve returns exactly zero
/// there. Interior equations are untouched.
pub fn apply_dirichlet(mut sys: SaddleSystem) -> SaddleSystem {
    if sys.boundary.is_empty() {
        return sys;
    }
    let mut on_boundary = vec![false; sys.n_u];
    for &d in &sys.boundary {
        on_boundary[d] = true;
    }
    sys.a
        .entries
        .retain(|t| !on_boundary[t.row] && !on_boundary[t.col]);
    for &d in &sys.boundary {
        sys.a.push(d, d, 1.0);
        sys.rhs_u[d] = 0.0;
    }
    sys.b.entries.retain(|t| !on_boundary[t.col]);
    sys
}

/// Solve the full block system by sparse LU and verify the residual
/// contract: the relative residual of the assembled block matrix must not
/// exceed `tol`. Returns velocity dofs, pressure dofs, and the mean
/// multiplier (zero when the mean column is absent).
pub fn solve_saddle(sys: &SaddleSystem, tol: f64) -> Result<(Vec<f64>, Vec<f64>, f64)> {
    solve_saddle_detailed(sys, tol).map(|(sol, _)| sol)
}

/// [`solve_saddle`] plus the measured relative residual, for diagnostics.
pub(crate) fn solve_saddle_detailed(
    sys: &SaddleSystem,
    tol: f64,
) -> Result<((Vec<f64>, Vec<f64>, f64), f64)> {
    if !(tol > 0.0 && tol <= 1e-4) {
        return Err(Error::InvalidInput(format!(
            "solver tolerance must lie in (0, 1e-4], got {tol}"
        )));
    }
    let has_mean = sys.mean.iter().any(|&v| v != 0.0);
    let n = sys.n_u + sys.n_p + usize::from(has_mean);
    let a_entries = sys.a.compress();
    let b_entries = sys.b.compress();
    let mut trips: Vec<Triplet<usize, usize, f64>> =
        Vec::with_capacity(a_entries.len() + 2 * b_entries.len() + 2 * sys.n_p);
    trips.extend(a_entries);
    for t in &b_entries {
        trips.push(Triplet::new(sys.n_u + t.row, t.col, t.val));
        trips.push(Triplet::new(t.col, sys.n_u + t.row, t.val));
    }
    if has_mean {
        let mu_col = sys.n_u + sys.n_p;
        for (k, &v) in sys.mean.iter().enumerate() {
            if v != 0.0 {
                trips.push(Triplet::new(sys.n_u + k, mu_col, v));
                trips.push(Triplet::new(mu_col, sys.n_u + k, v));
            }
        }
    }
    let mat = SparseColMat::<usize, f64>::try_new_from_triplets(n, n, &trips)
        .map_err(|e| Error::InvalidInput(format!("block matrix construction failed: {e:?}")))?;
    let mut rhs = faer::Mat::<f64>::zeros(n, 1);
    for (i, &v) in sys.rhs_u.iter().enumerate() {
        rhs[(i, 0)] = v;
    }
    for (k, &v) in sys.rhs_p.iter().enumerate() {
        rhs[(sys.n_u + k, 0)] = v;
    }
    let symbolic = SymbolicLu::try_new(mat.symbolic()).map_err(|_| Error::Solver {
        residual: f64::INFINITY,
        tol,
    })?;
    let lu = Lu::try_new_with_symbolic(symbolic, mat.as_ref()).map_err(|_| Error::Solver {
        residual: f64::INFINITY,
        tol,
    })?;
    let mut x = rhs.clone();
    lu.solve_in_place(x.as_mut());

    let resid = &mat * &x;
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..n {
        num += (resid[(i, 0)] - rhs[(i, 0)]).powi(2);
        den += rhs[(i, 0)].powi(2);
    }
    let rel = num.sqrt() / den.sqrt().max(f64::MIN_POSITIVE);
    if !(rel <= tol) {
        return Err(Error::Solver { residual: rel, tol });
    }

    let u = (0..sys.n_u).map(|i| x[(i, 0)]).collect();
    let p = (0..sys.n_p).map(|k| x[(sys.n_u + k, 0)]).collect();
    let mu = if has_mean {
        x[(sys.n_u + sys.n_p, 0)]
    } else {
        0.0
    };
    Ok(((u, p, mu), rel))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flowmap::VelocityField;
    use crate::mesh::{build_disk_mesh, move_mesh, taylor_hood, MovedMesh};
    use approx::assert_abs_diff_eq;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn to_dense(m: &SpMat) -> DMatrix<f64> {
        let mut d = DMatrix::zeros(m.nrows(), m.ncols());
        let sym = m.symbolic();
        for j in 0..m.ncols() {
            for (k, &i) in sym.row_idx_of_col_raw(j).iter().enumerate() {
                d[(i, j)] += m.val_of_col(j)[k];
            }
        }
        d
    }

    fn small_mesh() -> Arc<Mesh> {
        let mesh = build_disk_mesh(0.65).unwrap();
        assert!(mesh.triangles.len() <= 30, "oracle mesh must stay small");
        Arc::new(mesh)
    }

    fn sheared(mesh: Arc<Mesh>) -> MovedMesh {
        let f = VelocityField::shear(Mat2::new(0.1, 0.4, 0.2, -0.1)).unwrap();
        move_mesh(mesh, &f, 0.4, 50, 4.0).unwrap()
    }

    /// Independent dense assembly with basis functions written out
    /// longhand, used as the bookkeeping oracle for the sparse paths.
    fn dense_mass_stiffness(mesh: &MovedMesh) -> (DMatrix<f64>, DMatrix<f64>) {
        let n = 2 * mesh.base.num_nodes();
        let mut mass = DMatrix::zeros(n, n);
        let mut stiff = DMatrix::zeros(n, n);
        for t in 0..mesh.base.triangles.len() {
            let [a, b, c] = mesh.triangle_coords(t);
            let nodes = element_nodes(&mesh.base, t);
            let area2 = (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x);
            let ga = Vec2::new(b.y - c.y, c.x - b.x) / area2;
            let gb = Vec2::new(c.y - a.y, a.x - c.x) / area2;
            let gc = Vec2::new(a.y - b.y, b.x - a.x) / area2;
            for (l, w) in QUAD_POINTS.iter().zip(QUAD_WEIGHTS) {
                let wq = w * 0.5 * area2;
                let vals = [
                    l[0] * (2.0 * l[0] - 1.0),
                    l[1] * (2.0 * l[1] - 1.0),
                    l[2] * (2.0 * l[2] - 1.0),
                    4.0 * l[0] * l[1],
                    4.0 * l[1] * l[2],
                    4.0 * l[2] * l[0],
                ];
                let grads = [
                    (4.0 * l[0] - 1.0) * ga,
                    (4.0 * l[1] - 1.0) * gb,
                    (4.0 * l[2] - 1.0) * gc,
                    4.0 * (l[0] * gb + l[1] * ga),
                    4.0 * (l[1] * gc + l[2] * gb),
                    4.0 * (l[2] * ga + l[0] * gc),
                ];
                for i in 0..6 {
                    for j in 0..6 {
                        for comp in 0..2 {
                            let r = velocity_dof(nodes[i], comp);
                            let s = velocity_dof(nodes[j], comp);
                            mass[(r, s)] += wq * vals[i] * vals[j];
                            stiff[(r, s)] += wq * grads[i].dot(&grads[j]);
                        }
                    }
                }
            }
        }
        (mass, stiff)
    }

    #[test]
    fn sparse_assembly_matches_dense_oracle() {
        let moved = sheared(small_mesh());
        let (dm, dk) = dense_mass_stiffness(&moved);
        let sm = to_dense(&assemble_mass(&moved).unwrap());
        let sk = to_dense(&assemble_stiffness(&moved).unwrap());
        assert!((&sm - &dm).abs().max() <= 1e-12);
        assert!((&sk - &dk).abs().max() <= 1e-12);
    }

    #[test]
    fn mass_is_symmetric_and_sums_to_the_area() {
        let moved = sheared(small_mesh());
        let m = to_dense(&assemble_mass(&moved).unwrap());
        assert_eq!((&m - &m.transpose()).abs().max(), 0.0);
        let mut total = 0.0;
        for i in (0..m.nrows()).step_by(2) {
            for j in (0..m.ncols()).step_by(2) {
                total += m[(i, j)];
            }
        }
        assert_abs_diff_eq!(total, moved.area(), epsilon = 1e-12);
    }

    #[test]
    fn mass_diagonals_match_exact_basis_integrals() {
        // On any straight mesh the vertex diagonal is sum of adjacent
        // areas / 30 and the midpoint diagonal is 8/45 of the same sum.
        let mesh = small_mesh();
        let moved = MovedMesh::at_rest(mesh.clone());
        let m = to_dense(&assemble_mass(&moved).unwrap());
        let nv = mesh.vertices.len();
        let mut vertex_area = vec![0.0; nv];
        let mut edge_area = vec![0.0; mesh.edges.len()];
        for t in 0..mesh.triangles.len() {
            let [a, b, c] = moved.triangle_coords(t);
            let area = 0.5 * ((b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x));
            for &v in &mesh.triangles[t] {
                vertex_area[v] += area;
            }
            for &e in &mesh.triangle_edges[t] {
                edge_area[e] += area;
            }
        }
        for v in 0..nv {
            assert_abs_diff_eq!(m[(2 * v, 2 * v)], vertex_area[v] / 30.0, epsilon = 1e-14);
        }
        for e in 0..mesh.edges.len() {
            let d = velocity_dof(nv + e, 0);
            assert_abs_diff_eq!(m[(d, d)], edge_area[e] * 8.0 / 45.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn stiffness_kills_constants_and_measures_dirichlet_energy() {
        let moved = sheared(small_mesh());
        let k = to_dense(&assemble_stiffness(&moved).unwrap());
        assert_eq!((&k - &k.transpose()).abs().max(), 0.0);
        let n = k.nrows();
        let ones = nalgebra::DVector::from_element(n, 1.0);
        assert!((&k * &ones).abs().max() <= 1e-12);
        // u(x) = (x_1, 0) has |grad u|^2 = 1, so the energy is the area.
        let field = PointwiseField::new(moved.t, |x| Ok(Vec2::new(x.x, 0.0)));
        let u = FEFunction::interpolate_velocity(&moved, &field).unwrap();
        let ud = nalgebra::DVector::from_vec(u.dofs.clone());
        let energy = (&ud.transpose() * &k * &ud)[(0, 0)];
        assert_abs_diff_eq!(energy, moved.area(), epsilon = 1e-12);
    }

    #[test]
    fn convection_vanishes_for_zero_field_and_recovers_stokes() {
        let moved = sheared(small_mesh());
        let zero = PointwiseField::constant(moved.t, Vec2::zeros());
        let c = to_dense(&assemble_convection(&moved, &zero).unwrap());
        assert_eq!(c.abs().max(), 0.0);
    }

    #[test]
    fn convection_is_skew_on_zero_boundary_vectors() {
        let mesh = Arc::new(build_disk_mesh(0.35).unwrap());
        let moved = MovedMesh::at_rest(mesh.clone());
        let dofs = taylor_hood(&mesh);
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        // Affine divergence-free beta: element integrands are degree 4, so
        // the rule is exact and skew-symmetry must hold to rounding.
        let affine = PointwiseField::new(0.0, |x| Ok(Vec2::new(0.3 * x.y + 0.1, -0.2 * x.x)));
        let c_aff = to_dense(&assemble_convection(&moved, &affine).unwrap());
        // Smooth non-polynomial beta picks up a quadrature defect; for
        // rough (random) vectors it is percent-level on this coarse mesh,
        // for smooth functions it is far smaller.
        let bump = PointwiseField::from_velocity_field(
            0.0,
            &VelocityField::stream_bump(Vec2::new(0.2, 0.0), 0.7, 0.5, 4).unwrap(),
        );
        let c_bump = to_dense(&assemble_convection(&moved, &bump).unwrap());
        for _ in 0..20 {
            let mut v = nalgebra::DVector::from_fn(dofs.n_velocity, |_, _| {
                rng.gen_range(-1.0..1.0)
            });
            for &d in &dofs.boundary_velocity {
                v[d] = 0.0;
            }
            let scale = v.norm_squared();
            let q_aff = (&v.transpose() * &c_aff * &v)[(0, 0)].abs();
            let q_bump = (&v.transpose() * &c_bump * &v)[(0, 0)].abs();
            assert!(q_aff <= 1e-12 * scale, "affine skew defect {q_aff:.3e}");
            assert!(q_bump <= 1e-2 * scale, "rough skew defect {q_bump:.3e}");
        }
        let smooth = PointwiseField::from_velocity_field(
            0.0,
            &VelocityField::stream_bump(Vec2::new(-0.1, 0.1), 0.8, 0.6, 4).unwrap(),
        );
        let u = FEFunction::interpolate_velocity(&moved, &smooth).unwrap();
        let ud = nalgebra::DVector::from_vec(u.dofs.clone());
        let q_smooth = (&ud.transpose() * &c_bump * &ud)[(0, 0)].abs();
        assert!(
            q_smooth <= 1e-3 * ud.norm_squared().max(1.0),
            "smooth skew defect {q_smooth:.3e}"
        );
    }

    #[test]
    fn div_block_kills_constants_and_mean_row_integrates_one() {
        let moved = sheared(small_mesh());
        let (b, mean) = assemble_div(&moved).unwrap();
        let bd = to_dense(&b);
        let constant = PointwiseField::constant(moved.t, Vec2::new(0.7, -0.3));
        let u = FEFunction::interpolate_velocity(&moved, &constant).unwrap();
        let ud = nalgebra::DVector::from_vec(u.dofs.clone());
        assert!((&bd * &ud).abs().max() <= 1e-13);
        let total: f64 = mean.iter().sum();
        assert_abs_diff_eq!(total, moved.area(), epsilon = 1e-13);
    }

    #[test]
    fn load_of_unit_forcing_sums_to_the_area() {
        let moved = sheared(small_mesh());
        let f = PointwiseField::constant(moved.t, Vec2::new(1.0, 0.0));
        let rhs = assemble_load(&moved, &f).unwrap();
        let sum_x: f64 = rhs.iter().step_by(2).sum();
        let sum_y: f64 = rhs.iter().skip(1).step_by(2).sum();
        assert_abs_diff_eq!(sum_x, moved.area(), epsilon = 1e-13);
        assert_abs_diff_eq!(sum_y, 0.0, epsilon = 1e-15);
        let zero = PointwiseField::constant(moved.t, Vec2::zeros());
        assert!(assemble_load(&moved, &zero)
            .unwrap()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn cross_mass_on_one_mesh_is_the_ordinary_mass_product() {
        let moved = sheared(small_mesh());
        let field = PointwiseField::new(moved.t, |x| Ok(Vec2::new(x.y, x.x * x.x)));
        let u = FEFunction::interpolate_velocity(&moved, &field).unwrap();
        let rhs = cross_mass_rhs(&moved, &u).unwrap();
        let m = to_dense(&assemble_mass(&moved).unwrap());
        let expect = &m * nalgebra::DVector::from_vec(u.dofs.clone());
        for i in 0..rhs.len() {
            assert_abs_diff_eq!(rhs[i], expect[i], epsilon = 1e-13);
        }
        let zero = FEFunction::zero_velocity(&moved);
        assert!(cross_mass_rhs(&moved, &zero)
            .unwrap()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn cross_mass_rejects_foreign_meshes() {
        let m1 = MovedMesh::at_rest(small_mesh());
        let m2 = MovedMesh::at_rest(small_mesh());
        let u = FEFunction::zero_velocity(&m1);
        match cross_mass_rhs(&m2, &u) {
            Err(Error::Mesh(_)) => {}
            other => panic!("expected mesh mismatch, got {other:?}"),
        }
    }

    #[test]
    fn sampler_reproduces_quadratic_fields_exactly() {
        let moved = sheared(small_mesh());
        let field = PointwiseField::with_gradient(
            moved.t,
            |x| Ok(Vec2::new(x.x * x.x + 0.5 * x.y, x.x * x.y)),
            |x| Ok(Mat2::new(2.0 * x.x, 0.5, x.y, x.x)),
        );
        let fe = Arc::new(FEFunction::interpolate_velocity(&moved, &field).unwrap());
        let sampler = VelocitySampler::new(Arc::new(moved), fe).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let mut tested = 0;
        while tested < 50 {
            let p = Vec2::new(rng.gen_range(-0.7..0.7), rng.gen_range(-0.7..0.7));
            let exact = match sampler.eval(p) {
                Ok(_) if p.norm() < 0.7 => field.eval(p).unwrap(),
                _ => continue,
            };
            assert!((sampler.eval(p).unwrap() - exact).norm() <= 1e-12);
            let g = field.jacobian(p).unwrap();
            assert!((sampler.gradient(p).unwrap() - g).norm() <= 1e-10);
            tested += 1;
        }
        match sampler.eval(Vec2::new(5.0, 5.0)) {
            Err(Error::OutsideMesh { .. }) => {}
            other => panic!("expected outside-mesh error, got {other:?}"),
        }
    }

    #[test]
    fn toy_saddle_system_solves_by_hand_values() {
        let mut sys = SaddleSystem::new(2, 1);
        sys.push_a(0, 0, 1.0);
        sys.push_a(1, 1, 1.0);
        sys.push_b(0, 0, 1.0);
        sys.push_b(0, 1, 1.0);
        sys.rhs_u = vec![1.0, 0.0];
        let (u, p, mu) = solve_saddle(&sys, 1e-10).unwrap();
        assert_abs_diff_eq!(u[0], 0.5, epsilon = 1e-14);
        assert_abs_diff_eq!(u[1], -0.5, epsilon = 1e-14);
        assert_abs_diff_eq!(p[0], 0.5, epsilon = 1e-14);
        assert_eq!(mu, 0.0);
    }

    #[test]
    fn plain_spd_solve_matches_dense_oracle() {
        let moved = MovedMesh::at_rest(small_mesh());
        let mass = mass_triplets(&moved);
        let stiff = stiffness_triplets(&moved);
        let n = mass.nrows;
        let mut sys = SaddleSystem::new(n, 0);
        sys.set_a(mass.merge(stiff));
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        sys.rhs_u = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let dense = to_dense(&sys.a.to_sparse().unwrap());
        let rhs = nalgebra::DVector::from_vec(sys.rhs_u.clone());
        let expect = dense.lu().solve(&rhs).unwrap();
        let (u, p, _) = solve_saddle(&sys, 1e-10).unwrap();
        assert!(p.is_empty());
        for i in 0..n {
            assert_abs_diff_eq!(u[i], expect[i], epsilon = 1e-10);
        }
    }

    #[test]
    fn dirichlet_elimination_zeroes_boundary_dofs() {
        let mesh = small_mesh();
        let moved = MovedMesh::at_rest(mesh.clone());
        let dofs = taylor_hood(&mesh);
        let mut sys = SaddleSystem::new(dofs.n_velocity, dofs.n_pressure);
        sys.set_a(mass_triplets(&moved).merge(stiffness_triplets(&moved)));
        let (b, mean) = div_triplets(&moved);
        sys.set_b(b.scale(-1.0));
        sys.mean = mean;
        sys.rhs_u = vec![1.0; dofs.n_velocity];
        sys.boundary = dofs.boundary_velocity.clone();
        let sys = apply_dirichlet(sys);
        let (u, _, _) = solve_saddle(&sys, 1e-10).unwrap();
        for &d in &dofs.boundary_velocity {
            assert_eq!(u[d], 0.0);
        }
        let interior_max = u
            .iter()
            .enumerate()
            .filter(|(i, _)| !dofs.boundary_velocity.contains(i))
            .map(|(_, v)| v.abs())
            .fold(0.0, f64::max);
        assert!(interior_max > 0.0);
    }

    #[test]
    fn empty_boundary_leaves_the_system_unchanged() {
        let mut sys = SaddleSystem::new(2, 0);
        sys.push_a(0, 0, 2.0);
        sys.push_a(1, 1, 3.0);
        sys.rhs_u = vec![2.0, 9.0];
        let sys = apply_dirichlet(sys);
        let (u, _, _) = solve_saddle(&sys, 1e-10).unwrap();
        assert_abs_diff_eq!(u[0], 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(u[1], 3.0, epsilon = 1e-14);
    }

    #[test]
    fn solver_rejects_out_of_range_tolerances() {
        let sys = SaddleSystem::new(1, 0);
        assert!(solve_saddle(&sys, 0.0).is_err());
        assert!(solve_saddle(&sys, 1e-3).is_err());
    }
}
