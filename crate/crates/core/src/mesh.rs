//! Disk triangulations, their advection by the flow map, and Taylor-Hood
//! degree-of-freedom bookkeeping.
//!
//! The reference domain is the unit disk, triangulated by concentric rings:
//! ring `i` of `n` carries `6i` vertices at radius `i/n`, the hub is six
//! triangles around the center, and each annulus is triangulated by merging
//! the two ring polylines in angle order. The construction is deterministic,
//! quasi-uniform, and the polygonal boundary sits within `O(h^2)` of the
//! unit circle.
//!
//! A moved mesh carries the same connectivity with every node advected by
//! the flow map, together with the flow Jacobian at every node. Unit
//! Jacobian determinants keep triangle orientations intact, and the total
//! polygon area stays within `O(h^2)` of the reference area for
//! divergence-free motion.
//!
//! Velocity is discretized with quadratic elements on straight triangles
//! (the quadratic basis nodes are the vertices plus edge midpoints) and
//! pressure with linear elements on the vertices, the classical
//! Taylor-Hood pair.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::flowmap::{advance_flowmap, VelocityField};
use crate::{Error, Mat2, Result, Vec2};

/// Hard cap on quadratic nodes (vertices plus edge midpoints) a single mesh
/// may allocate; requests below the corresponding mesh size are refused.
const NODE_BUDGET: usize = 2_000_000;

static MESH_COUNTER: AtomicU64 = AtomicU64::new(0);

/// An immutable triangulation of the unit disk with the edge data the
/// quadratic velocity space needs.
#[derive(Debug)]
pub struct Mesh {
    id: u64,
    /// Vertex coordinates.
    pub vertices: Vec<Vec2>,
    /// Vertex index triples, positively oriented.
    pub triangles: Vec<[usize; 3]>,
    /// Unique edges as sorted vertex pairs, in deterministic discovery order.
    pub edges: Vec<[usize; 2]>,
    /// For each triangle, the edge indices of local edges (0,1), (1,2), (2,0).
    pub triangle_edges: Vec<[usize; 3]>,
    /// Reference midpoint coordinates, one per edge.
    pub midpoints: Vec<Vec2>,
    /// True for vertices on the boundary polygon.
    pub boundary_vertex: Vec<bool>,
    /// True for edges lying on the boundary (single adjacent triangle).
    pub boundary_edge: Vec<bool>,
    /// Longest edge length.
    pub h: f64,
}

impl Mesh {
    /// Identity token used to detect mixed-mesh operations.
    pub fn id(&self) -> u64 {
        self.id
    }

    /// Quadratic node count: vertices followed by edge midpoints.
    pub fn num_nodes(&self) -> usize {
        self.vertices.len() + self.edges.len()
    }

    /// Reference coordinates of quadratic node `i` (vertex or midpoint).
    pub fn node_position(&self, i: usize) -> Vec2 {
        if i < self.vertices.len() {
            self.vertices[i]
        } else {
            self.midpoints[i - self.vertices.len()]
        }
    }

    /// Whether quadratic node `i` lies on the boundary.
    pub fn is_boundary_node(&self, i: usize) -> bool {
        if i < self.vertices.len() {
            self.boundary_vertex[i]
        } else {
            self.boundary_edge[i - self.vertices.len()]
        }
    }

    /// Sum of signed triangle areas; equals the polygon area for a valid
    /// orientation.
    pub fn area(&self) -> f64 {
        self.triangles
            .iter()
            .map(|t| signed_area(self.vertices[t[0]], self.vertices[t[1]], self.vertices[t[2]]))
            .sum()
    }
}

fn signed_area(a: Vec2, b: Vec2, c: Vec2) -> f64 {
    0.5 * ((b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x))
}

/// Number of quadratic nodes of the ring construction with `n` rings, from
/// the vertex count `1 + 3n(n+1)` and edge count `9n^2 + 3n`.
fn ring_mesh_nodes(n: usize) -> usize {
    1 + 3 * n * (n + 1) + 9 * n * n + 3 * n
}

/// Build a quasi-uniform triangulation of the unit disk with mesh size at
/// most `h_target`.
pub fn build_disk_mesh(h_target: f64) -> Result<Mesh> {
    if !(h_target > 0.0 && h_target < 1.0) {
        return Err(Error::InvalidInput(format!(
            "mesh size target must lie in (0, 1), got {h_target}"
        )));
    }
    let mut n = ((1.05 / h_target).ceil() as usize).max(1);
    loop {
        if ring_mesh_nodes(n) > NODE_BUDGET {
            return Err(Error::Mesh(format!(
                "mesh size target {h_target} needs {} quadratic nodes, over the {} budget",
                ring_mesh_nodes(n),
                NODE_BUDGET
            )));
        }
        let mesh = build_ring_mesh(n);
        if mesh.h <= h_target {
            return Ok(mesh);
        }
        n += 1;
    }
}

fn build_ring_mesh(n: usize) -> Mesh {
    let mut vertices = vec![Vec2::zeros()];
    for i in 1..=n {
        let r = i as f64 / n as f64;
        let count = 6 * i;
        for j in 0..count {
            let theta = 2.0 * std::f64::consts::PI * j as f64 / count as f64;
            vertices.push(Vec2::new(r * theta.cos(), r * theta.sin()));
        }
    }
    // Ring i occupies indices ring_start(i) .. ring_start(i) + 6i.
    let ring_start = |i: usize| if i == 0 { 0 } else { 1 + 3 * i * (i - 1) };

    let mut triangles = Vec::with_capacity(6 * n * n);
    for j in 0..6 {
        triangles.push([0, 1 + j, 1 + (j + 1) % 6]);
    }
    for i in 1..n {
        let n_in = 6 * i;
        let n_out = 6 * (i + 1);
        let inner = ring_start(i);
        let outer = ring_start(i + 1);
        let mut a = 0;
        let mut b = 0;
        // Merge the two ring polylines in angle order; each advance emits
        // one triangle, n_in + n_out in total.
        while a < n_in || b < n_out {
            let advance_inner = if a == n_in {
                false
            } else if b == n_out {
                true
            } else {
                (a + 1) * n_out <= (b + 1) * n_in
            };
            if advance_inner {
                triangles.push([inner + a % n_in, outer + b % n_out, inner + (a + 1) % n_in]);
                a += 1;
            } else {
                triangles.push([inner + a % n_in, outer + b % n_out, outer + (b + 1) % n_out]);
                b += 1;
            }
        }
    }
    for t in &mut triangles {
        if signed_area(vertices[t[0]], vertices[t[1]], vertices[t[2]]) < 0.0 {
            t.swap(1, 2);
        }
    }

    let mut edge_index = std::collections::HashMap::new();
    let mut edges: Vec<[usize; 2]> = Vec::new();
    let mut edge_count: Vec<u32> = Vec::new();
    let mut triangle_edges = Vec::with_capacity(triangles.len());
    for t in &triangles {
        let mut te = [0usize; 3];
        for (k, &(la, lb)) in [(0, 1), (1, 2), (2, 0)].iter().enumerate() {
            let key = if t[la] < t[lb] {
                [t[la], t[lb]]
            } else {
                [t[lb], t[la]]
            };
            let e = *edge_index.entry(key).or_insert_with(|| {
                edges.push(key);
                edge_count.push(0);
                edges.len() - 1
            });
            edge_count[e] += 1;
            te[k] = e;
        }
        triangle_edges.push(te);
    }
    let boundary_edge: Vec<bool> = edge_count.iter().map(|&c| c == 1).collect();
    let mut boundary_vertex = vec![false; vertices.len()];
    for (e, &bnd) in boundary_edge.iter().enumerate() {
        if bnd {
            boundary_vertex[edges[e][0]] = true;
            boundary_vertex[edges[e][1]] = true;
        }
    }
    let midpoints = edges
        .iter()
        .map(|e| 0.5 * (vertices[e[0]] + vertices[e[1]]))
        .collect();
    let h = edges
        .iter()
        .map(|e| (vertices[e[0]] - vertices[e[1]]).norm())
        .fold(0.0, f64::max);

    Mesh {
        id: MESH_COUNTER.fetch_add(1, Ordering::Relaxed),
        vertices,
        triangles,
        edges,
        triangle_edges,
        midpoints,
        boundary_vertex,
        boundary_edge,
        h,
    }
}

/// The reference mesh advected to time `t`: same connectivity, every node
/// moved by the flow map, with the flow Jacobian stored per node.
#[derive(Clone, Debug)]
pub struct MovedMesh {
    /// The reference mesh this mesh is an image of.
    pub base: Arc<Mesh>,
    /// Time of the snapshot.
    pub t: f64,
    /// Moved vertex coordinates.
    pub vertices: Vec<Vec2>,
    /// Advected midpoint coordinates (images of the reference midpoints,
    /// not re-derived from the moved edges; the two agree to `O(h^2)` and
    /// exactly for affine flows).
    pub midpoints: Vec<Vec2>,
    /// Flow Jacobian at each vertex.
    pub vertex_jac: Vec<Mat2>,
    /// Flow Jacobian at each advected midpoint.
    pub midpoint_jac: Vec<Mat2>,
}

impl MovedMesh {
    /// The reference mesh viewed as a moved mesh at `t = 0`.
    pub fn at_rest(base: Arc<Mesh>) -> Self {
        let nv = base.vertices.len();
        let ne = base.edges.len();
        MovedMesh {
            t: 0.0,
            vertices: base.vertices.clone(),
            midpoints: base.midpoints.clone(),
            vertex_jac: vec![Mat2::identity(); nv],
            midpoint_jac: vec![Mat2::identity(); ne],
            base,
        }
    }

    /// Moved position of quadratic node `i`.
    pub fn node_position(&self, i: usize) -> Vec2 {
        let nv = self.vertices.len();
        if i < nv {
            self.vertices[i]
        } else {
            self.midpoints[i - nv]
        }
    }

    /// Position of the quadratic *basis* node `i` on the straight-triangle
    /// mesh: moved vertices, and geometric midpoints of the moved edges.
    /// This differs from [`Self::node_position`] for midpoint nodes of
    /// non-affine flows by `O(h^2)`; interpolation into the discrete space
    /// must use these positions because the basis is defined on the
    /// straight triangles.
    pub fn basis_node_position(&self, i: usize) -> Vec2 {
        let nv = self.vertices.len();
        if i < nv {
            self.vertices[i]
        } else {
            let e = self.base.edges[i - nv];
            0.5 * (self.vertices[e[0]] + self.vertices[e[1]])
        }
    }

    /// Flow Jacobian at quadratic node `i`.
    pub fn node_jacobian(&self, i: usize) -> Mat2 {
        let nv = self.vertices.len();
        if i < nv {
            self.vertex_jac[i]
        } else {
            self.midpoint_jac[i - nv]
        }
    }

    /// Moved vertex coordinates of triangle `t`.
    pub fn triangle_coords(&self, t: usize) -> [Vec2; 3] {
        let tri = self.base.triangles[t];
        [
            self.vertices[tri[0]],
            self.vertices[tri[1]],
            self.vertices[tri[2]],
        ]
    }

    /// Sum of signed triangle areas of the moved polygon.
    pub fn area(&self) -> f64 {
        (0..self.base.triangles.len())
            .map(|t| {
                let [a, b, c] = self.triangle_coords(t);
                signed_area(a, b, c)
            })
            .sum()
    }
}

/// Advect every node of `mesh` to time `t` with `substeps` RK4 steps. Fails
/// if a node leaves the hold-all disk or a triangle inverts (the latter
/// cannot happen for resolved unit-determinant flows and signals an
/// integration failure).
pub fn move_mesh(
    mesh: Arc<Mesh>,
    field: &VelocityField,
    t: f64,
    substeps: usize,
    holdall: f64,
) -> Result<MovedMesh> {
    let vs = advance_flowmap(field, &mesh.vertices, t, substeps, holdall)?;
    let ms = advance_flowmap(field, &mesh.midpoints, t, substeps, holdall)?;
    let moved = MovedMesh {
        base: mesh,
        t,
        vertices: vs.phi,
        midpoints: ms.phi,
        vertex_jac: vs.jac,
        midpoint_jac: ms.jac,
    };
    for (k, tri) in moved.base.triangles.iter().enumerate() {
        let a = signed_area(
            moved.vertices[tri[0]],
            moved.vertices[tri[1]],
            moved.vertices[tri[2]],
        );
        if a <= 0.0 {
            return Err(Error::Mesh(format!(
                "triangle {k} inverted at t = {t} (signed area {a:.3e}); flow under-resolved"
            )));
        }
    }
    Ok(moved)
}

/// Continue an already-moved mesh to a later (or earlier) time by
/// integrating each node's position and Jacobian onward with `substeps` RK4
/// steps over `[mesh.t, t]`. Chaining snapshots with a fixed step size
/// follows the same RK4 trajectory as one long integration from the
/// reference mesh, so a time stepper can advance the mesh incrementally
/// instead of restarting from zero every step.
pub fn advance_mesh(
    mesh: &MovedMesh,
    field: &VelocityField,
    t: f64,
    substeps: usize,
    holdall: f64,
) -> Result<MovedMesh> {
    if substeps == 0 {
        return Err(Error::InvalidInput("substeps must be at least 1".into()));
    }
    let advance = |coords: &[Vec2], jacs: &[Mat2]| -> Result<(Vec<Vec2>, Vec<Mat2>)> {
        let mut xs = Vec::with_capacity(coords.len());
        let mut js = Vec::with_capacity(coords.len());
        for (&x0, &j0) in coords.iter().zip(jacs) {
            let (x, j) = crate::flowmap::integrate_flow(field, x0, j0, mesh.t, t, substeps, holdall)?;
            xs.push(x);
            js.push(j);
        }
        Ok((xs, js))
    };
    let (vertices, vertex_jac) = advance(&mesh.vertices, &mesh.vertex_jac)?;
    let (midpoints, midpoint_jac) = advance(&mesh.midpoints, &mesh.midpoint_jac)?;
    let moved = MovedMesh {
        base: mesh.base.clone(),
        t,
        vertices,
        midpoints,
        vertex_jac,
        midpoint_jac,
    };
    for (k, tri) in moved.base.triangles.iter().enumerate() {
        let a = signed_area(
            moved.vertices[tri[0]],
            moved.vertices[tri[1]],
            moved.vertices[tri[2]],
        );
        if a <= 0.0 {
            return Err(Error::Mesh(format!(
                "triangle {k} inverted at t = {t} (signed area {a:.3e}); flow under-resolved"
            )));
        }
    }
    Ok(moved)
}

/// Global numbering of the Taylor-Hood pair on a mesh: velocity dofs are
/// `2*node + component` over quadratic nodes (vertices then midpoints),
/// pressure dofs are the vertex indices.
#[derive(Clone, Debug)]
pub struct DofMaps {
    /// Number of velocity dofs, `2 * (vertices + edges)`.
    pub n_velocity: usize,
    /// Number of pressure dofs, one per vertex.
    pub n_pressure: usize,
    /// Number of quadratic nodes.
    pub n_nodes: usize,
    /// Velocity dofs on the boundary, ascending.
    pub boundary_velocity: Vec<usize>,
    /// Per-node boundary flag over quadratic nodes.
    pub node_on_boundary: Vec<bool>,
}

/// Velocity dof index of `(node, component)`.
pub fn velocity_dof(node: usize, comp: usize) -> usize {
    2 * node + comp
}

/// Build the Taylor-Hood dof maps for a mesh. Deterministic: the numbering
/// depends only on the mesh's own vertex and edge order.
pub fn taylor_hood(mesh: &Mesh) -> DofMaps {
    let n_nodes = mesh.num_nodes();
    let node_on_boundary: Vec<bool> = (0..n_nodes).map(|i| mesh.is_boundary_node(i)).collect();
    let mut boundary_velocity = Vec::new();
    for (i, &bnd) in node_on_boundary.iter().enumerate() {
        if bnd {
            boundary_velocity.push(velocity_dof(i, 0));
            boundary_velocity.push(velocity_dof(i, 1));
        }
    }
    DofMaps {
        n_velocity: 2 * n_nodes,
        n_pressure: mesh.vertices.len(),
        n_nodes,
        boundary_velocity,
        node_on_boundary,
    }
}

/// Seven-point, degree-5 triangle quadrature in barycentric coordinates.
/// Weights sum to one; integrals are `|T| * sum_q w_q f(x_q)`.
pub const QUAD_POINTS: [[f64; 3]; 7] = {
    const A1: f64 = 0.101_286_507_323_456_34;
    const B1: f64 = 1.0 - 2.0 * A1;
    const A2: f64 = 0.470_142_064_105_115_09;
    const B2: f64 = 1.0 - 2.0 * A2;
    [
        [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0],
        [B1, A1, A1],
        [A1, B1, A1],
        [A1, A1, B1],
        [B2, A2, A2],
        [A2, B2, A2],
        [A2, A2, B2],
    ]
};

/// Weights of [`QUAD_POINTS`].
pub const QUAD_WEIGHTS: [f64; 7] = {
    const W1: f64 = 0.125_939_180_544_827_15;
    const W2: f64 = 0.132_394_152_788_506_18;
    [0.225, W1, W1, W1, W2, W2, W2]
};

/// Cartesian quadrature point of triangle `(a, b, c)` for barycentric `l`.
pub fn quad_point(l: &[f64; 3], a: Vec2, b: Vec2, c: Vec2) -> Vec2 {
    l[0] * a + l[1] * b + l[2] * c
}

/// Uniform-grid point locator over a set of straight triangles.
pub struct TriangleLocator {
    x_min: f64,
    y_min: f64,
    inv_cell: f64,
    nx: usize,
    ny: usize,
    bins: Vec<Vec<u32>>,
}

impl TriangleLocator {
    /// Bin triangles by their bounding boxes; cell size scales with the
    /// median triangle diameter.
    pub fn build(vertices: &[Vec2], triangles: &[[usize; 3]]) -> Self {
        let mut x_min = f64::INFINITY;
        let mut y_min = f64::INFINITY;
        let mut x_max = f64::NEG_INFINITY;
        let mut y_max = f64::NEG_INFINITY;
        for v in vertices {
            x_min = x_min.min(v.x);
            y_min = y_min.min(v.y);
            x_max = x_max.max(v.x);
            y_max = y_max.max(v.y);
        }
        let n_cells = (triangles.len() as f64).sqrt().ceil().max(1.0) as usize;
        let nx = n_cells;
        let ny = n_cells;
        let cell = ((x_max - x_min) / nx as f64)
            .max((y_max - y_min) / ny as f64)
            .max(1e-12);
        let inv_cell = 1.0 / cell;
        let mut bins = vec![Vec::new(); nx * ny];
        for (k, t) in triangles.iter().enumerate() {
            let xs = [vertices[t[0]].x, vertices[t[1]].x, vertices[t[2]].x];
            let ys = [vertices[t[0]].y, vertices[t[1]].y, vertices[t[2]].y];
            let lo_x = clamp_cell((xs.iter().cloned().fold(f64::INFINITY, f64::min) - x_min) * inv_cell, nx);
            let hi_x = clamp_cell((xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - x_min) * inv_cell, nx);
            let lo_y = clamp_cell((ys.iter().cloned().fold(f64::INFINITY, f64::min) - y_min) * inv_cell, ny);
            let hi_y = clamp_cell((ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - y_min) * inv_cell, ny);
            for cy in lo_y..=hi_y {
                for cx in lo_x..=hi_x {
                    bins[cy * nx + cx].push(k as u32);
                }
            }
        }
        TriangleLocator {
            x_min,
            y_min,
            inv_cell,
            nx,
            ny,
            bins,
        }
    }

    /// Find the triangle containing `p` and its barycentric coordinates, or
    /// `None` when `p` lies outside the triangulation (beyond a small
    /// boundary tolerance).
    pub fn locate(&self, vertices: &[Vec2], triangles: &[[usize; 3]], p: Vec2) -> Option<(usize, [f64; 3])> {
        let cx = clamp_cell((p.x - self.x_min) * self.inv_cell, self.nx);
        let cy = clamp_cell((p.y - self.y_min) * self.inv_cell, self.ny);
        let mut best: Option<(usize, [f64; 3], f64)> = None;
        for &k in &self.bins[cy * self.nx + cx] {
            let t = triangles[k as usize];
            let a = vertices[t[0]];
            let b = vertices[t[1]];
            let c = vertices[t[2]];
            let area2 = (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x);
            if area2 <= 0.0 {
                continue;
            }
            let l1 = ((b.x - p.x) * (c.y - p.y) - (b.y - p.y) * (c.x - p.x)) / area2;
            let l2 = ((c.x - p.x) * (a.y - p.y) - (c.y - p.y) * (a.x - p.x)) / area2;
            let l3 = 1.0 - l1 - l2;
            let worst = l1.min(l2).min(l3);
            if worst >= -1e-9 {
                return Some((k as usize, [l1, l2, l3]));
            }
            if best.map_or(true, |(_, _, w)| worst > w) {
                best = Some((k as usize, [l1, l2, l3], worst));
            }
        }
        // Accept a slightly-outside best match only within roundoff of the
        // boundary; everything else is genuinely outside.
        match best {
            Some((k, l, w)) if w >= -1e-7 => Some((k, l)),
            _ => None,
        }
    }
}

fn clamp_cell(v: f64, n: usize) -> usize {
    if v < 0.0 {
        0
    } else {
        (v as usize).min(n - 1)
    }
}
