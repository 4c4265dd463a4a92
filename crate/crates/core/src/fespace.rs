//! Hood-Taylor P2-velocity / P1-pressure pair on triangle meshes: degree of
//! freedom maps, reference-element basis evaluation, nodal interpolation and
//! Dirichlet boundary handling.
//!
//! Scalar dofs are ordered vertices first (ascending), then edge midpoints
//! (ascending by sorted endpoint pair), so two builds from the same mesh give
//! identical maps. Velocity components are interleaved per scalar node:
//! dof = 2*node + component.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use thiserror::Error;

use crate::mesh::Mesh;

#[derive(Debug, Error)]
pub enum FeError {
    #[error("fe space integrity error: {0}")]
    Integrity(String),
    #[error("contract violation: {0}")]
    Contract(String),
}

/// Role of a coefficient vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Velocity,
    Pressure,
}

/// A velocity dof constrained by a Dirichlet boundary edge.
#[derive(Debug, Clone, Copy)]
pub struct ConstrainedDof {
    pub dof: usize,
    pub marker: i32,
    pub position: [f64; 2],
    pub component: usize,
}

/// Taylor-Hood space on a fixed mesh. Immutable after construction.
#[derive(Debug)]
pub struct THSpace {
    mesh: Arc<Mesh>,
    edges: Vec<[usize; 2]>,
    /// Per triangle: 3 vertex scalar nodes then 3 edge scalar nodes
    /// (mid 01, mid 12, mid 20).
    tri_nodes: Vec<[usize; 6]>,
    n_scalar: usize,
    n_vel: usize,
    n_pre: usize,
    dirichlet: Vec<ConstrainedDof>,
    is_dirichlet: Vec<bool>,
    dirichlet_markers: BTreeSet<i32>,
    /// Integral of each P1 basis function, for pressure means.
    pressure_weights: Vec<f64>,
    area: f64,
}

/// Builds the P2/P1 pair; velocity dofs on edges with a marker in
/// `dirichlet_markers` (vertices and midpoints, both components) are
/// constrained. A corner dof touched by edges with different markers keeps
/// the smallest marker.
pub fn build_taylor_hood(
    mesh: Arc<Mesh>,
    dirichlet_markers: &BTreeSet<i32>,
) -> Result<THSpace, FeError> {
    if mesh.n_triangles() == 0 || mesh.n_vertices() == 0 {
        return Err(FeError::Integrity("empty mesh".into()));
    }
    let nv = mesh.n_vertices();

    let mut edge_ids: BTreeMap<[usize; 2], usize> = BTreeMap::new();
    for tri in mesh.triangles() {
        for k in 0..3 {
            let key = sorted_edge(tri[k], tri[(k + 1) % 3]);
            let next = edge_ids.len();
            edge_ids.entry(key).or_insert(next);
        }
    }
    // BTreeMap insertion order is not ascending-by-key; renumber so edge ids
    // follow the sorted endpoint pairs.
    let mut edges: Vec<[usize; 2]> = edge_ids.keys().copied().collect();
    edges.sort_unstable();
    let edge_ids: BTreeMap<[usize; 2], usize> =
        edges.iter().enumerate().map(|(i, &e)| (e, i)).collect();

    let mut tri_nodes = Vec::with_capacity(mesh.n_triangles());
    for tri in mesh.triangles() {
        let e01 = nv + edge_ids[&sorted_edge(tri[0], tri[1])];
        let e12 = nv + edge_ids[&sorted_edge(tri[1], tri[2])];
        let e20 = nv + edge_ids[&sorted_edge(tri[2], tri[0])];
        tri_nodes.push([tri[0], tri[1], tri[2], e01, e12, e20]);
    }

    let n_scalar = nv + edges.len();
    let n_vel = 2 * n_scalar;
    let n_pre = nv;

    // Smallest marker wins at shared corners.
    let mut node_marker: BTreeMap<usize, i32> = BTreeMap::new();
    for be in mesh.boundary_edges() {
        if !dirichlet_markers.contains(&be.marker) {
            continue;
        }
        let mid = nv + edge_ids[&sorted_edge(be.vertices[0], be.vertices[1])];
        for node in [be.vertices[0], be.vertices[1], mid] {
            node_marker
                .entry(node)
                .and_modify(|m| *m = (*m).min(be.marker))
                .or_insert(be.marker);
        }
    }

    let vertices = mesh.vertices();
    let node_pos = |node: usize| -> [f64; 2] {
        if node < nv {
            vertices[node]
        } else {
            let [a, b] = edges[node - nv];
            [
                0.5 * (vertices[a][0] + vertices[b][0]),
                0.5 * (vertices[a][1] + vertices[b][1]),
            ]
        }
    };

    let mut dirichlet = Vec::with_capacity(2 * node_marker.len());
    let mut is_dirichlet = vec![false; n_vel];
    for (&node, &marker) in &node_marker {
        for comp in 0..2 {
            let dof = 2 * node + comp;
            dirichlet.push(ConstrainedDof {
                dof,
                marker,
                position: node_pos(node),
                component: comp,
            });
            is_dirichlet[dof] = true;
        }
    }
    dirichlet.sort_by_key(|c| c.dof);

    let mut pressure_weights = vec![0.0; n_pre];
    let mut area = 0.0;
    for (t, tri) in mesh.triangles().iter().enumerate() {
        let a = mesh.triangle_area(t);
        area += a;
        for &v in tri {
            pressure_weights[v] += a / 3.0;
        }
    }

    Ok(THSpace {
        mesh,
        edges,
        tri_nodes,
        n_scalar,
        n_vel,
        n_pre,
        dirichlet,
        is_dirichlet,
        dirichlet_markers: dirichlet_markers.clone(),
        pressure_weights,
        area,
    })
}

impl THSpace {
    pub fn mesh(&self) -> &Mesh {
        &self.mesh
    }

    pub fn mesh_arc(&self) -> Arc<Mesh> {
        Arc::clone(&self.mesh)
    }

    pub fn n_vel(&self) -> usize {
        self.n_vel
    }

    pub fn n_pre(&self) -> usize {
        self.n_pre
    }

    pub fn n_scalar_nodes(&self) -> usize {
        self.n_scalar
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn domain_area(&self) -> f64 {
        self.area
    }

    pub fn dirichlet_markers(&self) -> &BTreeSet<i32> {
        &self.dirichlet_markers
    }

    /// Integral of each P1 basis function (row sums of the pressure mass
    /// matrix); used for L² pressure means.
    pub fn pressure_weights(&self) -> &[f64] {
        &self.pressure_weights
    }

    /// Scalar nodes of triangle `t`: vertices 0,1,2 then midpoints of edges
    /// (0,1), (1,2), (2,0).
    pub fn tri_nodes(&self, t: usize) -> [usize; 6] {
        self.tri_nodes[t]
    }

    /// Physical coordinates of a scalar node (vertex or edge midpoint).
    pub fn node_position(&self, node: usize) -> [f64; 2] {
        let vertices = self.mesh.vertices();
        if node < vertices.len() {
            vertices[node]
        } else {
            let [a, b] = self.edges[node - vertices.len()];
            [
                0.5 * (vertices[a][0] + vertices[b][0]),
                0.5 * (vertices[a][1] + vertices[b][1]),
            ]
        }
    }

    pub fn dirichlet_dofs(&self) -> &[ConstrainedDof] {
        &self.dirichlet
    }

    pub fn is_dirichlet(&self, dof: usize) -> bool {
        self.is_dirichlet[dof]
    }

    /// Evaluates the boundary-value callback at every constrained dof.
    /// The callback receives (marker, position, component).
    pub fn dirichlet_values(
        &self,
        g: impl Fn(i32, [f64; 2], usize) -> f64,
    ) -> Vec<(usize, f64)> {
        self.dirichlet
            .iter()
            .map(|c| (c.dof, g(c.marker, c.position, c.component)))
            .collect()
    }

    /// Affine map data for triangle `t`.
    pub fn element_geometry(&self, t: usize) -> ElementGeometry {
        let [p0, p1, p2] = self.mesh.triangle_coords(t);
        let j = [
            [p1[0] - p0[0], p2[0] - p0[0]],
            [p1[1] - p0[1], p2[1] - p0[1]],
        ];
        let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
        // inv(J)^T rows: gradients transform as grad_phys = J^{-T} grad_ref
        let inv_jac_t = [
            [j[1][1] / det, -j[1][0] / det],
            [-j[0][1] / det, j[0][0] / det],
        ];
        ElementGeometry {
            inv_jac_t,
            det,
            origin: p0,
            jac: j,
        }
    }

    pub fn same_space(a: &Arc<THSpace>, b: &Arc<THSpace>) -> bool {
        Arc::ptr_eq(a, b)
    }
}

/// Geometry of the affine reference-to-physical map of one triangle.
#[derive(Debug, Clone, Copy)]
pub struct ElementGeometry {
    pub jac: [[f64; 2]; 2],
    pub inv_jac_t: [[f64; 2]; 2],
    pub det: f64,
    pub origin: [f64; 2],
}

impl ElementGeometry {
    /// Physical point of barycentric coordinates `l`.
    pub fn point(&self, l: [f64; 3]) -> [f64; 2] {
        [
            self.origin[0] + self.jac[0][0] * l[1] + self.jac[0][1] * l[2],
            self.origin[1] + self.jac[1][0] * l[1] + self.jac[1][1] * l[2],
        ]
    }

    /// Transforms a reference gradient to physical coordinates.
    pub fn phys_grad(&self, g: [f64; 2]) -> [f64; 2] {
        [
            self.inv_jac_t[0][0] * g[0] + self.inv_jac_t[0][1] * g[1],
            self.inv_jac_t[1][0] * g[0] + self.inv_jac_t[1][1] * g[1],
        ]
    }
}

/// P2 basis values at barycentric `l`, local order: vertices then midpoints
/// (01, 12, 20).
pub fn p2_values(l: [f64; 3]) -> [f64; 6] {
    [
        l[0] * (2.0 * l[0] - 1.0),
        l[1] * (2.0 * l[1] - 1.0),
        l[2] * (2.0 * l[2] - 1.0),
        4.0 * l[0] * l[1],
        4.0 * l[1] * l[2],
        4.0 * l[2] * l[0],
    ]
}

const LAMBDA_GRADS: [[f64; 2]; 3] = [[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]];

/// Reference gradients of the P2 basis at barycentric `l`.
pub fn p2_ref_grads(l: [f64; 3]) -> [[f64; 2]; 6] {
    let g = LAMBDA_GRADS;
    let mut out = [[0.0; 2]; 6];
    for v in 0..3 {
        out[v] = [(4.0 * l[v] - 1.0) * g[v][0], (4.0 * l[v] - 1.0) * g[v][1]];
    }
    let pairs = [(0, 1), (1, 2), (2, 0)];
    for (k, (a, b)) in pairs.into_iter().enumerate() {
        out[3 + k] = [
            4.0 * (l[a] * g[b][0] + l[b] * g[a][0]),
            4.0 * (l[a] * g[b][1] + l[b] * g[a][1]),
        ];
    }
    out
}

pub fn p1_values(l: [f64; 3]) -> [f64; 3] {
    l
}

pub fn p1_ref_grads() -> [[f64; 2]; 3] {
    LAMBDA_GRADS
}

/// Coefficient vector tagged with its space and role.
#[derive(Debug, Clone)]
pub struct FeFunction {
    space: Arc<THSpace>,
    role: Role,
    coeffs: Vec<f64>,
}

impl FeFunction {
    pub fn zeros(space: Arc<THSpace>, role: Role) -> Self {
        let n = match role {
            Role::Velocity => space.n_vel(),
            Role::Pressure => space.n_pre(),
        };
        FeFunction {
            space,
            role,
            coeffs: vec![0.0; n],
        }
    }

    pub fn from_coeffs(space: Arc<THSpace>, role: Role, coeffs: Vec<f64>) -> Result<Self, FeError> {
        let expect = match role {
            Role::Velocity => space.n_vel(),
            Role::Pressure => space.n_pre(),
        };
        if coeffs.len() != expect {
            return Err(FeError::Contract(format!(
                "coefficient length {} does not match {:?} dof count {}",
                coeffs.len(),
                role,
                expect
            )));
        }
        Ok(FeFunction { space, role, coeffs })
    }

    pub fn space(&self) -> &Arc<THSpace> {
        &self.space
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [f64] {
        &mut self.coeffs
    }

    pub fn into_coeffs(self) -> Vec<f64> {
        self.coeffs
    }

    /// Velocity value at barycentric `l` of triangle `t`.
    pub fn velocity_at(&self, t: usize, l: [f64; 3]) -> [f64; 2] {
        debug_assert_eq!(self.role, Role::Velocity);
        let nodes = self.space.tri_nodes(t);
        let vals = p2_values(l);
        let mut out = [0.0; 2];
        for (k, &node) in nodes.iter().enumerate() {
            out[0] += vals[k] * self.coeffs[2 * node];
            out[1] += vals[k] * self.coeffs[2 * node + 1];
        }
        out
    }

    /// Velocity gradient at barycentric `l` of triangle `t`:
    /// `out[c][a] = d u_c / d x_a`.
    pub fn velocity_grad_at(&self, t: usize, l: [f64; 3]) -> [[f64; 2]; 2] {
        debug_assert_eq!(self.role, Role::Velocity);
        let geo = self.space.element_geometry(t);
        let nodes = self.space.tri_nodes(t);
        let grads = p2_ref_grads(l);
        let mut out = [[0.0; 2]; 2];
        for (k, &node) in nodes.iter().enumerate() {
            let g = geo.phys_grad(grads[k]);
            for c in 0..2 {
                let coef = self.coeffs[2 * node + c];
                out[c][0] += coef * g[0];
                out[c][1] += coef * g[1];
            }
        }
        out
    }

    /// Pressure value at barycentric `l` of triangle `t`.
    pub fn pressure_at(&self, t: usize, l: [f64; 3]) -> f64 {
        debug_assert_eq!(self.role, Role::Pressure);
        let tri = self.space.mesh().triangles()[t];
        l[0] * self.coeffs[tri[0]] + l[1] * self.coeffs[tri[1]] + l[2] * self.coeffs[tri[2]]
    }

    /// Integral of a pressure function over the domain.
    pub fn pressure_integral(&self) -> f64 {
        debug_assert_eq!(self.role, Role::Pressure);
        self.coeffs
            .iter()
            .zip(&self.space.pressure_weights)
            .map(|(c, w)| c * w)
            .sum()
    }

    /// Shifts a pressure function to zero mean in L².
    pub fn subtract_mean(&mut self) {
        debug_assert_eq!(self.role, Role::Pressure);
        let mean = self.pressure_integral() / self.space.domain_area();
        for c in self.coeffs.iter_mut() {
            *c -= mean;
        }
    }
}

/// Nodal P2 interpolant of an analytic vector field.
pub fn interpolate_velocity(
    space: &Arc<THSpace>,
    f: impl Fn([f64; 2]) -> [f64; 2],
) -> FeFunction {
    let mut coeffs = vec![0.0; space.n_vel()];
    for node in 0..space.n_scalar_nodes() {
        let v = f(space.node_position(node));
        coeffs[2 * node] = v[0];
        coeffs[2 * node + 1] = v[1];
    }
    FeFunction {
        space: Arc::clone(space),
        role: Role::Velocity,
        coeffs,
    }
}

/// Nodal P1 interpolant of an analytic scalar field.
pub fn interpolate_pressure(space: &Arc<THSpace>, f: impl Fn([f64; 2]) -> f64) -> FeFunction {
    let mesh = space.mesh();
    let coeffs = mesh.vertices().iter().map(|&p| f(p)).collect();
    FeFunction {
        space: Arc::clone(space),
        role: Role::Pressure,
        coeffs,
    }
}

fn sorted_edge(a: usize, b: usize) -> [usize; 2] {
    if a < b {
        [a, b]
    } else {
        [b, a]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::unit_square_mesh;

    fn space(n: usize) -> Arc<THSpace> {
        let mesh = Arc::new(unit_square_mesh(n));
        let markers = BTreeSet::from([1]);
        Arc::new(build_taylor_hood(mesh, &markers).unwrap())
    }

    #[test]
    fn dof_counts_match_euler_formula() {
        // V + T - 1 edges for a triangulated simply connected planar domain.
        let s = space(4);
        assert_eq!(s.n_edges(), 25 + 32 - 1);
        assert_eq!(s.n_vel(), 2 * (25 + 56));
        assert_eq!(s.n_vel(), 162);
        assert_eq!(s.n_pre(), 25);
    }

    #[test]
    fn full_dirichlet_covers_every_boundary_node() {
        let s = space(3);
        // Boundary scalar nodes: 4*3 vertices + 4*3 midpoints = 24; times 2 comps.
        assert_eq!(s.dirichlet_dofs().len(), 48);
        for c in s.dirichlet_dofs() {
            let p = c.position;
            let on_boundary = p[0] == 0.0 || p[0] == 1.0 || p[1] == 0.0 || p[1] == 1.0;
            assert!(on_boundary, "constrained dof at {p:?} is not on the boundary");
        }
    }

    #[test]
    fn dof_ordering_is_deterministic() {
        let mesh = Arc::new(unit_square_mesh(5));
        let markers = BTreeSet::from([1]);
        let a = build_taylor_hood(Arc::clone(&mesh), &markers).unwrap();
        let b = build_taylor_hood(mesh, &markers).unwrap();
        for t in 0..a.mesh().n_triangles() {
            assert_eq!(a.tri_nodes(t), b.tri_nodes(t));
        }
        assert_eq!(
            a.dirichlet_dofs().iter().map(|c| c.dof).collect::<Vec<_>>(),
            b.dirichlet_dofs().iter().map(|c| c.dof).collect::<Vec<_>>()
        );
    }

    #[test]
    fn p2_partition_of_unity() {
        let rule = crate::mesh::quadrature_rule(5).unwrap();
        for &l in &rule.points {
            let sum: f64 = p2_values(l).iter().sum();
            assert!((sum - 1.0).abs() < 1e-14);
            let grads = p2_ref_grads(l);
            for a in 0..2 {
                let gsum: f64 = grads.iter().map(|g| g[a]).sum();
                assert!(gsum.abs() < 1e-13);
            }
        }
    }

    #[test]
    fn interpolation_of_zero_and_linear_fields() {
        let s = space(3);
        let zero = interpolate_velocity(&s, |_| [0.0, 0.0]);
        assert!(zero.coeffs().iter().all(|&c| c == 0.0));

        // P2 contains linears: the interpolant reproduces them at quadrature points.
        let f = |p: [f64; 2]| [1.0 + 2.0 * p[0] - p[1], 0.5 * p[0] + 3.0 * p[1]];
        let u = interpolate_velocity(&s, f);
        let rule = crate::mesh::quadrature_rule(5).unwrap();
        for t in 0..s.mesh().n_triangles() {
            let geo = s.element_geometry(t);
            for &l in &rule.points {
                let exact = f(geo.point(l));
                let got = u.velocity_at(t, l);
                assert!((got[0] - exact[0]).abs() < 1e-14);
                assert!((got[1] - exact[1]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn constrained_dofs_zero_on_boundary_quadrature_points() {
        let s = space(4);
        let mut u = interpolate_velocity(&s, |p| [p[0] * p[1] + 1.0, p[0] - p[1]]);
        for (dof, v) in s.dirichlet_values(|_, _, _| 0.0) {
            u.coeffs_mut()[dof] = v;
        }
        // Boundary edges are edges of triangles; sample points along them.
        for be in s.mesh().boundary_edges() {
            let a = s.mesh().vertices()[be.vertices[0]];
            let b = s.mesh().vertices()[be.vertices[1]];
            // Locate the triangle containing this edge and evaluate on it.
            'outer: for t in 0..s.mesh().n_triangles() {
                let tri = s.mesh().triangles()[t];
                for k in 0..3 {
                    if (tri[k] == be.vertices[0] && tri[(k + 1) % 3] == be.vertices[1])
                        || (tri[k] == be.vertices[1] && tri[(k + 1) % 3] == be.vertices[0])
                    {
                        for s_par in [0.0, 0.25, 0.5, 0.75, 1.0] {
                            let p = [
                                a[0] + s_par * (b[0] - a[0]),
                                a[1] + s_par * (b[1] - a[1]),
                            ];
                            let l = barycentric(&s, t, p);
                            let v = u.velocity_at(t, l);
                            assert!(v[0].abs() < 1e-14 && v[1].abs() < 1e-14);
                        }
                        break 'outer;
                    }
                }
            }
        }
    }

    fn barycentric(s: &THSpace, t: usize, p: [f64; 2]) -> [f64; 3] {
        let geo = s.element_geometry(t);
        let dx = [p[0] - geo.origin[0], p[1] - geo.origin[1]];
        let det = geo.det;
        let l1 = (geo.jac[1][1] * dx[0] - geo.jac[0][1] * dx[1]) / det;
        let l2 = (-geo.jac[1][0] * dx[0] + geo.jac[0][0] * dx[1]) / det;
        [1.0 - l1 - l2, l1, l2]
    }

    #[test]
    fn pressure_mean_removal() {
        let s = space(4);
        let mut p = interpolate_pressure(&s, |q| q[0] * q[0] + 3.0);
        p.subtract_mean();
        assert!(p.pressure_integral().abs() < 1e-12);
    }

    #[test]
    fn coefficient_length_checked() {
        let s = space(2);
        assert!(FeFunction::from_coeffs(Arc::clone(&s), Role::Velocity, vec![0.0; 3]).is_err());
        assert!(
            FeFunction::from_coeffs(Arc::clone(&s), Role::Pressure, vec![0.0; s.n_pre()]).is_ok()
        );
    }

    #[test]
    fn empty_mesh_rejected() {
        let mesh = unit_square_mesh(1);
        // Mesh::new rejects empty input, so simulate through the API contract.
        let markers = BTreeSet::from([1]);
        assert!(build_taylor_hood(Arc::new(mesh), &markers).is_ok());
    }
}
