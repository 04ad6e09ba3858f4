//! Function spaces, constraints, quadrature caches, discrete norms and field
//! I/O.
//!
//! Velocity is continuous P2 (nodes = vertices followed by edge midpoints,
//! dof `2 * node + component`), pressure and the rheology `B` are P1 on
//! vertices, and the friction `tau` is P1 on the chain of basal vertices.
//!
//! Velocity constraints are handled by a change of basis: every velocity node
//! is free (two unknowns), slipping (one unknown along the tangent, `v.n = 0`)
//! or fixed (no unknown). The resulting map `T` from reduced unknowns to full
//! nodal values has orthonormal columns, so `T^T` restricts dual vectors and
//! `T T^T` is the orthogonal projector onto constraint-satisfying fields.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::mesh::{averaged_vertex_normals, edge_frame, BoundaryTag, Mesh};
use crate::quadrature::{EDGE_POINTS, EDGE_WEIGHTS, N_EDGE, N_TRIANGLE, TRIANGLE_POINTS, TRIANGLE_WEIGHTS};
use crate::tensor::{Mat2, Vec2};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SpaceKind {
    Velocity,
    Pressure,
    CoeffOmega,
    CoeffBasal,
}

impl SpaceKind {
    pub fn name(self) -> &'static str {
        match self {
            SpaceKind::Velocity => "velocity (P2 vector)",
            SpaceKind::Pressure => "pressure (P1)",
            SpaceKind::CoeffOmega => "rheology coefficient (P1 on Omega)",
            SpaceKind::CoeffBasal => "friction coefficient (P1 on Gamma_b)",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DofEntity {
    Vertex(usize),
    EdgeMidpoint(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FunctionSpace {
    pub kind: SpaceKind,
    /// Entity and component of every dof.
    pub dofs: Vec<(DofEntity, u8)>,
}

impl FunctionSpace {
    pub fn n_dofs(&self) -> usize {
        self.dofs.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NodeConstraint {
    Free,
    /// `v = alpha * tangent`; the normal component is pinned to zero.
    Slip { normal: Vec2, tangent: Vec2 },
    Fixed,
}

/// Coefficient vector over one of the spaces.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    kind: SpaceKind,
    pub values: Vec<f64>,
}

impl Field {
    pub fn new(kind: SpaceKind, values: Vec<f64>) -> Self {
        Field { kind, values }
    }

    pub fn kind(&self) -> SpaceKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn expect_kind(&self, kind: SpaceKind) -> Result<()> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(Error::SpaceMismatch {
                expected: kind.name().into(),
                found: self.kind.name().into(),
            })
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// `self + t * dir`.
    pub fn axpy(&self, t: f64, dir: &Field) -> Field {
        debug_assert_eq!(self.kind, dir.kind);
        Field {
            kind: self.kind,
            values: self.values.iter().zip(&dir.values).map(|(a, b)| a + t * b).collect(),
        }
    }

    pub fn scaled(&self, t: f64) -> Field {
        Field {
            kind: self.kind,
            values: self.values.iter().map(|a| t * a).collect(),
        }
    }

    /// `dof,value` CSV with shortest round-trip formatting.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("dof,value\n");
        for (i, v) in self.values.iter().enumerate() {
            let _ = writeln!(out, "{i},{v:?}");
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn from_csv(kind: SpaceKind, n_dofs: usize, text: &str) -> Result<Field> {
        let mut values = vec![f64::NAN; n_dofs];
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == "dof,value" => {}
            _ => return Err(Error::Parse("field CSV must start with `dof,value`".into())),
        }
        for (ln, line) in lines {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (d, v) = line
                .split_once(',')
                .ok_or_else(|| Error::Parse(format!("line {}: expected `dof,value`", ln + 1)))?;
            let d: usize = d
                .trim()
                .parse()
                .map_err(|e| Error::Parse(format!("line {}: bad dof: {e}", ln + 1)))?;
            let v: f64 = v
                .trim()
                .parse()
                .map_err(|e| Error::Parse(format!("line {}: bad value: {e}", ln + 1)))?;
            if d >= n_dofs {
                return Err(Error::Parse(format!(
                    "line {}: dof {d} out of range for {} with {n_dofs} dofs",
                    ln + 1,
                    kind.name()
                )));
            }
            values[d] = v;
        }
        if let Some(missing) = values.iter().position(|v| v.is_nan()) {
            return Err(Error::Parse(format!(
                "field CSV misses dof {missing} ({n_dofs} dofs expected)"
            )));
        }
        Ok(Field { kind, values })
    }

    pub fn read_csv(kind: SpaceKind, n_dofs: usize, path: &Path) -> Result<Field> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Field::from_csv(kind, n_dofs, &text)
    }
}

/// Quadrature point data on a triangle, in physical coordinates.
#[derive(Debug, Clone, Copy)]
pub struct QuadPoint {
    pub x: Vec2,
    pub weight: f64,
    pub p2: [f64; 6],
    pub p2_grad: [Vec2; 6],
    pub p1: [f64; 3],
}

#[derive(Debug, Clone)]
pub struct TriangleCache {
    pub area: f64,
    pub vertices: [usize; 3],
    /// Velocity nodes: three vertices, then midpoints of the edges opposite
    /// vertex 0, 1, 2.
    pub nodes: [usize; 6],
    pub p1_grad: [Vec2; 3],
    pub qp: [QuadPoint; N_TRIANGLE],
}

#[derive(Debug, Clone, Copy)]
pub struct EdgeQuadPoint {
    pub x: Vec2,
    pub weight: f64,
    pub p2: [f64; 3],
    pub p1: [f64; 2],
}

/// Boundary edge data; the parameter runs from `vertices[0]` to `vertices[1]`.
#[derive(Debug, Clone)]
pub struct EdgeCache {
    pub boundary_id: usize,
    pub tag: BoundaryTag,
    pub observed: bool,
    pub length: f64,
    pub normal: Vec2,
    pub tangent: Vec2,
    pub vertices: [usize; 2],
    /// Velocity nodes: vertex a, vertex b, midpoint.
    pub nodes: [usize; 3],
    pub qp: [EdgeQuadPoint; N_EDGE],
}

/// Which norm to evaluate with [`Discretization::norm`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Norm {
    L2,
    /// `(integral |grad u|^2)^(1/2)`, the full-gradient seminorm.
    V2Seminorm,
    H1,
    Lr(f64),
    LrBasal(f64),
}

/// P2 Lagrange basis on a triangle given barycentric coordinates.
pub fn p2_values(l: [f64; 3]) -> [f64; 6] {
    [
        l[0] * (2.0 * l[0] - 1.0),
        l[1] * (2.0 * l[1] - 1.0),
        l[2] * (2.0 * l[2] - 1.0),
        4.0 * l[1] * l[2],
        4.0 * l[2] * l[0],
        4.0 * l[0] * l[1],
    ]
}

pub fn p2_gradients(l: [f64; 3], gl: &[Vec2; 3]) -> [Vec2; 6] {
    let lin = |a: f64, g: Vec2| [a * g[0], a * g[1]];
    let prod = |i: usize, j: usize| {
        [
            4.0 * (l[i] * gl[j][0] + l[j] * gl[i][0]),
            4.0 * (l[i] * gl[j][1] + l[j] * gl[i][1]),
        ]
    };
    [
        lin(4.0 * l[0] - 1.0, gl[0]),
        lin(4.0 * l[1] - 1.0, gl[1]),
        lin(4.0 * l[2] - 1.0, gl[2]),
        prod(1, 2),
        prod(2, 0),
        prod(0, 1),
    ]
}

fn p2_edge_values(s: f64) -> [f64; 3] {
    [(1.0 - s) * (1.0 - 2.0 * s), s * (2.0 * s - 1.0), 4.0 * s * (1.0 - s)]
}

/// Gradients of the barycentric coordinates of a triangle.
pub(crate) fn barycentric_gradients(p: [Vec2; 3]) -> (f64, [Vec2; 3]) {
    let det = (p[1][0] - p[0][0]) * (p[2][1] - p[0][1]) - (p[2][0] - p[0][0]) * (p[1][1] - p[0][1]);
    let g1 = [(p[2][1] - p[0][1]) / det, -(p[2][0] - p[0][0]) / det];
    let g2 = [-(p[1][1] - p[0][1]) / det, (p[1][0] - p[0][0]) / det];
    let g0 = [-g1[0] - g2[0], -g1[1] - g2[1]];
    (0.5 * det, [g0, g1, g2])
}

/// Mesh plus every discrete space built on it.
#[derive(Debug, Clone)]
pub struct Discretization {
    mesh: Mesh,
    pub velocity: FunctionSpace,
    pub pressure: FunctionSpace,
    pub coeff_omega: FunctionSpace,
    pub coeff_basal: FunctionSpace,
    constraints: Vec<NodeConstraint>,
    reduced_map: Vec<Option<(usize, f64)>>,
    n_reduced_velocity: usize,
    basal_vertices: Vec<usize>,
    basal_dof: Vec<Option<usize>>,
    triangles: Vec<TriangleCache>,
    boundary_edges: Vec<EdgeCache>,
    basal_edges: Vec<usize>,
    observed_edges: Vec<usize>,
}

/// Builds the Taylor-Hood pair, both coefficient spaces and all constraints.
pub fn build_spaces(mesh: Mesh) -> Result<Discretization> {
    Discretization::new(mesh)
}

impl Discretization {
    pub fn new(mesh: Mesh) -> Result<Self> {
        let nv = mesh.n_vertices();
        let ne = mesh.n_edges();
        if mesh.tagged_length(|e| e.tag == BoundaryTag::Dirichlet) <= 0.0 {
            return Err(crate::error::MeshError::EmptyDirichlet.into());
        }

        let mut velocity_dofs = Vec::with_capacity(2 * (nv + ne));
        for v in 0..nv {
            velocity_dofs.push((DofEntity::Vertex(v), 0));
            velocity_dofs.push((DofEntity::Vertex(v), 1));
        }
        for e in 0..ne {
            velocity_dofs.push((DofEntity::EdgeMidpoint(e), 0));
            velocity_dofs.push((DofEntity::EdgeMidpoint(e), 1));
        }
        let vertex_dofs: Vec<(DofEntity, u8)> = (0..nv).map(|v| (DofEntity::Vertex(v), 0)).collect();

        // Basal chain, ascending vertex ids.
        let mut basal_vertices: Vec<usize> = mesh
            .boundary()
            .iter()
            .filter(|e| e.tag == BoundaryTag::Basal)
            .flat_map(|e| e.vertices)
            .collect();
        basal_vertices.sort_unstable();
        basal_vertices.dedup();
        let mut basal_dof = vec![None; nv];
        for (k, &v) in basal_vertices.iter().enumerate() {
            basal_dof[v] = Some(k);
        }

        // Constraints: Dirichlet dominates basal dominates atmosphere.
        let mut constraints = vec![NodeConstraint::Free; nv + ne];
        let basal_normals = averaged_vertex_normals(&mesh, |e| e.tag == BoundaryTag::Basal)?;
        for (&v, n) in &basal_normals {
            constraints[v] = if n[0] == 0.0 && n[1] == 0.0 {
                NodeConstraint::Fixed
            } else {
                NodeConstraint::Slip {
                    normal: *n,
                    tangent: [-n[1], n[0]],
                }
            };
        }
        for (i, e) in mesh.boundary().iter().enumerate() {
            let node = nv + mesh.boundary_edge_id(i);
            match e.tag {
                BoundaryTag::Dirichlet => {
                    constraints[e.vertices[0]] = NodeConstraint::Fixed;
                    constraints[e.vertices[1]] = NodeConstraint::Fixed;
                    constraints[node] = NodeConstraint::Fixed;
                }
                BoundaryTag::Basal => {
                    let (n, t, _) = edge_frame(mesh.vertices()[e.vertices[0]], mesh.vertices()[e.vertices[1]])
                        .ok_or(crate::error::MeshError::ZeroLengthEdge(i))?;
                    constraints[node] = NodeConstraint::Slip { normal: n, tangent: t };
                }
                BoundaryTag::Atmosphere => {}
            }
        }

        let mut reduced_map = vec![None; 2 * (nv + ne)];
        let mut r = 0;
        for (node, c) in constraints.iter().enumerate() {
            match c {
                NodeConstraint::Free => {
                    reduced_map[2 * node] = Some((r, 1.0));
                    reduced_map[2 * node + 1] = Some((r + 1, 1.0));
                    r += 2;
                }
                NodeConstraint::Slip { tangent, .. } => {
                    reduced_map[2 * node] = Some((r, tangent[0]));
                    reduced_map[2 * node + 1] = Some((r, tangent[1]));
                    r += 1;
                }
                NodeConstraint::Fixed => {}
            }
        }

        let verts = mesh.vertices();
        let triangles = mesh
            .triangles()
            .iter()
            .zip(mesh.triangle_edges())
            .map(|(tri, ed)| {
                let p = [verts[tri[0]], verts[tri[1]], verts[tri[2]]];
                let (area, gl) = barycentric_gradients(p);
                let qp = std::array::from_fn(|q| {
                    let l = TRIANGLE_POINTS[q];
                    QuadPoint {
                        x: [
                            l[0] * p[0][0] + l[1] * p[1][0] + l[2] * p[2][0],
                            l[0] * p[0][1] + l[1] * p[1][1] + l[2] * p[2][1],
                        ],
                        weight: TRIANGLE_WEIGHTS[q] * 2.0 * area,
                        p2: p2_values(l),
                        p2_grad: p2_gradients(l, &gl),
                        p1: l,
                    }
                });
                TriangleCache {
                    area,
                    vertices: *tri,
                    nodes: [tri[0], tri[1], tri[2], nv + ed[0], nv + ed[1], nv + ed[2]],
                    p1_grad: gl,
                    qp,
                }
            })
            .collect();

        let mut boundary_edges = Vec::with_capacity(mesh.boundary().len());
        for (i, e) in mesh.boundary().iter().enumerate() {
            let a = verts[e.vertices[0]];
            let b = verts[e.vertices[1]];
            let (normal, tangent, length) = edge_frame(a, b).ok_or(crate::error::MeshError::ZeroLengthEdge(i))?;
            let qp = std::array::from_fn(|q| {
                let s = EDGE_POINTS[q];
                EdgeQuadPoint {
                    x: [a[0] + s * (b[0] - a[0]), a[1] + s * (b[1] - a[1])],
                    weight: EDGE_WEIGHTS[q] * length,
                    p2: p2_edge_values(s),
                    p1: [1.0 - s, s],
                }
            });
            boundary_edges.push(EdgeCache {
                boundary_id: i,
                tag: e.tag,
                observed: e.observed,
                length,
                normal,
                tangent,
                vertices: e.vertices,
                nodes: [e.vertices[0], e.vertices[1], nv + mesh.boundary_edge_id(i)],
                qp,
            });
        }
        let basal_edges = mesh.boundary_ids_with(BoundaryTag::Basal);
        let observed_edges = mesh.observed_ids();

        Ok(Discretization {
            velocity: FunctionSpace {
                kind: SpaceKind::Velocity,
                dofs: velocity_dofs,
            },
            pressure: FunctionSpace {
                kind: SpaceKind::Pressure,
                dofs: vertex_dofs.clone(),
            },
            coeff_omega: FunctionSpace {
                kind: SpaceKind::CoeffOmega,
                dofs: vertex_dofs,
            },
            coeff_basal: FunctionSpace {
                kind: SpaceKind::CoeffBasal,
                dofs: basal_vertices.iter().map(|&v| (DofEntity::Vertex(v), 0)).collect(),
            },
            constraints,
            reduced_map,
            n_reduced_velocity: r,
            basal_vertices,
            basal_dof,
            triangles,
            boundary_edges,
            basal_edges,
            observed_edges,
            mesh,
        })
    }

    pub fn mesh(&self) -> &Mesh {
        &self.mesh
    }

    pub fn space(&self, kind: SpaceKind) -> &FunctionSpace {
        match kind {
            SpaceKind::Velocity => &self.velocity,
            SpaceKind::Pressure => &self.pressure,
            SpaceKind::CoeffOmega => &self.coeff_omega,
            SpaceKind::CoeffBasal => &self.coeff_basal,
        }
    }

    pub fn n_dofs(&self, kind: SpaceKind) -> usize {
        self.space(kind).n_dofs()
    }

    pub fn n_velocity_nodes(&self) -> usize {
        self.constraints.len()
    }

    pub fn constraints(&self) -> &[NodeConstraint] {
        &self.constraints
    }

    pub fn triangles(&self) -> &[TriangleCache] {
        &self.triangles
    }

    pub fn boundary_edges(&self) -> &[EdgeCache] {
        &self.boundary_edges
    }

    /// Boundary ids of the basal edges.
    pub fn basal_edges(&self) -> &[usize] {
        &self.basal_edges
    }

    /// Boundary ids of the observed atmosphere edges.
    pub fn observed_edges(&self) -> &[usize] {
        &self.observed_edges
    }

    /// Vertex of each friction dof.
    pub fn basal_vertices(&self) -> &[usize] {
        &self.basal_vertices
    }

    pub fn basal_dof(&self, vertex: usize) -> Option<usize> {
        self.basal_dof[vertex]
    }

    /// Coordinates of a velocity node (vertex or edge midpoint).
    pub fn node_coords(&self, node: usize) -> Vec2 {
        let nv = self.mesh.n_vertices();
        let verts = self.mesh.vertices();
        if node < nv {
            verts[node]
        } else {
            let [a, b] = self.mesh.edges()[node - nv];
            [0.5 * (verts[a][0] + verts[b][0]), 0.5 * (verts[a][1] + verts[b][1])]
        }
    }

    // --- mixed vector layout -------------------------------------------------

    /// Length of a full mixed vector `[velocity dofs; pressure dofs]`.
    pub fn n_full(&self) -> usize {
        self.velocity.n_dofs() + self.pressure.n_dofs()
    }

    /// Length of a reduced mixed vector `[free velocity unknowns; pressure]`.
    pub fn n_reduced(&self) -> usize {
        self.n_reduced_velocity + self.pressure.n_dofs()
    }

    pub fn n_reduced_velocity(&self) -> usize {
        self.n_reduced_velocity
    }

    /// Full velocity dof -> (reduced unknown, coefficient), `None` if fixed.
    pub fn reduced_map(&self) -> &[Option<(usize, f64)>] {
        &self.reduced_map
    }

    /// Full velocity dofs that carry no unknown of their own: fixed dofs and
    /// the second component of every slipping node.
    pub fn eliminated_dofs(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for (node, c) in self.constraints.iter().enumerate() {
            match c {
                NodeConstraint::Free => {}
                NodeConstraint::Slip { .. } => out.push(2 * node + 1),
                NodeConstraint::Fixed => {
                    out.push(2 * node);
                    out.push(2 * node + 1);
                }
            }
        }
        out
    }

    /// `T y`: reduced unknowns to full mixed vector.
    pub fn expand(&self, reduced: &[f64]) -> Vec<f64> {
        assert_eq!(reduced.len(), self.n_reduced());
        let nvel = self.velocity.n_dofs();
        let mut full = vec![0.0; self.n_full()];
        for (d, m) in self.reduced_map.iter().enumerate() {
            if let Some((r, c)) = m {
                full[d] = c * reduced[*r];
            }
        }
        full[nvel..].copy_from_slice(&reduced[self.n_reduced_velocity..]);
        full
    }

    /// `T^T x`: full mixed (dual) vector to reduced coordinates.
    pub fn restrict(&self, full: &[f64]) -> Vec<f64> {
        assert_eq!(full.len(), self.n_full());
        let nvel = self.velocity.n_dofs();
        let mut red = vec![0.0; self.n_reduced()];
        for (d, m) in self.reduced_map.iter().enumerate() {
            if let Some((r, c)) = m {
                red[*r] += c * full[d];
            }
        }
        red[self.n_reduced_velocity..].copy_from_slice(&full[nvel..]);
        red
    }

    /// `T T^T x`, the orthogonal projection onto the constrained subspace.
    pub fn project_full(&self, full: &[f64]) -> Vec<f64> {
        self.expand(&self.restrict(full))
    }

    pub fn pack(&self, v: &Field, pi: &Field) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_full());
        out.extend_from_slice(&v.values);
        out.extend_from_slice(&pi.values);
        out
    }

    pub fn unpack(&self, full: &[f64]) -> (Field, Field) {
        let nvel = self.velocity.n_dofs();
        (
            Field::new(SpaceKind::Velocity, full[..nvel].to_vec()),
            Field::new(SpaceKind::Pressure, full[nvel..].to_vec()),
        )
    }

    // --- field construction ----------------------------------------------------

    pub fn zero(&self, kind: SpaceKind) -> Field {
        Field::new(kind, vec![0.0; self.n_dofs(kind)])
    }

    pub fn constant(&self, kind: SpaceKind, c: f64) -> Field {
        Field::new(kind, vec![c; self.n_dofs(kind)])
    }

    pub fn field_from(&self, kind: SpaceKind, values: Vec<f64>) -> Result<Field> {
        if values.len() != self.n_dofs(kind) {
            return Err(Error::SpaceMismatch {
                expected: format!("{} with {} dofs", kind.name(), self.n_dofs(kind)),
                found: format!("{} values", values.len()),
            });
        }
        Ok(Field::new(kind, values))
    }

    /// Nodal interpolation of a vector field, without applying constraints.
    pub fn interpolate_velocity_raw(&self, f: impl Fn(Vec2) -> Vec2) -> Field {
        let mut values = vec![0.0; self.velocity.n_dofs()];
        for node in 0..self.n_velocity_nodes() {
            let v = f(self.node_coords(node));
            values[2 * node] = v[0];
            values[2 * node + 1] = v[1];
        }
        Field::new(SpaceKind::Velocity, values)
    }

    /// Nodal interpolation followed by projection onto the constraints.
    pub fn interpolate_velocity(&self, f: impl Fn(Vec2) -> Vec2) -> Field {
        let mut v = self.interpolate_velocity_raw(f);
        self.enforce_constraints(&mut v);
        v
    }

    /// Nodal interpolation of a scalar field on a P1 space.
    pub fn interpolate_scalar(&self, kind: SpaceKind, f: impl Fn(Vec2) -> f64) -> Field {
        let verts = self.mesh.vertices();
        let values = match kind {
            SpaceKind::Pressure | SpaceKind::CoeffOmega => verts.iter().map(|&x| f(x)).collect(),
            SpaceKind::CoeffBasal => self.basal_vertices.iter().map(|&v| f(verts[v])).collect(),
            SpaceKind::Velocity => panic!("use interpolate_velocity for vector fields"),
        };
        Field::new(kind, values)
    }

    /// Projects a velocity field onto the constraint set (`T T^T`).
    pub fn enforce_constraints(&self, v: &mut Field) {
        for (node, c) in self.constraints.iter().enumerate() {
            match c {
                NodeConstraint::Free => {}
                NodeConstraint::Slip { tangent, .. } => {
                    let a = tangent[0] * v.values[2 * node] + tangent[1] * v.values[2 * node + 1];
                    v.values[2 * node] = a * tangent[0];
                    v.values[2 * node + 1] = a * tangent[1];
                }
                NodeConstraint::Fixed => {
                    v.values[2 * node] = 0.0;
                    v.values[2 * node + 1] = 0.0;
                }
            }
        }
    }

    /// Largest violation of the velocity constraints (`|v|` at fixed nodes,
    /// `|v.n|` at slipping nodes).
    pub fn constraint_violation(&self, v: &Field) -> f64 {
        let mut m = 0.0f64;
        for (node, c) in self.constraints.iter().enumerate() {
            let x = [v.values[2 * node], v.values[2 * node + 1]];
            let e = match c {
                NodeConstraint::Free => 0.0,
                NodeConstraint::Slip { normal, .. } => (normal[0] * x[0] + normal[1] * x[1]).abs(),
                NodeConstraint::Fixed => x[0].abs().max(x[1].abs()),
            };
            m = m.max(e);
        }
        m
    }

    // --- pointwise evaluation --------------------------------------------------

    /// Velocity value and gradient `(grad v)_{ij} = d v_i / d x_j` at a cached
    /// quadrature point.
    #[inline]
    pub fn velocity_at_qp(&self, values: &[f64], t: usize, q: usize) -> (Vec2, Mat2) {
        let tc = &self.triangles[t];
        let qp = &tc.qp[q];
        let mut v = [0.0; 2];
        let mut g = [[0.0; 2]; 2];
        for a in 0..6 {
            let n = tc.nodes[a];
            let (vx, vy) = (values[2 * n], values[2 * n + 1]);
            v[0] += vx * qp.p2[a];
            v[1] += vy * qp.p2[a];
            let gr = qp.p2_grad[a];
            g[0][0] += vx * gr[0];
            g[0][1] += vx * gr[1];
            g[1][0] += vy * gr[0];
            g[1][1] += vy * gr[1];
        }
        (v, g)
    }

    /// Value of a P1 field on Omega at a cached quadrature point.
    #[inline]
    pub fn p1_at_qp(&self, values: &[f64], t: usize, q: usize) -> f64 {
        let tc = &self.triangles[t];
        let l = tc.qp[q].p1;
        l[0] * values[tc.vertices[0]] + l[1] * values[tc.vertices[1]] + l[2] * values[tc.vertices[2]]
    }

    fn check_triangle(&self, t: usize) -> Result<()> {
        if t >= self.triangles.len() {
            return Err(Error::OutOfRange {
                index: t,
                len: self.triangles.len(),
            });
        }
        Ok(())
    }

    /// Gradient of a velocity field at reference point `xi` of triangle `t`
    /// (barycentric `(1 - xi0 - xi1, xi0, xi1)`).
    pub fn velocity_gradient(&self, field: &Field, t: usize, xi: Vec2) -> Result<Mat2> {
        field.expect_kind(SpaceKind::Velocity)?;
        self.check_triangle(t)?;
        let tc = &self.triangles[t];
        let l = [1.0 - xi[0] - xi[1], xi[0], xi[1]];
        let gr = p2_gradients(l, &tc.p1_grad);
        let mut g = [[0.0; 2]; 2];
        for a in 0..6 {
            let n = tc.nodes[a];
            for i in 0..2 {
                for j in 0..2 {
                    g[i][j] += field.values[2 * n + i] * gr[a][j];
                }
            }
        }
        Ok(g)
    }

    /// Gradient of a P1 scalar field on Omega (constant per triangle).
    pub fn scalar_gradient(&self, field: &Field, t: usize) -> Result<Vec2> {
        if !matches!(field.kind(), SpaceKind::Pressure | SpaceKind::CoeffOmega) {
            return Err(Error::SpaceMismatch {
                expected: "a P1 field on Omega".into(),
                found: field.kind().name().into(),
            });
        }
        self.check_triangle(t)?;
        let tc = &self.triangles[t];
        let mut g = [0.0; 2];
        for k in 0..3 {
            let u = field.values[tc.vertices[k]];
            g[0] += u * tc.p1_grad[k][0];
            g[1] += u * tc.p1_grad[k][1];
        }
        Ok(g)
    }

    /// Gradient at the `q`-th cached quadrature point of triangle `t`: a 2x2
    /// matrix for velocity fields, a vector (as the first row) for P1 fields.
    pub fn evaluate_gradient_at_quadrature(&self, field: &Field, t: usize, q: usize) -> Result<Mat2> {
        self.check_triangle(t)?;
        if q >= N_TRIANGLE {
            return Err(Error::OutOfRange { index: q, len: N_TRIANGLE });
        }
        match field.kind() {
            SpaceKind::Velocity => {
                let l = TRIANGLE_POINTS[q];
                self.velocity_gradient(field, t, [l[1], l[2]])
            }
            SpaceKind::Pressure | SpaceKind::CoeffOmega => {
                let g = self.scalar_gradient(field, t)?;
                Ok([g, [0.0, 0.0]])
            }
            SpaceKind::CoeffBasal => Err(Error::SpaceMismatch {
                expected: "a field on Omega".into(),
                found: field.kind().name().into(),
            }),
        }
    }

    /// Values of a velocity field at the quadrature points of the given
    /// boundary edges.
    pub fn trace_on_edges(&self, field: &Field, edges: &[usize]) -> Result<Vec<[Vec2; N_EDGE]>> {
        field.expect_kind(SpaceKind::Velocity)?;
        edges
            .iter()
            .map(|&e| {
                let ec = self.boundary_edges.get(e).ok_or(Error::OutOfRange {
                    index: e,
                    len: self.boundary_edges.len(),
                })?;
                Ok(std::array::from_fn(|q| self.trace_at(&field.values, ec, q)))
            })
            .collect()
    }

    #[inline]
    pub(crate) fn trace_at(&self, values: &[f64], ec: &EdgeCache, q: usize) -> Vec2 {
        let mut v = [0.0; 2];
        for a in 0..3 {
            let n = ec.nodes[a];
            v[0] += values[2 * n] * ec.qp[q].p2[a];
            v[1] += values[2 * n + 1] * ec.qp[q].p2[a];
        }
        v
    }

    /// Value of a friction field at an edge quadrature point of a basal edge.
    #[inline]
    pub(crate) fn basal_at(&self, values: &[f64], ec: &EdgeCache, q: usize) -> f64 {
        let a = self.basal_dof[ec.vertices[0]].expect("basal edge vertex");
        let b = self.basal_dof[ec.vertices[1]].expect("basal edge vertex");
        ec.qp[q].p1[0] * values[a] + ec.qp[q].p1[1] * values[b]
    }

    // --- norms -----------------------------------------------------------------

    pub fn norm(&self, field: &Field, which: Norm) -> Result<f64> {
        if field.len() != self.n_dofs(field.kind()) {
            return Err(Error::SpaceMismatch {
                expected: format!("{} dofs", self.n_dofs(field.kind())),
                found: format!("{} values", field.len()),
            });
        }
        let unsupported = || Error::UnsupportedNorm {
            norm: format!("{which:?}"),
            space: field.kind().name().into(),
        };
        if let Norm::Lr(r) | Norm::LrBasal(r) = which {
            if !(r > 1.0 && r.is_finite()) {
                return Err(Error::InvalidParameter(format!("norm exponent r = {r} must lie in (1, inf)")));
            }
        }
        let kind = field.kind();
        let vals = &field.values;
        let value = match (kind, which) {
            (_, Norm::H1) => {
                let l2 = self.norm(field, Norm::L2)?;
                let semi = self.norm(field, Norm::V2Seminorm)?;
                (l2 * l2 + semi * semi).sqrt()
            }
            (SpaceKind::Velocity, Norm::L2) => self.omega_integral(|t, q| {
                let (v, _) = self.velocity_at_qp(vals, t, q);
                v[0] * v[0] + v[1] * v[1]
            })
            .sqrt(),
            (SpaceKind::Velocity, Norm::V2Seminorm) => self.omega_integral(|t, q| {
                let (_, g) = self.velocity_at_qp(vals, t, q);
                crate::tensor::frob(&g, &g)
            })
            .sqrt(),
            (SpaceKind::Velocity, Norm::Lr(r)) => self
                .omega_integral(|t, q| {
                    let (v, _) = self.velocity_at_qp(vals, t, q);
                    v[0].hypot(v[1]).powf(r)
                })
                .powf(1.0 / r),
            (SpaceKind::Velocity, Norm::LrBasal(r)) => self
                .basal_integral(|ec, q| {
                    let v = self.trace_at(vals, ec, q);
                    v[0].hypot(v[1]).powf(r)
                })
                .powf(1.0 / r),
            (SpaceKind::Pressure | SpaceKind::CoeffOmega, Norm::L2) => self
                .omega_integral(|t, q| self.p1_at_qp(vals, t, q).powi(2))
                .sqrt(),
            (SpaceKind::Pressure | SpaceKind::CoeffOmega, Norm::V2Seminorm) => {
                let mut s = 0.0;
                for (t, tc) in self.triangles.iter().enumerate() {
                    let g = self.scalar_gradient(field, t)?;
                    s += tc.area * (g[0] * g[0] + g[1] * g[1]);
                }
                s.sqrt()
            }
            (SpaceKind::Pressure | SpaceKind::CoeffOmega, Norm::Lr(r)) => self
                .omega_integral(|t, q| self.p1_at_qp(vals, t, q).abs().powf(r))
                .powf(1.0 / r),
            (SpaceKind::CoeffBasal, Norm::L2) => {
                self.basal_integral(|ec, q| self.basal_at(vals, ec, q).powi(2)).sqrt()
            }
            (SpaceKind::CoeffBasal, Norm::LrBasal(r)) => self
                .basal_integral(|ec, q| self.basal_at(vals, ec, q).abs().powf(r))
                .powf(1.0 / r),
            (SpaceKind::CoeffBasal, Norm::V2Seminorm) => {
                let mut s = 0.0;
                for &e in &self.basal_edges {
                    let ec = &self.boundary_edges[e];
                    let d = self.basal_slope(vals, ec);
                    s += d * d * ec.length;
                }
                s.sqrt()
            }
            _ => return Err(unsupported()),
        };
        Ok(value)
    }

    /// Tangential derivative of a friction field along a basal edge.
    #[inline]
    pub(crate) fn basal_slope(&self, values: &[f64], ec: &EdgeCache) -> f64 {
        let a = self.basal_dof[ec.vertices[0]].expect("basal edge vertex");
        let b = self.basal_dof[ec.vertices[1]].expect("basal edge vertex");
        (values[b] - values[a]) / ec.length
    }

    /// Quadrature of `f(triangle, qp)` over Omega.
    pub fn omega_integral(&self, f: impl Fn(usize, usize) -> f64) -> f64 {
        let mut s = 0.0;
        for (t, tc) in self.triangles.iter().enumerate() {
            for q in 0..N_TRIANGLE {
                s += tc.qp[q].weight * f(t, q);
            }
        }
        s
    }

    /// Quadrature of `f(edge, qp)` over the basal boundary.
    pub fn basal_integral(&self, f: impl Fn(&EdgeCache, usize) -> f64) -> f64 {
        let mut s = 0.0;
        for &e in &self.basal_edges {
            let ec = &self.boundary_edges[e];
            for q in 0..N_EDGE {
                s += ec.qp[q].weight * f(ec, q);
            }
        }
        s
    }

    // --- coefficient-space matrices --------------------------------------------

    /// P1 mass and stiffness matrices of a coefficient space
    /// (`CoeffOmega` on Omega, `CoeffBasal` along the basal chain).
    pub fn coefficient_matrices(&self, kind: SpaceKind) -> (crate::sparse::CsrMatrix, crate::sparse::CsrMatrix) {
        use crate::sparse::TripletMatrix;
        let n = self.n_dofs(kind);
        let mut mass = TripletMatrix::new(n, n);
        let mut stiff = TripletMatrix::new(n, n);
        match kind {
            SpaceKind::CoeffOmega | SpaceKind::Pressure => {
                for tc in &self.triangles {
                    for i in 0..3 {
                        for j in 0..3 {
                            let m = tc.area / 12.0 * if i == j { 2.0 } else { 1.0 };
                            let k = tc.area * (tc.p1_grad[i][0] * tc.p1_grad[j][0] + tc.p1_grad[i][1] * tc.p1_grad[j][1]);
                            mass.push(tc.vertices[i], tc.vertices[j], m);
                            stiff.push(tc.vertices[i], tc.vertices[j], k);
                        }
                    }
                }
            }
            SpaceKind::CoeffBasal => {
                for &e in &self.basal_edges {
                    let ec = &self.boundary_edges[e];
                    let d = [
                        self.basal_dof[ec.vertices[0]].unwrap(),
                        self.basal_dof[ec.vertices[1]].unwrap(),
                    ];
                    for i in 0..2 {
                        for j in 0..2 {
                            let m = ec.length / 6.0 * if i == j { 2.0 } else { 1.0 };
                            let k = if i == j { 1.0 } else { -1.0 } / ec.length;
                            mass.push(d[i], d[j], m);
                            stiff.push(d[i], d[j], k);
                        }
                    }
                }
            }
            SpaceKind::Velocity => panic!("coefficient matrices are defined for scalar P1 spaces"),
        }
        (mass.to_csr(), stiff.to_csr())
    }

    // --- export ------------------------------------------------------------------

    /// Legacy VTK (ASCII) unstructured grid with vertex data. Velocity fields
    /// are written as vectors, P1 fields as scalars; friction is zero off the
    /// basal chain.
    pub fn to_vtk(&self, fields: &[(&str, &Field)]) -> String {
        let mesh = &self.mesh;
        let nv = mesh.n_vertices();
        let mut out = String::new();
        out.push_str("# vtk DataFile Version 3.0\npstokes fields\nASCII\nDATASET UNSTRUCTURED_GRID\n");
        let _ = writeln!(out, "POINTS {nv} double");
        for p in mesh.vertices() {
            let _ = writeln!(out, "{:?} {:?} 0", p[0], p[1]);
        }
        let nt = mesh.n_triangles();
        let _ = writeln!(out, "CELLS {nt} {}", 4 * nt);
        for t in mesh.triangles() {
            let _ = writeln!(out, "3 {} {} {}", t[0], t[1], t[2]);
        }
        let _ = writeln!(out, "CELL_TYPES {nt}");
        for _ in 0..nt {
            out.push_str("5\n");
        }
        let _ = writeln!(out, "POINT_DATA {nv}");
        for (name, f) in fields {
            match f.kind() {
                SpaceKind::Velocity => {
                    let _ = writeln!(out, "VECTORS {name} double");
                    for v in 0..nv {
                        let _ = writeln!(out, "{:?} {:?} 0", f.values[2 * v], f.values[2 * v + 1]);
                    }
                }
                kind => {
                    let _ = writeln!(out, "SCALARS {name} double 1\nLOOKUP_TABLE default");
                    for v in 0..nv {
                        let x = match kind {
                            SpaceKind::CoeffBasal => self.basal_dof[v].map_or(0.0, |k| f.values[k]),
                            _ => f.values[v],
                        };
                        let _ = writeln!(out, "{x:?}");
                    }
                }
            }
        }
        out
    }

    pub fn write_vtk(&self, path: &Path, fields: &[(&str, &Field)]) -> Result<()> {
        std::fs::write(path, self.to_vtk(fields)).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{generate_slab_mesh, BedProfile};

    fn slab(nx: usize, ny: usize, bed: BedProfile) -> Discretization {
        build_spaces(generate_slab_mesh(1.0, 1.0, nx, ny, &bed).unwrap()).unwrap()
    }

    #[test]
    fn dof_counts_on_2x2() {
        let d = slab(2, 2, BedProfile::Flat);
        // Direct entity enumeration: 9 vertices plus 16 distinct edges.
        let mesh = d.mesh();
        let mut edges = std::collections::BTreeSet::new();
        for t in mesh.triangles() {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                edges.insert((a.min(b), a.max(b)));
            }
        }
        assert_eq!(edges.len(), 16);
        assert_eq!(d.velocity.n_dofs(), 2 * (9 + edges.len()));
        assert_eq!(d.velocity.n_dofs(), 50);
        assert_eq!(d.pressure.n_dofs(), 9);
        assert_eq!(d.coeff_omega.n_dofs(), 9);
        assert_eq!(d.coeff_basal.n_dofs(), 3);
    }

    #[test]
    fn flat_bed_slip_is_horizontal() {
        let d = slab(4, 2, BedProfile::Flat);
        // Interior basal vertices 1..3 slip along x.
        for v in 1..4 {
            match d.constraints()[v] {
                NodeConstraint::Slip { normal, tangent } => {
                    assert_eq!(normal, [0.0, -1.0]);
                    assert_eq!(tangent, [1.0, 0.0]);
                }
                other => panic!("vertex {v}: {other:?}"),
            }
            assert_eq!(d.reduced_map()[2 * v + 1].unwrap().1, 0.0);
        }
        // Corners touch Dirichlet sides: fixed.
        assert_eq!(d.constraints()[0], NodeConstraint::Fixed);
        assert_eq!(d.constraints()[4], NodeConstraint::Fixed);
    }

    #[test]
    fn constrained_dofs_and_projection() {
        let d = slab(3, 3, BedProfile::Sine { amplitude: 0.05, periods: 1.0 });
        let v = d.interpolate_velocity(|x| [1.0 + x[1], x[0] - 0.3]);
        assert!(d.constraint_violation(&v) < 1e-15);
        // Fixed dofs are exactly zero, never merely small.
        for (node, c) in d.constraints().iter().enumerate() {
            if *c == NodeConstraint::Fixed {
                assert_eq!(v.values[2 * node], 0.0);
                assert_eq!(v.values[2 * node + 1], 0.0);
            }
        }
        let full = d.pack(&v, &d.constant(SpaceKind::Pressure, 2.0));
        let back = d.expand(&d.restrict(&full));
        for (a, b) in back.iter().zip(&full) {
            assert!((a - b).abs() < 1e-15);
        }
        // Orthonormal columns: T^T T = I.
        let y: Vec<f64> = (0..d.n_reduced()).map(|i| (i as f64).sin()).collect();
        let y2 = d.restrict(&d.expand(&y));
        for (a, b) in y.iter().zip(&y2) {
            assert!((a - b).abs() < 1e-14);
        }
        assert_eq!(d.eliminated_dofs().len() + d.n_reduced_velocity(), d.velocity.n_dofs());
    }

    #[test]
    fn gradients_reproduce_affine_fields() {
        let d = slab(3, 2, BedProfile::Sine { amplitude: 0.1, periods: 1.0 });
        let v = d.interpolate_velocity_raw(|x| [x[0], -x[1]]);
        for t in 0..d.triangles().len() {
            for q in 0..N_TRIANGLE {
                let g = d.evaluate_gradient_at_quadrature(&v, t, q).unwrap();
                assert!((g[0][0] - 1.0).abs() < 1e-13 && (g[1][1] + 1.0).abs() < 1e-13);
                assert!(g[0][1].abs() < 1e-13 && g[1][0].abs() < 1e-13);
            }
        }
        let c = d.interpolate_velocity_raw(|_| [2.0, -3.0]);
        let g = d.velocity_gradient(&c, 0, [0.2, 0.3]).unwrap();
        assert!(g.iter().flatten().all(|x| x.abs() < 1e-13));
        let b = d.interpolate_scalar(SpaceKind::CoeffOmega, |x| 2.0 * x[0] - x[1]);
        let gs = d.scalar_gradient(&b, 1).unwrap();
        assert!((gs[0] - 2.0).abs() < 1e-13 && (gs[1] + 1.0).abs() < 1e-13);
    }

    #[test]
    fn quadratic_gradient_on_single_triangle() {
        let d = slab(2, 2, BedProfile::Flat);
        let v = d.interpolate_velocity_raw(|x| [x[0] * x[0], 0.0]);
        let tc = &d.triangles()[3];
        for q in 0..N_TRIANGLE {
            let g = d.evaluate_gradient_at_quadrature(&v, 3, q).unwrap();
            // d(x^2)/dx = 2x at the physical quadrature point.
            assert!((g[0][0] - 2.0 * tc.qp[q].x[0]).abs() < 1e-13);
            assert!(g[0][1].abs() < 1e-13);
        }
    }

    #[test]
    fn traces() {
        let d = slab(3, 3, BedProfile::Flat);
        let c = d.interpolate_velocity_raw(|_| [0.7, -0.2]);
        let all: Vec<usize> = (0..d.boundary_edges().len()).collect();
        for samples in d.trace_on_edges(&c, &all).unwrap() {
            for s in samples {
                assert!((s[0] - 0.7).abs() < 1e-15 && (s[1] + 0.2).abs() < 1e-15);
            }
        }
        let v = d.interpolate_velocity(|x| [x[0] * x[1] + 1.0, x[1] * x[1]]);
        let dir: Vec<usize> = (0..d.boundary_edges().len())
            .filter(|&e| d.boundary_edges()[e].tag == BoundaryTag::Dirichlet)
            .collect();
        for samples in d.trace_on_edges(&v, &dir).unwrap() {
            assert!(samples.iter().all(|s| s[0] == 0.0 && s[1] == 0.0));
        }
        // Quadratic along the top edge y = 1: v = (x + 1, 1); direct 1D evaluation.
        let top = d.observed_edges().to_vec();
        let samples = d.trace_on_edges(&v, &top).unwrap();
        for (k, &e) in top.iter().enumerate() {
            let ec = &d.boundary_edges()[e];
            for q in 0..N_EDGE {
                let x = ec.qp[q].x;
                let fixed = d.constraints()[ec.nodes[0]] == NodeConstraint::Fixed
                    || d.constraints()[ec.nodes[1]] == NodeConstraint::Fixed;
                if !fixed {
                    assert!((samples[k][q][0] - (x[0] * x[1] + 1.0)).abs() < 1e-13);
                    assert!((samples[k][q][1] - x[1] * x[1]).abs() < 1e-13);
                }
            }
        }
        assert!(d.trace_on_edges(&v, &[999]).is_err());
    }

    #[test]
    fn norms() {
        let d = slab(4, 4, BedProfile::Flat);
        let z = d.zero(SpaceKind::Velocity);
        for n in [Norm::L2, Norm::V2Seminorm, Norm::H1, Norm::Lr(1.5), Norm::LrBasal(3.0)] {
            assert_eq!(d.norm(&z, n).unwrap(), 0.0);
        }
        let one = d.constant(SpaceKind::CoeffOmega, 1.0);
        assert!((d.norm(&one, Norm::L2).unwrap() - 1.0).abs() < 1e-14);
        let v = d.interpolate_velocity_raw(|x| [x[0], 0.0]);
        assert!((d.norm(&v, Norm::V2Seminorm).unwrap() - 1.0).abs() < 1e-13);
        let w = d.interpolate_velocity_raw(|x| [x[0] * x[1], x[1] - x[0] * x[0]]);
        let (l2, semi, h1) = (
            d.norm(&w, Norm::L2).unwrap(),
            d.norm(&w, Norm::V2Seminorm).unwrap(),
            d.norm(&w, Norm::H1).unwrap(),
        );
        assert!((h1 * h1 - l2 * l2 - semi * semi).abs() < 1e-12 * h1 * h1);
        let tau = d.interpolate_scalar(SpaceKind::CoeffBasal, |x| x[0]);
        // Along the unit-length bed: int x^2 = 1/3, int 1 = 1.
        assert!((d.norm(&tau, Norm::L2).unwrap().powi(2) - 1.0 / 3.0).abs() < 1e-14);
        assert!((d.norm(&tau, Norm::V2Seminorm).unwrap() - 1.0).abs() < 1e-14);
        assert!(d.norm(&tau, Norm::Lr(2.0)).is_err());
        assert!(d.norm(&one, Norm::LrBasal(2.0)).is_err());
        assert!(d.norm(&one, Norm::Lr(1.0)).is_err());
    }

    #[test]
    fn coefficient_matrices_integrate_constants() {
        let d = slab(3, 2, BedProfile::Flat);
        let (m, k) = d.coefficient_matrices(SpaceKind::CoeffOmega);
        let ones = vec![1.0; d.coeff_omega.n_dofs()];
        let mass: f64 = m.matvec(&ones).iter().sum();
        assert!((mass - 1.0).abs() < 1e-14);
        assert!(k.matvec(&ones).iter().all(|x| x.abs() < 1e-12));
        let (mb, kb) = d.coefficient_matrices(SpaceKind::CoeffBasal);
        let ones = vec![1.0; d.coeff_basal.n_dofs()];
        assert!((mb.matvec(&ones).iter().sum::<f64>() - 1.0).abs() < 1e-14);
        assert!(kb.matvec(&ones).iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let d = slab(2, 2, BedProfile::Flat);
        let b = d.interpolate_scalar(SpaceKind::CoeffOmega, |x| (x[0] * 3.1).sin() + 1e-17);
        let again = Field::from_csv(SpaceKind::CoeffOmega, 9, &b.to_csv()).unwrap();
        assert_eq!(again, b);
        assert!(Field::from_csv(SpaceKind::CoeffOmega, 10, &b.to_csv()).is_err());
        assert!(Field::from_csv(SpaceKind::CoeffOmega, 9, "dof,value\n0,1\n42,3\n").is_err());
    }

    #[test]
    fn vtk_layout() {
        let d = slab(2, 2, BedProfile::Flat);
        let v = d.zero(SpaceKind::Velocity);
        let tau = d.constant(SpaceKind::CoeffBasal, 0.5);
        let s = d.to_vtk(&[("v", &v), ("tau", &tau)]);
        assert!(s.contains("POINTS 9 double"));
        assert!(s.contains("CELLS 8 32"));
        assert!(s.contains("VECTORS v double"));
        assert!(s.contains("SCALARS tau double 1"));
    }
}
