//! Conforming triangle meshes with tagged boundary segments.
//!
//! A [`Mesh`] owns its vertices, counterclockwise triangles and a tag for
//! every boundary edge. Interior edge connectivity (needed by the P2 velocity
//! space) is derived on construction, and every structural invariant is
//! checked there, so a `Mesh` value is always valid.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, MeshError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BoundaryTag {
    Dirichlet,
    Basal,
    Atmosphere,
}

impl BoundaryTag {
    pub fn as_str(self) -> &'static str {
        match self {
            BoundaryTag::Dirichlet => "dirichlet",
            BoundaryTag::Basal => "basal",
            BoundaryTag::Atmosphere => "atmosphere",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "dirichlet" => Some(BoundaryTag::Dirichlet),
            "basal" => Some(BoundaryTag::Basal),
            "atmosphere" => Some(BoundaryTag::Atmosphere),
            _ => None,
        }
    }
}

/// A tagged boundary edge. After mesh construction `vertices` follow the
/// counterclockwise orientation of the owning triangle, so the outward normal
/// is the tangent rotated clockwise.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryEdge {
    pub vertices: [usize; 2],
    pub tag: BoundaryTag,
    pub observed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    vertices: Vec<[f64; 2]>,
    triangles: Vec<[usize; 3]>,
    boundary: Vec<BoundaryEdge>,
    edges: Vec<[usize; 2]>,
    triangle_edges: Vec<[usize; 3]>,
    boundary_edge_ids: Vec<usize>,
    boundary_owner: Vec<usize>,
}

pub(crate) fn signed_area(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]))
}

fn edge_key(a: usize, b: usize) -> (usize, usize) {
    if a < b {
        (a, b)
    } else {
        (b, a)
    }
}

impl Mesh {
    /// Builds and validates a mesh. Clockwise triangles are flipped; any other
    /// violation of the mesh invariants is an error.
    pub fn new(
        vertices: Vec<[f64; 2]>,
        mut triangles: Vec<[usize; 3]>,
        boundary: Vec<BoundaryEdge>,
    ) -> Result<Self, MeshError> {
        let nv = vertices.len();
        for (t, tri) in triangles.iter_mut().enumerate() {
            for &v in tri.iter() {
                if v >= nv {
                    return Err(MeshError::VertexOutOfRange { triangle: t, vertex: v });
                }
            }
            let area = signed_area(vertices[tri[0]], vertices[tri[1]], vertices[tri[2]]);
            if area == 0.0 || !area.is_finite() {
                return Err(MeshError::DegenerateTriangle(t));
            }
            if area < 0.0 {
                tri.swap(1, 2);
            }
        }

        // Unique edges in first-seen order; local edge k is opposite vertex k.
        let mut edge_map: HashMap<(usize, usize), usize> = HashMap::new();
        let mut edges = Vec::new();
        let mut edge_count: Vec<usize> = Vec::new();
        let mut edge_owner: Vec<usize> = Vec::new();
        let mut triangle_edges = Vec::with_capacity(triangles.len());
        for (t, tri) in triangles.iter().enumerate() {
            let mut ids = [0usize; 3];
            for (k, id) in ids.iter_mut().enumerate() {
                let a = tri[(k + 1) % 3];
                let b = tri[(k + 2) % 3];
                let key = edge_key(a, b);
                let e = *edge_map.entry(key).or_insert_with(|| {
                    edges.push([key.0, key.1]);
                    edge_count.push(0);
                    edge_owner.push(t);
                    edges.len() - 1
                });
                edge_count[e] += 1;
                if edge_count[e] > 2 {
                    return Err(MeshError::NonManifoldEdge(key.0, key.1));
                }
                *id = e;
            }
            triangle_edges.push(ids);
        }

        let mut seen = vec![false; edges.len()];
        let mut oriented = Vec::with_capacity(boundary.len());
        let mut boundary_edge_ids = Vec::with_capacity(boundary.len());
        let mut boundary_owner = Vec::with_capacity(boundary.len());
        for be in boundary {
            let [a, b] = be.vertices;
            let e = match edge_map.get(&edge_key(a, b)) {
                Some(&e) if edge_count[e] == 1 => e,
                _ => return Err(MeshError::NotABoundaryEdge(a, b)),
            };
            if seen[e] {
                return Err(MeshError::DuplicateBoundaryEdge(a, b));
            }
            seen[e] = true;
            if be.observed && be.tag != BoundaryTag::Atmosphere {
                return Err(MeshError::ObservedNotAtmosphere(a, b));
            }
            let owner = edge_owner[e];
            let tri = triangles[owner];
            // Orientation of (a, b) inside the counterclockwise triangle.
            let pos_a = tri.iter().position(|&v| v == a).unwrap();
            let vertices_ccw = if tri[(pos_a + 1) % 3] == b { [a, b] } else { [b, a] };
            oriented.push(BoundaryEdge {
                vertices: vertices_ccw,
                tag: be.tag,
                observed: be.observed,
            });
            boundary_edge_ids.push(e);
            boundary_owner.push(owner);
        }
        for (e, &count) in edge_count.iter().enumerate() {
            if count == 1 && !seen[e] {
                return Err(MeshError::UntaggedBoundaryEdge(edges[e][0], edges[e][1]));
            }
        }

        let mesh = Mesh {
            vertices,
            triangles,
            boundary: oriented,
            edges,
            triangle_edges,
            boundary_edge_ids,
            boundary_owner,
        };
        for (i, be) in mesh.boundary.iter().enumerate() {
            if mesh.edge_length(be) == 0.0 {
                return Err(MeshError::ZeroLengthEdge(i));
            }
        }
        if mesh.tagged_length(|e| e.tag == BoundaryTag::Dirichlet) <= 0.0 {
            return Err(MeshError::EmptyDirichlet);
        }
        if mesh.tagged_length(|e| e.observed) <= 0.0 {
            return Err(MeshError::EmptyObserved);
        }
        Ok(mesh)
    }

    pub fn vertices(&self) -> &[[f64; 2]] {
        &self.vertices
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn boundary(&self) -> &[BoundaryEdge] {
        &self.boundary
    }

    /// All unique edges as sorted vertex pairs.
    pub fn edges(&self) -> &[[usize; 2]] {
        &self.edges
    }

    /// Global edge ids of each triangle; local edge `k` is opposite vertex `k`.
    pub fn triangle_edges(&self) -> &[[usize; 3]] {
        &self.triangle_edges
    }

    /// Global edge id of boundary edge `i`.
    pub fn boundary_edge_id(&self, i: usize) -> usize {
        self.boundary_edge_ids[i]
    }

    /// Triangle owning boundary edge `i`.
    pub fn boundary_owner(&self, i: usize) -> usize {
        self.boundary_owner[i]
    }

    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn n_triangles(&self) -> usize {
        self.triangles.len()
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangles[t];
        signed_area(self.vertices[a], self.vertices[b], self.vertices[c])
    }

    pub fn area(&self) -> f64 {
        (0..self.n_triangles()).map(|t| self.triangle_area(t)).sum()
    }

    /// Area enclosed by the boundary loops (shoelace over oriented edges).
    pub fn boundary_polygon_area(&self) -> f64 {
        self.boundary
            .iter()
            .map(|e| {
                let a = self.vertices[e.vertices[0]];
                let b = self.vertices[e.vertices[1]];
                0.5 * (a[0] * b[1] - b[0] * a[1])
            })
            .sum()
    }

    pub fn edge_length(&self, e: &BoundaryEdge) -> f64 {
        let a = self.vertices[e.vertices[0]];
        let b = self.vertices[e.vertices[1]];
        (b[0] - a[0]).hypot(b[1] - a[1])
    }

    pub fn tagged_length(&self, pred: impl Fn(&BoundaryEdge) -> bool) -> f64 {
        self.boundary
            .iter()
            .filter(|e| pred(e))
            .map(|e| self.edge_length(e))
            .sum()
    }

    pub fn observed_length(&self) -> f64 {
        self.tagged_length(|e| e.observed)
    }

    /// Boundary edge ids carrying `tag`, in boundary order.
    pub fn boundary_ids_with(&self, tag: BoundaryTag) -> Vec<usize> {
        (0..self.boundary.len())
            .filter(|&i| self.boundary[i].tag == tag)
            .collect()
    }

    pub fn observed_ids(&self) -> Vec<usize> {
        (0..self.boundary.len())
            .filter(|&i| self.boundary[i].observed)
            .collect()
    }

    /// Serializes to the `pgmesh 1` text format.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str("pgmesh 1\n");
        let _ = writeln!(out, "vertices {}", self.vertices.len());
        for v in &self.vertices {
            let _ = writeln!(out, "{:?} {:?}", v[0], v[1]);
        }
        let _ = writeln!(out, "triangles {}", self.triangles.len());
        for t in &self.triangles {
            let _ = writeln!(out, "{} {} {}", t[0], t[1], t[2]);
        }
        let _ = writeln!(out, "boundary {}", self.boundary.len());
        for e in &self.boundary {
            let _ = write!(out, "{} {} {}", e.vertices[0], e.vertices[1], e.tag.as_str());
            if e.observed {
                out.push_str(" observed");
            }
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn from_text(text: &str) -> Result<Self, MeshError> {
        parse_mesh(text)
    }
}

/// Reads a mesh file in the `pgmesh 1` format.
pub fn load_mesh(path: &Path) -> Result<Mesh> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(parse_mesh(&text)?)
}

fn parse_mesh(text: &str) -> Result<Mesh, MeshError> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
        .filter(|(_, l)| !l.is_empty());

    let err = |line: usize, message: String| MeshError::Parse { line, message };
    let mut next = |what: &str| {
        lines
            .next()
            .ok_or_else(|| err(text.lines().count(), format!("unexpected end of file, expected {what}")))
    };

    let (ln, header) = next("header")?;
    if header.split_whitespace().collect::<Vec<_>>() != ["pgmesh", "1"] {
        return Err(err(ln, format!("expected header `pgmesh 1`, found `{header}`")));
    }

    fn count(ln: usize, line: &str, keyword: &str) -> Result<usize, MeshError> {
        let mut it = line.split_whitespace();
        match (it.next(), it.next().map(str::parse::<usize>), it.next()) {
            (Some(k), Some(Ok(n)), None) if k == keyword => Ok(n),
            _ => Err(MeshError::Parse {
                line: ln,
                message: format!("expected `{keyword} <count>`, found `{line}`"),
            }),
        }
    }

    let (ln, line) = next("vertices section")?;
    let nv = count(ln, line, "vertices")?;
    let mut vertices = Vec::with_capacity(nv);
    for _ in 0..nv {
        let (ln, line) = next("vertex")?;
        let parts: Vec<&str> = line.split_whitespace().collect();
        let coords: Vec<f64> = parts
            .iter()
            .map(|s| s.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| err(ln, format!("bad vertex coordinate: {e}")))?;
        if coords.len() != 2 || !coords.iter().all(|c| c.is_finite()) {
            return Err(err(ln, format!("expected `x y`, found `{line}`")));
        }
        vertices.push([coords[0], coords[1]]);
    }

    let (ln, line) = next("triangles section")?;
    let nt = count(ln, line, "triangles")?;
    let mut triangles = Vec::with_capacity(nt);
    for _ in 0..nt {
        let (ln, line) = next("triangle")?;
        let ids: Vec<usize> = line
            .split_whitespace()
            .map(|s| s.parse::<usize>())
            .collect::<Result<_, _>>()
            .map_err(|e| err(ln, format!("bad vertex index: {e}")))?;
        if ids.len() != 3 {
            return Err(err(ln, format!("expected `i j k`, found `{line}`")));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= nv) {
            return Err(err(ln, format!("vertex index {bad} out of range")));
        }
        triangles.push([ids[0], ids[1], ids[2]]);
    }

    let (ln, line) = next("boundary section")?;
    let nb = count(ln, line, "boundary")?;
    let mut boundary = Vec::with_capacity(nb);
    for _ in 0..nb {
        let (ln, line) = next("boundary edge")?;
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() < 3 || parts.len() > 4 {
            return Err(err(ln, format!("expected `i j TAG [observed]`, found `{line}`")));
        }
        let a: usize = parts[0]
            .parse()
            .map_err(|e| err(ln, format!("bad vertex index: {e}")))?;
        let b: usize = parts[1]
            .parse()
            .map_err(|e| err(ln, format!("bad vertex index: {e}")))?;
        if a >= nv || b >= nv {
            return Err(err(ln, format!("vertex index out of range in `{line}`")));
        }
        let tag = BoundaryTag::parse(parts[2])
            .ok_or_else(|| err(ln, format!("unknown boundary tag `{}`", parts[2])))?;
        let observed = match parts.get(3) {
            None => false,
            Some(&"observed") => true,
            Some(other) => return Err(err(ln, format!("unexpected token `{other}`"))),
        };
        boundary.push(BoundaryEdge {
            vertices: [a, b],
            tag,
            observed,
        });
    }
    if let Some((ln, line)) = lines.next() {
        return Err(err(ln, format!("trailing content `{line}`")));
    }
    Mesh::new(vertices, triangles, boundary)
}

/// Bed elevation below the slab.
#[derive(Debug, Clone, PartialEq)]
pub enum BedProfile {
    Flat,
    /// `amplitude * sin(2 pi periods x / length)`.
    Sine { amplitude: f64, periods: f64 },
    /// Piecewise-linear samples `(x, elevation)` sorted by `x`.
    Sampled(Vec<(f64, f64)>),
}

impl BedProfile {
    pub fn elevation(&self, x: f64, length: f64) -> f64 {
        match self {
            BedProfile::Flat => 0.0,
            BedProfile::Sine { amplitude, periods } => {
                amplitude * (2.0 * std::f64::consts::PI * periods * x / length).sin()
            }
            BedProfile::Sampled(samples) => {
                if samples.is_empty() {
                    return 0.0;
                }
                if x <= samples[0].0 {
                    return samples[0].1;
                }
                for w in samples.windows(2) {
                    let ((x0, y0), (x1, y1)) = (w[0], w[1]);
                    if x <= x1 {
                        let s = if x1 > x0 { (x - x0) / (x1 - x0) } else { 0.0 };
                        return y0 + s * (y1 - y0);
                    }
                }
                samples[samples.len() - 1].1
            }
        }
    }
}

/// Structured slab `[0, length] x [bed(x), height]` split into `2 nx ny`
/// triangles. Bottom edges are basal, top edges atmosphere (all observed),
/// left and right sides Dirichlet.
pub fn generate_slab_mesh(
    length: f64,
    height: f64,
    nx: usize,
    ny: usize,
    bed: &BedProfile,
) -> Result<Mesh, MeshError> {
    if nx < 2 || ny < 2 {
        return Err(MeshError::InvalidSlab(format!("nx and ny must be >= 2 (got {nx}, {ny})")));
    }
    if !(length > 0.0 && height > 0.0) {
        return Err(MeshError::InvalidSlab("length and height must be positive".into()));
    }
    let idx = |i: usize, j: usize| j * (nx + 1) + i;
    let mut vertices = Vec::with_capacity((nx + 1) * (ny + 1));
    for j in 0..=ny {
        for i in 0..=nx {
            let x = length * i as f64 / nx as f64;
            let b = bed.elevation(x, length);
            if b >= height {
                return Err(MeshError::InvalidSlab(format!(
                    "bed elevation {b} at x = {x} is not below the surface {height}"
                )));
            }
            let y = b + (height - b) * j as f64 / ny as f64;
            vertices.push([x, y]);
        }
    }
    let mut triangles = Vec::with_capacity(2 * nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let (v00, v10, v01, v11) = (idx(i, j), idx(i + 1, j), idx(i, j + 1), idx(i + 1, j + 1));
            triangles.push([v00, v10, v11]);
            triangles.push([v00, v11, v01]);
        }
    }
    for (t, tri) in triangles.iter().enumerate() {
        if signed_area(vertices[tri[0]], vertices[tri[1]], vertices[tri[2]]) <= 0.0 {
            return Err(MeshError::DegenerateTriangle(t));
        }
    }
    let mut boundary = Vec::with_capacity(2 * (nx + ny));
    for i in 0..nx {
        boundary.push(BoundaryEdge {
            vertices: [idx(i, 0), idx(i + 1, 0)],
            tag: BoundaryTag::Basal,
            observed: false,
        });
    }
    for j in 0..ny {
        boundary.push(BoundaryEdge {
            vertices: [idx(nx, j), idx(nx, j + 1)],
            tag: BoundaryTag::Dirichlet,
            observed: false,
        });
    }
    for i in (0..nx).rev() {
        boundary.push(BoundaryEdge {
            vertices: [idx(i + 1, ny), idx(i, ny)],
            tag: BoundaryTag::Atmosphere,
            observed: true,
        });
    }
    for j in (0..ny).rev() {
        boundary.push(BoundaryEdge {
            vertices: [idx(0, j + 1), idx(0, j)],
            tag: BoundaryTag::Dirichlet,
            observed: false,
        });
    }
    Mesh::new(vertices, triangles, boundary)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdgeGeometry {
    /// Boundary edge id.
    pub edge: usize,
    pub normal: [f64; 2],
    pub tangent: [f64; 2],
    pub length: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryGeometry {
    pub edges: Vec<EdgeGeometry>,
    /// Averaged unit normal at every boundary vertex.
    pub vertex_normals: BTreeMap<usize, [f64; 2]>,
}

pub(crate) fn edge_frame(a: [f64; 2], b: [f64; 2]) -> Option<([f64; 2], [f64; 2], f64)> {
    let d = [b[0] - a[0], b[1] - a[1]];
    let len = d[0].hypot(d[1]);
    if len == 0.0 {
        return None;
    }
    let t = [d[0] / len, d[1] / len];
    Some(([t[1], -t[0]], t, len))
}

/// Averages the unit normals of the boundary edges (selected by `pred`)
/// incident to each vertex. In 2D both incident edges subtend the same vertex
/// angle, so angle weighting reduces to an equal-weight sum.
pub(crate) fn averaged_vertex_normals(
    mesh: &Mesh,
    pred: impl Fn(&BoundaryEdge) -> bool,
) -> Result<BTreeMap<usize, [f64; 2]>, MeshError> {
    let mut acc: BTreeMap<usize, [f64; 2]> = BTreeMap::new();
    for (i, e) in mesh.boundary.iter().enumerate() {
        if !pred(e) {
            continue;
        }
        let (n, _, _) = edge_frame(mesh.vertices[e.vertices[0]], mesh.vertices[e.vertices[1]])
            .ok_or(MeshError::ZeroLengthEdge(i))?;
        for &v in &e.vertices {
            let s = acc.entry(v).or_insert([0.0, 0.0]);
            s[0] += n[0];
            s[1] += n[1];
        }
    }
    for n in acc.values_mut() {
        let len = n[0].hypot(n[1]);
        // Antiparallel normals (a cusp) have no meaningful average; keep zero.
        if len > 0.0 {
            n[0] /= len;
            n[1] /= len;
        }
    }
    Ok(acc)
}

/// Per-edge unit normal/tangent/length and averaged unit vertex normals.
pub fn boundary_geometry(mesh: &Mesh) -> Result<BoundaryGeometry, MeshError> {
    let mut edges = Vec::with_capacity(mesh.boundary.len());
    for (i, e) in mesh.boundary.iter().enumerate() {
        let (normal, tangent, length) =
            edge_frame(mesh.vertices[e.vertices[0]], mesh.vertices[e.vertices[1]])
                .ok_or(MeshError::ZeroLengthEdge(i))?;
        edges.push(EdgeGeometry {
            edge: i,
            normal,
            tangent,
            length,
        });
    }
    let vertex_normals = averaged_vertex_normals(mesh, |_| true)?;
    Ok(BoundaryGeometry {
        edges,
        vertex_normals,
    })
}
