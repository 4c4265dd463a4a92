//! Conforming triangulations of 2D domains with boundary markers, plus
//! symmetric quadrature rules on the reference triangle.
//!
//! Meshes are immutable after construction and safe to share read-only.
//! Triangles are stored counterclockwise; negatively oriented input is fixed
//! up by swapping two vertices at construction time.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("mesh integrity error: {0}")]
    Integrity(String),
    #[error("mesh format error: {0}")]
    Format(String),
    #[error("unsupported quadrature degree {0} (supported: 1..=7)")]
    UnsupportedDegree(usize),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Boundary edge as a vertex pair plus an integer marker from the mesh source
/// (physical-group tag for Gmsh input, 1 for the built-in square mesher).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoundaryEdge {
    pub vertices: [usize; 2],
    pub marker: i32,
}

/// Triangulated 2D domain.
#[derive(Debug, Clone)]
pub struct Mesh {
    vertices: Vec<[f64; 2]>,
    triangles: Vec<[usize; 3]>,
    boundary_edges: Vec<BoundaryEdge>,
    h: f64,
}

impl Mesh {
    /// Builds a mesh from raw connectivity, enforcing counterclockwise
    /// orientation and validating the boundary against the triangulation.
    pub fn new(
        vertices: Vec<[f64; 2]>,
        mut triangles: Vec<[usize; 3]>,
        boundary_edges: Vec<BoundaryEdge>,
    ) -> Result<Self, MeshError> {
        if vertices.is_empty() || triangles.is_empty() {
            return Err(MeshError::Integrity("empty mesh".into()));
        }
        let nv = vertices.len();
        for tri in triangles.iter_mut() {
            for &v in tri.iter() {
                if v >= nv {
                    return Err(MeshError::Integrity(format!(
                        "triangle references vertex {v} but mesh has {nv} vertices"
                    )));
                }
            }
            let area = signed_area(&vertices, tri);
            if area < 0.0 {
                tri.swap(1, 2);
            } else if area == 0.0 {
                return Err(MeshError::Integrity(format!(
                    "degenerate triangle {tri:?} with zero area"
                )));
            }
        }

        // Count how many triangles own each undirected edge.
        let mut edge_count: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        for tri in &triangles {
            for k in 0..3 {
                let key = sorted_pair(tri[k], tri[(k + 1) % 3]);
                *edge_count.entry(key).or_insert(0) += 1;
            }
        }
        for be in &boundary_edges {
            if be.vertices[0] >= nv || be.vertices[1] >= nv {
                return Err(MeshError::Integrity(format!(
                    "boundary edge {:?} references a missing vertex",
                    be.vertices
                )));
            }
            let key = sorted_pair(be.vertices[0], be.vertices[1]);
            match edge_count.get(&key) {
                Some(1) => {}
                Some(n) => {
                    return Err(MeshError::Integrity(format!(
                        "boundary edge {key:?} belongs to {n} triangles (expected exactly 1)"
                    )))
                }
                None => {
                    return Err(MeshError::Integrity(format!(
                        "boundary edge {key:?} is not an edge of any triangle"
                    )))
                }
            }
        }

        let mut h = 0.0_f64;
        for tri in &triangles {
            for k in 0..3 {
                let a = vertices[tri[k]];
                let b = vertices[tri[(k + 1) % 3]];
                h = h.max(((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt());
            }
        }

        Ok(Mesh {
            vertices,
            triangles,
            boundary_edges,
            h,
        })
    }

    pub fn vertices(&self) -> &[[f64; 2]] {
        &self.vertices
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn boundary_edges(&self) -> &[BoundaryEdge] {
        &self.boundary_edges
    }

    /// Maximum element diameter (longest edge over all triangles).
    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn n_triangles(&self) -> usize {
        self.triangles.len()
    }

    /// Vertex coordinates of triangle `t` in counterclockwise order.
    pub fn triangle_coords(&self, t: usize) -> [[f64; 2]; 3] {
        let tri = self.triangles[t];
        [
            self.vertices[tri[0]],
            self.vertices[tri[1]],
            self.vertices[tri[2]],
        ]
    }

    /// Area of triangle `t` (positive by construction).
    pub fn triangle_area(&self, t: usize) -> f64 {
        signed_area(&self.vertices, &self.triangles[t])
    }

    pub fn total_area(&self) -> f64 {
        (0..self.triangles.len()).map(|t| self.triangle_area(t)).sum()
    }

    /// Plain-text dump with VERTICES / TRIANGLES / BOUNDARY sections.
    /// Coordinates carry 17 significant digits so a dump round-trips
    /// bit-identically.
    pub fn write_dump(&self, path: &Path) -> Result<(), MeshError> {
        let mut out = String::new();
        let _ = writeln!(out, "VERTICES {}", self.vertices.len());
        for v in &self.vertices {
            let _ = writeln!(out, "{:.16e} {:.16e}", v[0], v[1]);
        }
        let _ = writeln!(out, "TRIANGLES {}", self.triangles.len());
        for t in &self.triangles {
            let _ = writeln!(out, "{} {} {}", t[0], t[1], t[2]);
        }
        let _ = writeln!(out, "BOUNDARY {}", self.boundary_edges.len());
        for b in &self.boundary_edges {
            let _ = writeln!(out, "{} {} {}", b.vertices[0], b.vertices[1], b.marker);
        }
        std::fs::write(path, out).map_err(|source| MeshError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn read_dump(path: &Path) -> Result<Self, MeshError> {
        let text = std::fs::read_to_string(path).map_err(|source| MeshError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut lines = text.lines();
        let nv = parse_section_header(lines.next(), "VERTICES")?;
        let mut vertices = Vec::with_capacity(nv);
        for _ in 0..nv {
            let line = lines
                .next()
                .ok_or_else(|| MeshError::Format("truncated VERTICES section".into()))?;
            let mut it = line.split_whitespace();
            let x = parse_f64(it.next())?;
            let y = parse_f64(it.next())?;
            vertices.push([x, y]);
        }
        let nt = parse_section_header(lines.next(), "TRIANGLES")?;
        let mut triangles = Vec::with_capacity(nt);
        for _ in 0..nt {
            let line = lines
                .next()
                .ok_or_else(|| MeshError::Format("truncated TRIANGLES section".into()))?;
            let mut it = line.split_whitespace();
            triangles.push([
                parse_usize(it.next())?,
                parse_usize(it.next())?,
                parse_usize(it.next())?,
            ]);
        }
        let nb = parse_section_header(lines.next(), "BOUNDARY")?;
        let mut boundary = Vec::with_capacity(nb);
        for _ in 0..nb {
            let line = lines
                .next()
                .ok_or_else(|| MeshError::Format("truncated BOUNDARY section".into()))?;
            let mut it = line.split_whitespace();
            boundary.push(BoundaryEdge {
                vertices: [parse_usize(it.next())?, parse_usize(it.next())?],
                marker: parse_i32(it.next())?,
            });
        }
        Mesh::new(vertices, triangles, boundary)
    }
}

fn signed_area(vertices: &[[f64; 2]], tri: &[usize; 3]) -> f64 {
    let a = vertices[tri[0]];
    let b = vertices[tri[1]];
    let c = vertices[tri[2]];
    0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]))
}

fn sorted_pair(a: usize, b: usize) -> (usize, usize) {
    if a < b {
        (a, b)
    } else {
        (b, a)
    }
}

fn parse_section_header(line: Option<&str>, name: &str) -> Result<usize, MeshError> {
    let line = line.ok_or_else(|| MeshError::Format(format!("missing {name} section")))?;
    let mut it = line.split_whitespace();
    match it.next() {
        Some(tag) if tag == name => {}
        other => {
            return Err(MeshError::Format(format!(
                "expected {name} header, found {other:?}"
            )))
        }
    }
    parse_usize(it.next())
}

fn parse_f64(tok: Option<&str>) -> Result<f64, MeshError> {
    tok.ok_or_else(|| MeshError::Format("missing number".into()))?
        .parse()
        .map_err(|e| MeshError::Format(format!("bad float: {e}")))
}

fn parse_usize(tok: Option<&str>) -> Result<usize, MeshError> {
    tok.ok_or_else(|| MeshError::Format("missing integer".into()))?
        .parse()
        .map_err(|e| MeshError::Format(format!("bad integer: {e}")))
}

fn parse_i32(tok: Option<&str>) -> Result<i32, MeshError> {
    tok.ok_or_else(|| MeshError::Format("missing integer".into()))?
        .parse()
        .map_err(|e| MeshError::Format(format!("bad integer: {e}")))
}

/// Uniform n×n grid of the unit square, each cell split along the
/// lower-left/upper-right diagonal. All boundary edges carry marker 1.
pub fn unit_square_mesh(n: usize) -> Mesh {
    assert!(n >= 1, "unit_square_mesh requires n >= 1");
    let np = n + 1;
    let idx = |i: usize, j: usize| j * np + i;
    let mut vertices = Vec::with_capacity(np * np);
    for j in 0..np {
        for i in 0..np {
            vertices.push([i as f64 / n as f64, j as f64 / n as f64]);
        }
    }
    let mut triangles = Vec::with_capacity(2 * n * n);
    for j in 0..n {
        for i in 0..n {
            let v00 = idx(i, j);
            let v10 = idx(i + 1, j);
            let v01 = idx(i, j + 1);
            let v11 = idx(i + 1, j + 1);
            triangles.push([v00, v10, v11]);
            triangles.push([v00, v11, v01]);
        }
    }
    let mut boundary = Vec::with_capacity(4 * n);
    for i in 0..n {
        boundary.push(BoundaryEdge {
            vertices: [idx(i, 0), idx(i + 1, 0)],
            marker: 1,
        });
        boundary.push(BoundaryEdge {
            vertices: [idx(i, n), idx(i + 1, n)],
            marker: 1,
        });
        boundary.push(BoundaryEdge {
            vertices: [idx(0, i), idx(0, i + 1)],
            marker: 1,
        });
        boundary.push(BoundaryEdge {
            vertices: [idx(n, i), idx(n, i + 1)],
            marker: 1,
        });
    }
    Mesh::new(vertices, triangles, boundary).expect("structured grid is always valid")
}

/// Unit square with a square hole cut from the middle quarter
/// ([3/8, 5/8]²). Outer boundary carries marker `outer_marker`, the hole
/// boundary `hole_marker`. `n` must be a multiple of 8. The hole gives a
/// closed interior boundary curve, which the drag/lift functionals need.
pub fn square_with_hole_mesh(n: usize, outer_marker: i32, hole_marker: i32) -> Mesh {
    assert!(n >= 8 && n % 8 == 0, "square_with_hole_mesh requires n % 8 == 0");
    let np = n + 1;
    let lo = 3 * n / 8;
    let hi = 5 * n / 8;
    let in_hole = |i: usize, j: usize| i >= lo && i < hi && j >= lo && j < hi;
    let idx = |i: usize, j: usize| j * np + i;
    let mut vertices = Vec::with_capacity(np * np);
    for j in 0..np {
        for i in 0..np {
            vertices.push([i as f64 / n as f64, j as f64 / n as f64]);
        }
    }
    let mut triangles = Vec::new();
    for j in 0..n {
        for i in 0..n {
            if in_hole(i, j) {
                continue;
            }
            let v00 = idx(i, j);
            let v10 = idx(i + 1, j);
            let v01 = idx(i, j + 1);
            let v11 = idx(i + 1, j + 1);
            triangles.push([v00, v10, v11]);
            triangles.push([v00, v11, v01]);
        }
    }
    let mut boundary = Vec::new();
    for i in 0..n {
        boundary.push(BoundaryEdge {
            vertices: [idx(i, 0), idx(i + 1, 0)],
            marker: outer_marker,
        });
        boundary.push(BoundaryEdge {
            vertices: [idx(i, n), idx(i + 1, n)],
            marker: outer_marker,
        });
        boundary.push(BoundaryEdge {
            vertices: [idx(0, i), idx(0, i + 1)],
            marker: outer_marker,
        });
        boundary.push(BoundaryEdge {
            vertices: [idx(n, i), idx(n, i + 1)],
            marker: outer_marker,
        });
    }
    for k in lo..hi {
        boundary.push(BoundaryEdge {
            vertices: [idx(k, lo), idx(k + 1, lo)],
            marker: hole_marker,
        });
        boundary.push(BoundaryEdge {
            vertices: [idx(k, hi), idx(k + 1, hi)],
            marker: hole_marker,
        });
        boundary.push(BoundaryEdge {
            vertices: [idx(lo, k), idx(lo, k + 1)],
            marker: hole_marker,
        });
        boundary.push(BoundaryEdge {
            vertices: [idx(hi, k), idx(hi, k + 1)],
            marker: hole_marker,
        });
    }
    // Renumber to drop the unused interior-hole vertices.
    let mut keep = vec![false; vertices.len()];
    for t in &triangles {
        for &v in t {
            keep[v] = true;
        }
    }
    let mut remap = vec![usize::MAX; vertices.len()];
    let mut packed = Vec::new();
    for (v, &k) in keep.iter().enumerate() {
        if k {
            remap[v] = packed.len();
            packed.push(vertices[v]);
        }
    }
    let triangles = triangles
        .into_iter()
        .map(|t| [remap[t[0]], remap[t[1]], remap[t[2]]])
        .collect();
    let boundary = boundary
        .into_iter()
        .map(|b| BoundaryEdge {
            vertices: [remap[b.vertices[0]], remap[b.vertices[1]]],
            marker: b.marker,
        })
        .collect();
    Mesh::new(packed, triangles, boundary).expect("structured grid with hole is always valid")
}

/// Reads a Gmsh MSH 2.2 ASCII file (the `$Nodes`/`$Elements` subset).
///
/// Boundary markers come from the first element tag of line elements
/// (the physical-group tag). 2D elements must all be 3-node triangles.
pub fn load_msh(path: &Path) -> Result<Mesh, MeshError> {
    let text = std::fs::read_to_string(path).map_err(|source| MeshError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_msh(&text)
}

pub fn parse_msh(text: &str) -> Result<Mesh, MeshError> {
    let mut lines = text.lines().peekable();
    let mut nodes: Vec<(u64, [f64; 2])> = Vec::new();
    let mut raw_triangles: Vec<[u64; 3]> = Vec::new();
    let mut raw_lines: Vec<([u64; 2], i32)> = Vec::new();
    let mut saw_format = false;

    while let Some(line) = lines.next() {
        match line.trim() {
            "$MeshFormat" => {
                let fmt = lines
                    .next()
                    .ok_or_else(|| MeshError::Format("truncated $MeshFormat".into()))?;
                let mut it = fmt.split_whitespace();
                let version = it.next().unwrap_or("");
                if version != "2.2" {
                    return Err(MeshError::Format(format!(
                        "unsupported MSH version {version} (only 2.2 ASCII is supported)"
                    )));
                }
                let file_type = it.next().unwrap_or("");
                if file_type != "0" {
                    return Err(MeshError::Format("binary MSH files are not supported".into()));
                }
                expect_end_tag(&mut lines, "$EndMeshFormat")?;
                saw_format = true;
            }
            "$Nodes" => {
                let count = parse_usize(lines.next().map(str::trim))?;
                for _ in 0..count {
                    let line = lines
                        .next()
                        .ok_or_else(|| MeshError::Format("truncated $Nodes".into()))?;
                    let mut it = line.split_whitespace();
                    let id: u64 = parse_usize(it.next())? as u64;
                    let x = parse_f64(it.next())?;
                    let y = parse_f64(it.next())?;
                    let _z = parse_f64(it.next())?;
                    nodes.push((id, [x, y]));
                }
                expect_end_tag(&mut lines, "$EndNodes")?;
            }
            "$Elements" => {
                let count = parse_usize(lines.next().map(str::trim))?;
                for _ in 0..count {
                    let line = lines
                        .next()
                        .ok_or_else(|| MeshError::Format("truncated $Elements".into()))?;
                    let mut it = line.split_whitespace();
                    let _id = parse_usize(it.next())?;
                    let etype = parse_usize(it.next())?;
                    let ntags = parse_usize(it.next())?;
                    let mut tags = Vec::with_capacity(ntags);
                    for _ in 0..ntags {
                        tags.push(parse_i32(it.next())?);
                    }
                    match etype {
                        1 => {
                            let a = parse_usize(it.next())? as u64;
                            let b = parse_usize(it.next())? as u64;
                            let marker = tags.first().copied().unwrap_or(0);
                            raw_lines.push(([a, b], marker));
                        }
                        2 => {
                            let a = parse_usize(it.next())? as u64;
                            let b = parse_usize(it.next())? as u64;
                            let c = parse_usize(it.next())? as u64;
                            raw_triangles.push([a, b, c]);
                        }
                        15 => {} // point elements carry no geometry we need
                        other => {
                            return Err(MeshError::Format(format!(
                                "unsupported element type {other} (only lines and triangles)"
                            )))
                        }
                    }
                }
                expect_end_tag(&mut lines, "$EndElements")?;
            }
            // Skip unknown sections ($PhysicalNames etc.) up to their end tag.
            s if s.starts_with('$') && !s.starts_with("$End") => {
                let end = format!("$End{}", &s[1..]);
                for skipped in lines.by_ref() {
                    if skipped.trim() == end {
                        break;
                    }
                }
            }
            _ => {}
        }
    }

    if !saw_format {
        return Err(MeshError::Format("missing $MeshFormat section".into()));
    }
    if raw_triangles.is_empty() {
        return Err(MeshError::Format("no triangle elements found".into()));
    }

    let mut id_map: BTreeMap<u64, usize> = BTreeMap::new();
    let mut vertices = Vec::with_capacity(nodes.len());
    for (id, xy) in nodes {
        id_map.insert(id, vertices.len());
        vertices.push(xy);
    }
    let lookup = |id: u64| -> Result<usize, MeshError> {
        id_map
            .get(&id)
            .copied()
            .ok_or_else(|| MeshError::Integrity(format!("element references missing node {id}")))
    };
    let mut triangles = Vec::with_capacity(raw_triangles.len());
    for t in raw_triangles {
        triangles.push([lookup(t[0])?, lookup(t[1])?, lookup(t[2])?]);
    }
    let mut boundary = Vec::with_capacity(raw_lines.len());
    for (vs, marker) in raw_lines {
        boundary.push(BoundaryEdge {
            vertices: [lookup(vs[0])?, lookup(vs[1])?],
            marker,
        });
    }
    Mesh::new(vertices, triangles, boundary)
}

fn expect_end_tag<'a>(
    lines: &mut impl Iterator<Item = &'a str>,
    tag: &str,
) -> Result<(), MeshError> {
    match lines.next().map(str::trim) {
        Some(t) if t == tag => Ok(()),
        other => Err(MeshError::Format(format!("expected {tag}, found {other:?}"))),
    }
}

/// Quadrature rule on the reference triangle {x,y >= 0, x+y <= 1} in
/// barycentric coordinates. Weights sum to the reference area 1/2.
#[derive(Debug, Clone)]
pub struct QuadratureRule {
    pub points: Vec<[f64; 3]>,
    pub weights: Vec<f64>,
    pub degree: usize,
}

impl QuadratureRule {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Symmetric rule exact for bivariate polynomials up to `degree` (1..=7).
pub fn quadrature_rule(degree: usize) -> Result<QuadratureRule, MeshError> {
    let mut points = Vec::new();
    let mut weights = Vec::new();
    let push_orbit1 = |w: f64, pts: &mut Vec<[f64; 3]>, ws: &mut Vec<f64>| {
        pts.push([1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]);
        ws.push(w);
    };
    // Orbit of (a, b, b): three permutations.
    let push_orbit3 = |a: f64, w: f64, pts: &mut Vec<[f64; 3]>, ws: &mut Vec<f64>| {
        let b = 0.5 * (1.0 - a);
        pts.push([a, b, b]);
        pts.push([b, a, b]);
        pts.push([b, b, a]);
        ws.extend_from_slice(&[w, w, w]);
    };
    // Orbit of (a, b, c) with distinct entries: six permutations.
    let push_orbit6 = |a: f64, b: f64, w: f64, pts: &mut Vec<[f64; 3]>, ws: &mut Vec<f64>| {
        let c = 1.0 - a - b;
        for p in [[a, b, c], [a, c, b], [b, a, c], [b, c, a], [c, a, b], [c, b, a]] {
            pts.push(p);
            ws.push(w);
        }
    };

    // Dunavant rules; weights below are normalized to sum to 1 and scaled by
    // the reference area at the end.
    match degree {
        1 => push_orbit1(1.0, &mut points, &mut weights),
        2 => push_orbit3(2.0 / 3.0, 1.0 / 3.0, &mut points, &mut weights),
        3 | 4 => {
            push_orbit3(0.816847572980459, 0.109951743655322, &mut points, &mut weights);
            push_orbit3(0.108103018168070, 0.223381589678011, &mut points, &mut weights);
        }
        5 => {
            push_orbit1(0.225, &mut points, &mut weights);
            push_orbit3(0.797426985353087, 0.125939180544827, &mut points, &mut weights);
            push_orbit3(0.059715871789770, 0.132394152788506, &mut points, &mut weights);
        }
        6 => {
            push_orbit3(0.873821971016996, 0.050844906370207, &mut points, &mut weights);
            push_orbit3(0.501426509658179, 0.116786275726379, &mut points, &mut weights);
            push_orbit6(
                0.636502499121399,
                0.310352451033785,
                0.082851075618374,
                &mut points,
                &mut weights,
            );
        }
        7 => {
            push_orbit1(-0.149570044467670, &mut points, &mut weights);
            push_orbit3(0.479308067841923, 0.175615257433204, &mut points, &mut weights);
            push_orbit3(0.869739794195568, 0.053347235608839, &mut points, &mut weights);
            push_orbit6(
                0.638444188569809,
                0.312865496004875,
                0.077113760890257,
                &mut points,
                &mut weights,
            );
        }
        other => return Err(MeshError::UnsupportedDegree(other)),
    }
    for w in weights.iter_mut() {
        *w *= 0.5;
    }
    Ok(QuadratureRule {
        points,
        weights,
        degree,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Exact integral of x^a y^b over the reference triangle: a! b! / (a+b+2)!.
    fn monomial_integral(a: u32, b: u32) -> f64 {
        fn fact(n: u32) -> f64 {
            (1..=n).map(|k| k as f64).product::<f64>().max(1.0)
        }
        fact(a) * fact(b) / fact(a + b + 2)
    }

    #[test]
    fn unit_square_counts() {
        let m1 = unit_square_mesh(1);
        assert_eq!(m1.n_vertices(), 4);
        assert_eq!(m1.n_triangles(), 2);
        assert_eq!(m1.boundary_edges().len(), 4);

        let m4 = unit_square_mesh(4);
        assert_eq!(m4.n_vertices(), 25);
        assert_eq!(m4.n_triangles(), 32);
        assert!((m4.h() - std::f64::consts::SQRT_2 / 4.0).abs() < 1e-15);

        let m16 = unit_square_mesh(16);
        assert_eq!(m16.n_vertices(), 289);
        assert_eq!(m16.n_triangles(), 512);
    }

    #[test]
    fn triangle_areas_sum_to_domain_area() {
        for n in [1, 3, 7] {
            let m = unit_square_mesh(n);
            assert!((m.total_area() - 1.0).abs() < 1e-12);
        }
        let m = square_with_hole_mesh(8, 1, 2);
        assert!((m.total_area() - (1.0 - 0.25 * 0.25)).abs() < 1e-12);
    }

    #[test]
    fn all_triangles_positively_oriented() {
        // Feed in flipped triangles; construction must repair orientation.
        let vertices = vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]];
        let m = Mesh::new(
            vertices,
            vec![[0, 2, 1]],
            vec![
                BoundaryEdge { vertices: [0, 1], marker: 1 },
                BoundaryEdge { vertices: [1, 2], marker: 1 },
                BoundaryEdge { vertices: [2, 0], marker: 1 },
            ],
        )
        .unwrap();
        assert!(m.triangle_area(0) > 0.0);
    }

    #[test]
    fn quadrature_midpoint_rule() {
        let r = quadrature_rule(1).unwrap();
        assert_eq!(r.len(), 1);
        assert!((r.weights[0] - 0.5).abs() < 1e-15);
        assert!((r.points[0][0] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn quadrature_degree4_x2y2() {
        let r = quadrature_rule(4).unwrap();
        let mut acc = 0.0;
        for (p, w) in r.points.iter().zip(&r.weights) {
            let (x, y) = (p[1], p[2]);
            acc += w * x * x * y * y;
        }
        assert!((acc - 1.0 / 180.0).abs() < 1e-15, "got {acc}");
    }

    #[test]
    fn quadrature_exactness_all_degrees() {
        for degree in 1..=7usize {
            let r = quadrature_rule(degree).unwrap();
            let wsum: f64 = r.weights.iter().sum();
            assert!((wsum - 0.5).abs() < 1e-14, "degree {degree} weight sum {wsum}");
            for a in 0..=degree as u32 {
                for b in 0..=(degree as u32 - a) {
                    let mut acc = 0.0;
                    for (p, w) in r.points.iter().zip(&r.weights) {
                        let (x, y) = (p[1], p[2]);
                        acc += w * x.powi(a as i32) * y.powi(b as i32);
                    }
                    let exact = monomial_integral(a, b);
                    assert!(
                        (acc - exact).abs() <= 1e-14,
                        "degree {degree}: x^{a} y^{b} -> {acc} vs {exact}"
                    );
                }
            }
        }
    }

    #[test]
    fn quadrature_degree_out_of_range() {
        assert!(matches!(quadrature_rule(0), Err(MeshError::UnsupportedDegree(0))));
        assert!(matches!(quadrature_rule(8), Err(MeshError::UnsupportedDegree(8))));
    }

    #[test]
    fn msh_single_triangle() {
        let text = "\
$MeshFormat
2.2 0 8
$EndMeshFormat
$Nodes
3
1 0 0 0
2 1 0 0
3 0 2 0
$EndNodes
$Elements
4
1 15 2 1 1 1
2 1 2 5 1 1 2
3 1 2 5 2 2 3
4 2 2 7 1 1 2 3
$EndElements
";
        let m = parse_msh(text).unwrap();
        assert_eq!(m.n_vertices(), 3);
        assert_eq!(m.n_triangles(), 1);
        assert_eq!(m.boundary_edges().len(), 2);
        assert_eq!(m.boundary_edges()[0].marker, 5);
        // h = longest edge = hypotenuse from (1,0) to (0,2)
        assert!((m.h() - 5.0_f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn msh_wrong_version_rejected() {
        let text = "$MeshFormat\n4.1 0 8\n$EndMeshFormat\n";
        match parse_msh(text) {
            Err(MeshError::Format(msg)) => assert!(msg.contains("4.1")),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn msh_non_triangle_2d_rejected() {
        let text = "\
$MeshFormat
2.2 0 8
$EndMeshFormat
$Nodes
4
1 0 0 0
2 1 0 0
3 1 1 0
4 0 1 0
$EndNodes
$Elements
1
1 3 2 1 1 1 2 3 4
$EndElements
";
        assert!(matches!(parse_msh(text), Err(MeshError::Format(_))));
    }

    #[test]
    fn msh_dangling_node_rejected() {
        let text = "\
$MeshFormat
2.2 0 8
$EndMeshFormat
$Nodes
3
1 0 0 0
2 1 0 0
3 0 1 0
$EndNodes
$Elements
1
1 2 2 1 1 1 2 9
$EndElements
";
        assert!(matches!(parse_msh(text), Err(MeshError::Integrity(_))));
    }

    #[test]
    fn dump_round_trip_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mesh.txt");
        let m = unit_square_mesh(3);
        m.write_dump(&path).unwrap();
        let m2 = Mesh::read_dump(&path).unwrap();
        assert_eq!(m.vertices(), m2.vertices());
        assert_eq!(m.triangles(), m2.triangles());
        assert_eq!(m.boundary_edges(), m2.boundary_edges());
        let path2 = dir.path().join("mesh2.txt");
        m2.write_dump(&path2).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }

    proptest! {
        #[test]
        fn quadrature_exact_on_random_polynomials(
            degree in 1usize..=7,
            coeffs in proptest::collection::vec(-1.0f64..1.0, 36)
        ) {
            // Random polynomial of matching total degree, integrated exactly.
            let r = quadrature_rule(degree).unwrap();
            let mut exact = 0.0;
            let mut numeric = 0.0;
            let mut scale = 0.0f64;
            let mut ci = 0;
            for a in 0..=degree as u32 {
                for b in 0..=(degree as u32 - a) {
                    let c = coeffs[ci % coeffs.len()];
                    ci += 1;
                    exact += c * monomial_integral(a, b);
                    scale += c.abs() * monomial_integral(a, b);
                    for (p, w) in r.points.iter().zip(&r.weights) {
                        numeric += w * c * p[1].powi(a as i32) * p[2].powi(b as i32);
                    }
                }
            }
            prop_assert!((exact - numeric).abs() <= 1e-13 * scale.max(1e-30));
        }
    }
}
