//! Structured triangulation of a rectangular basin and the P1 spaces built on it.
//!
//! Vertices are numbered row-major with x fastest. Every grid cell is split
//! along its south-west to north-east diagonal, so all triangles are
//! congruent and counter-clockwise.

use std::collections::BTreeSet;
use std::io::Write;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeshConfig {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub nx: usize,
    pub ny: usize,
}

impl Default for MeshConfig {
    fn default() -> Self {
        Self {
            x_min: 0.0,
            x_max: 10.0,
            y_min: 0.0,
            y_max: 10.0,
            nx: 15,
            ny: 15,
        }
    }
}

impl MeshConfig {
    pub fn square(side: f64, n: usize) -> Self {
        Self {
            x_min: 0.0,
            x_max: side,
            y_min: 0.0,
            y_max: side,
            nx: n,
            ny: n,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.x_max > self.x_min) || !self.x_min.is_finite() || !self.x_max.is_finite() {
            return Err(Error::Config(format!(
                "mesh: x_max ({}) must exceed x_min ({})",
                self.x_max, self.x_min
            )));
        }
        if !(self.y_max > self.y_min) || !self.y_min.is_finite() || !self.y_max.is_finite() {
            return Err(Error::Config(format!(
                "mesh: y_max ({}) must exceed y_min ({})",
                self.y_max, self.y_min
            )));
        }
        if self.nx == 0 || self.ny == 0 {
            return Err(Error::Config("mesh: nx and ny must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Mesh {
    pub vertices: Vec<[f64; 2]>,
    /// Counter-clockwise vertex triples.
    pub triangles: Vec<[usize; 3]>,
    pub boundary_vertices: BTreeSet<usize>,
    pub config: MeshConfig,
}

pub fn build_structured_mesh(cfg: &MeshConfig) -> Result<Mesh> {
    cfg.validate()?;
    let (nx, ny) = (cfg.nx, cfg.ny);
    let hx = (cfg.x_max - cfg.x_min) / nx as f64;
    let hy = (cfg.y_max - cfg.y_min) / ny as f64;

    let mut vertices = Vec::with_capacity((nx + 1) * (ny + 1));
    let mut boundary_vertices = BTreeSet::new();
    for j in 0..=ny {
        for i in 0..=nx {
            // Pin the last row/column to the exact corner to keep the area exact.
            let x = if i == nx { cfg.x_max } else { cfg.x_min + i as f64 * hx };
            let y = if j == ny { cfg.y_max } else { cfg.y_min + j as f64 * hy };
            if i == 0 || i == nx || j == 0 || j == ny {
                boundary_vertices.insert(vertices.len());
            }
            vertices.push([x, y]);
        }
    }

    let idx = |i: usize, j: usize| j * (nx + 1) + i;
    let mut triangles = Vec::with_capacity(2 * nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let a = idx(i, j);
            let b = idx(i + 1, j);
            let c = idx(i + 1, j + 1);
            let d = idx(i, j + 1);
            triangles.push([a, b, c]);
            triangles.push([a, c, d]);
        }
    }

    Ok(Mesh {
        vertices,
        triangles,
        boundary_vertices,
        config: *cfg,
    })
}

impl Mesh {
    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn n_triangles(&self) -> usize {
        self.triangles.len()
    }

    /// Signed area of triangle `t` (positive for counter-clockwise ordering).
    pub fn signed_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangles[t];
        let (pa, pb, pc) = (self.vertices[a], self.vertices[b], self.vertices[c]);
        0.5 * ((pb[0] - pa[0]) * (pc[1] - pa[1]) - (pc[0] - pa[0]) * (pb[1] - pa[1]))
    }

    pub fn element(&self, t: usize) -> Element {
        let [a, b, c] = self.triangles[t];
        Element::new([self.vertices[a], self.vertices[b], self.vertices[c]])
    }

    pub fn area(&self) -> f64 {
        (0..self.n_triangles()).map(|t| self.signed_area(t)).sum()
    }

    /// Nodal interpolation of a scalar function.
    pub fn interpolate(&self, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        self.vertices.iter().map(|p| f(p[0], p[1])).collect()
    }

    /// Nodal interpolation of a vector field into interleaved (x, y) dofs.
    pub fn interpolate_vector(&self, f: impl Fn(f64, f64) -> [f64; 2]) -> Vec<f64> {
        self.vertices
            .iter()
            .flat_map(|p| f(p[0], p[1]))
            .collect()
    }

    /// Debug dump: one `v x y` line per vertex, then one `t i j k` line per triangle.
    pub fn write_dump(&self, mut out: impl Write) -> Result<()> {
        for p in &self.vertices {
            writeln!(out, "v {} {}", p[0], p[1])?;
        }
        for t in &self.triangles {
            writeln!(out, "t {} {} {}", t[0], t[1], t[2])?;
        }
        Ok(())
    }
}

/// Geometry of one P1 triangle: area and the constant barycentric gradients.
#[derive(Clone, Copy, Debug)]
pub struct Element {
    pub coords: [[f64; 2]; 3],
    pub area: f64,
    pub grad: [[f64; 2]; 3],
}

impl Element {
    pub fn new(coords: [[f64; 2]; 3]) -> Self {
        let [p0, p1, p2] = coords;
        let det = (p1[0] - p0[0]) * (p2[1] - p0[1]) - (p2[0] - p0[0]) * (p1[1] - p0[1]);
        let area = 0.5 * det;
        let grad = [
            [(p1[1] - p2[1]) / det, (p2[0] - p1[0]) / det],
            [(p2[1] - p0[1]) / det, (p0[0] - p2[0]) / det],
            [(p0[1] - p1[1]) / det, (p1[0] - p0[0]) / det],
        ];
        Self { coords, area, grad }
    }

    pub fn point(&self, bary: [f64; 3]) -> [f64; 2] {
        let mut p = [0.0; 2];
        for a in 0..3 {
            p[0] += bary[a] * self.coords[a][0];
            p[1] += bary[a] * self.coords[a][1];
        }
        p
    }
}

/// Symmetric quadrature rule on the reference triangle in barycentric form.
/// Weights are normalized to sum to one; multiply by the element area.
#[derive(Clone, Debug)]
pub struct QuadratureRule {
    pub points: Vec<[f64; 3]>,
    pub weights: Vec<f64>,
}

impl QuadratureRule {
    /// Seven-point rule, exact for total degree five.
    pub fn degree5() -> Self {
        let s = 15f64.sqrt();
        let a1 = (6.0 - s) / 21.0;
        let b1 = (9.0 + 2.0 * s) / 21.0;
        let w1 = (155.0 - s) / 1200.0;
        let a2 = (6.0 + s) / 21.0;
        let b2 = (9.0 - 2.0 * s) / 21.0;
        let w2 = (155.0 + s) / 1200.0;
        let third = 1.0 / 3.0;
        Self {
            points: vec![
                [third, third, third],
                [a1, a1, b1],
                [a1, b1, a1],
                [b1, a1, a1],
                [a2, a2, b2],
                [a2, b2, a2],
                [b2, a2, a2],
            ],
            weights: vec![0.225, w1, w1, w1, w2, w2, w2],
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

impl Default for QuadratureRule {
    fn default() -> Self {
        Self::degree5()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpaceKind {
    ScalarP1,
    VectorP1,
}

#[derive(Clone, Debug)]
pub struct FeSpace {
    pub kind: SpaceKind,
    /// Vertex count for scalar spaces, twice that for vector spaces
    /// (interleaved per vertex as x-component, y-component).
    pub dof_count: usize,
    pub dirichlet_dofs: BTreeSet<usize>,
}

impl FeSpace {
    pub fn scalar(mesh: &Mesh) -> Self {
        Self {
            kind: SpaceKind::ScalarP1,
            dof_count: mesh.n_vertices(),
            dirichlet_dofs: BTreeSet::new(),
        }
    }

    pub fn vector(mesh: &Mesh) -> Self {
        Self {
            kind: SpaceKind::VectorP1,
            dof_count: 2 * mesh.n_vertices(),
            dirichlet_dofs: BTreeSet::new(),
        }
    }

    pub fn components(&self) -> usize {
        match self.kind {
            SpaceKind::ScalarP1 => 1,
            SpaceKind::VectorP1 => 2,
        }
    }

    /// Boolean mask over dofs, `true` where the dof is free.
    pub fn free_mask(&self) -> Vec<bool> {
        let mut mask = vec![true; self.dof_count];
        for &d in &self.dirichlet_dofs {
            mask[d] = false;
        }
        mask
    }
}

/// Constrains every velocity dof on the boundary (no-slip walls). Scalar
/// spaces (height, and controls) carry no essential conditions.
pub fn mark_dirichlet(mut space: FeSpace, mesh: &Mesh) -> FeSpace {
    space.dirichlet_dofs = match space.kind {
        SpaceKind::ScalarP1 => BTreeSet::new(),
        SpaceKind::VectorP1 => mesh
            .boundary_vertices
            .iter()
            .flat_map(|&v| [2 * v, 2 * v + 1])
            .collect(),
    };
    space
}

#[cfg(test)]
mod tests {
    use std::collections::HashMap;

    use super::*;

    fn mesh(n: usize) -> Mesh {
        build_structured_mesh(&MeshConfig::square(10.0, n)).unwrap()
    }

    #[test]
    fn single_cell_counts() {
        let m = mesh(1);
        assert_eq!(m.n_vertices(), 4);
        assert_eq!(m.n_triangles(), 2);
        assert_eq!(m.boundary_vertices.len(), 4);
    }

    #[test]
    fn two_by_two_counts() {
        let m = mesh(2);
        assert_eq!(m.n_vertices(), 9);
        assert_eq!(m.n_triangles(), 8);
        assert_eq!(m.boundary_vertices.len(), 8);
    }

    #[test]
    fn areas_positive_equal_and_sum_to_domain() {
        for n in [1, 2, 7, 15] {
            let m = mesh(n);
            let a0 = m.signed_area(0);
            for t in 0..m.n_triangles() {
                let a = m.signed_area(t);
                assert!(a > 0.0);
                assert!((a - a0).abs() < 1e-12 * a0);
            }
            assert!((m.area() - 100.0).abs() < 1e-12 * 100.0);
        }
    }

    #[test]
    fn rectangular_boundary_count() {
        for (nx, ny) in [(1, 3), (4, 2), (5, 5)] {
            let cfg = MeshConfig {
                nx,
                ny,
                ..MeshConfig::default()
            };
            let m = build_structured_mesh(&cfg).unwrap();
            assert_eq!(m.boundary_vertices.len(), 2 * (nx + ny));
            assert_eq!(m.n_vertices(), (nx + 1) * (ny + 1));
            assert_eq!(m.n_triangles(), 2 * nx * ny);
        }
    }

    #[test]
    fn edges_shared_by_at_most_two_and_boundary_matches() {
        let m = mesh(4);
        let mut edges: HashMap<(usize, usize), usize> = HashMap::new();
        for t in &m.triangles {
            for e in 0..3 {
                let (a, b) = (t[e], t[(e + 1) % 3]);
                *edges.entry((a.min(b), a.max(b))).or_default() += 1;
            }
        }
        assert!(edges.values().all(|&c| c <= 2));
        let on_boundary_edge: BTreeSet<usize> = edges
            .iter()
            .filter(|(_, &c)| c == 1)
            .flat_map(|(&(a, b), _)| [a, b])
            .collect();
        assert_eq!(on_boundary_edge, m.boundary_vertices);
    }

    #[test]
    fn interior_valence_is_six() {
        let m = mesh(5);
        let mut nbrs: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); m.n_vertices()];
        for t in &m.triangles {
            for a in 0..3 {
                for b in 0..3 {
                    if a != b {
                        nbrs[t[a]].insert(t[b]);
                    }
                }
            }
        }
        for v in 0..m.n_vertices() {
            if !m.boundary_vertices.contains(&v) {
                assert_eq!(nbrs[v].len(), 6, "vertex {v}");
            }
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = MeshConfig::default();
        cfg.nx = 0;
        assert!(matches!(build_structured_mesh(&cfg), Err(Error::Config(_))));
        let mut cfg = MeshConfig::default();
        cfg.x_max = cfg.x_min;
        assert!(matches!(build_structured_mesh(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn dirichlet_marking() {
        let m = mesh(2);
        let v = mark_dirichlet(FeSpace::vector(&m), &m);
        assert_eq!(v.dirichlet_dofs.len(), 16);
        // center vertex of a 2x2 grid
        let center = 4;
        assert!(!v.dirichlet_dofs.contains(&(2 * center)));
        assert!(!v.dirichlet_dofs.contains(&(2 * center + 1)));
        let h = mark_dirichlet(FeSpace::scalar(&m), &m);
        assert!(h.dirichlet_dofs.is_empty());
        assert_eq!(v.dof_count, 2 * h.dof_count);
    }

    #[test]
    fn quadrature_weights_and_exactness() {
        let q = QuadratureRule::degree5();
        let total: f64 = q.weights.iter().sum();
        assert!((total - 1.0).abs() < 1e-15);
        // Reference-area-normalized moments: 2 * a! b! c! / (a+b+c+2)!
        let fact = |n: u32| (1..=n).map(f64::from).product::<f64>();
        for (a, b, c) in [(1, 1, 1), (2, 1, 0), (3, 0, 0), (2, 2, 1), (0, 0, 0)] {
            let exact = 2.0 * fact(a) * fact(b) * fact(c) / fact(a + b + c + 2);
            let approx: f64 = q
                .points
                .iter()
                .zip(&q.weights)
                .map(|(p, w)| w * p[0].powi(a as i32) * p[1].powi(b as i32) * p[2].powi(c as i32))
                .sum();
            assert!((approx - exact).abs() < 1e-15, "{a}{b}{c}");
        }
    }

    #[test]
    fn dump_format() {
        let m = mesh(1);
        let mut buf = Vec::new();
        m.write_dump(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 6);
        assert_eq!(lines[0], "v 0 0");
        assert_eq!(lines[4], "t 0 1 3");
    }
}
