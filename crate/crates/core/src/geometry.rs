//! Perforated unit cells, lattice meshes of cells and of epsilon-scaled
//! perforated domains, boundary tags, layer sets and averaging balls.
//!
//! Every mesh lives on a uniform square lattice. Holes are unions of lattice
//! cells, which keeps all set measures exact: the fluid fraction of a cell is
//! a ratio of cell counts and the area of a tiled domain is a multiple of
//! `h^2`.
//!
//! The periodic reference cell is `Y = (-1/2, 1/2]^2`. Tiling a domain places
//! the cell pattern on the squares `eps * (k + [0, 1]^2)`, so the fast variable
//! of a point `x` is `x / eps - 1/2` reduced to `Y` (see [`cell_coordinate`]).

use std::collections::HashMap;
use std::fmt::Write as _;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const LATTICE_TOL: f64 = 1e-9;

/// Shape of a hole.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HoleShape {
    #[default]
    Square,
    Rectangle,
}

/// An axis-aligned hole inside the reference cell, in cell units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HoleSpec {
    #[serde(default)]
    pub shape: HoleShape,
    pub center: [f64; 2],
    pub half_widths: [f64; 2],
}

impl HoleSpec {
    pub fn square(center: [f64; 2], half_width: f64) -> Self {
        Self { shape: HoleShape::Square, center, half_widths: [half_width, half_width] }
    }

    pub fn rectangle(center: [f64; 2], half_widths: [f64; 2]) -> Self {
        Self { shape: HoleShape::Rectangle, center, half_widths }
    }

    pub fn area(&self) -> f64 {
        4.0 * self.half_widths[0] * self.half_widths[1]
    }

    fn lower(&self) -> [f64; 2] {
        [self.center[0] - self.half_widths[0], self.center[1] - self.half_widths[1]]
    }

    fn upper(&self) -> [f64; 2] {
        [self.center[0] + self.half_widths[0], self.center[1] + self.half_widths[1]]
    }

    fn distance_to(&self, other: &HoleSpec) -> f64 {
        let gap = |k: usize| {
            ((self.center[k] - other.center[k]).abs() - self.half_widths[k] - other.half_widths[k])
                .max(0.0)
        };
        gap(0).hypot(gap(1))
    }

    fn contains(&self, y: [f64; 2]) -> bool {
        let lo = self.lower();
        let hi = self.upper();
        y[0] > lo[0] && y[0] < hi[0] && y[1] > lo[1] && y[1] < hi[1]
    }
}

/// The reference geometry `Y ∩ ω` resolved on an `n x n` lattice.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PerforatedCell {
    pub holes: Vec<HoleSpec>,
    pub resolution: usize,
    pub separation: f64,
    #[serde(skip)]
    fluid: Vec<bool>,
}

impl PerforatedCell {
    /// Validates the hole list against the lattice and the separation constant.
    pub fn new(holes: Vec<HoleSpec>, resolution: usize, separation: f64) -> Result<Self> {
        if resolution == 0 {
            return Err(Error::InvalidCell("resolution must be positive".into()));
        }
        if !(separation > 0.0) {
            return Err(Error::InvalidCell("separation must be positive".into()));
        }
        let n = resolution as f64;
        for hole in &holes {
            let [a, b] = hole.half_widths;
            if !(a > 0.0 && b > 0.0) {
                return Err(Error::InvalidCell("hole half widths must be positive".into()));
            }
            if hole.shape == HoleShape::Square && (a - b).abs() > LATTICE_TOL {
                return Err(Error::InvalidCell("square hole with unequal half widths".into()));
            }
            for corner in [hole.lower(), hole.upper()] {
                for c in corner {
                    let t = (c + 0.5) * n;
                    if (t - t.round()).abs() > LATTICE_TOL {
                        return Err(Error::NonAligned { corner, resolution });
                    }
                }
            }
            let lo = hole.lower();
            let hi = hole.upper();
            let to_boundary = [0.5 + lo[0], 0.5 - hi[0], 0.5 + lo[1], 0.5 - hi[1]]
                .into_iter()
                .fold(f64::INFINITY, f64::min);
            if to_boundary <= 0.0 {
                return Err(Error::InvalidCell(format!(
                    "hole centred at {:?} touches the cell boundary",
                    hole.center
                )));
            }
            if to_boundary < 0.5 * separation - LATTICE_TOL {
                return Err(Error::TooClose { distance: 2.0 * to_boundary, separation });
            }
        }
        for (k, h1) in holes.iter().enumerate() {
            for h2 in &holes[k + 1..] {
                let d = h1.distance_to(h2);
                if d < separation - LATTICE_TOL {
                    return Err(Error::TooClose { distance: d, separation });
                }
            }
        }
        let mut cell = Self { holes, resolution, separation, fluid: Vec::new() };
        cell.fluid = cell.compute_fluid();
        Ok(cell)
    }

    /// A cell without holes.
    pub fn unperforated(resolution: usize) -> Self {
        Self::new(Vec::new(), resolution, 1.0).expect("empty hole list is always valid")
    }

    /// The same hole pattern on a different lattice.
    pub fn with_resolution(&self, resolution: usize) -> Result<Self> {
        Self::new(self.holes.clone(), resolution, self.separation)
    }

    fn compute_fluid(&self) -> Vec<bool> {
        let n = self.resolution;
        let h = 1.0 / n as f64;
        let mut fluid = vec![true; n * n];
        for j in 0..n {
            for i in 0..n {
                let y = [-0.5 + (i as f64 + 0.5) * h, -0.5 + (j as f64 + 0.5) * h];
                if self.holes.iter().any(|hole| hole.contains(y)) {
                    fluid[i + j * n] = false;
                }
            }
        }
        fluid
    }

    fn fluid_mask(&self) -> &[bool] {
        &self.fluid
    }

    /// Whether lattice cell `(i, j)` of the reference cell lies in the fluid.
    pub fn is_fluid(&self, i: usize, j: usize) -> bool {
        let n = self.resolution;
        self.fluid[(i % n) + (j % n) * n]
    }

    /// Number of lattice cells covered by holes.
    pub fn hole_cells(&self) -> usize {
        self.fluid.iter().filter(|f| !**f).count()
    }

    /// Volume fraction `θ = |Y ∩ ω|`, exact as a ratio of cell counts.
    pub fn theta(&self) -> f64 {
        let n2 = self.resolution * self.resolution;
        (n2 - self.hole_cells()) as f64 / n2 as f64
    }

    /// `1 - Σ |hole|`, which agrees with [`Self::theta`] for aligned holes.
    pub fn theta_from_areas(&self) -> f64 {
        1.0 - self.holes.iter().map(HoleSpec::area).sum::<f64>()
    }

    /// Indicator `l^+` at a point of the reference cell.
    pub fn indicator(&self, y: [f64; 2]) -> f64 {
        if self.holes.iter().any(|hole| hole.contains(y)) {
            0.0
        } else {
            1.0
        }
    }

    /// Canonical description hashed into table and solution file headers.
    pub fn canonical(&self) -> String {
        let mut s = format!("n={};g={:e};", self.resolution, self.separation);
        for hole in &self.holes {
            let _ = write!(
                s,
                "h({:e},{:e},{:e},{:e})",
                hole.center[0], hole.center[1], hole.half_widths[0], hole.half_widths[1]
            );
        }
        s
    }

    pub fn hash(&self) -> [u8; 32] {
        Sha256::digest(self.canonical().as_bytes()).into()
    }
}

/// Boundary edge classification.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EdgeTag {
    Hole,
    OuterDirichlet,
    Periodic,
}

#[derive(Clone, Debug)]
pub struct BoundaryEdge {
    pub vertices: [usize; 2],
    pub tag: EdgeTag,
    /// Outward normal of the meshed region.
    pub normal: [f64; 2],
    pub element: usize,
}

/// Axis-aligned rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub min: [f64; 2],
    pub max: [f64; 2],
}

impl Rect {
    pub fn new(min: [f64; 2], max: [f64; 2]) -> Self {
        Self { min, max }
    }

    pub fn unit_square() -> Self {
        Self::new([0.0, 0.0], [1.0, 1.0])
    }

    pub fn width(&self) -> f64 {
        self.max[0] - self.min[0]
    }

    pub fn height(&self) -> f64 {
        self.max[1] - self.min[1]
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn diameter(&self) -> f64 {
        self.width().hypot(self.height())
    }

    pub fn contains(&self, x: [f64; 2]) -> bool {
        x[0] >= self.min[0] && x[0] <= self.max[0] && x[1] >= self.min[1] && x[1] <= self.max[1]
    }

    /// Distance from an interior point to the boundary.
    pub fn distance_to_boundary(&self, x: [f64; 2]) -> f64 {
        (x[0] - self.min[0])
            .min(self.max[0] - x[0])
            .min(x[1] - self.min[1])
            .min(self.max[1] - x[1])
    }
}

/// A lattice mesh of bilinear quadrilaterals.
///
/// Nodes of the underlying `nx x ny` lattice are addressed by `(i, j)` with
/// `0 <= i <= nx`; cell `(i, j)` has lower-left node `(i, j)`. Only active cells
/// become elements. On periodic meshes the nodes of the right and top faces are
/// identified with their images on the left and bottom faces.
#[derive(Clone, Debug)]
pub struct Mesh {
    pub origin: [f64; 2],
    pub h: f64,
    pub nx: usize,
    pub ny: usize,
    pub periodic: bool,
    pub vertices: Vec<[f64; 2]>,
    pub vertex_nodes: Vec<(usize, usize)>,
    pub elements: Vec<[usize; 4]>,
    pub element_cells: Vec<(usize, usize)>,
    /// `l^+` per element; equal to one except on full-cell meshes that mesh the holes.
    pub indicator: Vec<f64>,
    /// Pairs `(image, source)` of identified vertices on periodic meshes.
    pub periodic_map: Vec<(usize, usize)>,
    pub boundary_edges: Vec<BoundaryEdge>,
    pub vertex_dof: Vec<usize>,
    pub n_dofs: usize,
    node_vertex: Vec<usize>,
    cell_element: Vec<usize>,
}

const NONE: usize = usize::MAX;

impl Mesh {
    /// Builds a lattice mesh from a per-cell activity predicate and indicator.
    pub fn lattice(
        origin: [f64; 2],
        h: f64,
        nx: usize,
        ny: usize,
        periodic: bool,
        active: impl Fn(usize, usize) -> bool,
        indicator: impl Fn(usize, usize) -> f64,
    ) -> Self {
        let node = |i: usize, j: usize| i + j * (nx + 1);
        let mut node_vertex = vec![NONE; (nx + 1) * (ny + 1)];
        let mut cell_element = vec![NONE; nx * ny];
        let mut vertices = Vec::new();
        let mut vertex_nodes = Vec::new();
        let mut elements = Vec::new();
        let mut element_cells = Vec::new();
        let mut ind = Vec::new();

        // vertex numbering follows lattice order for locality
        let mut touched = vec![false; (nx + 1) * (ny + 1)];
        for j in 0..ny {
            for i in 0..nx {
                if active(i, j) {
                    for (a, b) in [(i, j), (i + 1, j), (i + 1, j + 1), (i, j + 1)] {
                        touched[node(a, b)] = true;
                    }
                }
            }
        }
        for j in 0..=ny {
            for i in 0..=nx {
                if touched[node(i, j)] {
                    node_vertex[node(i, j)] = vertices.len();
                    vertices.push([origin[0] + i as f64 * h, origin[1] + j as f64 * h]);
                    vertex_nodes.push((i, j));
                }
            }
        }
        for j in 0..ny {
            for i in 0..nx {
                if active(i, j) {
                    cell_element[i + j * nx] = elements.len();
                    elements.push([
                        node_vertex[node(i, j)],
                        node_vertex[node(i + 1, j)],
                        node_vertex[node(i + 1, j + 1)],
                        node_vertex[node(i, j + 1)],
                    ]);
                    element_cells.push((i, j));
                    ind.push(indicator(i, j));
                }
            }
        }

        let mut periodic_map = Vec::new();
        let mut vertex_dof = vec![NONE; vertices.len()];
        let mut n_dofs = 0;
        if periodic {
            for (v, &(i, j)) in vertex_nodes.iter().enumerate() {
                if i < nx && j < ny {
                    vertex_dof[v] = n_dofs;
                    n_dofs += 1;
                }
            }
            for (v, &(i, j)) in vertex_nodes.iter().enumerate() {
                if i == nx || j == ny {
                    let src = node_vertex[node(i % nx, j % ny)];
                    assert!(src != NONE, "periodic image of a boundary vertex is missing");
                    periodic_map.push((v, src));
                    vertex_dof[v] = vertex_dof[src];
                }
            }
        } else {
            for (v, dof) in vertex_dof.iter_mut().enumerate() {
                *dof = v;
            }
            n_dofs = vertices.len();
        }

        let mut mesh = Self {
            origin,
            h,
            nx,
            ny,
            periodic,
            vertices,
            vertex_nodes,
            elements,
            element_cells,
            indicator: ind,
            periodic_map,
            boundary_edges: Vec::new(),
            vertex_dof,
            n_dofs,
            node_vertex,
            cell_element,
        };
        mesh.boundary_edges = mesh.collect_boundary_edges();
        mesh
    }

    fn collect_boundary_edges(&self) -> Vec<BoundaryEdge> {
        let mut edges = Vec::new();
        for (e, &(i, j)) in self.element_cells.iter().enumerate() {
            let (i, j) = (i as isize, j as isize);
            let sides: [((isize, isize), (usize, usize), (usize, usize), [f64; 2]); 4] = [
                ((i, j - 1), (0, 0), (1, 0), [0.0, -1.0]),
                ((i + 1, j), (1, 0), (1, 1), [1.0, 0.0]),
                ((i, j + 1), (0, 1), (1, 1), [0.0, 1.0]),
                ((i - 1, j), (0, 0), (0, 1), [-1.0, 0.0]),
            ];
            for ((ni, nj), a, b, normal) in sides {
                let inside =
                    ni >= 0 && nj >= 0 && (ni as usize) < self.nx && (nj as usize) < self.ny;
                let tag = if inside {
                    if self.cell_element[ni as usize + nj as usize * self.nx] != NONE {
                        continue;
                    }
                    EdgeTag::Hole
                } else if self.periodic {
                    let wi = ni.rem_euclid(self.nx as isize) as usize;
                    let wj = nj.rem_euclid(self.ny as isize) as usize;
                    if self.cell_element[wi + wj * self.nx] != NONE {
                        EdgeTag::Periodic
                    } else {
                        EdgeTag::Hole
                    }
                } else {
                    EdgeTag::OuterDirichlet
                };
                let (i, j) = (i as usize, j as usize);
                let va = self.vertex_at(i + a.0, j + a.1).expect("element vertex");
                let vb = self.vertex_at(i + b.0, j + b.1).expect("element vertex");
                edges.push(BoundaryEdge { vertices: [va, vb], tag, normal, element: e });
            }
        }
        edges
    }

    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn n_elements(&self) -> usize {
        self.elements.len()
    }

    /// Vertex at lattice node `(i, j)`, if that node belongs to the mesh.
    pub fn vertex_at(&self, i: usize, j: usize) -> Option<usize> {
        if i > self.nx || j > self.ny {
            return None;
        }
        let v = self.node_vertex[i + j * (self.nx + 1)];
        (v != NONE).then_some(v)
    }

    /// Element occupying lattice cell `(i, j)`, if active.
    pub fn element_at(&self, i: usize, j: usize) -> Option<usize> {
        if i >= self.nx || j >= self.ny {
            return None;
        }
        let e = self.cell_element[i + j * self.nx];
        (e != NONE).then_some(e)
    }

    pub fn element_area(&self) -> f64 {
        self.h * self.h
    }

    pub fn total_area(&self) -> f64 {
        self.n_elements() as f64 * self.element_area()
    }

    /// Weighted area `∫ l^+`.
    pub fn indicator_area(&self) -> f64 {
        self.indicator.iter().sum::<f64>() * self.element_area()
    }

    pub fn barycenter(&self, e: usize) -> [f64; 2] {
        let (i, j) = self.element_cells[e];
        [
            self.origin[0] + (i as f64 + 0.5) * self.h,
            self.origin[1] + (j as f64 + 0.5) * self.h,
        ]
    }

    pub fn element_diameter(&self) -> f64 {
        self.h * std::f64::consts::SQRT_2
    }

    /// Dof indices of an element's four vertices.
    pub fn element_dofs(&self, e: usize) -> [usize; 4] {
        let el = self.elements[e];
        [
            self.vertex_dof[el[0]],
            self.vertex_dof[el[1]],
            self.vertex_dof[el[2]],
            self.vertex_dof[el[3]],
        ]
    }

    /// Element containing `x` and the local coordinates in `[0, 1]^2`.
    pub fn locate(&self, x: [f64; 2]) -> Option<(usize, [f64; 2])> {
        let mut s = (x[0] - self.origin[0]) / self.h;
        let mut t = (x[1] - self.origin[1]) / self.h;
        let (nx, ny) = (self.nx as f64, self.ny as f64);
        if self.periodic {
            s = s.rem_euclid(nx);
            t = t.rem_euclid(ny);
        }
        if !(s >= 0.0 && t >= 0.0 && s <= nx && t <= ny) {
            return None;
        }
        let i = (s.floor() as usize).min(self.nx - 1);
        let j = (t.floor() as usize).min(self.ny - 1);
        if let Some(e) = self.element_at(i, j) {
            return Some((e, [s - i as f64, t - j as f64]));
        }
        // points on the edge of a hole belong to a neighbouring fluid element
        let tol = 1e-9;
        for (di, dj) in [(-1isize, 0isize), (0, -1), (-1, -1), (1, 0), (0, 1), (1, 1), (-1, 1), (1, -1)] {
            let mut ci = i as isize + di;
            let mut cj = j as isize + dj;
            if self.periodic {
                ci = ci.rem_euclid(self.nx as isize);
                cj = cj.rem_euclid(self.ny as isize);
            }
            if ci < 0 || cj < 0 {
                continue;
            }
            let Some(e) = self.element_at(ci as usize, cj as usize) else { continue };
            let mut a = s - ci as f64;
            let mut b = t - cj as f64;
            if self.periodic {
                a -= (a / nx).round() * nx;
                b -= (b / ny).round() * ny;
            }
            if a >= -tol && a <= 1.0 + tol && b >= -tol && b <= 1.0 + tol {
                return Some((e, [a.clamp(0.0, 1.0), b.clamp(0.0, 1.0)]));
            }
        }
        None
    }

    /// Vertices lying on edges with the given tag.
    pub fn tagged_vertices(&self, tag: EdgeTag) -> Vec<bool> {
        let mut mask = vec![false; self.n_vertices()];
        for edge in self.boundary_edges.iter().filter(|e| e.tag == tag) {
            mask[edge.vertices[0]] = true;
            mask[edge.vertices[1]] = true;
        }
        mask
    }

    /// Connected groups of inactive lattice cells, as inclusive cell ranges.
    pub fn hole_regions(&self) -> Vec<HoleRegion> {
        let (nx, ny) = (self.nx, self.ny);
        let mut seen = vec![false; nx * ny];
        let mut regions = Vec::new();
        for start in 0..nx * ny {
            if seen[start] || self.cell_element[start] != NONE {
                continue;
            }
            let mut stack = vec![start];
            seen[start] = true;
            let (mut i0, mut j0, mut i1, mut j1) = (usize::MAX, usize::MAX, 0, 0);
            let mut count = 0;
            while let Some(c) = stack.pop() {
                let (i, j) = (c % nx, c / nx);
                count += 1;
                i0 = i0.min(i);
                j0 = j0.min(j);
                i1 = i1.max(i);
                j1 = j1.max(j);
                let mut push = |ni: usize, nj: usize| {
                    let k = ni + nj * nx;
                    if !seen[k] && self.cell_element[k] == NONE {
                        seen[k] = true;
                        stack.push(k);
                    }
                };
                if i > 0 {
                    push(i - 1, j);
                }
                if i + 1 < nx {
                    push(i + 1, j);
                }
                if j > 0 {
                    push(i, j - 1);
                }
                if j + 1 < ny {
                    push(i, j + 1);
                }
            }
            regions.push(HoleRegion { cells: (i0, j0, i1, j1), count });
        }
        regions
    }

    /// Content hash of the mesh layout.
    pub fn hash(&self) -> [u8; 32] {
        let mut hasher = Sha256::new();
        hasher.update(b"perfhom-mesh-v1");
        for v in [self.origin[0], self.origin[1], self.h] {
            hasher.update(v.to_le_bytes());
        }
        hasher.update((self.nx as u64).to_le_bytes());
        hasher.update((self.ny as u64).to_le_bytes());
        hasher.update([self.periodic as u8]);
        let mut bits = Vec::with_capacity(self.cell_element.len());
        for (k, &e) in self.cell_element.iter().enumerate() {
            let ind = if e == NONE { 2u8 } else { (self.indicator[e] > 0.5) as u8 };
            let _ = k;
            bits.push(ind);
        }
        hasher.update(&bits);
        hasher.finalize().into()
    }

    pub fn hash_hex(&self) -> String {
        hex::encode(self.hash())
    }

    /// Plain-text listing of vertices, elements and tagged boundary edges.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "vertices {}", self.n_vertices());
        for v in &self.vertices {
            let _ = writeln!(s, "{} {}", v[0], v[1]);
        }
        let _ = writeln!(s, "elements {}", self.n_elements());
        for el in &self.elements {
            let _ = writeln!(s, "{} {} {} {}", el[0], el[1], el[2], el[3]);
        }
        let _ = writeln!(s, "edges {}", self.boundary_edges.len());
        for edge in &self.boundary_edges {
            let _ = writeln!(s, "{} {} {:?}", edge.vertices[0], edge.vertices[1], edge.tag);
        }
        if !self.periodic_map.is_empty() {
            let _ = writeln!(s, "periodic {}", self.periodic_map.len());
            for (a, b) in &self.periodic_map {
                let _ = writeln!(s, "{a} {b}");
            }
        }
        s
    }
}

/// Inclusive lattice-cell bounding box of a hole, with its cell count.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HoleRegion {
    pub cells: (usize, usize, usize, usize),
    pub count: usize,
}

impl HoleRegion {
    pub fn is_rectangle(&self) -> bool {
        let (i0, j0, i1, j1) = self.cells;
        (i1 - i0 + 1) * (j1 - j0 + 1) == self.count
    }

    /// Width and height in lattice cells.
    pub fn shape(&self) -> (usize, usize) {
        let (i0, j0, i1, j1) = self.cells;
        (i1 - i0 + 1, j1 - j0 + 1)
    }
}

/// Periodic mesh of `Y ∩ ω` with HOLE and PERIODIC boundary tags.
pub fn build_cell_mesh(cell: &PerforatedCell) -> Mesh {
    let n = cell.resolution;
    let mask = cell.fluid_mask().to_vec();
    Mesh::lattice(
        [-0.5, -0.5],
        1.0 / n as f64,
        n,
        n,
        true,
        |i, j| mask[i + j * n],
        |_, _| 1.0,
    )
}

/// Periodic mesh of the whole torus `Y`, holes included, carrying `l^+` per element.
pub fn build_full_cell_mesh(cell: &PerforatedCell) -> Mesh {
    let n = cell.resolution;
    let mask = cell.fluid_mask().to_vec();
    Mesh::lattice(
        [-0.5, -0.5],
        1.0 / n as f64,
        n,
        n,
        true,
        |_, _| true,
        |i, j| if mask[i + j * n] { 1.0 } else { 0.0 },
    )
}

/// Fast variable `y = x/eps - (1/2, 1/2)` reduced to `[-1/2, 1/2)^2`.
pub fn cell_coordinate(x: [f64; 2], eps: f64) -> [f64; 2] {
    let reduce = |t: f64| {
        let s = t / eps - 0.5;
        s - (s + 0.5).floor()
    };
    [reduce(x[0]), reduce(x[1])]
}

/// Tiled perforated domain `Ω_ε = Ω ∩ εω`.
#[derive(Clone, Debug)]
pub struct DomainMesh {
    pub mesh: Arc<Mesh>,
    pub eps: f64,
    pub omega: Rect,
    pub cell: PerforatedCell,
    pub cells_per_side: [usize; 2],
    /// Boundary edges on `Γ_ε = ∂Ω_ε ∩ ∂Ω`.
    pub gamma_edges: Vec<usize>,
    /// Boundary edges on `K_ε = ∂Ω_ε ∩ Ω`.
    pub k_edges: Vec<usize>,
}

fn integer_ratio(length: f64, eps: f64, what: &str) -> Result<usize> {
    let m = length / eps;
    if !(m >= 0.5) || (m - m.round()).abs() > 1e-9 * m.max(1.0) {
        return Err(Error::ScaleMismatch(format!("{what}/eps = {m} is not an integer")));
    }
    Ok(m.round() as usize)
}

impl DomainMesh {
    pub fn n_per_cell(&self) -> usize {
        self.cell.resolution
    }

    pub fn h(&self) -> f64 {
        self.mesh.h
    }

    pub fn hole_count(&self) -> usize {
        self.mesh.hole_regions().len()
    }

    /// Cell-lattice node `(i, j)` seen by domain vertex `v` through the fast variable.
    pub fn cell_node(&self, v: usize) -> (usize, usize) {
        let n = self.cell.resolution;
        let (i, j) = self.mesh.vertex_nodes[v];
        (i % n, j % n)
    }

    /// Unperforated lattice mesh of `Ω` on the same grid, Dirichlet-tagged on `∂Ω`.
    pub fn background(&self) -> Mesh {
        Mesh::lattice(
            self.mesh.origin,
            self.mesh.h,
            self.mesh.nx,
            self.mesh.ny,
            self.mesh.periodic,
            |_, _| true,
            |_, _| 1.0,
        )
    }
}

fn tile(
    cell: &PerforatedCell,
    eps: f64,
    omega: Rect,
    n_per_cell: usize,
    periodic: bool,
) -> Result<DomainMesh> {
    if n_per_cell != cell.resolution {
        return Err(Error::ScaleMismatch(format!(
            "n_per_cell {n_per_cell} differs from cell resolution {}",
            cell.resolution
        )));
    }
    if !(eps > 0.0) {
        return Err(Error::ScaleMismatch("eps must be positive".into()));
    }
    let mx = integer_ratio(omega.width(), eps, "width")?;
    let my = integer_ratio(omega.height(), eps, "height")?;
    for c in omega.min {
        let t = c / eps;
        if (t - t.round()).abs() > 1e-9 * t.abs().max(1.0) {
            return Err(Error::ScaleMismatch(format!("domain corner {c} is not a multiple of eps")));
        }
    }
    let n = n_per_cell;
    let h = eps / n as f64;
    let cell_ref = cell.clone();
    let mesh = Mesh::lattice(
        omega.min,
        h,
        mx * n,
        my * n,
        periodic,
        |i, j| cell_ref.is_fluid(i, j),
        |_, _| 1.0,
    );
    let mut gamma_edges = Vec::new();
    let mut k_edges = Vec::new();
    for (k, edge) in mesh.boundary_edges.iter().enumerate() {
        match edge.tag {
            EdgeTag::OuterDirichlet => gamma_edges.push(k),
            EdgeTag::Hole => k_edges.push(k),
            EdgeTag::Periodic => {}
        }
    }
    Ok(DomainMesh {
        mesh: Arc::new(mesh),
        eps,
        omega,
        cell: cell.clone(),
        cells_per_side: [mx, my],
        gamma_edges,
        k_edges,
    })
}

/// Meshes `Ω_ε` with translated copies of the cell pattern and tags `Γ_ε`, `K_ε`.
pub fn build_domain_mesh(
    cell: &PerforatedCell,
    eps: f64,
    omega: Rect,
    n_per_cell: usize,
) -> Result<DomainMesh> {
    tile(cell, eps, omega, n_per_cell, false)
}

/// Perforated torus of side lengths given by `omega`, tiled by the cell pattern.
pub fn build_torus_mesh(
    cell: &PerforatedCell,
    eps: f64,
    omega: Rect,
    n_per_cell: usize,
) -> Result<DomainMesh> {
    tile(cell, eps, omega, n_per_cell, true)
}

/// Element masks of the layer `O_{nε}` and co-layer `Σ_{nε}` on the full lattice.
#[derive(Clone, Debug)]
pub struct LayerSets {
    pub n: usize,
    pub eps: f64,
    /// Per lattice cell (`i + j * nx`): inside `O_{nε}`.
    pub layer: Vec<bool>,
    /// Per lattice cell: inside `Σ_{nε}`.
    pub co_layer: Vec<bool>,
    cell_area: f64,
}

impl LayerSets {
    pub fn layer_measure(&self) -> f64 {
        self.layer.iter().filter(|b| **b).count() as f64 * self.cell_area
    }

    pub fn co_layer_measure(&self) -> f64 {
        self.co_layer.iter().filter(|b| **b).count() as f64 * self.cell_area
    }

    /// Restriction of the layer mask to the elements of a mesh on the same lattice.
    pub fn element_layer(&self, mesh: &Mesh) -> Vec<bool> {
        mesh.element_cells.iter().map(|&(i, j)| self.layer[i + j * mesh.nx]).collect()
    }
}

/// Layer sets `O_{nε} = {dist(x, ∂Ω) < nε}` and their complements, by barycenter.
pub fn layer_sets(domain: &DomainMesh, n: usize) -> Result<LayerSets> {
    let thickness = n as f64 * domain.eps;
    let limit = domain.omega.diameter() / 2.0;
    if thickness >= limit {
        return Err(Error::LayerTooThick { thickness, limit });
    }
    let mesh = &domain.mesh;
    let mut layer = vec![false; mesh.nx * mesh.ny];
    for j in 0..mesh.ny {
        for i in 0..mesh.nx {
            let x = [
                mesh.origin[0] + (i as f64 + 0.5) * mesh.h,
                mesh.origin[1] + (j as f64 + 0.5) * mesh.h,
            ];
            layer[i + j * mesh.nx] = domain.omega.distance_to_boundary(x) < thickness;
        }
    }
    let co_layer = layer.iter().map(|b| !b).collect();
    Ok(LayerSets { n, eps: domain.eps, layer, co_layer, cell_area: mesh.h * mesh.h })
}

/// Fluid elements of `mesh` whose barycenter lies in the closed ball `B(center, r)`.
pub fn ball_mask(mesh: &Mesh, center: [f64; 2], r: f64) -> Result<Vec<bool>> {
    let diameter = mesh.element_diameter();
    if r <= 2.0 * diameter {
        return Err(Error::RadiusTooSmall { radius: r, diameter });
    }
    Ok((0..mesh.n_elements())
        .map(|e| {
            let b = mesh.barycenter(e);
            mesh.indicator[e] > 0.5 && (b[0] - center[0]).hypot(b[1] - center[1]) <= r
        })
        .collect())
}

/// Element mask for `B(center, r) ∩ Ω_ε`.
pub fn avg_ball_mask(domain: &DomainMesh, center: [f64; 2], r: f64) -> Result<Vec<bool>> {
    ball_mask(&domain.mesh, center, r)
}

/// Lattice offsets `(di, dj)` whose barycenter distance is at most `r`.
pub fn ball_offsets(h: f64, r: f64) -> Vec<(isize, isize)> {
    let k = (r / h).ceil() as isize;
    let mut out = Vec::new();
    for dj in -k..=k {
        for di in -k..=k {
            if ((di as f64) * h).hypot(dj as f64 * h) <= r {
                out.push((di, dj));
            }
        }
    }
    out
}

/// Groups hole regions by their shape.
pub fn holes_by_shape(mesh: &Mesh) -> HashMap<(usize, usize), Vec<HoleRegion>> {
    let mut map: HashMap<(usize, usize), Vec<HoleRegion>> = HashMap::new();
    for region in mesh.hole_regions() {
        map.entry(region.shape()).or_default().push(region);
    }
    map
}

#[cfg(test)]
mod tests {
    use super::*;

    fn centered(n: usize, a: f64) -> PerforatedCell {
        PerforatedCell::new(vec![HoleSpec::square([0.0, 0.0], a)], n, 0.1).unwrap()
    }

    #[test]
    fn unperforated_cell_mesh() {
        let cell = PerforatedCell::unperforated(8);
        let mesh = build_cell_mesh(&cell);
        assert_eq!(mesh.n_elements(), 64);
        assert_eq!(cell.theta(), 1.0);
        assert!(mesh.boundary_edges.iter().all(|e| e.tag == EdgeTag::Periodic));
        assert_eq!(mesh.n_dofs, 64);
    }

    #[test]
    fn single_hole_area() {
        let cell = centered(12, 1.0 / 6.0);
        assert!((cell.theta() - 8.0 / 9.0).abs() < 1e-15);
        assert!((cell.theta_from_areas() - 8.0 / 9.0).abs() < 1e-14);
        assert_eq!(cell.hole_cells(), 16);
        let mesh = build_cell_mesh(&cell);
        assert_eq!(mesh.n_elements(), 144 - 16);
        let regions = mesh.hole_regions();
        assert_eq!(regions.len(), 1);
        assert_eq!(regions[0].shape(), (4, 4));
        assert_eq!(mesh.boundary_edges.iter().filter(|e| e.tag == EdgeTag::Hole).count(), 16);
    }

    #[test]
    fn too_close_and_non_aligned() {
        let holes = vec![HoleSpec::square([-0.125, 0.0], 0.125), HoleSpec::square([0.125, 0.0], 0.0625)];
        let err = PerforatedCell::new(holes, 16, 0.1).unwrap_err();
        assert!(matches!(err, Error::TooClose { .. }));
        let err = PerforatedCell::new(vec![HoleSpec::square([0.0, 0.0], 0.2)], 8, 0.1).unwrap_err();
        assert!(matches!(err, Error::NonAligned { .. }));
    }

    #[test]
    fn hole_near_cell_boundary_is_too_close() {
        let err = PerforatedCell::new(vec![HoleSpec::square([0.25, 0.0], 0.1875)], 16, 0.25)
            .unwrap_err();
        assert!(matches!(err, Error::TooClose { .. }));
    }

    #[test]
    fn periodic_pairs_differ_by_lattice_vectors() {
        let mesh = build_cell_mesh(&centered(8, 0.25));
        assert!(!mesh.periodic_map.is_empty());
        for &(a, b) in &mesh.periodic_map {
            let d = [mesh.vertices[a][0] - mesh.vertices[b][0], mesh.vertices[a][1] - mesh.vertices[b][1]];
            for c in d {
                assert!((c - c.round()).abs() < 1e-14);
            }
            assert!(d[0].abs() + d[1].abs() > 0.5);
        }
        // every vertex on ∂Y has a dof shared with its image
        let on_boundary = mesh
            .vertex_nodes
            .iter()
            .filter(|&&(i, j)| i == 0 || j == 0 || i == 8 || j == 8)
            .count();
        let images = mesh.periodic_map.len();
        assert_eq!(on_boundary, 4 * 8);
        assert_eq!(images, 2 * 8 + 1);
    }

    #[test]
    fn domain_tiling_counts() {
        let cell = centered(8, 0.25);
        let dom = build_domain_mesh(&cell, 0.25, Rect::unit_square(), 8).unwrap();
        assert_eq!(dom.hole_count(), 16);
        assert_eq!(dom.k_edges.len(), 16 * 16);
        assert_eq!(dom.gamma_edges.len(), 4 * 32);
        assert_eq!(dom.k_edges.len() + dom.gamma_edges.len(), dom.mesh.boundary_edges.len());
        let area = dom.mesh.total_area();
        assert!((area - cell.theta()).abs() < 1e-12);

        let plain = build_domain_mesh(&PerforatedCell::unperforated(4), 1.0, Rect::unit_square(), 4)
            .unwrap();
        assert!(plain.k_edges.is_empty());
        assert_eq!(plain.mesh.n_elements(), 16);

        let third = build_domain_mesh(&cell, 1.0 / 3.0, Rect::unit_square(), 8).unwrap();
        assert_eq!(third.hole_count(), 9);
        assert!(third.mesh.hole_regions().iter().all(|r| r.is_rectangle()));
    }

    #[test]
    fn scale_mismatch() {
        let cell = centered(8, 0.25);
        assert!(matches!(
            build_domain_mesh(&cell, 0.3, Rect::unit_square(), 8),
            Err(Error::ScaleMismatch(_))
        ));
        assert!(matches!(
            build_domain_mesh(&cell, 0.25, Rect::unit_square(), 16),
            Err(Error::ScaleMismatch(_))
        ));
    }

    #[test]
    fn layer_frame_measure() {
        let cell = centered(8, 0.25);
        let dom = build_domain_mesh(&cell, 0.125, Rect::unit_square(), 8).unwrap();
        let zero = layer_sets(&dom, 0).unwrap();
        assert_eq!(zero.layer_measure(), 0.0);
        assert!((zero.co_layer_measure() - 1.0).abs() < 1e-12);
        let two = layer_sets(&dom, 2).unwrap();
        assert!((two.layer_measure() - 0.75).abs() < 1e-12);
        let mut prev = 0.0;
        for n in 0..5 {
            let m = layer_sets(&dom, n).unwrap();
            assert!(m.layer_measure() >= prev);
            prev = m.layer_measure();
            for (a, b) in m.layer.iter().zip(&m.co_layer) {
                assert!(a ^ b);
            }
        }
        assert!(matches!(layer_sets(&dom, 6), Err(Error::LayerTooThick { .. })));
    }

    #[test]
    fn layer_measure_scales_with_eps() {
        let cell = centered(8, 0.25);
        let ratios: Vec<f64> = [8usize, 16, 32]
            .iter()
            .map(|&m| {
                let eps = 1.0 / m as f64;
                let dom = build_domain_mesh(&cell, eps, Rect::unit_square(), 8).unwrap();
                layer_sets(&dom, 4).unwrap().layer_measure() / eps
            })
            .collect();
        for r in &ratios {
            assert!(*r <= 16.0 + 1e-9);
        }
    }

    #[test]
    fn ball_masks() {
        let cell = centered(8, 0.25);
        let dom = build_domain_mesh(&cell, 0.125, Rect::unit_square(), 8).unwrap();
        let all = avg_ball_mask(&dom, [0.5, 0.5], 2.0).unwrap();
        assert!(all.iter().all(|b| *b));
        let outside = avg_ball_mask(&dom, [5.0, 5.0], 0.1).unwrap();
        assert!(outside.iter().all(|b| !*b));
        assert!(matches!(
            avg_ball_mask(&dom, [0.5, 0.5], 0.01),
            Err(Error::RadiusTooSmall { .. })
        ));

        // area of B(c, 1/8) ∩ Ω_ε against a fine sub-sampling of the same set
        let c = [0.5 + 0.0625, 0.5 + 0.0625];
        let r = 0.125;
        let mask = avg_ball_mask(&dom, c, r).unwrap();
        let area = mask.iter().filter(|b| **b).count() as f64 * dom.mesh.element_area();
        let m = 800;
        let mut hits = 0usize;
        for a in 0..m {
            for b in 0..m {
                let x = [c[0] - r + 2.0 * r * (a as f64 + 0.5) / m as f64, c[1] - r + 2.0 * r * (b as f64 + 0.5) / m as f64];
                if (x[0] - c[0]).hypot(x[1] - c[1]) <= r {
                    let y = cell_coordinate(x, 0.125);
                    if cell.indicator(y) > 0.5 {
                        hits += 1;
                    }
                }
            }
        }
        let exact = hits as f64 * (2.0 * r / m as f64).powi(2);
        assert!((area - exact).abs() / exact < 0.15, "{area} vs {exact}");
        let approx = cell.theta() * std::f64::consts::PI * r * r;
        assert!((area - approx).abs() / approx < 0.15);

        let mut prev = 0;
        for k in 1..8 {
            let count = avg_ball_mask(&dom, c, 0.05 * k as f64).unwrap().iter().filter(|b| **b).count();
            assert!(count >= prev);
            prev = count;
        }
    }

    #[test]
    fn fast_variable_maps_tiles_to_cell() {
        let eps = 0.125;
        // centre of the first tile is the centre of the reference cell
        let y = cell_coordinate([0.0625, 0.0625], eps);
        assert!(y[0].abs() < 1e-14 && y[1].abs() < 1e-14);
        let y = cell_coordinate([0.3, 0.9], eps);
        assert!(y.iter().all(|c| (-0.5..0.5).contains(c)));
    }

    #[test]
    fn text_export_lists_everything() {
        let mesh = build_cell_mesh(&centered(4, 0.25));
        let text = mesh.to_text();
        assert!(text.starts_with(&format!("vertices {}", mesh.n_vertices())));
        assert!(text.contains(&format!("elements {}", mesh.n_elements())));
        assert!(text.contains("Hole"));
    }
}
