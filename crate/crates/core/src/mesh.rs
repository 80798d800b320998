//! Four-node bilinear quadrilateral meshes.
//!
//! Conventions used throughout the crate:
//!
//! * Coordinates are `[x, y]` in millimetres with `x` axial (depth, along the
//!   beam) and `y` lateral.
//! * Element connectivity is counter-clockwise in the `(x, y)` plane; local
//!   node `a` sits at reference corner `(-1,-1), (1,-1), (1,1), (-1,1)`.
//! * Nodal vector fields are stored interleaved: `[ux0, uy0, ux1, uy1, ...]`,
//!   so dof `2n` is the axial and `2n + 1` the lateral component of node `n`.
//! * Structured meshes number nodes with `x` fastest:
//!   `node(i, j) = j * (nx + 1) + i`, `element(i, j) = j * nx + i`.
//! * Each interior edge records a "left" element (lower index) and a "right"
//!   element (higher index); its unit normal points from left to right.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub type Point = [f64; 2];

pub const REFERENCE_CORNERS: [Point; 4] = [[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]];

/// Midpoint, in reference coordinates, of local edge `k` (local nodes `k`, `k+1`).
const EDGE_MIDPOINTS: [Point; 4] = [[0.0, -1.0], [1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]];

const INVERSE_MAP_TOL: f64 = 1e-10;
const INVERSE_MAP_MAX_ITERS: usize = 50;
const CONTAINMENT_SLACK: f64 = 1e-9;

/// Tensor-product Gauss-Legendre rule on the reference square `[-1, 1]^2`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureRule {
    pub points: Vec<Point>,
    pub weights: Vec<f64>,
}

impl QuadratureRule {
    /// `n x n` Gauss rule; exact for polynomials of degree `2n - 1` per axis.
    pub fn gauss(n: usize) -> Self {
        let (x, w) = gauss_legendre(n);
        let mut points = Vec::with_capacity(n * n);
        let mut weights = Vec::with_capacity(n * n);
        for j in 0..n {
            for i in 0..n {
                points.push([x[i], x[j]]);
                weights.push(w[i] * w[j]);
            }
        }
        Self { points, weights }
    }

    /// Single point at the element centre with weight 4.
    pub fn center() -> Self {
        Self::gauss(1)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Point, f64)> + '_ {
        self.points.iter().copied().zip(self.weights.iter().copied())
    }
}

/// Nodes and weights of the `n`-point Gauss-Legendre rule on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let pn = if n == 1 { z } else { p1 };
            let pnm1 = if n == 1 { 1.0 } else { p0 };
            dp = n as f64 * (z * pn - pnm1) / (z * z - 1.0);
            let dz = pn / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        let wi = 2.0 / ((1.0 - z * z) * dp * dp);
        w[i] = wi;
        w[n - 1 - i] = wi;
    }
    if n % 2 == 1 {
        x[n / 2] = 0.0;
    }
    (x, w)
}

#[inline]
pub fn shape_values(local: Point) -> [f64; 4] {
    let [xi, eta] = local;
    [
        0.25 * (1.0 - xi) * (1.0 - eta),
        0.25 * (1.0 + xi) * (1.0 - eta),
        0.25 * (1.0 + xi) * (1.0 + eta),
        0.25 * (1.0 - xi) * (1.0 + eta),
    ]
}

/// `dN_a / d(xi, eta)`
#[inline]
pub fn shape_local_derivatives(local: Point) -> [[f64; 2]; 4] {
    let [xi, eta] = local;
    [
        [-0.25 * (1.0 - eta), -0.25 * (1.0 - xi)],
        [0.25 * (1.0 - eta), -0.25 * (1.0 + xi)],
        [0.25 * (1.0 + eta), 0.25 * (1.0 + xi)],
        [-0.25 * (1.0 + eta), 0.25 * (1.0 - xi)],
    ]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InteriorEdge {
    pub nodes: [usize; 2],
    pub left: usize,
    pub right: usize,
    pub normal: Point,
    pub length: f64,
    /// Edge midpoint in the reference coordinates of the left / right element.
    pub left_local: Point,
    pub right_local: Point,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundaryEdge {
    pub nodes: [usize; 2],
    pub element: usize,
}

/// Geometry of a mesh produced by [`QuadMesh::structured`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StructuredLayout {
    pub origin: Point,
    pub width: f64,
    pub height: f64,
    pub nx: usize,
    pub ny: usize,
}

#[derive(Debug, Clone)]
struct ElementGrid {
    origin: Point,
    cell: Point,
    dims: [usize; 2],
    buckets: Vec<Vec<usize>>,
}

impl ElementGrid {
    fn build(nodes: &[Point], elements: &[[usize; 4]]) -> Self {
        let (lo, hi) = bounding_box(nodes);
        let n = elements.len().max(1);
        let side = (n as f64).sqrt().ceil() as usize;
        let span = [(hi[0] - lo[0]).max(1e-12), (hi[1] - lo[1]).max(1e-12)];
        let aspect = span[0] / span[1];
        let dx = ((side as f64) * aspect.sqrt()).ceil().max(1.0) as usize;
        let dy = ((side as f64) / aspect.sqrt()).ceil().max(1.0) as usize;
        let dims = [dx.min(4096), dy.min(4096)];
        let cell = [span[0] / dims[0] as f64, span[1] / dims[1] as f64];
        let mut buckets = vec![Vec::new(); dims[0] * dims[1]];
        for (e, conn) in elements.iter().enumerate() {
            let pts = conn.map(|a| nodes[a]);
            let (elo, ehi) = bounding_box(&pts);
            let (i0, j0) = Self::cell_of_raw(lo, cell, dims, [elo[0] - 1e-9, elo[1] - 1e-9]);
            let (i1, j1) = Self::cell_of_raw(lo, cell, dims, [ehi[0] + 1e-9, ehi[1] + 1e-9]);
            for j in j0..=j1 {
                for i in i0..=i1 {
                    buckets[j * dims[0] + i].push(e);
                }
            }
        }
        Self {
            origin: lo,
            cell,
            dims,
            buckets,
        }
    }

    fn cell_of_raw(origin: Point, cell: Point, dims: [usize; 2], p: Point) -> (usize, usize) {
        let fi = ((p[0] - origin[0]) / cell[0]).floor();
        let fj = ((p[1] - origin[1]) / cell[1]).floor();
        let i = fi.clamp(0.0, (dims[0] - 1) as f64) as usize;
        let j = fj.clamp(0.0, (dims[1] - 1) as f64) as usize;
        (i, j)
    }

    fn candidates(&self, p: Point) -> &[usize] {
        let (i, j) = Self::cell_of_raw(self.origin, self.cell, self.dims, p);
        &self.buckets[j * self.dims[0] + i]
    }
}

fn bounding_box(points: &[Point]) -> (Point, Point) {
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for p in points {
        for k in 0..2 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    (lo, hi)
}

/// Bilinear quadrilateral mesh with precomputed edge topology.
#[derive(Debug, Clone)]
pub struct QuadMesh {
    nodes: Vec<Point>,
    elements: Vec<[usize; 4]>,
    interior_edges: Vec<InteriorEdge>,
    boundary_edges: Vec<BoundaryEdge>,
    layout: Option<StructuredLayout>,
    grid: ElementGrid,
}

impl QuadMesh {
    /// Builds a mesh from raw nodes and counter-clockwise connectivity and
    /// validates it (positive Jacobian at every 3x3 Gauss point, manifold edges).
    pub fn new(nodes: Vec<Point>, elements: Vec<[usize; 4]>) -> Result<Self> {
        if nodes.is_empty() || elements.is_empty() {
            return Err(Error::invalid("mesh needs at least one node and one element"));
        }
        for (e, conn) in elements.iter().enumerate() {
            if conn.iter().any(|&a| a >= nodes.len()) {
                return Err(Error::invalid(format!("element {e} references a missing node")));
            }
        }
        let grid = ElementGrid::build(&nodes, &elements);
        let mut mesh = Self {
            nodes,
            elements,
            interior_edges: Vec::new(),
            boundary_edges: Vec::new(),
            layout: None,
            grid,
        };
        let rule = QuadratureRule::gauss(3);
        for e in 0..mesh.elements.len() {
            for &q in &rule.points {
                let (_, det) = mesh.jacobian(e, q);
                if !(det > 0.0) {
                    return Err(Error::SingularElement { element: e, det });
                }
            }
        }
        mesh.build_edges()?;
        Ok(mesh)
    }

    /// `nx x ny` elements covering `[0, width] x [0, height]`.
    pub fn structured(width: f64, height: f64, nx: usize, ny: usize) -> Result<Self> {
        Self::structured_at([0.0, 0.0], width, height, nx, ny)
    }

    /// `nx x ny` elements covering `[ox, ox + width] x [oy, oy + height]`;
    /// `width` spans the axial (`x`) direction.
    pub fn structured_at(origin: Point, width: f64, height: f64, nx: usize, ny: usize) -> Result<Self> {
        if !(width > 0.0 && height > 0.0) || !width.is_finite() || !height.is_finite() {
            return Err(Error::invalid(format!(
                "mesh dimensions must be positive, got {width} x {height}"
            )));
        }
        if nx == 0 || ny == 0 {
            return Err(Error::invalid("mesh needs at least one element per direction"));
        }
        let mut nodes = Vec::with_capacity((nx + 1) * (ny + 1));
        for j in 0..=ny {
            for i in 0..=nx {
                nodes.push([
                    origin[0] + width * i as f64 / nx as f64,
                    origin[1] + height * j as f64 / ny as f64,
                ]);
            }
        }
        let node = |i: usize, j: usize| j * (nx + 1) + i;
        let mut elements = Vec::with_capacity(nx * ny);
        for j in 0..ny {
            for i in 0..nx {
                elements.push([node(i, j), node(i + 1, j), node(i + 1, j + 1), node(i, j + 1)]);
            }
        }
        let mut mesh = Self::new(nodes, elements)?;
        mesh.layout = Some(StructuredLayout {
            origin,
            width,
            height,
            nx,
            ny,
        });
        Ok(mesh)
    }

    fn build_edges(&mut self) -> Result<()> {
        let mut owners: HashMap<(usize, usize), Vec<(usize, usize)>> = HashMap::new();
        for (e, conn) in self.elements.iter().enumerate() {
            for k in 0..4 {
                let (a, b) = (conn[k], conn[(k + 1) % 4]);
                owners.entry((a.min(b), a.max(b))).or_default().push((e, k));
            }
        }
        let mut interior = Vec::new();
        let mut boundary = Vec::new();
        for ((a, b), list) in owners {
            match list.as_slice() {
                [(e, _)] => boundary.push(BoundaryEdge {
                    nodes: [a, b],
                    element: *e,
                }),
                [(e0, k0), (e1, k1)] => {
                    let ((left, kl), (right, kr)) = if e0 < e1 {
                        ((*e0, *k0), (*e1, *k1))
                    } else {
                        ((*e1, *k1), (*e0, *k0))
                    };
                    let pa = self.nodes[a];
                    let pb = self.nodes[b];
                    let t = [pb[0] - pa[0], pb[1] - pa[1]];
                    let length = t[0].hypot(t[1]);
                    let mut normal = [t[1] / length, -t[0] / length];
                    let cl = self.centroid(left);
                    let cr = self.centroid(right);
                    if normal[0] * (cr[0] - cl[0]) + normal[1] * (cr[1] - cl[1]) < 0.0 {
                        normal = [-normal[0], -normal[1]];
                    }
                    interior.push(InteriorEdge {
                        nodes: [a, b],
                        left,
                        right,
                        normal,
                        length,
                        left_local: EDGE_MIDPOINTS[kl],
                        right_local: EDGE_MIDPOINTS[kr],
                    });
                }
                _ => {
                    return Err(Error::invalid(format!(
                        "edge ({a}, {b}) is shared by {} elements",
                        list.len()
                    )))
                }
            }
        }
        interior.sort_by_key(|e| (e.left, e.right));
        boundary.sort_by_key(|e| (e.element, e.nodes));
        self.interior_edges = interior;
        self.boundary_edges = boundary;
        Ok(())
    }

    pub fn nodes(&self) -> &[Point] {
        &self.nodes
    }

    pub fn elements(&self) -> &[[usize; 4]] {
        &self.elements
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn n_elements(&self) -> usize {
        self.elements.len()
    }

    pub fn n_dofs(&self) -> usize {
        2 * self.nodes.len()
    }

    pub fn interior_edges(&self) -> &[InteriorEdge] {
        &self.interior_edges
    }

    pub fn boundary_edges(&self) -> &[BoundaryEdge] {
        &self.boundary_edges
    }

    pub fn layout(&self) -> Option<&StructuredLayout> {
        self.layout.as_ref()
    }

    pub fn bounding_box(&self) -> (Point, Point) {
        bounding_box(&self.nodes)
    }

    /// Nodes lying on at least one boundary edge, ascending.
    pub fn boundary_nodes(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.boundary_edges.iter().flat_map(|e| e.nodes).collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    #[inline]
    pub fn element_coords(&self, elem: usize) -> [Point; 4] {
        self.elements[elem].map(|a| self.nodes[a])
    }

    pub fn forward_map(&self, elem: usize, local: Point) -> Point {
        let n = shape_values(local);
        let xs = self.element_coords(elem);
        let mut p = [0.0; 2];
        for a in 0..4 {
            p[0] += n[a] * xs[a][0];
            p[1] += n[a] * xs[a][1];
        }
        p
    }

    pub fn centroid(&self, elem: usize) -> Point {
        self.forward_map(elem, [0.0, 0.0])
    }

    /// Jacobian `d(x, y) / d(xi, eta)` as `[[dx/dxi, dx/deta], [dy/dxi, dy/deta]]`
    /// and its determinant.
    #[inline]
    pub fn jacobian(&self, elem: usize, local: Point) -> ([[f64; 2]; 2], f64) {
        let dn = shape_local_derivatives(local);
        let xs = self.element_coords(elem);
        let mut j = [[0.0; 2]; 2];
        for a in 0..4 {
            for i in 0..2 {
                for k in 0..2 {
                    j[i][k] += xs[a][i] * dn[a][k];
                }
            }
        }
        let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
        (j, det)
    }

    /// Physical shape-function gradients `dN_a/d(x, y)` at a reference point,
    /// together with the Jacobian determinant.
    #[inline]
    pub fn shape_gradients_det(&self, elem: usize, local: Point) -> Result<([[f64; 2]; 4], f64)> {
        let (j, det) = self.jacobian(elem, local);
        if !(det > 0.0) {
            return Err(Error::SingularElement { element: elem, det });
        }
        let inv = [[j[1][1] / det, -j[0][1] / det], [-j[1][0] / det, j[0][0] / det]];
        let dn = shape_local_derivatives(local);
        let mut g = [[0.0; 2]; 4];
        for a in 0..4 {
            // dN/dx_i = sum_k dN/dxi_k * dxi_k/dx_i
            for i in 0..2 {
                g[a][i] = dn[a][0] * inv[0][i] + dn[a][1] * inv[1][i];
            }
        }
        Ok((g, det))
    }

    pub fn shape_gradients(&self, elem: usize, local: Point) -> Result<[[f64; 2]; 4]> {
        if elem >= self.elements.len() {
            return Err(Error::invalid(format!("element index {elem} out of range")));
        }
        self.shape_gradients_det(elem, local).map(|(g, _)| g)
    }

    pub fn element_area(&self, elem: usize) -> f64 {
        QuadratureRule::gauss(2)
            .iter()
            .map(|(q, w)| w * self.jacobian(elem, q).1)
            .sum()
    }

    pub fn total_area(&self) -> f64 {
        (0..self.n_elements()).map(|e| self.element_area(e)).sum()
    }

    /// Newton solve of the bilinear map of one element. Returns the reference
    /// coordinates if the iteration converged, regardless of containment.
    pub fn local_coords(&self, elem: usize, p: Point) -> Option<Point> {
        let mut xi = [0.0, 0.0];
        for _ in 0..INVERSE_MAP_MAX_ITERS {
            let x = self.forward_map(elem, xi);
            let r = [p[0] - x[0], p[1] - x[1]];
            let (j, det) = self.jacobian(elem, xi);
            if det.abs() < 1e-300 {
                return None;
            }
            let d = [
                (j[1][1] * r[0] - j[0][1] * r[1]) / det,
                (-j[1][0] * r[0] + j[0][0] * r[1]) / det,
            ];
            xi[0] += d[0];
            xi[1] += d[1];
            if !xi[0].is_finite() || !xi[1].is_finite() || xi[0].abs() > 1e6 || xi[1].abs() > 1e6 {
                return None;
            }
            if d[0].abs().max(d[1].abs()) < INVERSE_MAP_TOL {
                return Some(xi);
            }
        }
        None
    }

    /// Locates `p`: lowest-index containing element and reference coordinates,
    /// or `None` when the point lies outside every element.
    pub fn inverse_map(&self, p: Point) -> Option<(usize, Point)> {
        for &e in self.grid.candidates(p) {
            let xs = self.element_coords(e);
            let (lo, hi) = bounding_box(&xs);
            let pad = 1e-9 * (1.0 + (hi[0] - lo[0]).abs() + (hi[1] - lo[1]).abs());
            if p[0] < lo[0] - pad || p[0] > hi[0] + pad || p[1] < lo[1] - pad || p[1] > hi[1] + pad {
                continue;
            }
            if let Some(xi) = self.local_coords(e, p) {
                if xi[0].abs() <= 1.0 + CONTAINMENT_SLACK && xi[1].abs() <= 1.0 + CONTAINMENT_SLACK {
                    return Some((e, [xi[0].clamp(-1.0, 1.0), xi[1].clamp(-1.0, 1.0)]));
                }
            }
        }
        None
    }

    /// Like [`inverse_map`](Self::inverse_map), but points outside the mesh are
    /// projected onto the closest element boundary point first.
    pub fn locate_clamped(&self, p: Point) -> (usize, Point) {
        if let Some(hit) = self.inverse_map(p) {
            return hit;
        }
        let q = self.closest_boundary_point(p);
        if let Some(hit) = self.inverse_map(q) {
            return hit;
        }
        // Fall back to the element owning the nearest node.
        let nearest = (0..self.n_nodes())
            .min_by(|&a, &b| dist2(self.nodes[a], p).total_cmp(&dist2(self.nodes[b], p)))
            .unwrap();
        let (e, k) = self
            .elements
            .iter()
            .enumerate()
            .find_map(|(e, c)| c.iter().position(|&a| a == nearest).map(|k| (e, k)))
            .unwrap();
        (e, REFERENCE_CORNERS[k])
    }

    fn closest_boundary_point(&self, p: Point) -> Point {
        let mut best = (f64::INFINITY, p);
        for edge in &self.boundary_edges {
            let a = self.nodes[edge.nodes[0]];
            let b = self.nodes[edge.nodes[1]];
            let ab = [b[0] - a[0], b[1] - a[1]];
            let t = (((p[0] - a[0]) * ab[0] + (p[1] - a[1]) * ab[1]) / (ab[0] * ab[0] + ab[1] * ab[1])).clamp(0.0, 1.0);
            let q = [a[0] + t * ab[0], a[1] + t * ab[1]];
            let d = dist2(p, q);
            if d < best.0 {
                best = (d, q);
            }
        }
        best.1
    }

    /// Serializes in the `quadmesh v1` text format. Coordinates are written
    /// with 17 significant digits, so parsing reproduces them bit-exactly.
    pub fn to_text(&self) -> String {
        let mut s = String::with_capacity(48 * self.nodes.len() + 32 * self.elements.len());
        s.push_str("quadmesh v1\n");
        let _ = writeln!(s, "nodes {}", self.nodes.len());
        for p in &self.nodes {
            let _ = writeln!(s, "{:.16e} {:.16e}", p[0], p[1]);
        }
        let _ = writeln!(s, "elements {}", self.elements.len());
        for c in &self.elements {
            let _ = writeln!(s, "{} {} {} {}", c[0], c[1], c[2], c[3]);
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let ctx = "quadmesh";
        let mut lines = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'));
        if lines.next() != Some("quadmesh v1") {
            return Err(Error::format(ctx, "missing `quadmesh v1` header"));
        }
        let count = |line: Option<&str>, key: &str| -> Result<usize> {
            let line = line.ok_or_else(|| Error::format(ctx, format!("missing `{key}` line")))?;
            let mut it = line.split_whitespace();
            if it.next() != Some(key) {
                return Err(Error::format(ctx, format!("expected `{key} <count>`, got `{line}`")));
            }
            it.next()
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::format(ctx, format!("bad count in `{line}`")))
        };
        let n_nodes = count(lines.next(), "nodes")?;
        let mut nodes = Vec::with_capacity(n_nodes);
        for k in 0..n_nodes {
            let line = lines
                .next()
                .ok_or_else(|| Error::format(ctx, format!("missing node {k}")))?;
            let v: Vec<f64> = line
                .split_whitespace()
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::format(ctx, format!("node {k}: {e}")))?;
            if v.len() != 2 {
                return Err(Error::format(ctx, format!("node {k}: expected 2 coordinates")));
            }
            nodes.push([v[0], v[1]]);
        }
        let n_elems = count(lines.next(), "elements")?;
        let mut elements = Vec::with_capacity(n_elems);
        for k in 0..n_elems {
            let line = lines
                .next()
                .ok_or_else(|| Error::format(ctx, format!("missing element {k}")))?;
            let v: Vec<usize> = line
                .split_whitespace()
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::format(ctx, format!("element {k}: {e}")))?;
            if v.len() != 4 {
                return Err(Error::format(ctx, format!("element {k}: expected 4 node indices")));
            }
            elements.push([v[0], v[1], v[2], v[3]]);
        }
        Self::new(nodes, elements)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, self.to_text().as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = crate::io::read_to_string(path)?;
        Self::from_text(&text)
    }

    /// Content hash of the serialized mesh (16 hex digits).
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

#[inline]
fn dist2(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

/// Vector field sampled at mesh nodes, interleaved `[ux0, uy0, ux1, uy1, ...]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NodalField {
    values: Vec<f64>,
}

impl NodalField {
    pub fn zeros(n_nodes: usize) -> Self {
        Self {
            values: vec![0.0; 2 * n_nodes],
        }
    }

    pub fn from_values(values: Vec<f64>) -> Result<Self> {
        if !values.len().is_multiple_of(2) {
            return Err(Error::invalid("nodal array length must be even"));
        }
        Ok(Self { values })
    }

    pub fn from_fn(mesh: &QuadMesh, f: impl Fn(Point) -> [f64; 2]) -> Self {
        let mut values = Vec::with_capacity(mesh.n_dofs());
        for &p in mesh.nodes() {
            values.extend_from_slice(&f(p));
        }
        Self { values }
    }

    pub fn constant(n_nodes: usize, c: [f64; 2]) -> Self {
        Self {
            values: c.repeat(n_nodes),
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.values.len() / 2
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    #[inline]
    pub fn get(&self, node: usize) -> [f64; 2] {
        [self.values[2 * node], self.values[2 * node + 1]]
    }

    pub fn set(&mut self, node: usize, v: [f64; 2]) {
        self.values[2 * node] = v[0];
        self.values[2 * node + 1] = v[1];
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn component(&self, c: usize) -> Vec<f64> {
        self.values.iter().skip(c).step_by(2).copied().collect()
    }

    pub fn norm(&self) -> f64 {
        crate::sparse::norm2(&self.values)
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            values: self.values.iter().map(|v| v * s).collect(),
        }
    }

    pub fn add(&self, other: &NodalField) -> Self {
        assert_eq!(self.len(), other.len());
        Self {
            values: self.values.iter().zip(&other.values).map(|(a, b)| a + b).collect(),
        }
    }

    pub fn sub(&self, other: &NodalField) -> Self {
        assert_eq!(self.len(), other.len());
        Self {
            values: self.values.iter().zip(&other.values).map(|(a, b)| a - b).collect(),
        }
    }

    pub fn check_mesh(&self, mesh: &QuadMesh) -> Result<()> {
        if self.len() != mesh.n_dofs() {
            return Err(Error::invalid(format!(
                "nodal field has {} values, mesh needs {}",
                self.len(),
                mesh.n_dofs()
            )));
        }
        Ok(())
    }

    /// Field value at reference point `local` of `elem`.
    #[inline]
    pub fn eval_local(&self, mesh: &QuadMesh, elem: usize, local: Point) -> [f64; 2] {
        let n = shape_values(local);
        let conn = mesh.elements()[elem];
        let mut v = [0.0; 2];
        for a in 0..4 {
            let u = self.get(conn[a]);
            v[0] += n[a] * u[0];
            v[1] += n[a] * u[1];
        }
        v
    }

    /// Displacement gradient `du_i/dx_j` at a reference point.
    pub fn gradient_local(&self, mesh: &QuadMesh, elem: usize, local: Point) -> Result<[[f64; 2]; 2]> {
        let g = mesh.shape_gradients(elem, local)?;
        let conn = mesh.elements()[elem];
        let mut du = [[0.0; 2]; 2];
        for a in 0..4 {
            let u = self.get(conn[a]);
            for i in 0..2 {
                for j in 0..2 {
                    du[i][j] += u[i] * g[a][j];
                }
            }
        }
        Ok(du)
    }
}

/// Evaluates `field` at physical points; points outside the mesh yield
/// `outside_value`. Runs in parallel; output order matches `points`.
pub fn interpolate_field(
    mesh: &QuadMesh,
    field: &NodalField,
    points: &[Point],
    outside_value: [f64; 2],
) -> Vec<[f64; 2]> {
    points
        .par_iter()
        .map(|&p| match mesh.inverse_map(p) {
            Some((e, xi)) => field.eval_local(mesh, e, xi),
            None => outside_value,
        })
        .collect()
}

/// Evaluates `field` at points, projecting outside points onto the mesh.
pub fn interpolate_field_clamped(mesh: &QuadMesh, field: &NodalField, points: &[Point]) -> Vec<[f64; 2]> {
    points
        .par_iter()
        .map(|&p| {
            let (e, xi) = mesh.locate_clamped(p);
            field.eval_local(mesh, e, xi)
        })
        .collect()
}

/// Transfers a field from `source` to the nodes of `target` by interpolation.
pub fn transfer_field(source: &QuadMesh, field: &NodalField, target: &QuadMesh) -> NodalField {
    let vals = interpolate_field_clamped(source, field, target.nodes());
    NodalField {
        values: vals.into_iter().flatten().collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn skewed_quad() -> QuadMesh {
        QuadMesh::new(
            vec![[0.0, 0.0], [2.0, 0.3], [2.4, 1.9], [-0.2, 1.2]],
            vec![[0, 1, 2, 3]],
        )
        .unwrap()
    }

    fn skewed_mesh(nx: usize, ny: usize, seed: u64) -> QuadMesh {
        let base = QuadMesh::structured(10.0, 8.0, nx, ny).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hx = 10.0 / nx as f64;
        let hy = 8.0 / ny as f64;
        let nodes: Vec<Point> = base
            .nodes()
            .iter()
            .map(|&p| {
                let interior = p[0] > 1e-9 && p[0] < 10.0 - 1e-9 && p[1] > 1e-9 && p[1] < 8.0 - 1e-9;
                if interior {
                    [
                        p[0] + rng.random_range(-0.25..0.25) * hx,
                        p[1] + rng.random_range(-0.25..0.25) * hy,
                    ]
                } else {
                    p
                }
            })
            .collect();
        QuadMesh::new(nodes, base.elements().to_vec()).unwrap()
    }

    #[test]
    fn single_element_mesh() {
        let m = QuadMesh::structured(1.0, 1.0, 1, 1).unwrap();
        assert_eq!(m.n_elements(), 1);
        assert_eq!(m.n_nodes(), 4);
        assert!(m.interior_edges().is_empty());
        assert_eq!(m.boundary_edges().len(), 4);
    }

    #[test]
    fn two_element_strip() {
        let m = QuadMesh::structured(2.0, 1.0, 2, 1).unwrap();
        assert_eq!(m.n_elements(), 2);
        assert_eq!(m.n_nodes(), 6);
        let edges = m.interior_edges();
        assert_eq!(edges.len(), 1);
        let e = edges[0];
        assert_eq!(e.length, 1.0);
        assert_eq!((e.left, e.right), (0, 1));
        assert_eq!(e.normal, [1.0, 0.0]);
        assert_eq!(e.left_local, [1.0, 0.0]);
        assert_eq!(e.right_local, [-1.0, 0.0]);
    }

    #[test]
    fn three_by_three_edge_count() {
        let m = QuadMesh::structured(10.0, 10.0, 3, 3).unwrap();
        assert_eq!(m.n_elements(), 9);
        assert_eq!(m.interior_edges().len(), 12);
    }

    #[test]
    fn non_positive_dimensions_rejected() {
        assert!(matches!(
            QuadMesh::structured(0.0, 1.0, 1, 1),
            Err(Error::InvalidArgument(_))
        ));
        assert!(matches!(
            QuadMesh::structured(1.0, -1.0, 1, 1),
            Err(Error::InvalidArgument(_))
        ));
        assert!(matches!(
            QuadMesh::structured(1.0, 1.0, 0, 1),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn inverted_element_rejected() {
        let err = QuadMesh::new(vec![[0.0, 0.0], [0.0, 1.0], [1.0, 1.0], [1.0, 0.0]], vec![[0, 1, 2, 3]]).unwrap_err();
        assert!(matches!(err, Error::SingularElement { element: 0, .. }));
    }

    #[test]
    fn edge_invariants_on_skewed_mesh() {
        let m = skewed_mesh(6, 5, 3);
        let mut count = vec![0usize; m.n_elements()];
        for e in m.interior_edges() {
            assert!(e.left < e.right);
            assert!((e.normal[0].hypot(e.normal[1]) - 1.0).abs() < 1e-14);
            let cl = m.centroid(e.left);
            let cr = m.centroid(e.right);
            assert!(e.normal[0] * (cr[0] - cl[0]) + e.normal[1] * (cr[1] - cl[1]) > 0.0);
            // the recorded local midpoints map to the same physical point
            let pl = m.forward_map(e.left, e.left_local);
            let pr = m.forward_map(e.right, e.right_local);
            assert!(dist2(pl, pr) < 1e-24);
            count[e.left] += 1;
            count[e.right] += 1;
        }
        for b in m.boundary_edges() {
            count[b.element] += 1;
        }
        assert!(count.iter().all(|&c| c == 4));
        assert_eq!(m.interior_edges().len(), 6 * 4 + 5 * 5);
    }

    #[test]
    fn unit_square_reproduces_x_gradient() {
        let m = QuadMesh::structured(1.0, 1.0, 1, 1).unwrap();
        let g = m.shape_gradients(0, [0.0, 0.0]).unwrap();
        let xs = m.element_coords(0);
        let dx: [f64; 2] = [0, 1].map(|k| (0..4).map(|a| xs[a][0] * g[a][k]).sum());
        assert_eq!(dx, [1.0, 0.0]);
    }

    #[test]
    fn shape_gradients_match_finite_differences_on_skewed_quad() {
        // d N_a / dx = (d N_a/d xi) (d xi / dx); the oracle inverts a
        // central-difference Jacobian of the isoparametric map.
        let m = skewed_quad();
        let local = [0.3, -0.5];
        let h = 1e-6;
        let fd_col = |k: usize| {
            let mut lp = local;
            let mut lm = local;
            lp[k] += h;
            lm[k] -= h;
            let p = m.forward_map(0, lp);
            let q = m.forward_map(0, lm);
            [(p[0] - q[0]) / (2.0 * h), (p[1] - q[1]) / (2.0 * h)]
        };
        let c0 = fd_col(0);
        let c1 = fd_col(1);
        let det = c0[0] * c1[1] - c1[0] * c0[1];
        let inv = [[c1[1] / det, -c1[0] / det], [-c0[1] / det, c0[0] / det]];
        let fd_dn = |a: usize, k: usize| {
            let mut lp = local;
            let mut lm = local;
            lp[k] += h;
            lm[k] -= h;
            (shape_values(lp)[a] - shape_values(lm)[a]) / (2.0 * h)
        };
        let g = m.shape_gradients(0, local).unwrap();
        for a in 0..4 {
            for i in 0..2 {
                let oracle = fd_dn(a, 0) * inv[0][i] + fd_dn(a, 1) * inv[1][i];
                let rel = (g[a][i] - oracle).abs() / oracle.abs().max(1e-3);
                assert!(rel < 1e-8, "a={a} i={i} {} vs {oracle}", g[a][i]);
            }
        }
    }

    #[test]
    fn partition_of_unity_and_linear_reproduction_at_quadrature_points() {
        let m = skewed_mesh(5, 4, 11);
        let rule = QuadratureRule::gauss(3);
        for e in 0..m.n_elements() {
            let xs = m.element_coords(e);
            for &q in &rule.points {
                let n = shape_values(q);
                assert!((n.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                let g = m.shape_gradients(e, q).unwrap();
                for k in 0..2 {
                    assert!(g.iter().map(|r| r[k]).sum::<f64>().abs() < 1e-12);
                }
                // f = 2x - 3y + 1
                let f: Vec<f64> = xs.iter().map(|p| 2.0 * p[0] - 3.0 * p[1] + 1.0).collect();
                let df: [f64; 2] = [0, 1].map(|k| (0..4).map(|a| f[a] * g[a][k]).sum());
                assert!((df[0] - 2.0).abs() < 1e-12 && (df[1] + 3.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn quadrature_weights_and_exactness() {
        for n in 1..=6 {
            let r = QuadratureRule::gauss(n);
            assert!((r.weights.iter().sum::<f64>() - 4.0).abs() < 1e-13);
        }
        // bi-quintic monomials: int_{-1}^{1} x^k dx = 2/(k+1) for even k, 0 odd
        let r = QuadratureRule::gauss(3);
        let exact1d = |k: i32| if k % 2 == 0 { 2.0 / (k as f64 + 1.0) } else { 0.0 };
        for p in 0..=5 {
            for q in 0..=5 {
                let got: f64 = r.iter().map(|(x, w)| w * x[0].powi(p) * x[1].powi(q)).sum();
                assert!((got - exact1d(p) * exact1d(q)).abs() < 1e-14, "x^{p} y^{q}");
            }
        }
    }

    #[test]
    fn structured_area_sums_to_rectangle() {
        for &(w, h, nx, ny) in &[(10.0, 7.0, 3, 5), (0.3, 12.5, 7, 2), (1.0, 1.0, 1, 1)] {
            let m = QuadMesh::structured(w, h, nx, ny).unwrap();
            let area: f64 = (0..m.n_elements())
                .map(|e| {
                    QuadratureRule::gauss(3)
                        .iter()
                        .map(|(q, wt)| wt * m.jacobian(e, q).1)
                        .sum::<f64>()
                })
                .sum();
            assert!(((area - w * h) / (w * h)).abs() < 1e-10);
        }
    }

    #[test]
    fn centroid_and_node_inverse_map() {
        let m = QuadMesh::structured(4.0, 3.0, 4, 3).unwrap();
        for e in 0..m.n_elements() {
            let (found, xi) = m.inverse_map(m.centroid(e)).unwrap();
            assert_eq!(found, e);
            assert!(xi[0].abs() < 1e-9 && xi[1].abs() < 1e-9);
        }
        // node 0 belongs only to element 0; the far corner node to the last element
        let (e, xi) = m.inverse_map(m.nodes()[0]).unwrap();
        assert_eq!((e, xi), (0, [-1.0, -1.0]));
        let last = m.n_nodes() - 1;
        let (e, xi) = m.inverse_map(m.nodes()[last]).unwrap();
        assert_eq!(e, m.n_elements() - 1);
        assert!((xi[0] - 1.0).abs() < 1e-9 && (xi[1] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn shared_edge_goes_to_lowest_index() {
        let m = QuadMesh::structured(2.0, 1.0, 2, 1).unwrap();
        let (e, xi) = m.inverse_map([1.0, 0.5]).unwrap();
        assert_eq!(e, 0);
        assert!((xi[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn outside_points_are_none() {
        let m = QuadMesh::structured(2.0, 1.0, 2, 1).unwrap();
        assert!(m.inverse_map([-0.1, 0.5]).is_none());
        assert!(m.inverse_map([1.0, 1.0 + 1e-6]).is_none());
        assert!(m.inverse_map([50.0, -3.0]).is_none());
    }

    #[test]
    fn inverse_map_round_trip_on_skewed_mesh() {
        let m = skewed_mesh(8, 7, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..1000 {
            let e = rng.random_range(0..m.n_elements());
            let xi = [rng.random_range(-0.999..0.999), rng.random_range(-0.999..0.999)];
            let p = m.forward_map(e, xi);
            let (found, local) = m.inverse_map(p).unwrap();
            let q = m.forward_map(found, local);
            assert!(dist2(p, q).sqrt() < 1e-9);
        }
    }

    #[test]
    fn interpolation_reproduces_constant_and_linear_fields() {
        let m = skewed_mesh(5, 5, 2);
        let c = NodalField::constant(m.n_nodes(), [0.25, -1.5]);
        let lin = NodalField::from_fn(&m, |p| [p[0], 0.0]);
        let pts = [[1.3, 2.2], [9.7, 0.4], [5.0, 5.0]];
        for v in interpolate_field(&m, &c, &pts, [0.0, 0.0]) {
            assert!((v[0] - 0.25).abs() < 1e-14 && (v[1] + 1.5).abs() < 1e-14);
        }
        for (v, p) in interpolate_field(&m, &lin, &pts, [0.0, 0.0]).iter().zip(pts) {
            assert!((v[0] - p[0]).abs() < 1e-12);
        }
        let out = interpolate_field(&m, &c, &[[-1.0, 3.0]], [0.0, 0.0]);
        assert_eq!(out, vec![[0.0, 0.0]]);
    }

    #[test]
    fn clamped_location_for_outside_points() {
        let m = QuadMesh::structured(2.0, 2.0, 2, 2).unwrap();
        let f = NodalField::from_fn(&m, |p| [p[0], p[1]]);
        let v = interpolate_field_clamped(&m, &f, &[[3.0, 1.0], [-1.0, -1.0]]);
        assert!((v[0][0] - 2.0).abs() < 1e-12 && (v[0][1] - 1.0).abs() < 1e-12);
        assert!(v[1][0].abs() < 1e-12 && v[1][1].abs() < 1e-12);
    }

    #[test]
    fn text_format_round_trips_bit_exactly() {
        let m = skewed_mesh(4, 3, 21);
        let back = QuadMesh::from_text(&m.to_text()).unwrap();
        assert_eq!(back.nodes(), m.nodes());
        assert_eq!(back.elements(), m.elements());
        assert_eq!(back.hash(), m.hash());
        assert!(QuadMesh::from_text("quadmesh v2\n").is_err());
    }
}
