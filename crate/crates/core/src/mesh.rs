//! Structured triangulation of the unit square and index-set bookkeeping.
//!
//! Nodes are numbered lexicographically by `(x2, x1)`: node `(i, j)` with
//! `x1 = i*h`, `x2 = j*h` has global index `j*m + i`. Every grid cell is split
//! along the same diagonal, so every grid line is a union of triangle edges and
//! any grid-aligned rectangle is a union of triangles.

use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::Path;

use crate::error::{HddError, Result};

pub const MIN_LEVEL: u32 = 1;
pub const MAX_LEVEL: u32 = 8;

/// Sorted set of distinct global node indices.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct IndexSet(Vec<usize>);

impl IndexSet {
    pub fn new() -> Self {
        Self(Vec::new())
    }

    /// Builds a set from arbitrary indices (sorted and deduplicated).
    pub fn from_unsorted(mut v: Vec<usize>) -> Self {
        v.sort_unstable();
        v.dedup();
        Self(v)
    }

    /// Wraps an already sorted, duplicate-free vector.
    pub fn from_sorted(v: Vec<usize>) -> Result<Self> {
        if v.windows(2).any(|w| w[0] >= w[1]) {
            return Err(HddError::Internal(
                "index set not strictly ascending".into(),
            ));
        }
        Ok(Self(v))
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().copied()
    }

    pub fn contains(&self, i: usize) -> bool {
        self.0.binary_search(&i).is_ok()
    }

    /// Local position of global index `i`, if present.
    pub fn position(&self, i: usize) -> Option<usize> {
        self.0.binary_search(&i).ok()
    }

    pub fn union(&self, other: &IndexSet) -> IndexSet {
        let mut out = Vec::with_capacity(self.len() + other.len());
        let (a, b) = (&self.0, &other.0);
        let (mut i, mut j) = (0, 0);
        while i < a.len() && j < b.len() {
            match a[i].cmp(&b[j]) {
                std::cmp::Ordering::Less => {
                    out.push(a[i]);
                    i += 1;
                }
                std::cmp::Ordering::Greater => {
                    out.push(b[j]);
                    j += 1;
                }
                std::cmp::Ordering::Equal => {
                    out.push(a[i]);
                    i += 1;
                    j += 1;
                }
            }
        }
        out.extend_from_slice(&a[i..]);
        out.extend_from_slice(&b[j..]);
        IndexSet(out)
    }

    pub fn intersection(&self, other: &IndexSet) -> IndexSet {
        IndexSet(
            self.0
                .iter()
                .copied()
                .filter(|&i| other.contains(i))
                .collect(),
        )
    }

    pub fn difference(&self, other: &IndexSet) -> IndexSet {
        IndexSet(
            self.0
                .iter()
                .copied()
                .filter(|&i| !other.contains(i))
                .collect(),
        )
    }

    pub fn is_subset(&self, other: &IndexSet) -> bool {
        self.0.iter().all(|&i| other.contains(i))
    }

    /// Positions of every element of `self` inside `superset`.
    pub fn positions_in(&self, superset: &IndexSet) -> Result<Vec<usize>> {
        self.0
            .iter()
            .map(|&i| {
                superset
                    .position(i)
                    .ok_or_else(|| HddError::Internal(format!("index {i} missing from superset")))
            })
            .collect()
    }
}

impl FromIterator<usize> for IndexSet {
    fn from_iter<T: IntoIterator<Item = usize>>(iter: T) -> Self {
        IndexSet::from_unsorted(iter.into_iter().collect())
    }
}

/// Axis-aligned rectangle in physical coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect {
    pub x0: f64,
    pub x1: f64,
    pub y0: f64,
    pub y1: f64,
}

impl Rect {
    pub const UNIT: Rect = Rect {
        x0: 0.0,
        x1: 1.0,
        y0: 0.0,
        y1: 1.0,
    };

    pub fn new(x0: f64, x1: f64, y0: f64, y1: f64) -> Self {
        Self { x0, x1, y0, y1 }
    }

    pub fn area(&self) -> f64 {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }
}

impl std::fmt::Display for Rect {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "[{},{}]x[{},{}]", self.x0, self.x1, self.y0, self.y1)
    }
}

/// Rectangle in grid units: node columns `i0..=i1`, node rows `j0..=j1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GridRect {
    pub i0: usize,
    pub i1: usize,
    pub j0: usize,
    pub j1: usize,
}

impl GridRect {
    pub fn width(&self) -> usize {
        self.i1 - self.i0
    }

    pub fn height(&self) -> usize {
        self.j1 - self.j0
    }

    pub fn cell_count(&self) -> usize {
        self.width() * self.height()
    }

    pub fn contains_node(&self, i: usize, j: usize) -> bool {
        (self.i0..=self.i1).contains(&i) && (self.j0..=self.j1).contains(&j)
    }

    pub fn on_perimeter(&self, i: usize, j: usize) -> bool {
        self.contains_node(i, j) && (i == self.i0 || i == self.i1 || j == self.j0 || j == self.j1)
    }
}

/// Structured right-triangle mesh of the unit square with `2^level` cells per side.
#[derive(Debug, Clone)]
pub struct Mesh {
    level: u32,
    m: usize,
    h: f64,
    coords: Vec<[f64; 2]>,
    triangles: Vec<[usize; 3]>,
    areas: Vec<f64>,
}

/// Builds the structured mesh of the given refinement level.
pub fn build_mesh(level: u32) -> Result<Mesh> {
    Mesh::new(level)
}

impl Mesh {
    pub fn new(level: u32) -> Result<Self> {
        if !(MIN_LEVEL..=MAX_LEVEL).contains(&level) {
            return Err(HddError::Config(format!(
                "mesh level {level} outside [{MIN_LEVEL}, {MAX_LEVEL}]"
            )));
        }
        let cells = 1usize << level;
        let m = cells + 1;
        let h = 1.0 / cells as f64;
        let mut coords = Vec::with_capacity(m * m);
        for j in 0..m {
            for i in 0..m {
                coords.push([i as f64 * h, j as f64 * h]);
            }
        }
        let mut triangles = Vec::with_capacity(2 * cells * cells);
        for j in 0..cells {
            for i in 0..cells {
                let a = j * m + i;
                let b = a + 1;
                let c = a + m + 1;
                let d = a + m;
                // diagonal a-c for every cell, both triangles counter-clockwise
                triangles.push([a, b, c]);
                triangles.push([a, c, d]);
            }
        }
        let areas = triangles.iter().map(|t| signed_area(&coords, t)).collect();
        Ok(Self {
            level,
            m,
            h,
            coords,
            triangles,
            areas,
        })
    }

    pub fn level(&self) -> u32 {
        self.level
    }

    pub fn nodes_per_side(&self) -> usize {
        self.m
    }

    pub fn cells_per_side(&self) -> usize {
        self.m - 1
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn node_count(&self) -> usize {
        self.coords.len()
    }

    pub fn coords(&self) -> &[[f64; 2]] {
        &self.coords
    }

    pub fn coord(&self, node: usize) -> [f64; 2] {
        self.coords[node]
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn triangle_areas(&self) -> &[f64] {
        &self.areas
    }

    pub fn node_index(&self, i: usize, j: usize) -> usize {
        j * self.m + i
    }

    /// Grid position `(i, j)` of a node.
    pub fn grid_pos(&self, node: usize) -> (usize, usize) {
        (node % self.m, node / self.m)
    }

    /// The two triangles of grid cell `(ci, cj)` (lower-left corner node `(ci, cj)`).
    pub fn cell_triangles(&self, ci: usize, cj: usize) -> [usize; 2] {
        let c = cj * self.cells_per_side() + ci;
        [2 * c, 2 * c + 1]
    }

    pub fn full_grid_rect(&self) -> GridRect {
        GridRect {
            i0: 0,
            i1: self.m - 1,
            j0: 0,
            j1: self.m - 1,
        }
    }

    /// Converts a physical rectangle to grid units; its corners must be mesh nodes.
    pub fn grid_rect(&self, r: &Rect) -> Result<GridRect> {
        let snap = |v: f64| -> Result<usize> {
            let s = v / self.h;
            let k = s.round();
            if (s - k).abs() > 1e-9 || k < 0.0 || k as usize >= self.m {
                return Err(HddError::Geometry(format!(
                    "coordinate {v} is not a grid line of the level-{} mesh",
                    self.level
                )));
            }
            Ok(k as usize)
        };
        let g = GridRect {
            i0: snap(r.x0)?,
            i1: snap(r.x1)?,
            j0: snap(r.y0)?,
            j1: snap(r.y1)?,
        };
        if g.i0 >= g.i1 || g.j0 >= g.j1 {
            return Err(HddError::Geometry(format!("degenerate rectangle {r}")));
        }
        Ok(g)
    }

    pub fn rect_of(&self, g: &GridRect) -> Rect {
        Rect::new(
            g.i0 as f64 * self.h,
            g.i1 as f64 * self.h,
            g.j0 as f64 * self.h,
            g.j1 as f64 * self.h,
        )
    }

    pub fn region_nodes_grid(&self, g: &GridRect) -> IndexSet {
        let mut v = Vec::with_capacity((g.width() + 1) * (g.height() + 1));
        for j in g.j0..=g.j1 {
            for i in g.i0..=g.i1 {
                v.push(self.node_index(i, j));
            }
        }
        IndexSet(v)
    }

    pub fn boundary_nodes_grid(&self, g: &GridRect) -> IndexSet {
        let mut v = Vec::new();
        for j in g.j0..=g.j1 {
            for i in g.i0..=g.i1 {
                if g.on_perimeter(i, j) {
                    v.push(self.node_index(i, j));
                }
            }
        }
        IndexSet(v)
    }

    pub fn interior_nodes_grid(&self, g: &GridRect) -> IndexSet {
        let mut v = Vec::new();
        for j in g.j0 + 1..g.j1 {
            for i in g.i0 + 1..g.i1 {
                v.push(self.node_index(i, j));
            }
        }
        IndexSet(v)
    }

    /// All nodes inside the closed rectangle.
    pub fn region_nodes(&self, r: &Rect) -> Result<IndexSet> {
        Ok(self.region_nodes_grid(&self.grid_rect(r)?))
    }

    /// Nodes on the perimeter of the rectangle.
    pub fn boundary_nodes(&self, r: &Rect) -> Result<IndexSet> {
        Ok(self.boundary_nodes_grid(&self.grid_rect(r)?))
    }

    /// Nodes strictly inside the rectangle.
    pub fn interior_nodes(&self, r: &Rect) -> Result<IndexSet> {
        Ok(self.interior_nodes_grid(&self.grid_rect(r)?))
    }

    /// Triangles covering the rectangle, in global order.
    pub fn region_triangles_grid(&self, g: &GridRect) -> Vec<usize> {
        let mut v = Vec::with_capacity(2 * g.cell_count());
        for cj in g.j0..g.j1 {
            for ci in g.i0..g.i1 {
                v.extend(self.cell_triangles(ci, cj));
            }
        }
        v.sort_unstable();
        v
    }

    /// Nodes on the boundary of the unit square.
    pub fn dirichlet_nodes(&self) -> IndexSet {
        self.boundary_nodes_grid(&self.full_grid_rect())
    }

    /// Evaluates a function at every node.
    pub fn nodal<F: Fn(f64, f64) -> f64>(&self, f: F) -> Vec<f64> {
        self.coords.iter().map(|p| f(p[0], p[1])).collect()
    }

    /// Plain-text dump: header line, `index x1 x2` per node, `v0 v1 v2` per triangle.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "nodes {} triangles {}",
            self.node_count(),
            self.triangles.len()
        );
        for (k, p) in self.coords.iter().enumerate() {
            let _ = writeln!(s, "{k} {:.17e} {:.17e}", p[0], p[1]);
        }
        for t in &self.triangles {
            let _ = writeln!(s, "{} {} {}", t[0], t[1], t[2]);
        }
        s
    }

    pub fn write_dump(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.dump().as_bytes())?;
        Ok(())
    }
}

/// Parsed form of [`Mesh::dump`], for cross-checking dumps from other tools.
#[derive(Debug, Clone, PartialEq)]
pub struct MeshDump {
    pub coords: Vec<[f64; 2]>,
    pub triangles: Vec<[usize; 3]>,
}

pub fn read_mesh_dump<R: BufRead>(reader: R) -> Result<MeshDump> {
    let mut lines = reader.lines();
    let header = lines
        .next()
        .ok_or_else(|| HddError::Parse("empty mesh dump".into()))??;
    let tok: Vec<&str> = header.split_whitespace().collect();
    if tok.len() != 4 || tok[0] != "nodes" || tok[2] != "triangles" {
        return Err(HddError::Parse(format!("bad mesh dump header: {header}")));
    }
    let parse_usize = |s: &str| {
        s.parse::<usize>()
            .map_err(|e| HddError::Parse(format!("{s}: {e}")))
    };
    let parse_f64 = |s: &str| {
        s.parse::<f64>()
            .map_err(|e| HddError::Parse(format!("{s}: {e}")))
    };
    let (n, nt) = (parse_usize(tok[1])?, parse_usize(tok[3])?);
    let mut coords = Vec::with_capacity(n);
    let mut triangles = Vec::with_capacity(nt);
    for k in 0..n + nt {
        let line = lines
            .next()
            .ok_or_else(|| HddError::Parse("truncated mesh dump".into()))??;
        let t: Vec<&str> = line.split_whitespace().collect();
        if t.len() != 3 {
            return Err(HddError::Parse(format!("bad line: {line}")));
        }
        if k < n {
            if parse_usize(t[0])? != k {
                return Err(HddError::Parse(format!("node index out of order: {line}")));
            }
            coords.push([parse_f64(t[1])?, parse_f64(t[2])?]);
        } else {
            triangles.push([parse_usize(t[0])?, parse_usize(t[1])?, parse_usize(t[2])?]);
        }
    }
    Ok(MeshDump { coords, triangles })
}

fn signed_area(coords: &[[f64; 2]], t: &[usize; 3]) -> f64 {
    let [a, b, c] = [coords[t[0]], coords[t[1]], coords[t[2]]];
    0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]))
}

/// Bilinear prolongation of nodal values from a coarser structured mesh.
pub fn prolong_bilinear(coarse_level: u32, coarse: &[f64], fine: &Mesh) -> Result<Vec<f64>> {
    if coarse_level > fine.level() || coarse_level < MIN_LEVEL {
        return Err(HddError::Config(format!(
            "coarse level {coarse_level} must lie in [{MIN_LEVEL}, {}]",
            fine.level()
        )));
    }
    let mc = (1usize << coarse_level) + 1;
    if coarse.len() != mc * mc {
        return Err(HddError::Config(format!(
            "coarse vector has {} values, expected {}",
            coarse.len(),
            mc * mc
        )));
    }
    let ratio = 1usize << (fine.level() - coarse_level);
    let mf = fine.nodes_per_side();
    let mut out = vec![0.0; mf * mf];
    for j in 0..mf {
        let (cj, rj) = (j / ratio, j % ratio);
        for i in 0..mf {
            let (ci, ri) = (i / ratio, i % ratio);
            let v = if ri == 0 && rj == 0 {
                coarse[cj * mc + ci]
            } else {
                let s = ri as f64 / ratio as f64;
                let t = rj as f64 / ratio as f64;
                let ci1 = (ci + 1).min(mc - 1);
                let cj1 = (cj + 1).min(mc - 1);
                let v00 = coarse[cj * mc + ci];
                let v10 = coarse[cj * mc + ci1];
                let v01 = coarse[cj1 * mc + ci];
                let v11 = coarse[cj1 * mc + ci1];
                (1.0 - s) * (1.0 - t) * v00
                    + s * (1.0 - t) * v10
                    + (1.0 - s) * t * v01
                    + s * t * v11
            };
            out[j * mf + i] = v;
        }
    }
    Ok(out)
}
