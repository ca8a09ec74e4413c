//! Brute-force reference solutions on the global system.
//!
//! Nothing here touches the decomposition tree or the map code. Small systems
//! are solved with dense LU, larger ones with a banded Cholesky factorization
//! of the reduced Dirichlet system.

use nalgebra::{DMatrix, DVector};

use crate::error::{HddError, Result};
use crate::fem::{self, CoefficientField, GlobalSystem};
use crate::mesh::{IndexSet, Mesh, Rect};

/// Systems up to this many unknowns are factored densely.
pub const DENSE_LIMIT: usize = 4000;

/// Global system with the Dirichlet nodes eliminated.
#[derive(Debug, Clone)]
pub struct DenseSystem {
    global: GlobalSystem,
    dirichlet: IndexSet,
    free: Vec<usize>,
    /// Position of each mesh node among the free nodes.
    free_pos: Vec<Option<usize>>,
}

impl DenseSystem {
    pub fn new(mesh: &Mesh, kappa: &CoefficientField) -> Result<Self> {
        let global = fem::assemble_global(mesh, kappa)?;
        let dirichlet = mesh.dirichlet_nodes();
        let free: Vec<usize> = (0..mesh.node_count())
            .filter(|&i| !dirichlet.contains(i))
            .collect();
        let mut free_pos = vec![None; mesh.node_count()];
        for (p, &i) in free.iter().enumerate() {
            free_pos[i] = Some(p);
        }
        Ok(Self {
            global,
            dirichlet,
            free,
            free_pos,
        })
    }

    pub fn unknowns(&self) -> usize {
        self.free.len()
    }

    /// Right-hand side `F f − A_{IB} g` over the free nodes.
    pub fn rhs(&self, f: &[f64], g: &[f64]) -> DVector<f64> {
        let load = self.global.load_vector(f);
        let mut g_nodal = vec![0.0; load.len()];
        for (k, i) in self.dirichlet.iter().enumerate() {
            g_nodal[i] = g[k];
        }
        DVector::from_iterator(
            self.free.len(),
            self.free.iter().map(|&i| {
                let coupling: f64 = self
                    .global
                    .stiffness
                    .row(i)
                    .filter(|&(c, _)| self.free_pos[c].is_none())
                    .map(|(c, v)| v * g_nodal[c])
                    .sum();
                load[i] - coupling
            }),
        )
    }

    fn reduced_dense(&self) -> DMatrix<f64> {
        let n = self.free.len();
        let mut a = DMatrix::zeros(n, n);
        for (p, &i) in self.free.iter().enumerate() {
            for (c, v) in self.global.stiffness.row(i) {
                if let Some(q) = self.free_pos[c] {
                    a[(p, q)] = v;
                }
            }
        }
        a
    }

    fn reduced_banded(&self) -> Banded {
        let n = self.free.len();
        let mut bw = 0;
        for (p, &i) in self.free.iter().enumerate() {
            for (c, _) in self.global.stiffness.row(i) {
                if let Some(q) = self.free_pos[c] {
                    bw = bw.max(p.abs_diff(q));
                }
            }
        }
        let mut b = Banded::zeros(n, bw);
        for (p, &i) in self.free.iter().enumerate() {
            for (c, v) in self.global.stiffness.row(i) {
                if let Some(q) = self.free_pos[c] {
                    if q <= p {
                        b.set(p, q, v);
                    }
                }
            }
        }
        b
    }

    /// Solution over all mesh nodes; `g` over `∂Ω` in ascending node order.
    pub fn solve(&self, f: &[f64], g: &[f64]) -> Result<Vec<f64>> {
        let n_nodes = self.free_pos.len();
        if f.len() != n_nodes || g.len() != self.dirichlet.len() {
            return Err(HddError::Usage(format!(
                "oracle data sizes f={} g={} for {} nodes, {} boundary nodes",
                f.len(),
                g.len(),
                n_nodes,
                self.dirichlet.len()
            )));
        }
        let rhs = self.rhs(f, g);
        let x = if self.free.len() <= DENSE_LIMIT {
            self.reduced_dense()
                .lu()
                .solve(&rhs)
                .ok_or_else(|| HddError::Numerical {
                    node: 0,
                    msg: "reduced system is singular".into(),
                })?
        } else {
            let mut b = self.reduced_banded();
            b.factor()?;
            b.solve(&rhs)
        };
        let mut u = vec![0.0; n_nodes];
        for (k, i) in self.dirichlet.iter().enumerate() {
            u[i] = g[k];
        }
        for (p, &i) in self.free.iter().enumerate() {
            u[i] = x[p];
        }
        Ok(u)
    }
}

/// Symmetric band matrix, lower band stored row-wise: `(i, j)` with
/// `i − bw ≤ j ≤ i` at `data[i][j + bw − i]`.
#[derive(Debug, Clone)]
struct Banded {
    n: usize,
    bw: usize,
    data: Vec<f64>,
}

impl Banded {
    fn zeros(n: usize, bw: usize) -> Self {
        Self {
            n,
            bw,
            data: vec![0.0; n * (bw + 1)],
        }
    }

    fn idx(&self, i: usize, j: usize) -> usize {
        i * (self.bw + 1) + j + self.bw - i
    }

    fn get(&self, i: usize, j: usize) -> f64 {
        if j > i || i - j > self.bw {
            0.0
        } else {
            self.data[self.idx(i, j)]
        }
    }

    fn set(&mut self, i: usize, j: usize, v: f64) {
        let k = self.idx(i, j);
        self.data[k] = v;
    }

    /// In-place Cholesky `L Lᵀ`.
    fn factor(&mut self) -> Result<()> {
        for i in 0..self.n {
            let j0 = i.saturating_sub(self.bw);
            for j in j0..=i {
                let k0 = j0.max(j.saturating_sub(self.bw));
                let mut s = self.get(i, j);
                for k in k0..j {
                    s -= self.get(i, k) * self.get(j, k);
                }
                if i == j {
                    if s <= 0.0 {
                        return Err(HddError::Numerical {
                            node: i,
                            msg: "banded Cholesky pivot not positive".into(),
                        });
                    }
                    self.set(i, i, s.sqrt());
                } else {
                    let d = self.get(j, j);
                    self.set(i, j, s / d);
                }
            }
        }
        Ok(())
    }

    fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut y = b.clone();
        for i in 0..self.n {
            let mut s = y[i];
            for k in i.saturating_sub(self.bw)..i {
                s -= self.get(i, k) * y[k];
            }
            y[i] = s / self.get(i, i);
        }
        for i in (0..self.n).rev() {
            let mut s = y[i];
            for k in (i + 1)..self.n.min(i + self.bw + 1) {
                s -= self.get(k, i) * y[k];
            }
            y[i] = s / self.get(i, i);
        }
        y
    }
}

/// Galerkin solution over all nodes; `g` over `∂Ω` in ascending node order.
pub fn direct_solve(
    mesh: &Mesh,
    kappa: &CoefficientField,
    f: &[f64],
    g: &[f64],
) -> Result<Vec<f64>> {
    DenseSystem::new(mesh, kappa)?.solve(f, g)
}

/// Schur complement of the global stiffness onto `keep`, rows and columns in
/// ascending node order.
pub fn direct_schur(
    mesh: &Mesh,
    kappa: &CoefficientField,
    keep: &IndexSet,
) -> Result<DMatrix<f64>> {
    let n = mesh.node_count();
    if keep.iter().any(|i| i >= n) {
        return Err(HddError::Usage(
            "keep set has indices outside the mesh".into(),
        ));
    }
    let a = fem::assemble_global(mesh, kappa)?.stiffness.to_dense();
    let elim: Vec<usize> = (0..n).filter(|&i| !keep.contains(i)).collect();
    let k = keep.as_slice();
    let pick =
        |r: &[usize], c: &[usize]| DMatrix::from_fn(r.len(), c.len(), |i, j| a[(r[i], c[j])]);
    let akk = pick(k, k);
    if elim.is_empty() {
        return Ok(akk);
    }
    let ake = pick(k, &elim);
    let aek = pick(&elim, k);
    let aee = pick(&elim, &elim);
    let x = aee.lu().solve(&aek).ok_or_else(|| HddError::Numerical {
        node: 0,
        msg: "eliminated block is singular".into(),
    })?;
    Ok(akk - ake * x)
}

/// Area-weighted mean over the triangles inside `region`, each triangle
/// contributing `|t|/3 (u₁ + u₂ + u₃)`.
pub fn direct_mean(mesh: &Mesh, u: &[f64], region: &Rect) -> Result<f64> {
    let g = mesh.grid_rect(region)?;
    let tris = mesh.region_triangles_grid(&g);
    let area: f64 = tris.iter().map(|&t| mesh.triangle_areas()[t]).sum();
    if area <= 0.0 {
        return Err(HddError::Geometry(format!("region {region} has zero area")));
    }
    let s: f64 = tris
        .iter()
        .map(|&t| {
            mesh.triangle_areas()[t] / 3.0 * mesh.triangles()[t].iter().map(|&v| u[v]).sum::<f64>()
        })
        .sum();
    Ok(s / area)
}

/// Boundary values of a nodal vector in ascending boundary-node order.
pub fn boundary_of(mesh: &Mesh, nodal: &[f64]) -> Vec<f64> {
    mesh.dirichlet_nodes().iter().map(|i| nodal[i]).collect()
}
