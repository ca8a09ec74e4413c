//! P1 finite elements: per-triangle stiffness and vertex-rule load matrices,
//! coefficient fields, and global assembly.

use nalgebra::{DMatrix, Matrix3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{HddError, Result};
use crate::mesh::{IndexSet, Mesh};

/// Piecewise-constant coefficient κ, one value per triangle.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientField {
    values: Vec<f64>,
}

impl CoefficientField {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some((t, v)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !(v.is_finite() && **v > 0.0))
        {
            return Err(HddError::Config(format!(
                "kappa[{t}] = {v} is not positive and finite"
            )));
        }
        Ok(Self { values })
    }

    pub fn constant(mesh: &Mesh, value: f64) -> Result<Self> {
        Self::new(vec![value; mesh.triangles().len()])
    }

    /// Evaluates `f` at each triangle centroid.
    pub fn from_fn<F: Fn(f64, f64) -> f64>(mesh: &Mesh, f: F) -> Result<Self> {
        let values = mesh
            .triangles()
            .iter()
            .map(|t| {
                let c = centroid(mesh, t);
                f(c[0], c[1])
            })
            .collect();
        Self::new(values)
    }

    /// `blocks × blocks` checkerboard alternating between `values[0]` and `values[1]`.
    pub fn checkerboard(mesh: &Mesh, blocks: usize, values: [f64; 2]) -> Result<Self> {
        if blocks == 0 {
            return Err(HddError::Config(
                "checkerboard needs at least one block".into(),
            ));
        }
        Self::from_fn(mesh, |x, y| {
            let bi = ((x * blocks as f64) as usize).min(blocks - 1);
            let bj = ((y * blocks as f64) as usize).min(blocks - 1);
            values[(bi + bj) % 2]
        })
    }

    /// Independent log-uniform values in `[lo, hi]` per triangle.
    pub fn random_log_uniform(mesh: &Mesh, lo: f64, hi: f64, seed: u64) -> Result<Self> {
        if !(lo > 0.0 && hi >= lo) {
            return Err(HddError::Config(format!(
                "invalid kappa range [{lo}, {hi}]"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b) = (lo.ln(), hi.ln());
        let values = (0..mesh.triangles().len())
            .map(|_| {
                if a == b {
                    lo
                } else {
                    rng.gen_range(a..=b).exp()
                }
            })
            .collect();
        Self::new(values)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, triangle: usize) -> f64 {
        self.values[triangle]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn scaled(&self, c: f64) -> Result<Self> {
        Self::new(self.values.iter().map(|v| v * c).collect())
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

fn centroid(mesh: &Mesh, t: &[usize; 3]) -> [f64; 2] {
    let p: Vec<[f64; 2]> = t.iter().map(|&v| mesh.coord(v)).collect();
    [
        (p[0][0] + p[1][0] + p[2][0]) / 3.0,
        (p[0][1] + p[1][1] + p[2][1]) / 3.0,
    ]
}

fn triangle_area(p: &[[f64; 2]; 3]) -> f64 {
    0.5 * ((p[1][0] - p[0][0]) * (p[2][1] - p[0][1]) - (p[2][0] - p[0][0]) * (p[1][1] - p[0][1]))
}

/// Element stiffness `A_ij = ∫ κ ∇b_i·∇b_j` for constant κ on the triangle.
pub fn local_stiffness(p: &[[f64; 2]; 3], kappa: f64) -> Result<Matrix3<f64>> {
    let area = triangle_area(p);
    if area.abs() <= f64::EPSILON * 1e-3 {
        return Err(HddError::Geometry(format!("degenerate triangle {p:?}")));
    }
    if !(kappa > 0.0 && kappa.is_finite()) {
        return Err(HddError::Config(format!("kappa = {kappa} is not positive")));
    }
    // ∇b_i = (y_j - y_k, x_k - x_j) / (2A) for (i, j, k) cyclic
    let mut grad = [[0.0; 2]; 3];
    for i in 0..3 {
        let (j, k) = ((i + 1) % 3, (i + 2) % 3);
        grad[i] = [
            (p[j][1] - p[k][1]) / (2.0 * area),
            (p[k][0] - p[j][0]) / (2.0 * area),
        ];
    }
    let scale = kappa * area.abs();
    Ok(Matrix3::from_fn(|i, j| {
        scale * (grad[i][0] * grad[j][0] + grad[i][1] * grad[j][1])
    }))
}

/// Vertex-rule load matrix `(|t|/3)·I`, so that `F·c` approximates `∫ f b_i`.
pub fn local_load_matrix(p: &[[f64; 2]; 3]) -> Result<Matrix3<f64>> {
    let area = triangle_area(p);
    if area.abs() <= f64::EPSILON * 1e-3 {
        return Err(HddError::Geometry(format!("degenerate triangle {p:?}")));
    }
    Ok(Matrix3::identity() * (area.abs() / 3.0))
}

pub fn triangle_coords(mesh: &Mesh, t: usize) -> [[f64; 2]; 3] {
    let v = mesh.triangles()[t];
    [mesh.coord(v[0]), mesh.coord(v[1]), mesh.coord(v[2])]
}

/// Assembles stiffness and load matrices of the given triangles over a local
/// node numbering (`nodes` must contain every vertex).
pub fn assemble_local(
    mesh: &Mesh,
    kappa: &CoefficientField,
    triangles: &[usize],
    nodes: &IndexSet,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let n = nodes.len();
    let mut a = DMatrix::zeros(n, n);
    let mut f = DMatrix::zeros(n, n);
    for &t in triangles {
        let p = triangle_coords(mesh, t);
        let ka = local_stiffness(&p, kappa.get(t))?;
        let fa = local_load_matrix(&p)?;
        let loc: Vec<usize> = mesh.triangles()[t]
            .iter()
            .map(|&v| {
                nodes
                    .position(v)
                    .ok_or_else(|| HddError::Internal(format!("vertex {v} missing from local set")))
            })
            .collect::<Result<_>>()?;
        for r in 0..3 {
            for c in 0..3 {
                a[(loc[r], loc[c])] += ka[(r, c)];
                f[(loc[r], loc[c])] += fa[(r, c)];
            }
        }
    }
    Ok((a, f))
}

/// Compressed sparse row matrix, square.
#[derive(Debug, Clone, PartialEq)]
pub struct Csr {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl Csr {
    /// Builds from triplets, summing duplicates.
    pub fn from_triplets(n: usize, mut trip: Vec<(usize, usize, f64)>) -> Self {
        trip.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut row_ptr = vec![0usize; n + 1];
        let mut cols = Vec::with_capacity(trip.len());
        let mut vals: Vec<f64> = Vec::with_capacity(trip.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in trip {
            if last == Some((r, c)) {
                *vals.last_mut().unwrap() += v;
            } else {
                cols.push(c);
                vals.push(v);
                row_ptr[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for r in 0..n {
            row_ptr[r + 1] += row_ptr[r];
        }
        Self {
            n,
            row_ptr,
            cols,
            vals,
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.row_ptr[r]..self.row_ptr[r + 1];
        self.cols[range.clone()]
            .iter()
            .copied()
            .zip(self.vals[range].iter().copied())
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.row(r).find(|&(cc, _)| cc == c).map_or(0.0, |(_, v)| v)
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|r| self.row(r).map(|(c, v)| v * x[c]).sum())
            .collect()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n, self.n);
        for r in 0..self.n {
            for (c, v) in self.row(r) {
                m[(r, c)] = v;
            }
        }
        m
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            vals: self.vals.iter().map(|v| v * s).collect(),
            ..self.clone()
        }
    }
}

/// Global stiffness `A` (no boundary treatment) and lumped load matrix `F`.
#[derive(Debug, Clone)]
pub struct GlobalSystem {
    pub stiffness: Csr,
    pub load: Csr,
}

impl GlobalSystem {
    /// Load vector `F·f` for nodal right-hand-side values.
    pub fn load_vector(&self, f: &[f64]) -> Vec<f64> {
        self.load.matvec(f)
    }
}

pub fn assemble_global(mesh: &Mesh, kappa: &CoefficientField) -> Result<GlobalSystem> {
    if kappa.len() != mesh.triangles().len() {
        return Err(HddError::Config(format!(
            "coefficient field has {} values for {} triangles",
            kappa.len(),
            mesh.triangles().len()
        )));
    }
    let n = mesh.node_count();
    let mut ta = Vec::with_capacity(9 * mesh.triangles().len());
    let mut tf = Vec::with_capacity(3 * mesh.triangles().len());
    for (t, tri) in mesh.triangles().iter().enumerate() {
        let p = triangle_coords(mesh, t);
        let ka = local_stiffness(&p, kappa.get(t))?;
        let fa = local_load_matrix(&p)?;
        for r in 0..3 {
            for c in 0..3 {
                ta.push((tri[r], tri[c], ka[(r, c)]));
                if fa[(r, c)] != 0.0 {
                    tf.push((tri[r], tri[c], fa[(r, c)]));
                }
            }
        }
    }
    Ok(GlobalSystem {
        stiffness: Csr::from_triplets(n, ta),
        load: Csr::from_triplets(n, tf),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::build_mesh;

    /// Midpoint-rule quadrature of ∇b_i·∇b_j from finite-difference gradients
    /// of the barycentric basis, independent of the closed-form gradient.
    fn quadrature_stiffness(p: &[[f64; 2]; 3]) -> Matrix3<f64> {
        let area = triangle_area(p);
        let basis = |i: usize, x: f64, y: f64| -> f64 {
            let (j, k) = ((i + 1) % 3, (i + 2) % 3);
            let q = [[x, y], p[j], p[k]];
            triangle_area(&q) / area
        };
        let eps = 1e-6;
        let grad = |i: usize, x: f64, y: f64| {
            [
                (basis(i, x + eps, y) - basis(i, x - eps, y)) / (2.0 * eps),
                (basis(i, x, y + eps) - basis(i, x, y - eps)) / (2.0 * eps),
            ]
        };
        let mut m = Matrix3::zeros();
        // three edge-midpoint quadrature points, weight |t|/3 each
        for e in 0..3 {
            let (a, b) = (p[e], p[(e + 1) % 3]);
            let (x, y) = (0.5 * (a[0] + b[0]), 0.5 * (a[1] + b[1]));
            for i in 0..3 {
                for j in 0..3 {
                    let (gi, gj) = (grad(i, x, y), grad(j, x, y));
                    m[(i, j)] += area / 3.0 * (gi[0] * gj[0] + gi[1] * gj[1]);
                }
            }
        }
        m
    }

    #[test]
    fn right_triangle_stiffness() {
        let h = 0.25;
        // right-angle vertex first
        let p = [[0.0, 0.0], [h, 0.0], [0.0, h]];
        let a = local_stiffness(&p, 1.0).unwrap();
        let expected = Matrix3::new(2.0, -1.0, -1.0, -1.0, 1.0, 0.0, -1.0, 0.0, 1.0) * 0.5;
        assert!((a - expected).abs().max() < 1e-14);
        let q = quadrature_stiffness(&p);
        assert!((q - expected).abs().max() < 1e-8);
        let a3 = local_stiffness(&p, 3.0).unwrap();
        assert!((a3 - expected * 3.0).abs().max() < 1e-14);
    }

    #[test]
    fn stiffness_rows_sum_to_zero_and_match_quadrature() {
        let p = [[0.1, 0.2], [0.9, 0.35], [0.4, 0.8]];
        let a = local_stiffness(&p, 2.5).unwrap();
        for r in 0..3 {
            assert!(a.row(r).sum().abs() < 1e-13);
        }
        assert!((a - a.transpose()).abs().max() < 1e-15);
        assert!((a - quadrature_stiffness(&p) * 2.5).abs().max() < 1e-7);
    }

    #[test]
    fn degenerate_triangle_rejected() {
        let p = [[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]];
        assert!(matches!(
            local_stiffness(&p, 1.0),
            Err(HddError::Geometry(_))
        ));
        assert!(matches!(local_load_matrix(&p), Err(HddError::Geometry(_))));
    }

    #[test]
    fn load_matrix_vertex_rule() {
        let p = [[0.0, 0.0], [0.5, 0.0], [0.5, 0.5]];
        let f = local_load_matrix(&p).unwrap();
        assert!((f - Matrix3::identity() * (0.125 / 3.0)).abs().max() < 1e-16);
        let c = f * nalgebra::Vector3::new(1.0, 1.0, 1.0);
        assert!(c.iter().all(|&v| (v - 0.125 / 3.0).abs() < 1e-16));
    }

    #[test]
    fn lumped_load_equals_support_area_over_three() {
        let mesh = build_mesh(2).unwrap();
        let sys = assemble_global(&mesh, &CoefficientField::constant(&mesh, 1.0).unwrap()).unwrap();
        let c = sys.load_vector(&vec![1.0; mesh.node_count()]);
        let mut support = vec![0.0; mesh.node_count()];
        for (t, tri) in mesh.triangles().iter().enumerate() {
            for &v in tri {
                support[v] += mesh.triangle_areas()[t];
            }
        }
        for (a, b) in c.iter().zip(&support) {
            assert!((a - b / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn global_level_one() {
        let mesh = build_mesh(1).unwrap();
        let sys = assemble_global(&mesh, &CoefficientField::constant(&mesh, 1.0).unwrap()).unwrap();
        assert!((sys.stiffness.get(4, 4) - 4.0).abs() < 1e-14);
        let ones = vec![1.0; 9];
        assert!(sys.stiffness.matvec(&ones).iter().all(|v| v.abs() < 1e-14));
        let d = sys.stiffness.to_dense();
        assert!((&d - d.transpose()).abs().max() < 1e-15);
        assert!(sys.load_vector(&[0.0; 9]).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn global_scales_with_kappa() {
        let mesh = build_mesh(2).unwrap();
        let k = CoefficientField::random_log_uniform(&mesh, 0.1, 10.0, 3).unwrap();
        let a = assemble_global(&mesh, &k).unwrap().stiffness.to_dense();
        let b = assemble_global(&mesh, &k.scaled(2.5).unwrap())
            .unwrap()
            .stiffness
            .to_dense();
        assert!((a * 2.5 - b).abs().max() < 1e-13);
    }

    #[test]
    fn global_is_positive_semidefinite() {
        let mesh = build_mesh(2).unwrap();
        let k = CoefficientField::random_log_uniform(&mesh, 0.1, 10.0, 5).unwrap();
        let a = assemble_global(&mesh, &k).unwrap().stiffness.to_dense();
        let ev = a.symmetric_eigenvalues();
        assert!(ev.iter().all(|&e| e > -1e-12));
        assert_eq!(ev.iter().filter(|&&e| e.abs() < 1e-10).count(), 1);
    }

    #[test]
    fn invalid_kappa_rejected() {
        assert!(CoefficientField::new(vec![1.0, 0.0]).is_err());
        assert!(CoefficientField::new(vec![1.0, f64::NAN]).is_err());
    }
}
