//! Small dense helpers shared by the map construction and compression code.

use nalgebra::{Cholesky, DMatrix, Dyn, LU};

use crate::error::{HddError, Result};

/// Factorization of an interface block: Cholesky, or pivoted LU when the
/// Cholesky factorization breaks down.
pub enum InterfaceFactor {
    Cholesky(Cholesky<f64, Dyn>),
    Lu(LU<f64, Dyn, Dyn>),
}

impl InterfaceFactor {
    pub fn new(m: &DMatrix<f64>, node: usize) -> Result<Self> {
        if let Some(c) = Cholesky::new(m.clone()) {
            return Ok(Self::Cholesky(c));
        }
        log::warn!(
            "interface block at node {node} ({}x{}) is not numerically SPD, using pivoted LU",
            m.nrows(),
            m.ncols()
        );
        let lu = LU::new(m.clone());
        if !lu.is_invertible() {
            return Err(HddError::Numerical {
                node,
                msg: "interface block is singular".into(),
            });
        }
        Ok(Self::Lu(lu))
    }

    pub fn is_cholesky(&self) -> bool {
        matches!(self, Self::Cholesky(_))
    }

    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            Self::Cholesky(c) => c.solve(b),
            Self::Lu(lu) => lu.solve(b).expect("invertibility checked at construction"),
        }
    }
}

/// Singular values of `m`, descending.
pub fn singular_values(m: &DMatrix<f64>) -> Vec<f64> {
    sorted_svd(m).1
}

/// Thin SVD with singular triplets sorted by descending singular value:
/// returns `(U, σ, V)` with `m ≈ U diag(σ) Vᵀ`.
///
/// One-sided Jacobi on the triangular factor of a QR decomposition. Columns of
/// `U` belonging to zero singular values are zero.
pub fn sorted_svd(m: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>, DMatrix<f64>) {
    let (p, q) = m.shape();
    if p < q {
        let (u, s, v) = sorted_svd(&m.transpose());
        return (v, s, u);
    }
    if q == 0 {
        return (DMatrix::zeros(p, 0), Vec::new(), DMatrix::zeros(0, 0));
    }
    let qr = m.clone().qr();
    let (w, s, v) = jacobi_square(qr.r());
    (qr.q() * w, s, v)
}

/// Hestenes one-sided Jacobi SVD of a square matrix.
fn jacobi_square(mut a: DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>, DMatrix<f64>) {
    let n = a.ncols();
    let mut v = DMatrix::<f64>::identity(n, n);
    for _sweep in 0..80 {
        let mut rotated = false;
        for i in 0..n {
            for j in (i + 1)..n {
                let alpha = a.column(i).norm_squared();
                let beta = a.column(j).norm_squared();
                let gamma = a.column(i).dot(&a.column(j));
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_columns(&mut a, i, j, c, s);
                rotate_columns(&mut v, i, j, c, s);
            }
        }
        if !rotated {
            break;
        }
    }
    let norms: Vec<f64> = (0..n).map(|j| a.column(j).norm()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| norms[y].total_cmp(&norms[x]));
    let mut us = DMatrix::zeros(n, n);
    let mut vs = DMatrix::zeros(n, n);
    let mut s = Vec::with_capacity(n);
    for (dst, &src) in order.iter().enumerate() {
        if norms[src] > 0.0 {
            us.set_column(dst, &(a.column(src) / norms[src]));
        }
        vs.set_column(dst, &v.column(src));
        s.push(norms[src]);
    }
    (us, s, vs)
}

fn rotate_columns(m: &mut DMatrix<f64>, i: usize, j: usize, c: f64, s: f64) {
    for r in 0..m.nrows() {
        let (x, y) = (m[(r, i)], m[(r, j)]);
        m[(r, i)] = c * x - s * y;
        m[(r, j)] = s * x + c * y;
    }
}

pub fn select(m: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| m[(rows[i], cols[j])])
}

#[cfg(test)]
pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0, |a, &b| a.max(b.abs()))
}
