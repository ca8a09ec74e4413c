//! Rank-truncated block storage for the solution maps.
//!
//! Rows and columns are clustered by recursive geometric bisection. A block of
//! two clusters whose bounding boxes do not overlap is admissible (weak
//! admissibility) and is stored as a truncated SVD `A·Bᵀ` when that is smaller
//! than the dense block. Everything else is subdivided down to `n_min` and
//! stored densely.
//!
//! This is a deliberately simplified hierarchical format: `add`, `multiply` and
//! `schur` produce correct, re-truncated results but work block by block on
//! dense intermediates instead of using recursive H-arithmetic.

use std::fmt::Write as _;
use std::ops::Range;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{HddError, Result};
use crate::linalg::{self, InterfaceFactor};

/// Truncation parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToleranceSpec {
    /// Relative Frobenius truncation tolerance per admissible block.
    pub eps: f64,
    /// Hard rank cap; blocks that need more are kept dense.
    pub k_max: usize,
    /// Cluster size below which blocks are stored densely.
    pub n_min: usize,
}

impl Default for ToleranceSpec {
    fn default() -> Self {
        Self {
            eps: 1e-6,
            k_max: 64,
            n_min: 32,
        }
    }
}

impl ToleranceSpec {
    pub fn with_eps(eps: f64) -> Self {
        Self {
            eps,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps >= 0.0 && self.eps.is_finite()) || self.n_min == 0 {
            return Err(HddError::Config(format!("invalid tolerance spec {self:?}")));
        }
        Ok(())
    }
}

/// Low-rank block `left · rightᵀ` with `left: p×k`, `right: q×k`.
///
/// Produced by truncated SVD, so the columns of `left` are orthogonal with
/// norms equal to the singular values in descending order.
#[derive(Debug, Clone, PartialEq)]
pub struct RkBlock {
    pub left: DMatrix<f64>,
    pub right: DMatrix<f64>,
}

impl RkBlock {
    pub fn zero(p: usize, q: usize) -> Self {
        Self {
            left: DMatrix::zeros(p, 0),
            right: DMatrix::zeros(q, 0),
        }
    }

    pub fn rank(&self) -> usize {
        self.left.ncols()
    }

    pub fn nrows(&self) -> usize {
        self.left.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.right.nrows()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        if self.rank() == 0 {
            return DMatrix::zeros(self.nrows(), self.ncols());
        }
        &self.left * self.right.transpose()
    }

    pub fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        if self.rank() == 0 {
            return DVector::zeros(self.nrows());
        }
        &self.left * (self.right.transpose() * x)
    }

    pub fn apply_transpose(&self, x: &DVector<f64>) -> DVector<f64> {
        if self.rank() == 0 {
            return DVector::zeros(self.ncols());
        }
        &self.right * (self.left.transpose() * x)
    }

    pub fn stored_values(&self) -> usize {
        self.rank() * (self.nrows() + self.ncols())
    }

    /// Frobenius norm without forming the dense block.
    pub fn norm(&self) -> f64 {
        let g = (self.left.transpose() * &self.left)
            .component_mul(&(self.right.transpose() * &self.right));
        g.sum().max(0.0).sqrt()
    }

    /// Re-truncates the factored form to an absolute Frobenius error `tol` and
    /// at most `k_max` terms.
    pub fn truncate(&self, tol: f64, k_max: usize) -> RkBlock {
        let (p, q) = (self.nrows(), self.ncols());
        if self.rank() == 0 {
            return self.clone();
        }
        let qa = self.left.clone().qr();
        let qb = self.right.clone().qr();
        let core = qa.r() * qb.r().transpose();
        let (u, s, v) = linalg::sorted_svd(&core);
        let k = truncation_rank_abs(&s, tol).min(k_max);
        if k == 0 {
            return RkBlock::zero(p, q);
        }
        let mut left = qa.q() * u.columns(0, k);
        for j in 0..k {
            left.column_mut(j).scale_mut(s[j]);
        }
        let right = qb.q() * v.columns(0, k);
        RkBlock { left, right }
    }
}

/// Smallest `k` with `sqrt(Σ_{i≥k} σ_i²) ≤ eps·‖σ‖₂`.
fn truncation_rank(s: &[f64], eps: f64) -> usize {
    let total: f64 = s.iter().map(|v| v * v).sum();
    truncation_rank_abs(s, eps * total.sqrt())
}

/// Smallest `k` with `sqrt(Σ_{i≥k} σ_i²) ≤ tol`.
fn truncation_rank_abs(s: &[f64], tol: f64) -> usize {
    if s.iter().all(|&v| v == 0.0) {
        return 0;
    }
    let bound = tol * tol;
    let mut tail = 0.0;
    let mut k = s.len();
    while k > 0 {
        let next = tail + s[k - 1] * s[k - 1];
        if next > bound {
            break;
        }
        tail = next;
        k -= 1;
    }
    k
}

/// A stored block: dense or low-rank.
#[derive(Debug, Clone, PartialEq)]
pub enum Compressed {
    Dense(DMatrix<f64>),
    LowRank(RkBlock),
}

impl Compressed {
    pub fn to_dense(&self) -> DMatrix<f64> {
        match self {
            Compressed::Dense(m) => m.clone(),
            Compressed::LowRank(r) => r.to_dense(),
        }
    }

    pub fn rank(&self) -> Option<usize> {
        match self {
            Compressed::Dense(_) => None,
            Compressed::LowRank(r) => Some(r.rank()),
        }
    }

    pub fn stored_values(&self) -> usize {
        match self {
            Compressed::Dense(m) => m.len(),
            Compressed::LowRank(r) => r.stored_values(),
        }
    }

    fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        match self {
            Compressed::Dense(m) => m * x,
            Compressed::LowRank(r) => r.apply(x),
        }
    }

    fn apply_transpose(&self, x: &DVector<f64>) -> DVector<f64> {
        match self {
            Compressed::Dense(m) => m.tr_mul(x),
            Compressed::LowRank(r) => r.apply_transpose(x),
        }
    }
}

/// Truncated-SVD compression of a single block.
///
/// Returns a low-rank block with `‖M − ABᵀ‖_F ≤ eps·‖M‖_F` and rank at most
/// `k_max`, or the dense block when no such factorization is smaller.
pub fn compress(m: &DMatrix<f64>, spec: &ToleranceSpec) -> Compressed {
    let (p, q) = m.shape();
    if p == 0 || q == 0 {
        return Compressed::Dense(m.clone());
    }
    if m.iter().all(|&v| v == 0.0) {
        return Compressed::LowRank(RkBlock::zero(p, q));
    }
    let (u, s, v) = linalg::sorted_svd(m);
    let k = truncation_rank(&s, spec.eps);
    if k > spec.k_max || k * (p + q) >= p * q {
        return Compressed::Dense(m.clone());
    }
    let mut left = u.columns(0, k).into_owned();
    for j in 0..k {
        left.column_mut(j).scale_mut(s[j]);
    }
    Compressed::LowRank(RkBlock {
        left,
        right: v.columns(0, k).into_owned(),
    })
}

/// Axis-aligned bounding box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub min: [f64; 2],
    pub max: [f64; 2],
}

impl BBox {
    fn of(points: &[[f64; 2]], idx: &[usize]) -> Self {
        let mut b = BBox {
            min: [f64::INFINITY; 2],
            max: [f64::NEG_INFINITY; 2],
        };
        for &i in idx {
            for d in 0..2 {
                b.min[d] = b.min[d].min(points[i][d]);
                b.max[d] = b.max[d].max(points[i][d]);
            }
        }
        b
    }

    /// True when the boxes are separated along some axis, touching allowed.
    ///
    /// Two boxes collapsed onto the same coordinate line do not count as
    /// separated along that axis.
    pub fn disjoint(&self, other: &BBox) -> bool {
        const TOL: f64 = 1e-12;
        (0..2).any(|d| {
            let flat = self.max[d] - self.min[d] <= TOL && other.max[d] - other.min[d] <= TOL;
            let apart = self.max[d] <= other.min[d] + TOL || other.max[d] <= self.min[d] + TOL;
            apart && !(flat && (self.min[d] - other.min[d]).abs() <= TOL)
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cluster {
    pub range: Range<usize>,
    pub bbox: BBox,
    pub children: Option<[usize; 2]>,
}

/// Binary cluster tree over a point set; `perm[k]` is the original index of
/// the point at cluster position `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterTree {
    pub perm: Vec<usize>,
    pub clusters: Vec<Cluster>,
}

impl ClusterTree {
    /// Recursive bisection at the median of the longer bounding-box axis.
    pub fn build(points: &[[f64; 2]], n_min: usize) -> Self {
        let mut perm: Vec<usize> = (0..points.len()).collect();
        let mut clusters = Vec::new();
        build_cluster(
            points,
            &mut perm,
            0..points.len(),
            n_min.max(1),
            &mut clusters,
        );
        Self { perm, clusters }
    }

    pub fn len(&self) -> usize {
        self.perm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perm.is_empty()
    }
}

fn build_cluster(
    points: &[[f64; 2]],
    perm: &mut [usize],
    range: Range<usize>,
    n_min: usize,
    out: &mut Vec<Cluster>,
) -> usize {
    let id = out.len();
    let bbox = BBox::of(points, &perm[range.clone()]);
    out.push(Cluster {
        range: range.clone(),
        bbox,
        children: None,
    });
    if range.len() <= n_min {
        return id;
    }
    let ext = [bbox.max[0] - bbox.min[0], bbox.max[1] - bbox.min[1]];
    let axis = if ext[0] >= ext[1] { 0 } else { 1 };
    perm[range.clone()].sort_by(|&a, &b| {
        points[a][axis]
            .total_cmp(&points[b][axis])
            .then(points[a][1 - axis].total_cmp(&points[b][1 - axis]))
            .then(a.cmp(&b))
    });
    let mid = range.start + range.len() / 2;
    let c1 = build_cluster(points, perm, range.start..mid, n_min, out);
    let c2 = build_cluster(points, perm, mid..range.end, n_min, out);
    out[id].children = Some([c1, c2]);
    id
}

/// One leaf of a block partition, ranges in cluster (permuted) positions.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockLayout {
    pub rows: Range<usize>,
    pub cols: Range<usize>,
    pub admissible: bool,
}

/// Block partition of `row_tree × col_tree` under weak admissibility.
pub fn block_partition(row_tree: &ClusterTree, col_tree: &ClusterTree) -> Vec<BlockLayout> {
    let mut out = Vec::new();
    if row_tree.is_empty() || col_tree.is_empty() {
        return out;
    }
    partition_rec(row_tree, col_tree, 0, 0, &mut out);
    out
}

fn partition_rec(
    rt: &ClusterTree,
    ct: &ClusterTree,
    r: usize,
    c: usize,
    out: &mut Vec<BlockLayout>,
) {
    let (rc, cc) = (&rt.clusters[r], &ct.clusters[c]);
    if rc.bbox.disjoint(&cc.bbox) {
        out.push(BlockLayout {
            rows: rc.range.clone(),
            cols: cc.range.clone(),
            admissible: true,
        });
        return;
    }
    match (rc.children, cc.children) {
        (None, None) => out.push(BlockLayout {
            rows: rc.range.clone(),
            cols: cc.range.clone(),
            admissible: false,
        }),
        (None, Some([c1, c2])) => {
            partition_rec(rt, ct, r, c1, out);
            partition_rec(rt, ct, r, c2, out);
        }
        (Some([r1, r2]), None) => {
            partition_rec(rt, ct, r1, c, out);
            partition_rec(rt, ct, r2, c, out);
        }
        (Some([r1, r2]), Some([c1, c2])) => {
            for rr in [r1, r2] {
                for cc2 in [c1, c2] {
                    partition_rec(rt, ct, rr, cc2, out);
                }
            }
        }
    }
}

/// Singular values of a dense matrix, descending.
pub fn singular_values(m: &DMatrix<f64>) -> Vec<f64> {
    linalg::singular_values(m)
}

/// The admissible block of `m` with the most entries under the partition
/// built from the given points, rows and columns in original order.
pub fn largest_admissible_block(
    m: &DMatrix<f64>,
    row_pts: &[[f64; 2]],
    col_pts: &[[f64; 2]],
    n_min: usize,
) -> Option<DMatrix<f64>> {
    let rt = ClusterTree::build(row_pts, n_min);
    let ct = ClusterTree::build(col_pts, n_min);
    let best = block_partition(&rt, &ct)
        .into_iter()
        .filter(|b| b.admissible)
        .max_by_key(|b| b.rows.len() * b.cols.len())?;
    let mut rows = rt.perm[best.rows].to_vec();
    let mut cols = ct.perm[best.cols].to_vec();
    rows.sort_unstable();
    cols.sort_unstable();
    Some(linalg::select(m, &rows, &cols))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LeafBlock {
    pub layout: BlockLayout,
    pub data: Compressed,
}

/// Block-compressed matrix over clustered row and column index sets.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockMatrix {
    row_tree: Arc<ClusterTree>,
    col_tree: Arc<ClusterTree>,
    blocks: Vec<LeafBlock>,
}

impl BlockMatrix {
    /// Compresses a dense matrix whose rows/columns sit at the given points.
    pub fn from_dense(
        m: &DMatrix<f64>,
        row_points: &[[f64; 2]],
        col_points: &[[f64; 2]],
        spec: &ToleranceSpec,
    ) -> Result<Self> {
        if m.nrows() != row_points.len() || m.ncols() != col_points.len() {
            return Err(HddError::Usage(format!(
                "matrix {}x{} does not match {} row / {} column points",
                m.nrows(),
                m.ncols(),
                row_points.len(),
                col_points.len()
            )));
        }
        let rt = Arc::new(ClusterTree::build(row_points, spec.n_min));
        let ct = Arc::new(ClusterTree::build(col_points, spec.n_min));
        Ok(Self::from_dense_with_trees(m, rt, ct, spec))
    }

    pub fn from_dense_with_trees(
        m: &DMatrix<f64>,
        row_tree: Arc<ClusterTree>,
        col_tree: Arc<ClusterTree>,
        spec: &ToleranceSpec,
    ) -> Self {
        let blocks = block_partition(&row_tree, &col_tree)
            .into_iter()
            .map(|layout| {
                let sub = linalg::select(
                    m,
                    &row_tree.perm[layout.rows.clone()],
                    &col_tree.perm[layout.cols.clone()],
                );
                let data = if layout.admissible {
                    compress(&sub, spec)
                } else {
                    Compressed::Dense(sub)
                };
                LeafBlock { layout, data }
            })
            .collect();
        Self {
            row_tree,
            col_tree,
            blocks,
        }
    }

    pub fn nrows(&self) -> usize {
        self.row_tree.len()
    }

    pub fn ncols(&self) -> usize {
        self.col_tree.len()
    }

    pub fn blocks(&self) -> &[LeafBlock] {
        &self.blocks
    }

    pub fn row_tree(&self) -> &Arc<ClusterTree> {
        &self.row_tree
    }

    pub fn col_tree(&self) -> &Arc<ClusterTree> {
        &self.col_tree
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.nrows(), self.ncols());
        for b in &self.blocks {
            let d = b.data.to_dense();
            for (i, &r) in self.row_tree.perm[b.layout.rows.clone()].iter().enumerate() {
                for (j, &c) in self.col_tree.perm[b.layout.cols.clone()].iter().enumerate() {
                    m[(r, c)] = d[(i, j)];
                }
            }
        }
        m
    }

    pub fn apply(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.ncols() {
            return Err(HddError::Usage(format!(
                "apply: vector of length {} for {} columns",
                x.len(),
                self.ncols()
            )));
        }
        let mut y = DVector::zeros(self.nrows());
        for b in &self.blocks {
            let xs = DVector::from_iterator(
                b.layout.cols.len(),
                self.col_tree.perm[b.layout.cols.clone()]
                    .iter()
                    .map(|&c| x[c]),
            );
            let ys = b.data.apply(&xs);
            for (i, &r) in self.row_tree.perm[b.layout.rows.clone()].iter().enumerate() {
                y[r] += ys[i];
            }
        }
        Ok(y)
    }

    pub fn apply_transpose(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.nrows() {
            return Err(HddError::Usage(format!(
                "apply_transpose: vector of length {} for {} rows",
                x.len(),
                self.nrows()
            )));
        }
        let mut y = DVector::zeros(self.ncols());
        for b in &self.blocks {
            let xs = DVector::from_iterator(
                b.layout.rows.len(),
                self.row_tree.perm[b.layout.rows.clone()]
                    .iter()
                    .map(|&r| x[r]),
            );
            let ys = b.data.apply_transpose(&xs);
            for (j, &c) in self.col_tree.perm[b.layout.cols.clone()].iter().enumerate() {
                y[c] += ys[j];
            }
        }
        Ok(y)
    }

    pub fn stored_values(&self) -> usize {
        self.blocks.iter().map(|b| b.data.stored_values()).sum()
    }

    pub fn bytes(&self) -> usize {
        self.stored_values() * std::mem::size_of::<f64>()
    }

    pub fn max_rank(&self) -> usize {
        self.blocks
            .iter()
            .filter_map(|b| b.data.rank())
            .max()
            .unwrap_or(0)
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        let blocks = self
            .blocks
            .iter()
            .map(|b| LeafBlock {
                layout: b.layout.clone(),
                data: match &b.data {
                    Compressed::Dense(m) => Compressed::Dense(m * alpha),
                    Compressed::LowRank(r) => Compressed::LowRank(RkBlock {
                        left: &r.left * alpha,
                        right: r.right.clone(),
                    }),
                },
            })
            .collect();
        Self {
            row_tree: self.row_tree.clone(),
            col_tree: self.col_tree.clone(),
            blocks,
        }
    }

    /// Block-structure dump: `row_range col_range kind rank` per leaf block.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        for b in &self.blocks {
            let (kind, rank) = match &b.data {
                Compressed::Dense(m) => ("dense", m.nrows().min(m.ncols())),
                Compressed::LowRank(r) => ("lowrank", r.rank()),
            };
            let _ = writeln!(
                s,
                "{}..{} {}..{} {} {}",
                b.layout.rows.start,
                b.layout.rows.end,
                b.layout.cols.start,
                b.layout.cols.end,
                kind,
                rank
            );
        }
        s
    }

    /// Dense sub-block over cluster positions `rows × cols`.
    fn sub_dense(&self, rows: &Range<usize>, cols: &Range<usize>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(rows.len(), cols.len());
        for b in &self.blocks {
            let r0 = rows.start.max(b.layout.rows.start);
            let r1 = rows.end.min(b.layout.rows.end);
            let c0 = cols.start.max(b.layout.cols.start);
            let c1 = cols.end.min(b.layout.cols.end);
            if r0 >= r1 || c0 >= c1 {
                continue;
            }
            let (br, bc) = (r0 - b.layout.rows.start, c0 - b.layout.cols.start);
            let piece = match &b.data {
                Compressed::Dense(m) => m.view((br, bc), (r1 - r0, c1 - c0)).into_owned(),
                Compressed::LowRank(rk) => {
                    if rk.rank() == 0 {
                        continue;
                    }
                    rk.left.rows(br, r1 - r0) * rk.right.rows(bc, c1 - c0).transpose()
                }
            };
            out.view_mut((r0 - rows.start, c0 - cols.start), (r1 - r0, c1 - c0))
                .copy_from(&piece);
        }
        out
    }

    fn same_layout(&self, other: &BlockMatrix) -> bool {
        (Arc::ptr_eq(&self.row_tree, &other.row_tree) || self.row_tree == other.row_tree)
            && (Arc::ptr_eq(&self.col_tree, &other.col_tree) || self.col_tree == other.col_tree)
            && self.blocks.len() == other.blocks.len()
            && self
                .blocks
                .iter()
                .zip(&other.blocks)
                .all(|(a, b)| a.layout == b.layout)
    }
}

/// Blockwise sum, re-truncated to `spec` on admissible blocks.
pub fn add(a: &BlockMatrix, b: &BlockMatrix, spec: &ToleranceSpec) -> Result<BlockMatrix> {
    if !a.same_layout(b) {
        return Err(HddError::Usage("add: block layouts differ".into()));
    }
    let blocks = a
        .blocks
        .iter()
        .zip(&b.blocks)
        .map(|(x, y)| {
            let data = match (&x.data, &y.data) {
                (Compressed::LowRank(p), Compressed::LowRank(q)) => {
                    let scale = p.norm().hypot(q.norm());
                    let left = concat_columns(&p.left, &q.left);
                    let right = concat_columns(&p.right, &q.right);
                    let merged = RkBlock { left, right }.truncate(spec.eps * scale, usize::MAX);
                    if merged.rank() > spec.k_max
                        || merged.stored_values() >= merged.nrows() * merged.ncols()
                    {
                        Compressed::Dense(merged.to_dense())
                    } else {
                        Compressed::LowRank(merged)
                    }
                }
                _ => {
                    let sum = x.data.to_dense() + y.data.to_dense();
                    if x.layout.admissible {
                        compress(&sum, spec)
                    } else {
                        Compressed::Dense(sum)
                    }
                }
            };
            LeafBlock {
                layout: x.layout.clone(),
                data,
            }
        })
        .collect();
    Ok(BlockMatrix {
        row_tree: a.row_tree.clone(),
        col_tree: a.col_tree.clone(),
        blocks,
    })
}

fn concat_columns(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(a.nrows(), a.ncols() + b.ncols());
    m.columns_mut(0, a.ncols()).copy_from(a);
    m.columns_mut(a.ncols(), b.ncols()).copy_from(b);
    m
}

/// Product `a·b`, laid out over `a`'s row clusters and `b`'s column clusters.
/// The inner cluster trees must agree.
pub fn multiply(a: &BlockMatrix, b: &BlockMatrix, spec: &ToleranceSpec) -> Result<BlockMatrix> {
    if a.ncols() != b.nrows() || a.col_tree.perm != b.row_tree.perm {
        return Err(HddError::Usage(
            "multiply: inner cluster trees do not conform".into(),
        ));
    }
    let inner = 0..a.ncols();
    let blocks = block_partition(&a.row_tree, &b.col_tree)
        .into_iter()
        .map(|layout| {
            let prod = a.sub_dense(&layout.rows, &inner) * b.sub_dense(&inner, &layout.cols);
            let data = if layout.admissible {
                compress(&prod, spec)
            } else {
                Compressed::Dense(prod)
            };
            LeafBlock { layout, data }
        })
        .collect();
    Ok(BlockMatrix {
        row_tree: a.row_tree.clone(),
        col_tree: b.col_tree.clone(),
        blocks,
    })
}

/// Schur complement `a11 − a12·a22⁻¹·a21` with a dense interface block `a22`.
pub fn schur(
    a11: &BlockMatrix,
    a12: &BlockMatrix,
    a21: &BlockMatrix,
    a22: &DMatrix<f64>,
    spec: &ToleranceSpec,
) -> Result<BlockMatrix> {
    if a22.nrows() != a12.ncols() || a22.ncols() != a21.nrows() {
        return Err(HddError::Usage(
            "schur: interface block does not conform".into(),
        ));
    }
    let factor = InterfaceFactor::new(a22, usize::MAX)?;
    let x = factor.solve(&a21.to_dense());
    let xb =
        BlockMatrix::from_dense_with_trees(&x, a21.row_tree.clone(), a21.col_tree.clone(), spec);
    let prod = multiply(a12, &xb, spec)?;
    add(a11, &prod.scaled(-1.0), spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(p: usize, q: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(p, q, |_, _| rng.gen_range(-1.0..1.0))
    }

    fn segment(n: usize, x0: f64, y: f64) -> Vec<[f64; 2]> {
        (0..n).map(|i| [x0 + i as f64 / n as f64, y]).collect()
    }

    fn square_boundary(per_side: usize) -> Vec<[f64; 2]> {
        let h = 1.0 / per_side as f64;
        let mut v = Vec::new();
        for i in 0..per_side {
            v.push([i as f64 * h, 0.0]);
            v.push([1.0, i as f64 * h]);
            v.push([1.0 - i as f64 * h, 1.0]);
            v.push([0.0, 1.0 - i as f64 * h]);
        }
        v
    }

    fn kernel(rp: &[[f64; 2]], cp: &[[f64; 2]]) -> DMatrix<f64> {
        DMatrix::from_fn(rp.len(), cp.len(), |i, j| {
            let d = ((rp[i][0] - cp[j][0]).powi(2) + (rp[i][1] - cp[j][1]).powi(2)).sqrt();
            (d + 0.05).ln()
        })
    }

    #[test]
    fn rank_one_is_exact() {
        let u = random(20, 1, 1);
        let v = random(15, 1, 2);
        let m = &u * v.transpose();
        match compress(&m, &ToleranceSpec::with_eps(1e-12)) {
            Compressed::LowRank(r) => {
                let e = linalg::max_abs(&(r.to_dense() - &m));
                assert!(e < 1e-14, "{e}");
                assert!(linalg::max_abs(&(r.to_dense() - &m)) < 1e-14);
            }
            Compressed::Dense(_) => panic!("rank-1 block should compress"),
        }
    }

    #[test]
    fn identity_stays_dense() {
        let m = DMatrix::<f64>::identity(16, 16);
        assert!(matches!(
            compress(&m, &ToleranceSpec::with_eps(0.1)),
            Compressed::Dense(_)
        ));
    }

    #[test]
    fn zero_block_has_rank_zero() {
        let m = DMatrix::<f64>::zeros(8, 5);
        assert_eq!(compress(&m, &ToleranceSpec::default()).rank(), Some(0));
    }

    #[test]
    fn compress_meets_tolerance() {
        let rp = segment(40, 0.0, 0.0);
        let cp = segment(30, 0.0, 1.0);
        let m = kernel(&rp, &cp);
        for eps in [1e-2, 1e-4, 1e-8] {
            let c = compress(&m, &ToleranceSpec::with_eps(eps));
            let err = (c.to_dense() - &m).norm();
            assert!(
                err <= eps * m.norm() * (1.0 + 1e-10),
                "eps {eps}: err {err}"
            );
            if let Compressed::LowRank(r) = c {
                assert!(r.rank() <= 30);
            }
        }
    }

    #[test]
    fn small_same_set_is_single_dense_block() {
        let pts = segment(20, 0.0, 0.0);
        let t = ClusterTree::build(&pts, 32);
        let p = block_partition(&t, &t);
        assert_eq!(p.len(), 1);
        assert!(!p[0].admissible);
    }

    #[test]
    fn disjoint_segments_single_admissible_block() {
        let a = ClusterTree::build(&segment(100, 0.0, 0.0), 32);
        let b = ClusterTree::build(&segment(100, 0.0, 1.0), 32);
        let p = block_partition(&a, &b);
        assert_eq!(p.len(), 1);
        assert!(p[0].admissible);
    }

    #[test]
    fn square_boundary_diagonal_blocks_bounded() {
        let pts = square_boundary(64);
        assert_eq!(pts.len(), 256);
        let t = ClusterTree::build(&pts, 32);
        let p = block_partition(&t, &t);
        let covered: usize = p.iter().map(|b| b.rows.len() * b.cols.len()).sum();
        assert_eq!(covered, 256 * 256);
        for b in p.iter().filter(|b| !b.admissible) {
            assert!(b.rows.len() <= 32 && b.cols.len() <= 32);
        }
        assert!(p.iter().any(|b| b.admissible));
    }

    #[test]
    fn block_matrix_round_trip_and_apply() {
        let pts = square_boundary(32);
        let m = kernel(&pts, &pts);
        let spec = ToleranceSpec::with_eps(1e-8);
        let bm = BlockMatrix::from_dense(&m, &pts, &pts, &spec).unwrap();
        assert!((bm.to_dense() - &m).norm() <= 1e-8 * m.norm());
        assert!(bm.stored_values() < m.len());
        let x = DVector::from_fn(m.ncols(), |i, _| (i as f64).sin());
        let bound = 1e-8 * m.norm() * x.norm() + 1e-13;
        assert!((bm.apply(&x).unwrap() - &m * &x).norm() <= bound);
        assert!((bm.apply_transpose(&x).unwrap() - m.tr_mul(&x)).norm() <= bound);
        assert!(bm
            .apply(&DVector::zeros(m.ncols()))
            .unwrap()
            .iter()
            .all(|&v| v == 0.0));
        assert_eq!(bm.dump().lines().count(), bm.blocks().len());
    }

    #[test]
    fn add_negation_is_zero() {
        let pts = square_boundary(24);
        let m = kernel(&pts, &pts);
        let spec = ToleranceSpec::default();
        let bm = BlockMatrix::from_dense(&m, &pts, &pts, &spec).unwrap();
        let z = add(&bm, &bm.scaled(-1.0), &spec).unwrap();
        assert!(linalg::max_abs(&z.to_dense()) < 1e-13);
        for b in z.blocks().iter().filter(|b| b.layout.admissible) {
            assert_eq!(b.data.rank(), Some(0));
        }
    }

    #[test]
    fn add_mismatched_layout_is_usage_error() {
        let a = square_boundary(24);
        let b = square_boundary(16);
        let spec = ToleranceSpec::default();
        let ma = BlockMatrix::from_dense(&kernel(&a, &a), &a, &a, &spec).unwrap();
        let mb = BlockMatrix::from_dense(&kernel(&b, &b), &b, &b, &spec).unwrap();
        assert!(matches!(add(&ma, &mb, &spec), Err(HddError::Usage(_))));
    }

    #[test]
    fn multiply_low_rank_matches_dense_product() {
        let pts = square_boundary(20);
        let n = pts.len();
        let a = random(n, 2, 3) * random(n, 2, 4).transpose();
        let b = random(n, 3, 5) * random(n, 3, 6).transpose();
        let spec = ToleranceSpec::with_eps(1e-10);
        let ba = BlockMatrix::from_dense(&a, &pts, &pts, &spec).unwrap();
        let bb = BlockMatrix::from_dense(&b, &pts, &pts, &spec).unwrap();
        let p = multiply(&ba, &bb, &spec).unwrap();
        let exact = &a * &b;
        let e = (p.to_dense() - &exact).norm();
        assert!(e <= 1e-9 * exact.norm(), "{e} {}", exact.norm());
    }

    #[test]
    fn schur_matches_dense_formula() {
        let bpts = square_boundary(12);
        let gpts: Vec<[f64; 2]> = (1..12).map(|i| [0.5, i as f64 / 12.0]).collect();
        let (nb, ng) = (bpts.len(), gpts.len());
        let mut all = bpts.clone();
        all.extend_from_slice(&gpts);
        let k = kernel(&all, &all);
        let s = &k * k.transpose() + DMatrix::identity(nb + ng, nb + ng);
        let a11 = s.view((0, 0), (nb, nb)).into_owned();
        let a12 = s.view((0, nb), (nb, ng)).into_owned();
        let a21 = s.view((nb, 0), (ng, nb)).into_owned();
        let a22 = s.view((nb, nb), (ng, ng)).into_owned();
        let spec = ToleranceSpec {
            eps: 1e-12,
            k_max: 64,
            n_min: 8,
        };
        let rt = Arc::new(ClusterTree::build(&bpts, spec.n_min));
        let gt = Arc::new(ClusterTree::build(&gpts, spec.n_min));
        let b11 = BlockMatrix::from_dense_with_trees(&a11, rt.clone(), rt.clone(), &spec);
        let b12 = BlockMatrix::from_dense_with_trees(&a12, rt.clone(), gt.clone(), &spec);
        let b21 = BlockMatrix::from_dense_with_trees(&a21, gt.clone(), rt.clone(), &spec);
        let res = schur(&b11, &b12, &b21, &a22, &spec).unwrap();
        let exact = &a11 - &a12 * a22.clone().try_inverse().unwrap() * &a21;
        assert!((res.to_dense() - &exact).norm() <= 1e-10 * exact.norm());
    }

    #[test]
    fn truncate_reduces_concatenated_rank() {
        let u = random(30, 2, 7);
        let v = random(25, 2, 8);
        let r = RkBlock {
            left: concat_columns(&u, &u),
            right: concat_columns(&v, &v),
        };
        let t = r.truncate(1e-12 * r.norm(), 64);
        assert!((r.norm() - r.to_dense().norm()).abs() < 1e-12 * r.norm());
        assert_eq!(t.rank(), 2);
        assert!((t.to_dense() - r.to_dense()).norm() < 1e-12 * r.to_dense().norm());
    }

    proptest::proptest! {
        #[test]
        fn apply_error_bound(seed in 0u64..1000, eps_exp in 2i32..10) {
            let eps = 10f64.powi(-eps_exp);
            let pts = square_boundary(10);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let shift = rng.gen_range(0.01..0.5);
            let m = DMatrix::from_fn(pts.len(), pts.len(), |i, j| {
                let d = ((pts[i][0] - pts[j][0]).powi(2) + (pts[i][1] - pts[j][1]).powi(2)).sqrt();
                1.0 / (d + shift)
            });
            let spec = ToleranceSpec { eps, k_max: 64, n_min: 8 };
            let bm = BlockMatrix::from_dense(&m, &pts, &pts, &spec).unwrap();
            let x = DVector::from_fn(pts.len(), |_, _| rng.gen_range(-1.0..1.0));
            let err = (bm.apply(&x).unwrap() - &m * &x).norm();
            proptest::prop_assert!(err <= eps * m.norm() * x.norm() + 1e-13);
        }
    }
}
