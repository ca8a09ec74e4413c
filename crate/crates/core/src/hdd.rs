//! Solution maps of the decomposition tree.
//!
//! Every node `ω` carries a boundary map `Ψ_ω = (Ψ^g, Ψ^f)` and, for internal
//! nodes, an interface map `Φ_ω = (Φ^g, Φ^f)`. With local data `d = (f, g)`
//! (`f` over `I(ω)`, `g` over `I(∂ω)`) the residual of the local problem on the
//! boundary rows is `Ψ^g g − Ψ^f f`, and the solution on the interface is
//! `g_γ = Φ^g g + Φ^f f`.
//!
//! Leaves-to-root builds the maps by Schur elimination of the interface,
//! root-to-leaves applies the `Φ` maps top down.

use std::cell::Cell;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use nalgebra::{DMatrix, DVector};

use crate::ddtree::{DDNode, DDTree, NodeId};
use crate::error::{HddError, Result};
use crate::fem::{self, CoefficientField};
use crate::functionals::{self, Functional, FunctionalRequest};
use crate::linalg::InterfaceFactor;
use crate::lowrank::{BlockMatrix, ToleranceSpec};
use crate::mesh::{IndexSet, Mesh};

/// A map matrix, dense or block compressed.
#[derive(Debug, Clone)]
pub enum MapMatrix {
    Dense(DMatrix<f64>),
    Compressed(BlockMatrix),
}

impl MapMatrix {
    pub fn nrows(&self) -> usize {
        match self {
            MapMatrix::Dense(m) => m.nrows(),
            MapMatrix::Compressed(b) => b.nrows(),
        }
    }

    pub fn ncols(&self) -> usize {
        match self {
            MapMatrix::Dense(m) => m.ncols(),
            MapMatrix::Compressed(b) => b.ncols(),
        }
    }

    pub fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        match self {
            MapMatrix::Dense(m) => m * x,
            MapMatrix::Compressed(b) => b.apply(x).expect("map dimensions fixed at build"),
        }
    }

    pub fn apply_transpose(&self, x: &DVector<f64>) -> DVector<f64> {
        match self {
            MapMatrix::Dense(m) => m.tr_mul(x),
            MapMatrix::Compressed(b) => {
                b.apply_transpose(x).expect("map dimensions fixed at build")
            }
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        match self {
            MapMatrix::Dense(m) => m.clone(),
            MapMatrix::Compressed(b) => b.to_dense(),
        }
    }

    pub fn dense_bytes(&self) -> usize {
        self.nrows() * self.ncols() * std::mem::size_of::<f64>()
    }

    /// Bytes actually stored.
    pub fn bytes(&self) -> usize {
        match self {
            MapMatrix::Dense(_) => self.dense_bytes(),
            MapMatrix::Compressed(b) => b.bytes(),
        }
    }

    pub fn max_rank(&self) -> usize {
        match self {
            MapMatrix::Dense(_) => 0,
            MapMatrix::Compressed(b) => b.max_rank(),
        }
    }

    fn build(
        m: DMatrix<f64>,
        rows: &[[f64; 2]],
        cols: &[[f64; 2]],
        spec: Option<&ToleranceSpec>,
    ) -> Self {
        match spec {
            None => MapMatrix::Dense(m),
            Some(s) => MapMatrix::Compressed(
                BlockMatrix::from_dense(&m, rows, cols, s).expect("point sets match matrix shape"),
            ),
        }
    }
}

/// Boundary map of a node: `Ψ^g` over `∂ω × ∂ω`, `Ψ^f` over `∂ω × I(ω)`.
#[derive(Debug, Clone)]
pub struct PsiMap {
    pub node: NodeId,
    pub psi_g: MapMatrix,
    pub psi_f: MapMatrix,
}

impl PsiMap {
    pub fn bytes(&self) -> usize {
        self.psi_g.bytes() + self.psi_f.bytes()
    }

    /// Residual `Ψ^g g − Ψ^f f` on the boundary rows.
    pub fn residual(&self, data: &LocalData) -> DVector<f64> {
        self.psi_g.apply(&data.g_omega) - self.psi_f.apply(&data.f_omega)
    }
}

/// Interface map of an internal node: `Φ^g` over `γ × ∂ω`, `Φ^f` over `γ × I(ω)`.
#[derive(Debug, Clone)]
pub struct PhiMap {
    pub node: NodeId,
    pub phi_g: MapMatrix,
    pub phi_f: MapMatrix,
}

impl PhiMap {
    pub fn bytes(&self) -> usize {
        self.phi_g.bytes() + self.phi_f.bytes()
    }

    /// Interface values `Φ^g g + Φ^f f`.
    pub fn apply(&self, data: &LocalData) -> DVector<f64> {
        self.phi_g.apply(&data.g_omega) + self.phi_f.apply(&data.f_omega)
    }
}

/// Local data of a node: `f` over `I(ω)`, `g` over `I(∂ω)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalData {
    pub f_omega: DVector<f64>,
    pub g_omega: DVector<f64>,
}

impl LocalData {
    /// Restricts a nodal right-hand side and nodal boundary values to `node`.
    pub fn restrict(node: &DDNode, f: &[f64], u: &[f64]) -> Self {
        Self {
            f_omega: DVector::from_iterator(
                node.idx_omega.len(),
                node.idx_omega.iter().map(|i| f[i]),
            ),
            g_omega: DVector::from_iterator(
                node.idx_boundary.len(),
                node.idx_boundary.iter().map(|i| u[i]),
            ),
        }
    }
}

/// Column space of the load maps `Ψ^f`, `Φ^f`.
#[derive(Debug, Clone, Default, PartialEq)]
pub enum LoadSpace {
    /// One column per node of `I(ω)`; the maps act on any nodal `f`.
    #[default]
    Nodal,
    /// One column per given nodal load vector; the maps act on coefficient
    /// vectors over these loads.
    Fixed(Arc<Vec<Vec<f64>>>),
}

impl LoadSpace {
    pub fn fixed(loads: Vec<Vec<f64>>) -> Self {
        Self::Fixed(Arc::new(loads))
    }

    pub fn is_nodal(&self) -> bool {
        matches!(self, Self::Nodal)
    }

    /// Number of load columns at `node`.
    pub fn width(&self, node: &DDNode) -> usize {
        match self {
            Self::Nodal => node.idx_omega.len(),
            Self::Fixed(l) => l.len(),
        }
    }

    /// Father columns of son `k`'s load columns; `None` when father and sons
    /// share the same columns.
    pub fn son_cols<'a>(&self, node: &'a DDNode, k: usize) -> Option<&'a [usize]> {
        match self {
            Self::Nodal => node.split.as_ref().map(|s| s.son_cols[k].as_slice()),
            Self::Fixed(_) => None,
        }
    }

    /// Restriction of the fixed loads to `I(ω)`, one column per load.
    fn local_basis(&self, node: &DDNode) -> Option<DMatrix<f64>> {
        match self {
            Self::Nodal => None,
            Self::Fixed(l) => {
                let rows: Vec<usize> = node.idx_omega.iter().collect();
                Some(DMatrix::from_fn(rows.len(), l.len(), |i, k| l[k][rows[i]]))
            }
        }
    }
}

/// Which interface maps survive the build.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveMode {
    KeepPhiAll,
    /// Keep `Φ` on the root-to-target path and in the target's subtree.
    KeepPhiPath(NodeId),
    /// Keep no `Φ`; only requested functionals are produced.
    FunctionalsOnly,
}

#[derive(Debug, Clone)]
pub struct BuildOptions {
    pub mode: SolveMode,
    pub compression: Option<ToleranceSpec>,
    pub loads: LoadSpace,
    pub functionals: Vec<FunctionalRequest>,
    /// Keep the mean functional of every node.
    pub keep_node_functionals: bool,
    /// Keep `Ψ` of every node (the root's is always kept).
    pub retain_psi: bool,
    /// Keep the assembled root system before elimination.
    pub keep_root_system: bool,
    /// Record the spectrum bound of every interface block.
    pub check_interface: bool,
    pub parallel: bool,
}

impl BuildOptions {
    pub fn new(mode: SolveMode) -> Self {
        Self {
            mode,
            compression: None,
            loads: LoadSpace::Nodal,
            functionals: Vec::new(),
            keep_node_functionals: false,
            retain_psi: false,
            keep_root_system: false,
            check_interface: false,
            parallel: true,
        }
    }

    pub fn compressed(mut self, spec: ToleranceSpec) -> Self {
        self.compression = Some(spec);
        self
    }

    pub fn with_functionals(mut self, requests: Vec<FunctionalRequest>) -> Self {
        self.functionals = requests;
        self
    }

    /// Builds the load maps over the given nodal load vectors only.
    pub fn with_fixed_loads(mut self, loads: Vec<Vec<f64>>) -> Self {
        self.loads = LoadSpace::fixed(loads);
        self
    }

    pub fn sequential(mut self) -> Self {
        self.parallel = false;
        self
    }

    /// Options for debug checks: all maps, all `Ψ`, root system and interface spectra.
    pub fn debug() -> Self {
        Self {
            retain_psi: true,
            keep_root_system: true,
            check_interface: true,
            keep_node_functionals: true,
            ..Self::new(SolveMode::KeepPhiAll)
        }
    }
}

impl Default for BuildOptions {
    fn default() -> Self {
        Self::new(SolveMode::KeepPhiAll)
    }
}

/// Per-node storage record.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeStats {
    pub node: NodeId,
    pub depth: usize,
    pub boundary: usize,
    pub interface: usize,
    pub dense_bytes: usize,
    pub compressed_bytes: usize,
    pub max_rank: usize,
}

/// Interface block diagnostics of an internal node.
#[derive(Debug, Clone, PartialEq)]
pub struct InterfaceCheck {
    pub node: NodeId,
    /// Smallest eigenvalue of the summed interface block `^γΨ^γ₁ + ^γΨ^γ₂`.
    pub min_eigenvalue: f64,
    pub cholesky: bool,
}

/// Father system before elimination: rows `[∂ω ; γ]`, stiffness over the same
/// rows as columns and load over `I(ω)`.
#[derive(Debug, Clone)]
pub struct FatherSystem {
    pub node: NodeId,
    pub boundary_len: usize,
    pub stiffness: DMatrix<f64>,
    pub load: DMatrix<f64>,
}

impl FatherSystem {
    fn blocks(
        &self,
    ) -> (
        DMatrix<f64>,
        DMatrix<f64>,
        DMatrix<f64>,
        DMatrix<f64>,
        DMatrix<f64>,
        DMatrix<f64>,
    ) {
        let b = self.boundary_len;
        let r = self.stiffness.nrows();
        let k = r - b;
        let a = &self.stiffness;
        (
            a.view((0, 0), (b, b)).into_owned(),
            a.view((0, b), (b, k)).into_owned(),
            a.view((b, 0), (k, b)).into_owned(),
            a.view((b, b), (k, k)).into_owned(),
            self.load.rows(0, b).into_owned(),
            self.load.rows(b, k).into_owned(),
        )
    }
}

/// Maps retained by a leaves-to-root build.
#[derive(Debug, Clone)]
pub struct MapStore {
    tree: Arc<DDTree>,
    mode: SolveMode,
    loads: LoadSpace,
    phi: Vec<Option<PhiMap>>,
    psi: Vec<Option<PsiMap>>,
    stats: Vec<NodeStats>,
    functionals: Vec<Functional>,
    node_functionals: Vec<Option<Functional>>,
    interface_checks: Vec<InterfaceCheck>,
    root_system: Option<FatherSystem>,
    peak_bytes: usize,
}

impl MapStore {
    pub fn tree(&self) -> &Arc<DDTree> {
        &self.tree
    }

    pub fn mode(&self) -> SolveMode {
        self.mode
    }

    pub fn loads(&self) -> &LoadSpace {
        &self.loads
    }

    pub fn phi(&self, node: NodeId) -> Option<&PhiMap> {
        self.phi.get(node).and_then(Option::as_ref)
    }

    pub fn psi(&self, node: NodeId) -> Option<&PsiMap> {
        self.psi.get(node).and_then(Option::as_ref)
    }

    pub fn root_psi(&self) -> &PsiMap {
        self.psi[0].as_ref().expect("root Ψ is always kept")
    }

    /// Number of retained `Φ` maps.
    pub fn phi_count(&self) -> usize {
        self.phi.iter().filter(|p| p.is_some()).count()
    }

    pub fn phi_bytes(&self) -> usize {
        self.phi.iter().flatten().map(PhiMap::bytes).sum()
    }

    /// Stats of every node in post order.
    pub fn stats(&self) -> &[NodeStats] {
        &self.stats
    }

    /// Requested functionals, lifted to the root, in request order.
    pub fn functionals(&self) -> &[Functional] {
        &self.functionals
    }

    pub fn node_functional(&self, node: NodeId) -> Option<&Functional> {
        self.node_functionals.get(node).and_then(Option::as_ref)
    }

    pub fn interface_checks(&self) -> &[InterfaceCheck] {
        &self.interface_checks
    }

    pub fn root_system(&self) -> Option<&FatherSystem> {
        self.root_system.as_ref()
    }

    /// Largest number of map bytes alive at once during the build.
    pub fn peak_bytes(&self) -> usize {
        self.peak_bytes
    }

    /// Bytes of all retained maps.
    pub fn retained_bytes(&self) -> usize {
        self.phi_bytes() + self.psi.iter().flatten().map(PsiMap::bytes).sum::<usize>()
    }

    /// `node_depth |∂ω| |γ| dense_bytes compressed_bytes max_block_rank`, with header.
    pub fn stats_dump(&self) -> String {
        let mut s = String::from(
            "node_depth boundary interface dense_bytes compressed_bytes max_block_rank\n",
        );
        for st in &self.stats {
            s.push_str(&format!(
                "{} {} {} {} {} {}\n",
                st.depth,
                st.boundary,
                st.interface,
                st.dense_bytes,
                st.compressed_bytes,
                st.max_rank
            ));
        }
        s
    }

    /// Evaluates the requested functionals on global data (`f` nodal, `g`
    /// over `∂Ω` in root boundary order).
    pub fn evaluate_functionals(&self, f: &[f64], g: &[f64]) -> Result<Vec<f64>> {
        self.require_nodal()?;
        check_global_data(&self.tree, f, g)?;
        Ok(self.functionals.iter().map(|l| l.evaluate(f, g)).collect())
    }

    /// Evaluates the requested functionals of a fixed-load build on
    /// `f = Σ coeffs[k]·loads[k]` and boundary values `g`.
    pub fn evaluate_fixed(&self, coeffs: &[f64], g: &[f64]) -> Result<Vec<f64>> {
        let LoadSpace::Fixed(loads) = &self.loads else {
            return Err(HddError::Usage(
                "store was built over nodal loads; use evaluate_functionals".into(),
            ));
        };
        if coeffs.len() != loads.len() || g.len() != self.tree.root().idx_boundary.len() {
            return Err(HddError::Usage(format!(
                "{} coefficients for {} loads, {} boundary values",
                coeffs.len(),
                loads.len(),
                g.len()
            )));
        }
        Ok(self
            .functionals
            .iter()
            .map(|l| l.evaluate(coeffs, g))
            .collect())
    }

    fn require_nodal(&self) -> Result<()> {
        if self.loads.is_nodal() {
            Ok(())
        } else {
            Err(HddError::Usage(
                "store was built over fixed loads and cannot take nodal data".into(),
            ))
        }
    }
}

fn check_global_data(tree: &DDTree, f: &[f64], g: &[f64]) -> Result<()> {
    let root = tree.root();
    if f.len() != root.idx_omega.len() || g.len() != root.idx_boundary.len() {
        return Err(HddError::Usage(format!(
            "data sizes f={} g={} do not match |I(Ω)|={} |I(∂Ω)|={}",
            f.len(),
            g.len(),
            root.idx_omega.len(),
            root.idx_boundary.len()
        )));
    }
    Ok(())
}

thread_local! {
    static SOLUTION_ALLOCATIONS: Cell<usize> = const { Cell::new(0) };
}

/// Number of solution vectors over `I(Ω)` allocated on this thread.
pub fn solution_allocations() -> usize {
    SOLUTION_ALLOCATIONS.with(Cell::get)
}

fn new_solution_vector(n: usize) -> Vec<f64> {
    SOLUTION_ALLOCATIONS.with(|c| c.set(c.get() + 1));
    vec![0.0; n]
}

/// Leaf maps from the cell's two triangles.
pub fn leaf_psi(node: &DDNode, mesh: &Mesh, kappa: &CoefficientField) -> Result<PsiMap> {
    if !node.is_leaf() {
        return Err(HddError::Usage(format!(
            "leaf_psi on internal node {}",
            node.id
        )));
    }
    let tris = mesh.region_triangles_grid(&node.region);
    let (a, f) = fem::assemble_local(mesh, kappa, &tris, &node.idx_boundary)?;
    Ok(PsiMap {
        node: node.id,
        psi_g: MapMatrix::Dense(a),
        psi_f: MapMatrix::Dense(f),
    })
}

/// Scatter-adds the sons' maps into the father system.
pub fn assemble_father(
    node: &DDNode,
    psi1: &PsiMap,
    psi2: &PsiMap,
    loads: &LoadSpace,
) -> Result<FatherSystem> {
    let split = node
        .split
        .as_ref()
        .ok_or_else(|| HddError::Usage(format!("assemble_father on leaf node {}", node.id)))?;
    let r = node.system_rows();
    let c = loads.width(node);
    let identity: Vec<usize> = (0..c).collect();
    let mut a = DMatrix::zeros(r, r);
    let mut f = DMatrix::zeros(r, c);
    for (k, psi) in [psi1, psi2].into_iter().enumerate() {
        let rows = &split.son_rows[k];
        let cols = loads.son_cols(node, k).unwrap_or(&identity);
        let pg = psi.psi_g.to_dense();
        let pf = psi.psi_f.to_dense();
        if pg.nrows() != rows.len()
            || pg.ncols() != rows.len()
            || pf.nrows() != rows.len()
            || pf.ncols() != cols.len()
        {
            return Err(HddError::Internal(format!(
                "son {} maps {}x{} / {}x{} do not match index sets {} / {} at node {}",
                k + 1,
                pg.nrows(),
                pg.ncols(),
                pf.nrows(),
                pf.ncols(),
                rows.len(),
                cols.len(),
                node.id
            )));
        }
        for (j, &cj) in rows.iter().enumerate() {
            for (i, &ri) in rows.iter().enumerate() {
                a[(ri, cj)] += pg[(i, j)];
            }
        }
        for (j, &cj) in cols.iter().enumerate() {
            for (i, &ri) in rows.iter().enumerate() {
                f[(ri, cj)] += pf[(i, j)];
            }
        }
    }
    Ok(FatherSystem {
        node: node.id,
        boundary_len: node.idx_boundary.len(),
        stiffness: a,
        load: f,
    })
}

/// Dense result of eliminating the interface from a father system.
#[derive(Debug, Clone)]
pub struct Elimination {
    pub psi_g: DMatrix<f64>,
    pub psi_f: DMatrix<f64>,
    pub phi_g: DMatrix<f64>,
    pub phi_f: DMatrix<f64>,
    pub cholesky: bool,
}

/// `Ψ^g = A₁₁ − A₁₂A₂₂⁻¹A₂₁`, `Ψ^f = F₁ − A₁₂A₂₂⁻¹F₂`, `Φ^g = −A₂₂⁻¹A₂₁`, `Φ^f = A₂₂⁻¹F₂`.
pub fn schur_eliminate(sys: &FatherSystem) -> Result<Elimination> {
    let (a11, a12, a21, a22, f1, f2) = sys.blocks();
    let factor = InterfaceFactor::new(&a22, sys.node)?;
    let phi_g = -factor.solve(&a21);
    let phi_f = factor.solve(&f2);
    let mut psi_g = a11 + &a12 * &phi_g;
    let sym = (&psi_g + psi_g.transpose()) * 0.5;
    psi_g = sym;
    let psi_f = f1 - &a12 * &phi_f;
    Ok(Elimination {
        psi_g,
        psi_f,
        phi_g,
        phi_f,
        cholesky: factor.is_cholesky(),
    })
}

/// Interface values from the sons' maps through the matching condition
/// `^γΨ₁(d₁) + ^γΨ₂(d₂) = 0`, solved as `g_γ = M⁻¹ r` with
/// `M = −(^γΨ^γ₁ + ^γΨ^γ₂)` and `r` the γ-rows of the sons' residuals at `g_γ = 0`.
///
/// Residuals here follow the variational sign, `Ψ(d) = Ψ^g g − Ψ^f f`.
pub fn interface_by_matching(
    node: &DDNode,
    psi: [&PsiMap; 2],
    f_omega: &DVector<f64>,
    g_omega: &DVector<f64>,
) -> Result<DVector<f64>> {
    let split = node.split.as_ref().ok_or_else(|| {
        HddError::Usage(format!("interface_by_matching on leaf node {}", node.id))
    })?;
    let b = node.idx_boundary.len();
    let k = node.idx_interface.len();
    if k == 0 {
        return Ok(DVector::zeros(0));
    }
    let mut m = DMatrix::zeros(k, k);
    let mut rhs = DVector::zeros(k);
    for s in 0..2 {
        let rows = &split.son_rows[s];
        let pg = psi[s].psi_g.to_dense();
        let f_son = DVector::from_iterator(
            split.son_cols[s].len(),
            split.son_cols[s].iter().map(|&c| f_omega[c]),
        );
        let mut g_gamma_free = DVector::zeros(rows.len());
        for (i, &r) in rows.iter().enumerate() {
            if r < b {
                g_gamma_free[i] = g_omega[r];
            }
        }
        let res = &pg * &g_gamma_free - psi[s].psi_f.apply(&f_son);
        for (i, &ri) in rows.iter().enumerate() {
            if ri < b {
                continue;
            }
            rhs[ri - b] += res[i];
            for (j, &rj) in rows.iter().enumerate() {
                if rj >= b {
                    m[(ri - b, rj - b)] -= pg[(i, j)];
                }
            }
        }
    }
    let lu = m.lu();
    lu.solve(&rhs).ok_or_else(|| HddError::Numerical {
        node: node.id,
        msg: "matching matrix is singular".into(),
    })
}

/// Smallest eigenvalue of a symmetric matrix, `+∞` when empty.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return f64::INFINITY;
    }
    let sym = (m + m.transpose()) * 0.5;
    sym.symmetric_eigenvalues()
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

struct Tracker {
    live: AtomicUsize,
    peak: AtomicUsize,
}

impl Tracker {
    fn new() -> Self {
        Self {
            live: AtomicUsize::new(0),
            peak: AtomicUsize::new(0),
        }
    }

    fn alloc(&self, bytes: usize) {
        let now = self.live.fetch_add(bytes, Ordering::SeqCst) + bytes;
        self.peak.fetch_max(now, Ordering::SeqCst);
    }

    fn free(&self, bytes: usize) {
        self.live.fetch_sub(bytes, Ordering::SeqCst);
    }
}

struct Collector {
    phi: Vec<Option<PhiMap>>,
    psi: Vec<Option<PsiMap>>,
    stats: Vec<Option<NodeStats>>,
    node_functionals: Vec<Option<Functional>>,
    interface_checks: Vec<Option<InterfaceCheck>>,
    root_system: Option<FatherSystem>,
}

struct Build<'a> {
    tree: &'a DDTree,
    mesh: &'a Mesh,
    kappa: &'a CoefficientField,
    opts: &'a BuildOptions,
    need_mean: Vec<bool>,
    point_at: Vec<Vec<usize>>,
    tracker: Tracker,
    out: Mutex<Collector>,
}

struct SubtreeOut {
    psi: PsiMap,
    mean: Option<Functional>,
    active: Vec<(usize, Functional)>,
}

/// Builds the maps of every node bottom up.
pub fn leaves_to_root(
    tree: &Arc<DDTree>,
    mesh: &Mesh,
    kappa: &CoefficientField,
    opts: &BuildOptions,
) -> Result<MapStore> {
    if kappa.len() != mesh.triangles().len() {
        return Err(HddError::Config(format!(
            "coefficient field has {} values for {} triangles",
            kappa.len(),
            mesh.triangles().len()
        )));
    }
    if tree.level() != mesh.level() {
        return Err(HddError::Usage("tree and mesh levels differ".into()));
    }
    if let Some(spec) = &opts.compression {
        spec.validate()?;
    }
    if let LoadSpace::Fixed(l) = &opts.loads {
        if l.is_empty() || l.iter().any(|v| v.len() != mesh.node_count()) {
            return Err(HddError::Usage(format!(
                "fixed loads must be a non-empty list of nodal vectors of length {}",
                mesh.node_count()
            )));
        }
    }
    if let SolveMode::KeepPhiPath(t) = opts.mode {
        if t >= tree.len() {
            return Err(HddError::Usage(format!("target node {t} out of range")));
        }
    }
    let n_nodes = tree.len();
    let mut need_mean = vec![opts.keep_node_functionals; n_nodes];
    let mut point_at = vec![Vec::new(); n_nodes];
    for (r, req) in opts.functionals.iter().enumerate() {
        match *req {
            FunctionalRequest::Mean(t) => {
                if t >= n_nodes {
                    return Err(HddError::Usage(format!(
                        "mean functional on unknown node {t}"
                    )));
                }
                for s in tree.subtree(t) {
                    need_mean[s] = true;
                }
            }
            FunctionalRequest::Point(p) => {
                if p >= mesh.node_count() {
                    return Err(HddError::Usage(format!(
                        "point functional on unknown mesh node {p}"
                    )));
                }
                if let Some(owner) = tree.interface_owner(p) {
                    point_at[owner].push(r);
                }
            }
        }
    }
    let build = Build {
        tree,
        mesh,
        kappa,
        opts,
        need_mean,
        point_at,
        tracker: Tracker::new(),
        out: Mutex::new(Collector {
            phi: vec![None; n_nodes],
            psi: vec![None; n_nodes],
            stats: vec![None; n_nodes],
            node_functionals: vec![None; n_nodes],
            interface_checks: vec![None; n_nodes],
            root_system: None,
        }),
    };
    let root = build.visit(0)?;
    let peak_bytes = build.tracker.peak.load(Ordering::SeqCst);
    let mut col = build.out.into_inner().expect("collector lock poisoned");
    col.psi[0] = Some(root.psi);

    let mut active: Vec<Option<Functional>> = vec![None; opts.functionals.len()];
    for (r, l) in root.active {
        active[r] = Some(l);
    }
    let root_node = tree.root();
    let mut functionals = Vec::with_capacity(opts.functionals.len());
    for (r, req) in opts.functionals.iter().enumerate() {
        let l = match (active[r].take(), req) {
            (Some(l), _) => l,
            (None, FunctionalRequest::Point(p)) => {
                functionals::boundary_point_functional(root_node, *p, &opts.loads)?
            }
            (None, FunctionalRequest::Mean(_)) => {
                return Err(HddError::Internal(format!(
                    "functional request {r} was not lifted to the root"
                )))
            }
        };
        functionals.push(l);
    }
    let stats = tree
        .post_order()
        .iter()
        .filter_map(|&id| col.stats[id].take())
        .collect();
    Ok(MapStore {
        tree: tree.clone(),
        mode: opts.mode,
        loads: opts.loads.clone(),
        phi: col.phi,
        psi: col.psi,
        stats,
        functionals,
        node_functionals: col.node_functionals,
        interface_checks: col.interface_checks.into_iter().flatten().collect(),
        root_system: col.root_system,
        peak_bytes,
    })
}

impl Build<'_> {
    fn keep_phi(&self, id: NodeId) -> bool {
        match self.opts.mode {
            SolveMode::KeepPhiAll => true,
            SolveMode::KeepPhiPath(t) => {
                self.tree.is_ancestor_or_self(id, t) || self.tree.is_ancestor_or_self(t, id)
            }
            SolveMode::FunctionalsOnly => false,
        }
    }

    fn points(&self, set: &IndexSet) -> Vec<[f64; 2]> {
        set.iter().map(|i| self.mesh.coord(i)).collect()
    }

    fn visit(&self, id: NodeId) -> Result<SubtreeOut> {
        let node = self.tree.node(id);
        let Some([s1, s2]) = node.sons else {
            return self.visit_leaf(node);
        };
        let (o1, o2) = if self.opts.parallel {
            rayon::join(|| self.visit(s1), || self.visit(s2))
        } else {
            (self.visit(s1), self.visit(s2))
        };
        let (o1, o2) = (o1?, o2?);
        self.merge(node, o1, o2)
    }

    fn visit_leaf(&self, node: &DDNode) -> Result<SubtreeOut> {
        let mut psi = leaf_psi(node, self.mesh, self.kappa)?;
        if let Some(basis) = self.opts.loads.local_basis(node) {
            psi.psi_f = MapMatrix::Dense(psi.psi_f.to_dense() * basis);
        }
        self.tracker.alloc(psi.bytes());
        self.record_stats(node, psi.bytes(), psi.bytes(), 0);
        let mean = if self.need_mean[node.id] {
            Some(functionals::leaf_mean_functional(
                self.mesh,
                node,
                &self.opts.loads,
            )?)
        } else {
            None
        };
        let mut active = Vec::new();
        self.activate_means(node, &mean, &mut active);
        self.keep_psi(node, &psi);
        Ok(SubtreeOut { psi, mean, active })
    }

    fn merge(&self, node: &DDNode, o1: SubtreeOut, o2: SubtreeOut) -> Result<SubtreeOut> {
        let sys = assemble_father(node, &o1.psi, &o2.psi, &self.opts.loads)?;
        let el = schur_eliminate(&sys)?;
        if self.opts.check_interface {
            let (_, _, _, a22, _, _) = sys.blocks();
            let check = InterfaceCheck {
                node: node.id,
                min_eigenvalue: min_eigenvalue(&a22),
                cholesky: el.cholesky,
            };
            self.out
                .lock()
                .expect("collector lock poisoned")
                .interface_checks[node.id] = Some(check);
        }
        if node.id == 0 && self.opts.keep_root_system {
            self.out
                .lock()
                .expect("collector lock poisoned")
                .root_system = Some(sys);
        } else {
            drop(sys);
        }
        self.tracker.free(o1.psi.bytes() + o2.psi.bytes());
        drop((o1.psi, o2.psi));

        let spec = self.opts.compression.as_ref();
        let f_spec = spec.filter(|_| self.opts.loads.is_nodal());
        let (pb, pg, pw) = (
            self.points(&node.idx_boundary),
            self.points(&node.idx_interface),
            self.points(&node.idx_omega),
        );
        let dense_bytes = (el.psi_g.len() + el.psi_f.len() + el.phi_g.len() + el.phi_f.len()) * 8;
        let psi = PsiMap {
            node: node.id,
            psi_g: MapMatrix::build(el.psi_g, &pb, &pb, spec),
            psi_f: MapMatrix::build(el.psi_f, &pb, &pw, f_spec),
        };
        let phi = PhiMap {
            node: node.id,
            phi_g: MapMatrix::build(el.phi_g, &pg, &pb, spec),
            phi_f: MapMatrix::build(el.phi_f, &pg, &pw, f_spec),
        };
        self.tracker.alloc(psi.bytes() + phi.bytes());
        let max_rank = [&psi.psi_g, &psi.psi_f, &phi.phi_g, &phi.phi_f]
            .iter()
            .map(|m| m.max_rank())
            .max()
            .unwrap_or(0);
        self.record_stats(node, dense_bytes, psi.bytes() + phi.bytes(), max_rank);

        let [sid1, sid2] = node.sons.expect("internal node");
        let c = [
            self.tree.node(sid1).area / node.area,
            self.tree.node(sid2).area / node.area,
        ];
        let mean = if self.need_mean[node.id] {
            let (l1, l2) = (
                o1.mean
                    .as_ref()
                    .ok_or_else(|| HddError::Internal("missing son mean functional".into()))?,
                o2.mean
                    .as_ref()
                    .ok_or_else(|| HddError::Internal("missing son mean functional".into()))?,
            );
            Some(functionals::merge_functionals(
                node,
                [Some((l1, c[0])), Some((l2, c[1]))],
                &phi,
                &self.opts.loads,
            )?)
        } else {
            None
        };
        let mut active = Vec::with_capacity(o1.active.len() + o2.active.len());
        for (k, list) in [o1.active, o2.active].into_iter().enumerate() {
            for (r, l) in list {
                let mut sons = [None, None];
                sons[k] = Some((&l, 1.0));
                active.push((
                    r,
                    functionals::merge_functionals(node, sons, &phi, &self.opts.loads)?,
                ));
            }
        }
        for &r in &self.point_at[node.id] {
            let FunctionalRequest::Point(p) = self.opts.functionals[r] else {
                unreachable!()
            };
            active.push((r, functionals::interface_point_functional(node, &phi, p)?));
        }
        self.activate_means(node, &mean, &mut active);
        active.sort_by_key(|(r, _)| *r);

        self.keep_psi(node, &psi);
        if self.keep_phi(node.id) {
            self.out.lock().expect("collector lock poisoned").phi[node.id] = Some(phi);
        } else {
            self.tracker.free(phi.bytes());
        }
        Ok(SubtreeOut { psi, mean, active })
    }

    fn activate_means(
        &self,
        node: &DDNode,
        mean: &Option<Functional>,
        active: &mut Vec<(usize, Functional)>,
    ) {
        for (r, req) in self.opts.functionals.iter().enumerate() {
            if *req == FunctionalRequest::Mean(node.id) {
                active.push((
                    r,
                    mean.clone()
                        .expect("mean functional built for requested node"),
                ));
            }
        }
        if self.opts.keep_node_functionals {
            self.out
                .lock()
                .expect("collector lock poisoned")
                .node_functionals[node.id] = mean.clone();
        }
    }

    fn keep_psi(&self, node: &DDNode, psi: &PsiMap) {
        if self.opts.retain_psi && node.id != 0 {
            self.out.lock().expect("collector lock poisoned").psi[node.id] = Some(psi.clone());
        }
    }

    fn record_stats(&self, node: &DDNode, dense: usize, compressed: usize, max_rank: usize) {
        let st = NodeStats {
            node: node.id,
            depth: node.depth,
            boundary: node.idx_boundary.len(),
            interface: node.idx_interface.len(),
            dense_bytes: dense,
            compressed_bytes: compressed,
            max_rank,
        };
        self.out.lock().expect("collector lock poisoned").stats[node.id] = Some(st);
    }
}

/// Interface values of `node` from its local data.
fn interface_values(store: &MapStore, node: &DDNode, data: &LocalData) -> Result<DVector<f64>> {
    let phi = store.phi(node.id).ok_or_else(|| {
        HddError::Usage(format!(
            "Φ of node {} was not retained (mode {:?})",
            node.id, store.mode
        ))
    })?;
    Ok(phi.apply(data))
}

/// Local data of son `k` given the father's data and interface values.
fn son_data(node: &DDNode, k: usize, data: &LocalData, g_gamma: &DVector<f64>) -> LocalData {
    let split = node.split.as_ref().expect("internal node");
    let b = data.g_omega.len();
    let g = DVector::from_iterator(
        split.son_rows[k].len(),
        split.son_rows[k].iter().map(|&r| {
            if r < b {
                data.g_omega[r]
            } else {
                g_gamma[r - b]
            }
        }),
    );
    let f = DVector::from_iterator(
        split.son_cols[k].len(),
        split.son_cols[k].iter().map(|&c| data.f_omega[c]),
    );
    LocalData {
        f_omega: f,
        g_omega: g,
    }
}

/// Interface values of every internal node in the subtree of `id`, pre-order.
fn descend(
    store: &MapStore,
    id: NodeId,
    data: LocalData,
    out: &mut Vec<(NodeId, DVector<f64>)>,
) -> Result<()> {
    let node = store.tree.node(id);
    let Some(sons) = node.sons else {
        return Ok(());
    };
    let g_gamma = interface_values(store, node, &data)?;
    let d1 = son_data(node, 0, &data, &g_gamma);
    let d2 = son_data(node, 1, &data, &g_gamma);
    out.push((id, g_gamma));
    descend(store, sons[0], d1, out)?;
    descend(store, sons[1], d2, out)
}

fn descend_parallel(
    store: &MapStore,
    id: NodeId,
    data: LocalData,
) -> Result<Vec<(NodeId, DVector<f64>)>> {
    let node = store.tree.node(id);
    let Some(sons) = node.sons else {
        return Ok(Vec::new());
    };
    if node.idx_omega.len() < 200 {
        let mut out = Vec::new();
        descend(store, id, data, &mut out)?;
        return Ok(out);
    }
    let g_gamma = interface_values(store, node, &data)?;
    let d1 = son_data(node, 0, &data, &g_gamma);
    let d2 = son_data(node, 1, &data, &g_gamma);
    let (r1, r2) = rayon::join(
        || descend_parallel(store, sons[0], d1),
        || descend_parallel(store, sons[1], d2),
    );
    let mut out = vec![(id, g_gamma)];
    out.extend(r1?);
    out.extend(r2?);
    Ok(out)
}

/// Full solution over `I(Ω)` from nodal `f` and boundary values `g` (root
/// boundary order).
pub fn root_to_leaves(store: &MapStore, f: &[f64], g: &[f64]) -> Result<Vec<f64>> {
    if store.mode != SolveMode::KeepPhiAll {
        return Err(HddError::Usage(format!(
            "full solve needs all Φ maps, store was built with {:?}",
            store.mode
        )));
    }
    store.require_nodal()?;
    check_global_data(&store.tree, f, g)?;
    let root = store.tree.root();
    let data = LocalData {
        f_omega: DVector::from_column_slice(f),
        g_omega: DVector::from_column_slice(g),
    };
    let pieces = descend_parallel(store, 0, data)?;
    let mut u = new_solution_vector(f.len());
    for (k, i) in root.idx_boundary.iter().enumerate() {
        u[i] = g[k];
    }
    for (id, vals) in pieces {
        for (k, i) in store.tree.node(id).idx_interface.iter().enumerate() {
            u[i] = vals[k];
        }
    }
    Ok(u)
}

/// Solution restricted to `I(target)`, in `idx_omega` order, using only the
/// maps on the root-to-target path and below the target.
pub fn solve_subdomain(store: &MapStore, target: NodeId, f: &[f64], g: &[f64]) -> Result<Vec<f64>> {
    let tree = &store.tree;
    if target >= tree.len() {
        return Err(HddError::Usage(format!(
            "target node {target} out of range"
        )));
    }
    match store.mode {
        SolveMode::KeepPhiAll => {}
        SolveMode::KeepPhiPath(t) if t == target => {}
        m => {
            return Err(HddError::Usage(format!(
                "target {target} not on the path retained by {m:?}"
            )))
        }
    }
    store.require_nodal()?;
    check_global_data(tree, f, g)?;
    let mut data = LocalData {
        f_omega: DVector::from_column_slice(f),
        g_omega: DVector::from_column_slice(g),
    };
    let mut path = tree.ancestors(target);
    path.push(target);
    for w in path.windows(2) {
        let node = tree.node(w[0]);
        let k = if node.sons.expect("ancestor is internal")[0] == w[1] {
            0
        } else {
            1
        };
        let g_gamma = interface_values(store, node, &data)?;
        data = son_data(node, k, &data, &g_gamma);
    }
    let tnode = tree.node(target);
    let boundary = data.g_omega.clone();
    let pieces = descend_parallel(store, target, data)?;
    let mut u = vec![0.0; tnode.idx_omega.len()];
    for (k, i) in tnode.idx_boundary.iter().enumerate() {
        u[tnode.idx_omega.position(i).expect("boundary inside region")] = boundary[k];
    }
    for (id, vals) in pieces {
        for (k, i) in tree.node(id).idx_interface.iter().enumerate() {
            u[tnode
                .idx_omega
                .position(i)
                .expect("interface inside region")] = vals[k];
        }
    }
    Ok(u)
}

/// `max |^γΨ₁(d₁) + ^γΨ₂(d₂)|` for every internal node, given a full solution.
/// Needs a store built with `retain_psi`.
pub fn matching_residuals(store: &MapStore, f: &[f64], u: &[f64]) -> Result<Vec<(NodeId, f64)>> {
    store.require_nodal()?;
    let tree = &store.tree;
    let mut out = Vec::new();
    for node in tree.nodes().iter().filter(|n| !n.is_leaf()) {
        let split = node.split.as_ref().expect("internal node");
        let b = node.idx_boundary.len();
        let mut acc = DVector::zeros(node.idx_interface.len());
        for (k, &s) in node.sons.expect("internal node").iter().enumerate() {
            let psi = store.psi(s).ok_or_else(|| {
                HddError::Usage(format!("Ψ of node {s} not retained; build with retain_psi"))
            })?;
            let res = psi.residual(&LocalData::restrict(tree.node(s), f, u));
            for (i, &r) in split.son_rows[k].iter().enumerate() {
                if r >= b {
                    acc[r - b] += res[i];
                }
            }
        }
        out.push((node.id, acc.amax()));
    }
    Ok(out)
}

/// `max |Ψ_ω(d) − (Ψ_ω₁(d₁) + Ψ_ω₂(d₂))|∂ω|` for every internal node.
pub fn psi_sum_residuals(store: &MapStore, f: &[f64], u: &[f64]) -> Result<Vec<(NodeId, f64)>> {
    store.require_nodal()?;
    let tree = &store.tree;
    let mut out = Vec::new();
    for node in tree.nodes().iter().filter(|n| !n.is_leaf()) {
        let split = node.split.as_ref().expect("internal node");
        let b = node.idx_boundary.len();
        let own = store
            .psi(node.id)
            .ok_or_else(|| HddError::Usage(format!("Ψ of node {} not retained", node.id)))?
            .residual(&LocalData::restrict(node, f, u));
        let mut acc = -own;
        for (k, &s) in node.sons.expect("internal node").iter().enumerate() {
            let psi = store
                .psi(s)
                .ok_or_else(|| HddError::Usage(format!("Ψ of node {s} not retained")))?;
            let res = psi.residual(&LocalData::restrict(tree.node(s), f, u));
            for (i, &r) in split.son_rows[k].iter().enumerate() {
                if r < b {
                    acc[r] += res[i];
                }
            }
        }
        out.push((node.id, acc.amax()));
    }
    Ok(out)
}

/// Boundary values of a nodal function in root boundary order.
pub fn boundary_values(tree: &DDTree, nodal: &[f64]) -> Vec<f64> {
    tree.root().idx_boundary.iter().map(|i| nodal[i]).collect()
}

/// Build plus full solve in one call.
pub fn solve(mesh: &Mesh, kappa: &CoefficientField, f: &[f64], g: &[f64]) -> Result<Vec<f64>> {
    let tree = Arc::new(DDTree::new(mesh));
    let store = leaves_to_root(&tree, mesh, kappa, &BuildOptions::default())?;
    root_to_leaves(&store, f, g)
}
