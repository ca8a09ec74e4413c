//! Linear functionals of the solution built bottom up.
//!
//! A functional of node `ω` is a pair `(l_f, l_g)` with value
//! `⟨l_f, f_ω⟩ + ⟨l_g, g_ω⟩`. At a merge the sons' functionals are combined
//! with weights `c₁, c₂` and the interface part is pushed through the father's
//! `Φ` maps, so the value of a functional at the root needs no solution vector.

use std::fmt::Write as _;
use std::sync::Arc;

use nalgebra::DVector;

use crate::ddtree::{DDNode, DDTree, NodeId};
use crate::error::{HddError, Result};
use crate::fem::CoefficientField;
use crate::hdd::{self, BuildOptions, LoadSpace, MapMatrix, PhiMap, SolveMode};
use crate::lowrank::ToleranceSpec;
use crate::mesh::Mesh;

#[derive(Debug, Clone, PartialEq)]
pub struct Functional {
    pub node: NodeId,
    /// Weights over `I(∂ω)`.
    pub l_g: DVector<f64>,
    /// Weights over the load columns: `I(ω)`, or the fixed loads of the build.
    pub l_f: DVector<f64>,
}

impl Functional {
    /// Value on local data, `f` over the load columns and `g` over `I(∂ω)`.
    pub fn evaluate(&self, f: &[f64], g: &[f64]) -> f64 {
        debug_assert_eq!(f.len(), self.l_f.len());
        debug_assert_eq!(g.len(), self.l_g.len());
        let a: f64 = self.l_f.iter().zip(f).map(|(l, v)| l * v).sum();
        let b: f64 = self.l_g.iter().zip(g).map(|(l, v)| l * v).sum();
        a + b
    }

    pub fn checksum(&self) -> f64 {
        self.l_g.sum() + self.l_f.sum()
    }
}

/// What to build during a leaves-to-root pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FunctionalRequest {
    /// Mean value over the region of a tree node.
    Mean(NodeId),
    /// Value at a mesh node.
    Point(usize),
}

/// Mean over a single-cell leaf: each triangle contributes `|t|/3` per vertex,
/// so a vertex weight is its incident triangle count over 6.
pub fn leaf_mean_functional(mesh: &Mesh, node: &DDNode, loads: &LoadSpace) -> Result<Functional> {
    if !node.is_leaf() {
        return Err(HddError::Usage(format!(
            "leaf mean functional on internal node {}",
            node.id
        )));
    }
    let mut l_g = DVector::zeros(node.idx_boundary.len());
    for t in mesh.region_triangles_grid(&node.region) {
        let w = mesh.triangle_areas()[t] / (3.0 * node.area);
        for &v in &mesh.triangles()[t] {
            let p = node.idx_boundary.position(v).ok_or_else(|| {
                HddError::Internal(format!("vertex {v} outside leaf {}", node.id))
            })?;
            l_g[p] += w;
        }
    }
    Ok(Functional {
        node: node.id,
        l_g,
        l_f: DVector::zeros(loads.width(node)),
    })
}

/// Scatters the weighted sons' `l_g` into the father rows `[∂ω ; γ]`.
fn scatter_g(node: &DDNode, sons: &[Option<(&Functional, f64)>; 2]) -> Result<DVector<f64>> {
    let split = node
        .split
        .as_ref()
        .ok_or_else(|| HddError::Usage(format!("merge at leaf node {}", node.id)))?;
    let mut y = DVector::zeros(node.system_rows());
    for (k, son) in sons.iter().enumerate() {
        if let Some((l, c)) = son {
            if l.l_g.len() != split.son_rows[k].len() {
                return Err(HddError::Internal(format!(
                    "son functional has {} boundary weights, expected {}",
                    l.l_g.len(),
                    split.son_rows[k].len()
                )));
            }
            for (i, &r) in split.son_rows[k].iter().enumerate() {
                y[r] += c * l.l_g[i];
            }
        }
    }
    Ok(y)
}

/// `l_g = c₁l₁|^Γ + c₂l₂|^Γ + (Φ^g)ᵀ z` with `z = c₁l₁|γ + c₂l₂|γ`.
pub fn merge_functional_g(
    node: &DDNode,
    sons: [Option<(&Functional, f64)>; 2],
    phi_g: &MapMatrix,
) -> Result<DVector<f64>> {
    let y = scatter_g(node, &sons)?;
    let b = node.idx_boundary.len();
    let z = y.rows(b, y.len() - b).into_owned();
    Ok(y.rows(0, b) + phi_g.apply_transpose(&z))
}

/// `l_f = c₁l₁^f|^ω + c₂l₂^f|^ω + (Φ^f)ᵀ z` with the same `z` as for `l_g`.
pub fn merge_functional_f(
    node: &DDNode,
    sons: [Option<(&Functional, f64)>; 2],
    phi_f: &MapMatrix,
    loads: &LoadSpace,
) -> Result<DVector<f64>> {
    let y = scatter_g(node, &sons)?;
    let b = node.idx_boundary.len();
    let z = y.rows(b, y.len() - b).into_owned();
    let mut l_f = phi_f.apply_transpose(&z);
    for (k, son) in sons.iter().enumerate() {
        let Some((l, c)) = son else { continue };
        match loads.son_cols(node, k) {
            Some(cols) => {
                if l.l_f.len() != cols.len() {
                    return Err(HddError::Internal(
                        "son functional has wrong domain size".into(),
                    ));
                }
                for (i, &col) in cols.iter().enumerate() {
                    l_f[col] += c * l.l_f[i];
                }
            }
            None => {
                if l.l_f.len() != l_f.len() {
                    return Err(HddError::Internal(
                        "son functional has wrong load count".into(),
                    ));
                }
                l_f.axpy(*c, &l.l_f, 1.0);
            }
        }
    }
    Ok(l_f)
}

/// Father functional `c₁ℓ₁ + c₂ℓ₂`; a missing son has weight zero.
pub fn merge_functionals(
    node: &DDNode,
    sons: [Option<(&Functional, f64)>; 2],
    phi: &PhiMap,
    loads: &LoadSpace,
) -> Result<Functional> {
    Ok(Functional {
        node: node.id,
        l_g: merge_functional_g(node, sons, &phi.phi_g)?,
        l_f: merge_functional_f(node, sons, &phi.phi_f, loads)?,
    })
}

/// Value at a mesh node on the interface of `node`: the matching row of `Φ`.
pub fn interface_point_functional(
    node: &DDNode,
    phi: &PhiMap,
    mesh_node: usize,
) -> Result<Functional> {
    let p = node.idx_interface.position(mesh_node).ok_or_else(|| {
        HddError::Usage(format!(
            "mesh node {mesh_node} not on the interface of node {}",
            node.id
        ))
    })?;
    let mut e = DVector::zeros(node.idx_interface.len());
    e[p] = 1.0;
    Ok(Functional {
        node: node.id,
        l_g: phi.phi_g.apply_transpose(&e),
        l_f: phi.phi_f.apply_transpose(&e),
    })
}

/// Value at a mesh node on `∂Ω`: selects the boundary datum.
pub fn boundary_point_functional(
    root: &DDNode,
    mesh_node: usize,
    loads: &LoadSpace,
) -> Result<Functional> {
    let p = root.idx_boundary.position(mesh_node).ok_or_else(|| {
        HddError::Usage(format!(
            "mesh node {mesh_node} is not on the outer boundary"
        ))
    })?;
    let mut l_g = DVector::zeros(root.idx_boundary.len());
    l_g[p] = 1.0;
    Ok(Functional {
        node: root.id,
        l_g,
        l_f: DVector::zeros(loads.width(root)),
    })
}

/// Mean requests for every node at `depth`, left to right.
pub fn mean_per_subdomain(tree: &DDTree, depth: usize) -> Result<Vec<FunctionalRequest>> {
    if depth > tree.depth() {
        return Err(HddError::Usage(format!(
            "depth {depth} exceeds tree depth {}",
            tree.depth()
        )));
    }
    Ok(tree
        .nodes_at_depth(depth)
        .into_iter()
        .map(FunctionalRequest::Mean)
        .collect())
}

/// Builds the requested functionals without keeping any `Φ` and evaluates
/// them on `(f, g)` (`g` in root boundary order).
pub fn evaluate(
    tree: &Arc<DDTree>,
    mesh: &Mesh,
    kappa: &CoefficientField,
    requests: Vec<FunctionalRequest>,
    compression: Option<ToleranceSpec>,
    f: &[f64],
    g: &[f64],
) -> Result<Vec<f64>> {
    let mut opts = BuildOptions::new(SolveMode::FunctionalsOnly).with_functionals(requests);
    opts.compression = compression;
    let store = hdd::leaves_to_root(tree, mesh, kappa, &opts)?;
    store.evaluate_functionals(f, g)
}

/// `node_depth |l_g| |l_f| checksum`, with header.
pub fn dump(tree: &DDTree, functionals: &[Functional]) -> String {
    let mut s = String::from("node_depth l_g_len l_f_len checksum\n");
    for l in functionals {
        let _ = writeln!(
            s,
            "{} {} {} {:.15e}",
            tree.node(l.node).depth,
            l.l_g.len(),
            l.l_f.len(),
            l.checksum()
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem;
    use crate::hdd::{leaves_to_root, root_to_leaves, LocalData, MapStore};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup(level: u32) -> (Mesh, Arc<DDTree>) {
        let mesh = Mesh::new(level).unwrap();
        let tree = Arc::new(DDTree::new(&mesh));
        (mesh, tree)
    }

    fn random_data(mesh: &Mesh, tree: &DDTree, seed: u64) -> (Vec<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = (0..mesh.node_count())
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let g = (0..tree.root().idx_boundary.len())
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        (f, g)
    }

    /// Area-weighted vertex average over the triangles inside a region.
    fn mean_by_triangles(mesh: &Mesh, tree: &DDTree, node: NodeId, u: &[f64]) -> f64 {
        let n = tree.node(node);
        let tris = mesh.region_triangles_grid(&n.region);
        let area: f64 = tris.iter().map(|&t| mesh.triangle_areas()[t]).sum();
        tris.iter()
            .map(|&t| {
                mesh.triangle_areas()[t] / 3.0
                    * mesh.triangles()[t].iter().map(|&v| u[v]).sum::<f64>()
            })
            .sum::<f64>()
            / area
    }

    fn full_solution(
        mesh: &Mesh,
        tree: &Arc<DDTree>,
        kappa: &CoefficientField,
        f: &[f64],
        g: &[f64],
    ) -> (MapStore, Vec<f64>) {
        let store = leaves_to_root(tree, mesh, kappa, &BuildOptions::debug()).unwrap();
        let u = root_to_leaves(&store, f, g).unwrap();
        (store, u)
    }

    #[test]
    fn leaf_weights() {
        let (mesh, tree) = setup(1);
        let leaf = tree.nodes().iter().find(|n| n.is_leaf()).unwrap();
        let l = leaf_mean_functional(&mesh, leaf, &LoadSpace::Nodal).unwrap();
        let mut w: Vec<f64> = l.l_g.iter().map(|v| v * 6.0).collect();
        w.sort_by(f64::total_cmp);
        for (a, b) in w.iter().zip([1.0, 1.0, 2.0, 2.0]) {
            assert!((a - b).abs() < 1e-14);
        }
        assert!(l.l_f.iter().all(|&v| v == 0.0));
        assert!((l.evaluate(&[0.0; 4], &[3.0; 4]) - 3.0).abs() < 1e-15);
        assert!(leaf_mean_functional(&mesh, tree.root(), &LoadSpace::Nodal).is_err());
    }

    #[test]
    fn zero_sons_give_zero() {
        let (mesh, tree) = setup(2);
        let kappa = CoefficientField::constant(&mesh, 1.0).unwrap();
        let store = leaves_to_root(&tree, &mesh, &kappa, &BuildOptions::default()).unwrap();
        let root = tree.root();
        let [s1, s2] = root.sons.unwrap();
        let z1 = Functional {
            node: s1,
            l_g: DVector::zeros(tree.node(s1).idx_boundary.len()),
            l_f: DVector::zeros(tree.node(s1).idx_omega.len()),
        };
        let z2 = Functional {
            node: s2,
            l_g: DVector::zeros(tree.node(s2).idx_boundary.len()),
            l_f: DVector::zeros(tree.node(s2).idx_omega.len()),
        };
        let m = merge_functionals(
            root,
            [Some((&z1, 0.5)), Some((&z2, 0.5))],
            store.phi(0).unwrap(),
            &LoadSpace::Nodal,
        )
        .unwrap();
        assert!(m.l_g.iter().chain(m.l_f.iter()).all(|&v| v == 0.0));
    }

    #[test]
    fn off_interface_sons_keep_only_scatter() {
        let (mesh, tree) = setup(2);
        let kappa = CoefficientField::constant(&mesh, 1.0).unwrap();
        let store = leaves_to_root(&tree, &mesh, &kappa, &BuildOptions::default()).unwrap();
        let root = tree.root();
        let split = root.split.as_ref().unwrap();
        let s1 = tree.node(root.sons.unwrap()[0]);
        let b = root.idx_boundary.len();
        let l_g = DVector::from_iterator(
            s1.idx_boundary.len(),
            split.son_rows[0]
                .iter()
                .map(|&r| if r < b { 1.0 } else { 0.0 }),
        );
        let l_f = DVector::from_fn(s1.idx_omega.len(), |i, _| i as f64);
        let son = Functional {
            node: s1.id,
            l_g,
            l_f: l_f.clone(),
        };
        let m = merge_functionals(
            root,
            [Some((&son, 0.5)), None],
            store.phi(0).unwrap(),
            &LoadSpace::Nodal,
        )
        .unwrap();
        for (i, &c) in split.son_cols[0].iter().enumerate() {
            assert!((m.l_f[c] - 0.5 * l_f[i]).abs() < 1e-15);
        }
        for (i, &r) in split.son_rows[0].iter().enumerate() {
            if r < b {
                assert!((m.l_g[r] - 0.5).abs() < 1e-15, "row {i}");
            }
        }
    }

    #[test]
    fn weights_sum_to_one_at_every_node() {
        let (mesh, tree) = setup(3);
        let kappa = CoefficientField::random_log_uniform(&mesh, 0.1, 10.0, 1).unwrap();
        let store = leaves_to_root(&tree, &mesh, &kappa, &BuildOptions::debug()).unwrap();
        for n in tree.nodes() {
            let l = store.node_functional(n.id).unwrap();
            assert!((l.l_g.sum() - 1.0).abs() < 1e-12, "node {}", n.id);
        }
    }

    #[test]
    fn level_one_mean_matches_direct() {
        let (mesh, tree) = setup(1);
        let kappa = CoefficientField::constant(&mesh, 1.0).unwrap();
        let (f, g) = random_data(&mesh, &tree, 2);
        let (_, u) = full_solution(&mesh, &tree, &kappa, &f, &g);
        let vals = evaluate(
            &tree,
            &mesh,
            &kappa,
            vec![FunctionalRequest::Mean(0)],
            None,
            &f,
            &g,
        )
        .unwrap();
        assert!((vals[0] - mean_by_triangles(&mesh, &tree, 0, &u)).abs() < 1e-12);
    }

    #[test]
    fn subdomain_means_and_points_match_solution() {
        let (mesh, tree) = setup(4);
        let kappa = CoefficientField::random_log_uniform(&mesh, 0.1, 10.0, 17).unwrap();
        let (f, g) = random_data(&mesh, &tree, 18);
        let (_, u) = full_solution(&mesh, &tree, &kappa, &f, &g);
        let mut reqs = mean_per_subdomain(&tree, 2).unwrap();
        reqs.extend([
            FunctionalRequest::Point(40),
            FunctionalRequest::Point(0),
            FunctionalRequest::Point(144),
        ]);
        let vals = evaluate(&tree, &mesh, &kappa, reqs.clone(), None, &f, &g).unwrap();
        for (req, v) in reqs.iter().zip(&vals) {
            let expect = match *req {
                FunctionalRequest::Mean(n) => mean_by_triangles(&mesh, &tree, n, &u),
                FunctionalRequest::Point(p) => u[p],
            };
            assert!((v - expect).abs() < 1e-10, "{req:?}: {v} vs {expect}");
        }
    }

    #[test]
    fn center_point_affine() {
        let (mesh, tree) = setup(1);
        let kappa = CoefficientField::constant(&mesh, 1.0).unwrap();
        let x1 = mesh.nodal(|x, _| x);
        let g = hdd::boundary_values(&tree, &x1);
        let vals = evaluate(
            &tree,
            &mesh,
            &kappa,
            vec![FunctionalRequest::Point(4)],
            None,
            &[0.0; 9],
            &g,
        )
        .unwrap();
        assert!((vals[0] - 0.5).abs() < 1e-14);
    }

    #[test]
    fn boundary_point_is_indicator() {
        let (_, tree) = setup(2);
        let l = boundary_point_functional(tree.root(), 3, &LoadSpace::Nodal).unwrap();
        assert_eq!(l.l_g.sum(), 1.0);
        assert_eq!(l.l_g[tree.root().idx_boundary.position(3).unwrap()], 1.0);
        assert!(l.l_f.iter().all(|&v| v == 0.0));
        assert!(boundary_point_functional(tree.root(), 12, &LoadSpace::Nodal).is_err());
    }

    #[test]
    fn node_functionals_satisfy_weighted_sum() {
        let (mesh, tree) = setup(3);
        let kappa = CoefficientField::random_log_uniform(&mesh, 0.1, 10.0, 5).unwrap();
        let (f, g) = random_data(&mesh, &tree, 6);
        let (store, u) = full_solution(&mesh, &tree, &kappa, &f, &g);
        for n in tree.nodes().iter().filter(|n| !n.is_leaf()) {
            let eval = |id: NodeId| {
                let d = LocalData::restrict(tree.node(id), &f, &u);
                store
                    .node_functional(id)
                    .unwrap()
                    .evaluate(d.f_omega.as_slice(), d.g_omega.as_slice())
            };
            let [s1, s2] = n.sons.unwrap();
            let c1 = tree.node(s1).area / n.area;
            let c2 = tree.node(s2).area / n.area;
            assert!((eval(n.id) - (c1 * eval(s1) + c2 * eval(s2))).abs() < 1e-12);
        }
    }

    #[test]
    fn means_at_all_nodes_match_triangle_average() {
        let (mesh, tree) = setup(3);
        let kappa = fem::CoefficientField::checkerboard(&mesh, 2, [1.0, 10.0]).unwrap();
        let (f, g) = random_data(&mesh, &tree, 9);
        let (store, u) = full_solution(&mesh, &tree, &kappa, &f, &g);
        for n in tree.nodes() {
            let d = LocalData::restrict(n, &f, &u);
            let v = store
                .node_functional(n.id)
                .unwrap()
                .evaluate(d.f_omega.as_slice(), d.g_omega.as_slice());
            assert!((v - mean_by_triangles(&mesh, &tree, n.id, &u)).abs() < 1e-11);
        }
    }

    #[test]
    fn dump_lines() {
        let (_, tree) = setup(1);
        let l = boundary_point_functional(tree.root(), 0, &LoadSpace::Nodal).unwrap();
        let d = dump(&tree, &[l]);
        assert_eq!(d.lines().nth(1).unwrap(), "0 8 9 1.000000000000000e0");
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(16))]
        #[test]
        fn linear_in_data(seed in 0u64..10_000, alpha in -3.0f64..3.0, beta in -3.0f64..3.0) {
            let (mesh, tree) = setup(2);
            let kappa = CoefficientField::random_log_uniform(&mesh, 0.1, 10.0, seed).unwrap();
            let store = leaves_to_root(
                &tree,
                &mesh,
                &kappa,
                &BuildOptions::new(SolveMode::FunctionalsOnly)
                    .with_functionals(vec![FunctionalRequest::Mean(0), FunctionalRequest::Point(12)])
                    .sequential(),
            )
            .unwrap();
            let (f1, g1) = random_data(&mesh, &tree, seed + 1);
            let (f2, g2) = random_data(&mesh, &tree, seed + 2);
            let f: Vec<f64> = f1.iter().zip(&f2).map(|(a, b)| alpha * a + beta * b).collect();
            let g: Vec<f64> = g1.iter().zip(&g2).map(|(a, b)| alpha * a + beta * b).collect();
            let v = store.evaluate_functionals(&f, &g).unwrap();
            let v1 = store.evaluate_functionals(&f1, &g1).unwrap();
            let v2 = store.evaluate_functionals(&f2, &g2).unwrap();
            for k in 0..v.len() {
                proptest::prop_assert!((v[k] - alpha * v1[k] - beta * v2[k]).abs() < 1e-12);
            }
        }
    }
}
