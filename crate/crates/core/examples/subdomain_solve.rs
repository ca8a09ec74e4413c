//! Solution on one subdomain using only the maps on its root path and below.

use std::sync::Arc;

use hdd_core::hdd::{self, BuildOptions, SolveMode};
use hdd_core::{CoefficientField, DDTree, Mesh};

fn main() -> hdd_core::Result<()> {
    let mesh = Mesh::new(5)?;
    let tree = Arc::new(DDTree::new(&mesh));
    let kappa = CoefficientField::random_log_uniform(&mesh, 0.1, 10.0, 7)?;
    let f = mesh.nodal(|x, y| (x - 0.5).powi(2) + y);
    let g = vec![0.0; tree.root().idx_boundary.len()];

    let target = tree.nodes_at_depth(4)[5];
    let path = hdd::leaves_to_root(&tree, &mesh, &kappa, &BuildOptions::new(SolveMode::KeepPhiPath(target)))?;
    let local = hdd::solve_subdomain(&path, target, &f, &g)?;

    let full = hdd::leaves_to_root(&tree, &mesh, &kappa, &BuildOptions::default())?;
    let u = hdd::root_to_leaves(&full, &f, &g)?;
    let err = tree
        .node(target)
        .idx_omega
        .iter()
        .zip(&local)
        .fold(0.0f64, |m, (i, v)| m.max((u[i] - v).abs()));

    println!("target node {target}: {} unknowns", local.len());
    println!("retained maps {} of {}", path.phi_count(), full.phi_count());
    println!("retained bytes {} of {}", path.phi_bytes(), full.phi_bytes());
    println!("max difference to full solve {err:.2e}");
    Ok(())
}
