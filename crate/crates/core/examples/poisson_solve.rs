//! Full solve of `-div(κ grad u) = f` with a checkerboard coefficient,
//! compared against the direct sparse solver.

use std::sync::Arc;

use hdd_core::hdd::{self, BuildOptions};
use hdd_core::{oracle, CoefficientField, DDTree, Mesh};

fn main() -> hdd_core::Result<()> {
    let mesh = Mesh::new(6)?;
    let tree = Arc::new(DDTree::new(&mesh));
    let kappa = CoefficientField::checkerboard(&mesh, 4, [1.0, 10.0])?;
    let f = vec![1.0; mesh.node_count()];
    let g_nodal = mesh.nodal(|x, y| x * y);
    let g = hdd::boundary_values(&tree, &g_nodal);

    let store = hdd::leaves_to_root(&tree, &mesh, &kappa, &BuildOptions::default())?;
    let u = hdd::root_to_leaves(&store, &f, &g)?;
    let reference = oracle::direct_solve(&mesh, &kappa, &f, &g)?;

    let err = u.iter().zip(&reference).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    let scale = reference.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    println!("nodes {}, tree nodes {}", mesh.node_count(), tree.len());
    println!("peak map storage {} bytes", store.peak_bytes());
    println!("max |u - u_direct| / max |u_direct| = {:.2e}", err / scale);
    Ok(())
}
